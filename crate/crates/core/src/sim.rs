//! Synthetic calcium-fluorescence traces for four cell classes.
//!
//! Spikes are Bernoulli per timestep. Each spike adds a log-normally scaled copy of a
//! double-exponential indicator kernel (normalized to unit peak), on top of Gaussian
//! noise and a slow sinusoidal drift.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellType {
    Py = 0,
    Pv = 1,
    Som = 2,
    Vip = 3,
}

impl CellType {
    pub const ALL: [CellType; 4] = [CellType::Py, CellType::Pv, CellType::Som, CellType::Vip];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<CellType> {
        CellType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Py => "PY",
            CellType::Pv => "PV",
            CellType::Som => "SOM",
            CellType::Vip => "VIP",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellType::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::param(format!("unknown cell type `{s}`")))
    }
}

/// Spiking statistics and indicator kinetics of one class. Times are in timesteps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassParams {
    /// Spike probability per timestep.
    pub spike_rate: f64,
    pub tau_rise: f64,
    pub tau_decay: f64,
    pub amplitude_mean: f64,
    pub amplitude_cv: f64,
    pub noise_std: f64,
    pub drift_amp: f64,
    pub drift_period: f64,
}

impl ClassParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_rise > 0.0
            && self.tau_decay > self.tau_rise
            && (0.0..=1.0).contains(&self.spike_rate)
            && self.noise_std >= 0.0
            && self.amplitude_mean > 0.0
            && self.amplitude_cv >= 0.0
            && self.drift_amp >= 0.0
            && self.drift_period > 0.0
            && [
                self.spike_rate,
                self.tau_rise,
                self.tau_decay,
                self.amplitude_mean,
                self.amplitude_cv,
                self.noise_std,
                self.drift_amp,
                self.drift_period,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid class parameters {self:?}")))
        }
    }
}

/// Per-class parameters, indexed by [`CellType::code`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profile {
    pub classes: [ClassParams; 4],
}

impl Default for Profile {
    fn default() -> Self {
        let base = |spike_rate, tau_rise, tau_decay, amplitude_mean| ClassParams {
            spike_rate,
            tau_rise,
            tau_decay,
            amplitude_mean,
            amplitude_cv: 0.3,
            noise_std: 0.08,
            drift_amp: 0.1,
            drift_period: 1500.0,
        };
        Profile {
            classes: [
                base(0.01, 3.0, 60.0, 1.0),
                base(0.12, 2.0, 25.0, 0.35),
                base(0.05, 2.0, 40.0, 0.5),
                base(0.07, 2.0, 35.0, 0.45),
            ],
        }
    }
}

impl Profile {
    pub fn get(&self, cell: CellType) -> &ClassParams {
        &self.classes[cell as usize]
    }

    pub fn get_mut(&mut self, cell: CellType) -> &mut ClassParams {
        &mut self.classes[cell as usize]
    }

    pub fn validate(&self) -> Result<()> {
        self.classes.iter().try_for_each(ClassParams::validate)
    }
}

/// Where a trace came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Generated { seed: u64 },
    File { path: String, index: usize },
}

/// One fluorescence trace and its cell-type label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTimeseries {
    pub signal: Vec<f64>,
    pub label: CellType,
    pub provenance: Provenance,
}

/// Independent Bernoulli(rate) spikes, one draw per timestep.
pub fn generate_spikes(rate: f64, n: usize, seed: u64) -> Result<Vec<bool>> {
    spikes_with(rate, n, &mut rng::stream(seed, &[]))
}

fn spikes_with<R: Rng + ?Sized>(rate: f64, n: usize, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("spike probability per timestep {rate} outside [0, 1]")));
    }
    Ok((0..n).map(|_| rate > 0.0 && rng.random::<f64>() < rate).collect())
}

/// Largest value of `e^{-t/tau_d} - e^{-t/tau_r}` over integer `t >= 0`.
pub fn kernel_peak(tau_rise: f64, tau_decay: f64) -> f64 {
    let raw = |t: f64| (-t / tau_decay).exp() - (-t / tau_rise).exp();
    let t_star = tau_rise * tau_decay / (tau_decay - tau_rise) * (tau_decay / tau_rise).ln();
    let lo = t_star.floor();
    raw(lo).max(raw(lo + 1.0))
}

/// Unit-peak double-exponential kernel sampled at `t = 0, 1, ..., len - 1`.
pub fn kernel(tau_rise: f64, tau_decay: f64, len: usize) -> Vec<f64> {
    let peak = kernel_peak(tau_rise, tau_decay);
    (0..len)
        .map(|t| {
            let t = t as f64;
            ((-t / tau_decay).exp() - (-t / tau_rise).exp()) / peak
        })
        .collect()
}

/// Converts a spike train into a fluorescence trace.
pub fn spikes_to_fluorescence(spikes: &[bool], params: &ClassParams, seed: u64) -> Result<Vec<f64>> {
    fluorescence_with(spikes, params, &mut rng::stream(seed, &[]))
}

fn fluorescence_with<R: Rng + ?Sized>(spikes: &[bool], params: &ClassParams, rng: &mut R) -> Result<Vec<f64>> {
    params.validate()?;
    let sigma2 = (1.0 + params.amplitude_cv * params.amplitude_cv).ln();
    let amplitude = LogNormal::new(params.amplitude_mean.ln() - sigma2 / 2.0, sigma2.sqrt())
        .map_err(|e| Error::param(e.to_string()))?;

    // The kernel is a difference of two first-order filters, so the superposition of
    // all spike responses is computed recursively in one pass.
    let decay_d = (-1.0 / params.tau_decay).exp();
    let decay_r = (-1.0 / params.tau_rise).exp();
    let peak = kernel_peak(params.tau_rise, params.tau_decay);
    let mut slow = 0.0;
    let mut fast = 0.0;
    let mut trace = Vec::with_capacity(spikes.len());
    for &spike in spikes {
        slow *= decay_d;
        fast *= decay_r;
        trace.push((slow - fast) / peak);
        if spike {
            let a = if params.amplitude_cv == 0.0 {
                params.amplitude_mean
            } else {
                amplitude.sample(rng)
            };
            slow += a;
            fast += a;
        }
    }

    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::param(e.to_string()))?;
        trace.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    if params.drift_amp > 0.0 {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (t, v) in trace.iter_mut().enumerate() {
            *v += params.drift_amp * (std::f64::consts::TAU * t as f64 / params.drift_period + phase).sin();
        }
    }
    Ok(trace)
}

/// One trace of the given class from a single seed.
pub fn generate_trace(params: &ClassParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, &[]);
    let spikes = spikes_with(params.spike_rate, n, &mut r)?;
    fluorescence_with(&spikes, params, &mut r)
}

/// Generates `counts[c]` traces of length `n` for each class `c` (indexed by code),
/// in an order shuffled by `master_seed`.
pub fn generate_dataset(profile: &Profile, counts: [usize; 4], n: usize, master_seed: u64) -> Result<Vec<LabeledTimeseries>> {
    if n == 0 {
        return Err(Error::param("trace length must be at least 1"));
    }
    profile.validate()?;
    let mut out = Vec::with_capacity(counts.iter().sum());
    for cell in CellType::ALL {
        for index in 0..counts[cell as usize] {
            let seed = rng::derive(master_seed, &[cell as u64, index as u64]);
            out.push(LabeledTimeseries {
                signal: generate_trace(profile.get(cell), n, seed)?,
                label: cell,
                provenance: Provenance::Generated { seed },
            });
        }
    }
    out.shuffle(&mut rng::stream(master_seed, &[u64::MAX]));
    Ok(out)
}

/// Multiplies each class's spike rate, rise and decay constants, and noise level by
/// independent factors drawn uniformly from `[1 - severity, 1 + severity]`.
pub fn shift_profile(profile: &Profile, severity: f64, seed: u64) -> Result<Profile> {
    if !(0.0..1.0).contains(&severity) {
        return Err(Error::param(format!("shift severity {severity} outside [0, 1)")));
    }
    let mut r = rng::stream(seed, &[0x5817]);
    let mut out = *profile;
    if severity == 0.0 {
        return Ok(out);
    }
    for params in &mut out.classes {
        let mut factor = || r.random_range(1.0 - severity..=1.0 + severity);
        params.spike_rate *= factor();
        params.tau_rise *= factor();
        params.tau_decay *= factor();
        params.noise_std *= factor();
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet(params: ClassParams) -> ClassParams {
        ClassParams {
            noise_std: 0.0,
            drift_amp: 0.0,
            amplitude_cv: 0.0,
            ..params
        }
    }

    #[test]
    fn cell_codes_are_stable() {
        let codes: Vec<u8> = CellType::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![0, 1, 2, 3]);
        assert_eq!(CellType::from_code(2), Some(CellType::Som));
        assert_eq!(CellType::from_code(4), None);
        assert_eq!("vip".parse::<CellType>().unwrap(), CellType::Vip);
    }

    #[test]
    fn spike_examples() {
        assert!(generate_spikes(0.0, 1000, 1).unwrap().iter().all(|s| !s));
        assert_eq!(generate_spikes(0.3, 500, 9).unwrap(), generate_spikes(0.3, 500, 9).unwrap());
        assert!(generate_spikes(1.5, 10, 1).is_err());

        let n = 100_000;
        let count = generate_spikes(0.05, n, 77).unwrap().iter().filter(|&&s| s).count() as f64;
        let mean = 0.05 * n as f64;
        let sd = (n as f64 * 0.05 * 0.95).sqrt();
        assert!((count - mean).abs() < 3.0 * sd, "{count}");
    }

    #[test]
    fn silent_noiseless_trace_is_zero() {
        let params = quiet(Profile::default().classes[0]);
        let trace = spikes_to_fluorescence(&[false; 300], &params, 1).unwrap();
        assert!(trace.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_spike_peaks_at_mean_amplitude() {
        let params = quiet(Profile::default().classes[2]);
        let mut spikes = vec![false; 400];
        spikes[50] = true;
        let trace = spikes_to_fluorescence(&spikes, &params, 1).unwrap();
        let peak = trace.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - params.amplitude_mean).abs() < 1e-9);
    }

    #[test]
    fn trace_matches_kernel_formula_and_decay_rate() {
        let params = ClassParams {
            tau_rise: 2.0,
            tau_decay: 20.0,
            amplitude_mean: 1.0,
            ..quiet(Profile::default().classes[0])
        };
        let mut spikes = vec![false; 200];
        spikes[10] = true;
        let trace = spikes_to_fluorescence(&spikes, &params, 1).unwrap();
        let k = kernel(2.0, 20.0, 190);
        for (t, &kv) in k.iter().enumerate() {
            assert!((trace[10 + t] - kv).abs() < 1e-12, "t={t}");
        }
        // once the rise term has died out, ten steps multiply the trace by e^{-10/20}
        let tp = 10 + k.iter().enumerate().fold(0, |b, (i, &v)| if v > k[b] { i } else { b });
        let ratio = trace[tp + 20] / trace[tp + 10];
        assert!((ratio / (-0.5f64).exp() - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let p = Profile::default();
        let a = generate_dataset(&p, [3, 2, 4, 1], 64, 5).unwrap();
        assert_eq!(a.len(), 10);
        for cell in CellType::ALL {
            let n = a.iter().filter(|s| s.label == cell).count();
            assert_eq!(n, [3, 2, 4, 1][cell as usize]);
        }
        assert!(a.iter().all(|s| s.signal.len() == 64));
        assert_eq!(a, generate_dataset(&p, [3, 2, 4, 1], 64, 5).unwrap());
        assert_ne!(a, generate_dataset(&p, [3, 2, 4, 1], 64, 6).unwrap());
        assert!(generate_dataset(&p, [0; 4], 64, 5).unwrap().is_empty());
        assert!(generate_dataset(&p, [1; 4], 0, 5).is_err());
    }

    #[test]
    fn shift_contract() {
        let p = Profile::default();
        assert_eq!(shift_profile(&p, 0.0, 3).unwrap(), p);
        let s = shift_profile(&p, 0.2, 3).unwrap();
        assert_ne!(s, p);
        for (a, b) in p.classes.iter().zip(&s.classes) {
            for (x, y) in [
                (a.spike_rate, b.spike_rate),
                (a.tau_rise, b.tau_rise),
                (a.tau_decay, b.tau_decay),
                (a.noise_std, b.noise_std),
            ] {
                assert!(y >= 0.8 * x - 1e-12 && y <= 1.2 * x + 1e-12);
            }
            assert_eq!(a.amplitude_mean, b.amplitude_mean);
        }
        assert!(shift_profile(&p, 1.0, 3).is_err());
        assert!(shift_profile(&p, -0.1, 3).is_err());
    }

    proptest! {
        #[test]
        fn kernel_has_unit_peak(tau_rise in 0.2f64..10.0, extra in 0.1f64..100.0) {
            let tau_decay = tau_rise + extra;
            let len = (tau_decay * 10.0) as usize + 10;
            let k = kernel(tau_rise, tau_decay, len);
            let peak = k.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((peak - 1.0).abs() < 1e-9);
        }

        #[test]
        fn noiseless_traces_are_finite_and_nonnegative(seed in any::<u64>(), class in 0usize..4) {
            let mut params = Profile::default().classes[class];
            params.noise_std = 0.0;
            params.drift_amp = 0.0;
            let t = generate_trace(&params, 500, seed).unwrap();
            prop_assert!(t.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
