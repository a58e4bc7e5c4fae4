//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Conv1d, Dense, Dropout, MaxPool1d, Mode};
use crate::network::{CnnNet, CnnStage, Network};
use crate::recurrent::{LstmLayer, RecurrentCell, RecurrentNet, RecurrentStage, RnnLayer};
use crate::rng::NeverRng;
use crate::tensor::Matrix;
use crate::training::{cross_entropy, cross_entropy_logit_grad};

/// Step used by the central differences.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradient entries.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub label: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn loss(net: &Network, x: &[f64], target: usize) -> Result<f64> {
    let (p, _) = net.forward(x, Mode::Eval, &mut NeverRng)?;
    cross_entropy(&p, target)
}

/// Compares every analytic parameter gradient of `net` against central differences of
/// the cross-entropy loss at `(x, target)`. Stochastic layers run in evaluation mode.
/// `corrupt` perturbs one analytic entry, to confirm the harness can fail.
pub fn check(net: &Network, x: &[f64], target: usize, label: &str, corrupt: bool) -> Result<CheckReport> {
    let (probs, tape) = net.forward(x, Mode::Eval, &mut NeverRng)?;
    let mut analytic = net.backward(&tape, &cross_entropy_logit_grad(&probs, target)?)?;
    if corrupt {
        if let Some(v) = analytic.first_mut().and_then(|g| g.as_mut_slice().first_mut()) {
            *v += 1e-2;
        }
    }

    let mut probe = net.clone();
    let mut report = CheckReport {
        label: label.to_string(),
        entries: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    let count = probe.params().len();
    for p in 0..count {
        let len = probe.params()[p].len();
        for i in 0..len {
            let orig = probe.params()[p].as_slice()[i];
            probe.params_mut()[p].as_mut_slice()[i] = orig + STEP;
            let up = loss(&probe, x, target)?;
            probe.params_mut()[p].as_mut_slice()[i] = orig - STEP;
            let down = loss(&probe, x, target)?;
            probe.params_mut()[p].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[p].as_slice()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

fn random_bias(rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, 1, (0..rows).map(|_| rng.random_range(-0.3..0.3)).collect()).expect("bias")
}

/// conv -> conv -> maxpool -> dropout -> conv -> dense on a short trace.
pub fn mini_cnn(seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::new();
    for (cin, f) in [(1, 3), (3, 4)] {
        let mut c = Conv1d::new(cin, f, 3, 1, &mut rng)?;
        c.bias = random_bias(f, &mut rng);
        stages.push(CnnStage::Conv(c));
    }
    stages.push(CnnStage::MaxPool(MaxPool1d::new(2, 2)?));
    stages.push(CnnStage::Dropout(Dropout::new(0.5)?));
    let mut c = Conv1d::new(4, 3, 2, 1, &mut rng)?;
    c.bias = random_bias(3, &mut rng);
    stages.push(CnnStage::Conv(c));
    let input_len = 20;
    let (ch, w) = CnnNet::feature_shape(&stages, input_len)?;
    let mut head = Dense::new(ch * w, 4, &mut rng)?;
    head.bias = random_bias(4, &mut rng);
    let net = CnnNet {
        input_len,
        stages,
        head,
    };
    net.validate()?;
    Ok(Network::Cnn(net))
}

/// Recurrent stack of `layers` cells over `timesteps` steps of width 4.
pub fn mini_recurrent(lstm: bool, layers: usize, timesteps: usize, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, hidden) = (4, 3);
    let mut stages = Vec::new();
    let mut width = dim;
    for _ in 0..layers {
        let cell = if lstm {
            let mut l = LstmLayer::new(width, hidden, &mut rng)?;
            for b in &mut l.b {
                *b = random_bias(hidden, &mut rng);
            }
            RecurrentCell::Lstm(l)
        } else {
            let mut l = RnnLayer::new(width, hidden, &mut rng)?;
            l.bias = random_bias(hidden, &mut rng);
            RecurrentCell::Rnn(l)
        };
        stages.push(RecurrentStage::Cell(cell));
        width = hidden;
    }
    let mut head = Dense::new(hidden, 4, &mut rng)?;
    head.bias = random_bias(4, &mut rng);
    let net = RecurrentNet {
        timesteps,
        stages,
        head,
    };
    net.validate(dim * timesteps)?;
    Ok(Network::Recurrent(net))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Cnn,
    Rnn,
    Lstm,
}

/// The miniature networks checked for a family, with a trace and target for each.
pub fn suite(family: Family, seed: u64) -> Result<Vec<(String, Network, Vec<f64>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cases = Vec::new();
    match family {
        Family::Cnn => {
            let net = mini_cnn(seed)?;
            let x = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            cases.push(("cnn conv-conv-pool-dropout-conv-dense".to_string(), net, x, rng.random_range(0..4)));
        }
        Family::Rnn | Family::Lstm => {
            let lstm = family == Family::Lstm;
            let name = if lstm { "lstm" } else { "rnn" };
            for layers in [1, 2] {
                for t in [1, 2, 3] {
                    let net = mini_recurrent(lstm, layers, t, seed.wrapping_add((layers * 10 + t) as u64))?;
                    let x = (0..4 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
                    cases.push((format!("{name} layers={layers} T={t}"), net, x, rng.random_range(0..4)));
                }
            }
        }
    }
    Ok(cases)
}

/// Runs the whole suite for a family.
pub fn run(family: Family, seed: u64, corrupt: bool) -> Result<Vec<CheckReport>> {
    suite(family, seed)?
        .into_iter()
        .map(|(label, net, x, target)| check(&net, &x, target, &label, corrupt))
        .collect()
}
