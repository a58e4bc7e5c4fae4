//! Classification metrics, split aggregation, and the non-neural baselines
//! (SAMME boosting over threshold stumps, and a nearest-centroid rule).

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::network::argmax;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    /// Each row of `counts` over its sum; `None` for a class absent from the labels.
    pub normalized: Vec<Option<Vec<f64>>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Trace over total; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hits: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::param(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::param(format!("class index out of range for {classes} classes")));
        }
        counts[l][p] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            (sum > 0).then(|| row.iter().map(|&c| c as f64 / sum as f64).collect())
        })
        .collect();
    Ok(ConfusionMatrix { counts, normalized })
}

/// One-vs-rest ratios per class. `None` marks a 0/0 ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let c = cm.classes();
    let total = cm.total();
    let mut m = ClassMetrics {
        precision: Vec::with_capacity(c),
        recall: Vec::with_capacity(c),
        specificity: Vec::with_capacity(c),
    };
    for k in 0..c {
        let tp = cm.counts[k][k];
        let actual: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = cm.counts.iter().map(|row| row[k]).sum();
        let (fn_, fp) = (actual - tp, predicted - tp);
        let tn = total - tp - fn_ - fp;
        m.precision.push(ratio(tp, tp + fp));
        m.recall.push(ratio(tp, tp + fn_));
        m.specificity.push(ratio(tn, tn + fp));
    }
    m
}

/// Test-set evaluation of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub train_seconds: f64,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize, train_seconds: f64) -> Result<Self> {
        let confusion = confusion(preds, labels, classes)?;
        let metrics = class_metrics(&confusion);
        Ok(EvalReport {
            accuracy: confusion.accuracy().unwrap_or(0.0),
            confusion,
            metrics,
            train_seconds,
        })
    }
}

/// Mean and sample standard deviation of one metric over splits. Absent values are
/// skipped; if every value is absent the statistic is absent too.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn stat(values: impl IntoIterator<Item = Option<f64>>) -> Option<Stat> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len();
    if v.iter().all(|&x| x == v[0]) {
        return Some(Stat { mean: v[0], std: 0.0, n });
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Stat { mean, std, n })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub splits: usize,
    pub accuracy: Stat,
    pub train_seconds: Stat,
    pub precision: Vec<Option<Stat>>,
    pub recall: Vec<Option<Stat>>,
    pub specificity: Vec<Option<Stat>>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or_else(|| Error::param("cannot aggregate zero reports"))?;
    let c = first.confusion.classes();
    if reports.iter().any(|r| r.confusion.classes() != c) {
        return Err(Error::param("reports cover different class counts"));
    }
    let per_class = |pick: fn(&ClassMetrics) -> &Vec<Option<f64>>| -> Vec<Option<Stat>> {
        (0..c).map(|k| stat(reports.iter().map(|r| pick(&r.metrics)[k]))).collect()
    };
    Ok(Aggregate {
        splits: reports.len(),
        accuracy: stat(reports.iter().map(|r| Some(r.accuracy))).expect("nonempty"),
        train_seconds: stat(reports.iter().map(|r| Some(r.train_seconds))).expect("nonempty"),
        precision: per_class(|m| &m.precision),
        recall: per_class(|m| &m.recall),
        specificity: per_class(|m| &m.specificity),
    })
}

/// Depth-one tree: `x[feature] <= threshold` votes `below`, otherwise `above`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub below: usize,
    pub above: usize,
    pub alpha: f64,
}

impl Stump {
    pub fn predict(&self, x: &[f64]) -> usize {
        if x[self.feature] <= self.threshold {
            self.below
        } else {
            self.above
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StumpEnsemble {
    pub classes: usize,
    pub input_len: usize,
    pub rounds: Vec<Stump>,
}

/// Candidate thresholds per sampled feature.
pub const THRESHOLDS: usize = 64;
const ERR_FLOOR: f64 = 1e-10;

/// What one boosting round observed, for diagnostics and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub error: f64,
    pub weight_sum: f64,
    pub min_weight: f64,
}

impl StumpEnsemble {
    pub fn votes(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        for s in &self.rounds {
            v[s.predict(x)] += s.alpha;
        }
        v
    }

    /// Votes scaled to sum to one.
    pub fn vote_shares(&self, x: &[f64]) -> Vec<f64> {
        let v = self.votes(x);
        let total: f64 = v.iter().sum();
        v.into_iter().map(|a| a / total).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.votes(x))
    }

    /// Multi-class SAMME over stumps. Each round samples `sqrt(len)` features and tries
    /// 64 evenly spaced quantile thresholds per feature.
    pub fn fit<R: Rng + ?Sized>(
        xs: &[&[f64]],
        labels: &[usize],
        classes: usize,
        rounds: usize,
        rng: &mut R,
    ) -> Result<(StumpEnsemble, Vec<RoundLog>)> {
        if rounds == 0 {
            return Err(Error::param("boosting needs at least one round"));
        }
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::param("boosting needs a nonempty, labeled training set"));
        }
        let len = xs[0].len();
        if len == 0 || xs.iter().any(|x| x.len() != len) {
            return Err(Error::param("training traces must be nonempty and equally long"));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::param(format!("label out of range for {classes} classes")));
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::param("boosting needs at least two distinct classes"));
        }

        let n = xs.len();
        let sample = ((len as f64).sqrt().round() as usize).clamp(1, len);
        let mut w = vec![1.0 / n as f64; n];
        let mut ensemble = StumpEnsemble {
            classes,
            input_len: len,
            rounds: Vec::new(),
        };
        let mut log = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..rounds {
            let mut features = index::sample(rng, len, sample).into_vec();
            features.sort_unstable();
            let mut best: Option<(f64, Stump)> = None;
            for &f in &features {
                order.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]));
                if let Some((err, stump)) = best_split(xs, labels, &w, classes, f, &order) {
                    if best.as_ref().is_none_or(|(e, _)| err < *e) {
                        best = Some((err, stump));
                    }
                }
            }
            let Some((err, mut stump)) = best else { break };
            if err >= 1.0 - 1.0 / classes as f64 {
                break;
            }
            let e = err.max(ERR_FLOOR);
            stump.alpha = ((1.0 - e) / e).ln() + ((classes - 1) as f64).ln();
            for (i, wi) in w.iter_mut().enumerate() {
                if stump.predict(xs[i]) != labels[i] {
                    *wi *= stump.alpha.exp();
                }
            }
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|wi| *wi /= total);
            log.push(RoundLog {
                error: err,
                weight_sum: w.iter().sum(),
                min_weight: w.iter().copied().fold(f64::INFINITY, f64::min),
            });
            ensemble.rounds.push(stump);
            if err <= ERR_FLOOR {
                break;
            }
        }
        if ensemble.rounds.is_empty() {
            return Err(Error::param("no stump beat chance in the first boosting round"));
        }
        Ok((ensemble, log))
    }
}

/// Best stump on one feature given examples sorted by that feature. Candidate
/// thresholds are the values at 64 evenly spaced quantile positions.
fn best_split(
    xs: &[&[f64]],
    labels: &[usize],
    w: &[f64],
    classes: usize,
    feature: usize,
    order: &[usize],
) -> Option<(f64, Stump)> {
    let n = order.len();
    let mut total = vec![0.0; classes];
    for i in 0..n {
        total[labels[i]] += w[i];
    }
    let mut below = vec![0.0; classes];
    let mut cursor = 0;
    let mut best: Option<(f64, Stump)> = None;
    for q in 1..=THRESHOLDS {
        let pos = q * (n - 1) / (THRESHOLDS + 1);
        let threshold = xs[order[pos]][feature];
        while cursor < n && xs[order[cursor]][feature] <= threshold {
            below[labels[order[cursor]]] += w[order[cursor]];
            cursor += 1;
        }
        let above: Vec<f64> = total.iter().zip(&below).map(|(t, b)| t - b).collect();
        let (bc, ac) = (argmax(&below), argmax(&above));
        let correct = below[bc] + above[ac];
        let err = (total.iter().sum::<f64>() - correct).max(0.0);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((
                err,
                Stump {
                    feature,
                    threshold,
                    below: bc,
                    above: ac,
                    alpha: 0.0,
                },
            ));
        }
    }
    best
}

/// Trace mean and population variance.
pub fn mean_variance(x: &[f64]) -> [f64; 2] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    [mean, x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n]
}

/// Nearest-centroid classification on standardized (mean, variance) features.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    scale: [(f64, f64); 2],
    centroids: Vec<Option<[f64; 2]>>,
}

impl NearestCentroid {
    pub fn fit(xs: &[&[f64]], labels: &[usize], classes: usize) -> Result<Self> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::param("nearest centroid needs a nonempty, labeled training set"));
        }
        let feats: Vec<[f64; 2]> = xs.iter().map(|x| mean_variance(x)).collect();
        let n = feats.len() as f64;
        let scale = std::array::from_fn(|j| {
            let m = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            let s = (feats.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if s > 0.0 { s } else { 1.0 })
        });
        let mut sums = vec![([0.0; 2], 0usize); classes];
        for (f, &l) in feats.iter().zip(labels) {
            if l >= classes {
                return Err(Error::param(format!("label out of range for {classes} classes")));
            }
            let z = standardize(f, &scale);
            sums[l].0[0] += z[0];
            sums[l].0[1] += z[1];
            sums[l].1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(s, k)| (k > 0).then(|| [s[0] / k as f64, s[1] / k as f64]))
            .collect();
        Ok(NearestCentroid { scale, centroids })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = standardize(&mean_variance(x), &self.scale);
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d = (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2);
                if d < best.1 {
                    best = (k, d);
                }
            }
        }
        best.0
    }
}

fn standardize(f: &[f64; 2], scale: &[(f64, f64); 2]) -> [f64; 2] {
    [(f[0] - scale[0].0) / scale[0].1, (f[1] - scale[1].0) / scale[1].1]
}
