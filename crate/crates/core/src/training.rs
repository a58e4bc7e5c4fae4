//! Loss, Adam, the split protocol, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::StumpEnsemble;
use crate::layers::Mode;
use crate::model::{Learned, ModelSpec, TrainedModel};
use crate::network::{argmax, Network};
use crate::recurrent::{global_norm, RecurrentNet};
use crate::rng;
use crate::tensor::{Matrix, NormStats};

const PROB_FLOOR: f64 = 1e-15;

fn check_target(probs: &[f64], target: usize) -> Result<()> {
    if target >= probs.len() {
        return Err(Error::param(format!("target {target} out of range for {} classes", probs.len())));
    }
    Ok(())
}

/// `-ln p[target]`, with probabilities clamped below at 1e-15.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    check_target(probs, target)?;
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

/// Gradient of softmax followed by cross-entropy, with respect to the logits.
pub fn cross_entropy_logit_grad(probs: &[f64], target: usize) -> Result<Vec<f64>> {
    check_target(probs, target)?;
    let mut g = probs.to_vec();
    g[target] -= 1.0;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&Matrix], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(Error::param(format!(
                "invalid Adam settings lr={lr} beta1={beta1} beta2={beta2} eps={epsilon}"
            )));
        }
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        self.apply_scaled(params, grads, 1.0)
    }

    /// [`AdamState::apply`] with every gradient entry multiplied by `scale` first.
    pub fn apply_scaled(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], scale: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::param(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(Error::shape("adam parameter", p.shape(), m.shape()));
            }
            if g.shape() != m.shape() {
                return Err(Error::shape("adam gradient", g.shape(), m.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        // m_hat / (sqrt(v_hat) + eps) == (sqrt(c2) / c1) * m / (sqrt(v) + eps * sqrt(c2)),
        // which leaves one division and one square root per entry.
        let step = self.lr * c2.sqrt() / c1;
        let eps = self.epsilon * c2.sqrt();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let gi = gi * scale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One random train/test partition of a dataset's indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Draws `n_splits` partitions, each from its own shuffle seeded by `(master_seed, i)`.
pub fn make_splits(
    dataset_len: usize,
    n_splits: usize,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<Vec<SplitPlan>> {
    if n_train + n_test > dataset_len {
        return Err(Error::InsufficientData {
            needed: n_train + n_test,
            available: dataset_len,
        });
    }
    Ok((0..n_splits)
        .map(|i| {
            let seed = rng::derive(master_seed, &[i as u64]);
            let mut idx: Vec<usize> = (0..dataset_len).collect();
            idx.shuffle(&mut rng::stream(seed, &[]));
            SplitPlan {
                seed,
                n_train,
                n_test,
                train_indices: idx[..n_train].to_vec(),
                test_indices: idx[n_train..n_train + n_test].to_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient clipping for recurrent families.
    pub clip_norm: Option<f64>,
    /// Seeds initialization, shuffling, dropout and stump sampling.
    pub seed: u64,
    /// Worker threads for per-example convolutional gradients; 0 or 1 runs inline.
    /// Recurrent families always run whole batches as matrix products on one thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
            threads: 0,
        }
    }
}

/// Reads `CALTYPE_THREADS`; unset, empty or unparsable means 0 (single-threaded).
pub fn threads_from_env() -> usize {
    std::env::var("CALTYPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch_accuracy: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub test_accuracy: f64,
    pub train_seconds: f64,
    pub seed: u64,
    pub optimizer_steps: u64,
    /// SHA-256 over the learned parameters, hex encoded.
    pub fingerprint: String,
}

/// A borrowed labeled example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub signal: &'a [f64],
    pub label: usize,
}

const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;
const BOOST: u64 = 4;

/// Freshly initialized network for a spec, exactly as [`train`] starts from it.
pub fn initial_network(spec: &ModelSpec, input_len: usize, seed: u64) -> Result<Option<Network>> {
    spec.build(input_len, &mut rng::stream(seed, &[INIT]))
}

fn example_grads(net: &Network, x: &[f64], label: usize, seed: u64) -> Result<(Vec<Matrix>, f64, bool)> {
    let (probs, tape) = net.forward(x, Mode::Train, &mut rng::stream(seed, &[]))?;
    let loss = cross_entropy(&probs, label)?;
    let grads = net.backward(&tape, &cross_entropy_logit_grad(&probs, label)?)?;
    Ok((grads, loss, argmax(&probs) == label))
}

/// Per-example gradients reduced in batch order, so the sum is independent of scheduling.
fn sum_in_order(results: Vec<Result<(Vec<Matrix>, f64, bool)>>) -> Result<(Vec<Matrix>, f64, usize)> {
    let mut total: Option<Vec<Matrix>> = None;
    let (mut loss_sum, mut hits) = (0.0, 0);
    for r in results {
        let (g, loss, hit) = r?;
        loss_sum += loss;
        hits += usize::from(hit);
        match &mut total {
            None => total = Some(g),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    Ok((total.ok_or_else(|| Error::param("empty batch"))?, loss_sum, hits))
}

/// Summed gradients, loss and hit count for a minibatch through the batched recurrent path.
fn batch_grads<R: rand::Rng>(
    net: &RecurrentNet,
    xs: &[&[f64]],
    labels: &[usize],
    rngs: &mut [R],
) -> Result<(Vec<Matrix>, f64, usize)> {
    let tape = net.forward_batch(xs, Mode::Train, rngs)?;
    let probs = tape.probs();
    let mut grad_logits = Matrix::zeros(probs.rows(), probs.cols());
    let (mut loss_sum, mut hits) = (0.0, 0);
    for (b, &label) in labels.iter().enumerate() {
        let p = probs.row(b);
        loss_sum += cross_entropy(p, label)?;
        hits += usize::from(argmax(p) == label);
        grad_logits.row_mut(b).copy_from_slice(&cross_entropy_logit_grad(p, label)?);
    }
    Ok((net.backward_batch(&tape, &grad_logits)?, loss_sum, hits))
}

/// Fits `spec` on the split's training portion and scores it on the test portion.
///
/// Normalization statistics come from training traces only, and test traces are touched
/// solely to compute the final test accuracy.
pub fn train(
    spec: &ModelSpec,
    data: &[Example<'_>],
    split: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport)> {
    train_with_progress(spec, data, split, cfg, &mut |_| {})
}

/// Per-epoch progress passed to the [`train_with_progress`] callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    spec: &ModelSpec,
    data: &[Example<'_>],
    split: &SplitPlan,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(EpochProgress),
) -> Result<(TrainedModel, TrainReport)> {
    let input_len = data.first().map(|e| e.signal.len()).unwrap_or(0);
    for &i in split.train_indices.iter().chain(&split.test_indices) {
        let e = data.get(i).ok_or_else(|| Error::param(format!("split index {i} out of range")))?;
        if e.signal.len() != input_len {
            return Err(Error::LengthMismatch {
                model: input_len,
                data: e.signal.len(),
            });
        }
        if e.label >= spec.classes {
            return Err(Error::param(format!("label {} out of range for {} classes", e.label, spec.classes)));
        }
    }
    if split.train_indices.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let initial = initial_network(spec, input_len, cfg.seed)?;

    let started = Instant::now();
    let norm = NormStats::fit(split.train_indices.iter().map(|&i| data[i].signal))?;
    let train_x: Vec<Vec<f64>> = split.train_indices.iter().map(|&i| norm.apply(data[i].signal)).collect();
    let train_y: Vec<usize> = split.train_indices.iter().map(|&i| data[i].label).collect();

    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut optimizer_steps = 0;
    let learned = match initial {
        None => {
            let xs: Vec<&[f64]> = train_x.iter().map(Vec::as_slice).collect();
            let (e, _) =
                StumpEnsemble::fit(&xs, &train_y, spec.classes, spec.rounds, &mut rng::stream(cfg.seed, &[BOOST]))?;
            Learned::Stumps(e)
        }
        Some(mut net) => {
            let mut adam = AdamState::new(&net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)?;
            let pool = if cfg.threads > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(cfg.threads)
                        .build()
                        .map_err(|e| Error::param(e.to_string()))?,
                )
            } else {
                None
            };
            let clip = if matches!(net, Network::Recurrent(_)) { cfg.clip_norm } else { None };
            let mut order: Vec<usize> = (0..train_x.len()).collect();
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
                let (mut loss_sum, mut hits) = (0.0, 0usize);
                for batch in order.chunks(cfg.batch_size) {
                    let seed_of = |i: usize| rng::derive(cfg.seed, &[DROPOUT, epoch as u64, i as u64]);
                    let (total, loss, batch_hits) = match &net {
                        Network::Recurrent(rn) => {
                            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_x[i].as_slice()).collect();
                            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
                            let mut rngs: Vec<_> = batch.iter().map(|&i| rng::stream(seed_of(i), &[])).collect();
                            batch_grads(rn, &xs, &labels, &mut rngs)?
                        }
                        Network::Cnn(_) => {
                            let run = |&i: &usize| example_grads(&net, &train_x[i], train_y[i], seed_of(i));
                            let results: Vec<Result<(Vec<Matrix>, f64, bool)>> = match &pool {
                                Some(p) => p.install(|| batch.par_iter().map(run).collect()),
                                None => batch.iter().map(run).collect(),
                            };
                            sum_in_order(results)?
                        }
                    };
                    loss_sum += loss;
                    hits += batch_hits;
                    // Batch mean and norm clipping folded into a single rescale.
                    let grads = total;
                    let mut k = 1.0 / batch.len() as f64;
                    if let Some(c) = clip {
                        let norm = k * global_norm(&grads);
                        if norm > c {
                            k *= c / norm;
                        }
                    }
                    adam.apply_scaled(&mut net.params_mut(), &grads, k)?;
                }
                let n = train_x.len() as f64;
                epoch_accuracy.push(hits as f64 / n);
                epoch_loss.push(loss_sum / n);
                on_epoch(EpochProgress {
                    epoch: epoch + 1,
                    epochs: cfg.epochs,
                    loss: loss_sum / n,
                    accuracy: hits as f64 / n,
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
            optimizer_steps = adam.step_count;
            Learned::Network(net)
        }
    };
    let train_seconds = started.elapsed().as_secs_f64();

    let model = TrainedModel {
        spec: spec.clone(),
        input_len,
        norm,
        learned,
    };
    let test_accuracy = if split.test_indices.is_empty() {
        0.0
    } else {
        let hits = split
            .test_indices
            .iter()
            .map(|&i| model.predict(data[i].signal).map(|p| p == data[i].label))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|&h| h)
            .count();
        hits as f64 / split.test_indices.len() as f64
    };
    let report = TrainReport {
        epoch_accuracy,
        epoch_loss,
        test_accuracy,
        train_seconds,
        seed: cfg.seed,
        optimizer_steps,
        fingerprint: fingerprint(&model),
    };
    Ok((model, report))
}

/// SHA-256 over every learned value of a model, in parameter order.
pub fn fingerprint(model: &TrainedModel) -> String {
    let mut h = Sha256::new();
    h.update(model.norm.mean.to_le_bytes());
    h.update(model.norm.std.to_le_bytes());
    match &model.learned {
        Learned::Network(n) => {
            for p in n.params() {
                for v in p.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Learned::Stumps(e) => {
            for s in &e.rounds {
                h.update((s.feature as u64).to_le_bytes());
                h.update(s.threshold.to_le_bytes());
                h.update((s.below as u64).to_le_bytes());
                h.update((s.above as u64).to_le_bytes());
                h.update(s.alpha.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
