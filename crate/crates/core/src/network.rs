//! Whole networks: the convolutional pipeline, and a common front over it and the
//! recurrent stack so training code can treat every family alike.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv1d, Dense, Dropout, MaxPool1d, Mode, PoolCache};
use crate::recurrent::{FoldedSequence, RecurrentNet, RecurrentTape};
use crate::rng::NeverRng;
use crate::tensor::{softmax, Activation, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub enum CnnStage {
    /// Convolution followed by ReLU.
    Conv(Conv1d),
    MaxPool(MaxPool1d),
    Dropout(Dropout),
}

/// Convolutional stages over a single-channel trace, flattened into a dense softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnNet {
    pub input_len: usize,
    pub stages: Vec<CnnStage>,
    pub head: Dense,
}

#[derive(Clone, Debug)]
enum CnnRecord {
    Conv { input: Matrix, pre: Matrix },
    Pool { cache: PoolCache },
    Dropout { mask: Option<Matrix> },
}

#[derive(Clone, Debug, Default)]
pub struct CnnTape {
    records: Vec<CnnRecord>,
    feature_shape: (usize, usize),
    features: Vec<f64>,
    probs: Vec<f64>,
}

impl CnnNet {
    /// Shape `(channels, width)` of the flattened feature map for a given input length.
    pub fn feature_shape(stages: &[CnnStage], input_len: usize) -> Result<(usize, usize)> {
        let mut shape = (1usize, input_len);
        for stage in stages {
            shape = match stage {
                CnnStage::Conv(c) => {
                    if c.input_channels != shape.0 {
                        return Err(Error::shape("conv stack", (c.num_filters, c.input_channels), shape));
                    }
                    (c.num_filters, c.output_width(shape.1)?)
                }
                CnnStage::MaxPool(p) => (shape.0, p.output_width(shape.1)?),
                CnnStage::Dropout(_) => shape,
            };
        }
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, w) = Self::feature_shape(&self.stages, self.input_len)?;
        if self.head.inputs() != c * w {
            return Err(Error::shape("cnn head", self.head.weights.shape(), (c * w, 1)));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for s in &self.stages {
            if let CnnStage::Conv(c) = s {
                out.push(&c.weights);
                out.push(&c.bias);
            }
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            if let CnnStage::Conv(c) = s {
                out.push(&mut c.weights);
                out.push(&mut c.bias);
            }
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<(Vec<f64>, CnnTape)> {
        if x.len() != self.input_len {
            return Err(Error::LengthMismatch {
                model: self.input_len,
                data: x.len(),
            });
        }
        let mut tape = CnnTape::default();
        let mut current = Matrix::row_vector(x);
        for stage in &self.stages {
            match stage {
                CnnStage::Conv(conv) => {
                    let pre = conv.forward(&current)?;
                    let out = Activation::Relu.apply(&pre);
                    tape.records.push(CnnRecord::Conv { input: current, pre });
                    current = out;
                }
                CnnStage::MaxPool(pool) => {
                    let (out, cache) = pool.forward(&current)?;
                    tape.records.push(CnnRecord::Pool { cache });
                    current = out;
                }
                CnnStage::Dropout(d) => {
                    let (out, mask) = d.apply(&current, mode, rng);
                    tape.records.push(CnnRecord::Dropout { mask });
                    current = out;
                }
            }
        }
        tape.feature_shape = current.shape();
        let features = current.into_vec();
        let probs = softmax(&self.head.forward(&features)?)?;
        tape.features = features;
        tape.probs = probs.clone();
        Ok((probs, tape))
    }

    pub fn backward(&self, tape: &CnnTape, grad_logits: &[f64]) -> Result<Vec<Matrix>> {
        if tape.probs.is_empty() {
            return Err(Error::MissingCache);
        }
        let head = self.head.backward(&tape.features, grad_logits)?;
        let (rows, cols) = tape.feature_shape;
        let mut grad = Matrix::from_vec(rows, cols, head.input)?;
        let mut conv_grads = Vec::new();
        let mut stages = self.stages.iter().rev();
        for record in tape.records.iter().rev() {
            let stage = stages.next().ok_or(Error::MissingCache)?;
            grad = match (stage, record) {
                (CnnStage::Conv(conv), CnnRecord::Conv { input, pre }) => {
                    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    let g = conv.backward(input, &grad)?;
                    conv_grads.push((g.weights, g.bias));
                    g.input
                }
                (CnnStage::MaxPool(pool), CnnRecord::Pool { cache }) => pool.backward(cache, &grad)?,
                (CnnStage::Dropout(d), CnnRecord::Dropout { mask }) => d.backward(mask.as_ref(), &grad)?,
                _ => return Err(Error::MissingCache),
            };
        }
        let mut out: Vec<Matrix> = conv_grads.into_iter().rev().flat_map(|(w, b)| [w, b]).collect();
        out.push(head.weights);
        out.push(head.bias);
        Ok(out)
    }
}

/// A trainable classifier of any gradient-based family.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Cnn(CnnNet),
    Recurrent(RecurrentNet),
}

#[derive(Clone, Debug)]
pub enum Tape {
    Cnn(CnnTape),
    Recurrent(RecurrentTape),
}

impl Default for Tape {
    fn default() -> Self {
        Tape::Cnn(CnnTape::default())
    }
}

impl Network {
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Network::Cnn(n) => n.params(),
            Network::Recurrent(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Network::Cnn(n) => n.params_mut(),
            Network::Recurrent(n) => n.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Network::Cnn(n) => n.head.outputs(),
            Network::Recurrent(n) => n.head.outputs(),
        }
    }

    /// Class probabilities plus the record needed for [`Network::backward`].
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<(Vec<f64>, Tape)> {
        match self {
            Network::Cnn(n) => {
                let (p, t) = n.forward(x, mode, rng)?;
                Ok((p, Tape::Cnn(t)))
            }
            Network::Recurrent(n) => {
                let seq = FoldedSequence::fold(x, n.timesteps)?;
                let (p, t) = n.forward(&seq, mode, rng)?;
                Ok((p, Tape::Recurrent(t)))
            }
        }
    }

    /// Gradients of the loss with respect to every parameter, aligned with [`Network::params`].
    pub fn backward(&self, tape: &Tape, grad_logits: &[f64]) -> Result<Vec<Matrix>> {
        match (self, tape) {
            (Network::Cnn(n), Tape::Cnn(t)) => n.backward(t, grad_logits),
            (Network::Recurrent(n), Tape::Recurrent(t)) => n.backward(t, grad_logits),
            _ => Err(Error::MissingCache),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval, &mut NeverRng)?.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
