//! Vanilla RNN and LSTM cells, timestep folding, and backpropagation through time.
//!
//! A length-`N` trace is folded into `T` steps of width `d = N / T`. Each recurrent
//! layer unrolls over those `T` steps; stacked layers pass their whole hidden
//! sequence upward (through a ReLU, and optionally dropout), and a dense softmax
//! head reads only the top layer's final hidden state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{glorot, Dense, Dropout, Mode};
use crate::tensor::{self, sigmoid, softmax, Activation, Matrix};

mod batch;
pub use batch::BatchTape;

/// A trace reorganized into `T` consecutive chunks of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedSequence {
    /// `T x d`, row `t` holds `x[t*d .. (t+1)*d]`.
    data: Matrix,
}

impl FoldedSequence {
    pub fn fold(x: &[f64], steps: usize) -> Result<Self> {
        if steps == 0 || x.len() % steps != 0 || x.is_empty() {
            return Err(Error::Divisibility { n: x.len(), t: steps });
        }
        let dim = x.len() / steps;
        Ok(FoldedSequence {
            data: Matrix::from_vec(steps, dim, x.to_vec())?,
        })
    }

    pub fn from_matrix(data: Matrix) -> Self {
        FoldedSequence { data }
    }

    pub fn steps(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn origin_length(&self) -> usize {
        self.data.len()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.data
    }

    /// Concatenates the steps back into the original trace.
    pub fn concat(&self) -> Vec<f64> {
        self.data.as_slice().to_vec()
    }
}

/// Elman cell: `h_t = f(W x_t + R h_{t-1} + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnLayer {
    /// `H x d`
    pub w_in: Matrix,
    /// `H x H`
    pub w_rec: Matrix,
    /// `H x 1`
    pub bias: Matrix,
    pub activation: Activation,
}

impl RnnLayer {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::param("recurrent layer dimensions must be >= 1"));
        }
        Ok(RnnLayer {
            w_in: glorot(hidden, input_dim, input_dim, hidden, rng),
            w_rec: glorot(hidden, hidden, hidden, hidden, rng),
            bias: Matrix::zeros(hidden, 1),
            activation: Activation::Tanh,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_in.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.w_in.matvec(x)?;
        let r = self.w_rec.matvec(h_prev)?;
        for ((ai, ri), b) in a.iter_mut().zip(r).zip(self.bias.as_slice()) {
            *ai = self.activation.eval(*ai + ri + b);
        }
        Ok(a)
    }
}

/// Gate order used for every per-gate array: forget, input, candidate, output.
pub const GATES: [&str; 4] = ["forget", "input", "candidate", "output"];

/// LSTM cell with separate input weights `W_g`, recurrent weights `R_g` and biases `b_g`
/// for the forget, input, candidate and output gates.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// Each `H x d`.
    pub w: [Matrix; 4],
    /// Each `H x H`.
    pub r: [Matrix; 4],
    /// Each `H x 1`.
    pub b: [Matrix; 4],
}

/// Everything one LSTM step computes.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output: Vec<f64>,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::param("recurrent layer dimensions must be >= 1"));
        }
        let w = std::array::from_fn(|_| glorot(hidden, input_dim, input_dim, hidden, rng));
        let r = std::array::from_fn(|_| glorot(hidden, hidden, hidden, hidden, rng));
        let b = std::array::from_fn(|_| Matrix::zeros(hidden, 1));
        Ok(LstmLayer { w, r, b })
    }

    pub fn hidden(&self) -> usize {
        self.w[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].cols()
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStep> {
        let hidden = self.hidden();
        if c_prev.len() != hidden {
            return Err(Error::shape("lstm cell state", (c_prev.len(), 1), (hidden, 1)));
        }
        let mut pre: [Vec<f64>; 4] = Default::default();
        for g in 0..4 {
            let mut a = self.w[g].matvec(x)?;
            let r = self.r[g].matvec(h_prev)?;
            for ((ai, ri), b) in a.iter_mut().zip(r).zip(self.b[g].as_slice()) {
                *ai += ri + b;
            }
            pre[g] = a;
        }
        Ok(lstm_combine(&pre, c_prev))
    }
}

/// Gate nonlinearities and the cell/hidden update, given gate pre-activations.
fn lstm_combine(pre: &[Vec<f64>; 4], c_prev: &[f64]) -> LstmStep {
    let forget: Vec<f64> = pre[0].iter().map(|&v| sigmoid(v)).collect();
    let input: Vec<f64> = pre[1].iter().map(|&v| sigmoid(v)).collect();
    let candidate: Vec<f64> = pre[2].iter().map(|v| v.tanh()).collect();
    let output: Vec<f64> = pre[3].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<f64> = (0..c_prev.len())
        .map(|j| forget[j] * c_prev[j] + input[j] * candidate[j])
        .collect();
    let h = c.iter().zip(&output).map(|(cj, oj)| oj * cj.tanh()).collect();
    LstmStep {
        h,
        c,
        forget,
        input,
        candidate,
        output,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecurrentCell {
    Rnn(RnnLayer),
    Lstm(LstmLayer),
}

impl RecurrentCell {
    pub fn hidden(&self) -> usize {
        match self {
            RecurrentCell::Rnn(l) => l.hidden(),
            RecurrentCell::Lstm(l) => l.hidden(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            RecurrentCell::Rnn(l) => l.input_dim(),
            RecurrentCell::Lstm(l) => l.input_dim(),
        }
    }

    fn params(&self) -> Vec<&Matrix> {
        match self {
            RecurrentCell::Rnn(l) => vec![&l.w_in, &l.w_rec, &l.bias],
            RecurrentCell::Lstm(l) => l.w.iter().chain(&l.r).chain(&l.b).collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            RecurrentCell::Rnn(l) => vec![&mut l.w_in, &mut l.w_rec, &mut l.bias],
            RecurrentCell::Lstm(l) => l.w.iter_mut().chain(l.r.iter_mut()).chain(l.b.iter_mut()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecurrentStage {
    Cell(RecurrentCell),
    Dropout(Dropout),
}

/// Stacked recurrent layers plus a dense softmax head on the final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentNet {
    pub timesteps: usize,
    pub stages: Vec<RecurrentStage>,
    pub head: Dense,
}

#[derive(Clone, Debug)]
enum StageRecord {
    Rnn {
        input: Matrix,
        /// `T x H`
        hidden: Matrix,
    },
    Lstm {
        input: Matrix,
        steps: Vec<LstmStep>,
    },
    /// ReLU applied to the hidden sequence passed to the next cell layer.
    Relu {
        pre: Matrix,
    },
    Dropout {
        mask: Option<Matrix>,
    },
}

/// Forward-pass record consumed by [`RecurrentNet::backward`].
#[derive(Clone, Debug, Default)]
pub struct RecurrentTape {
    records: Vec<StageRecord>,
    top_hidden: Vec<f64>,
    probs: Vec<f64>,
    cell_evaluations: usize,
}

impl RecurrentTape {
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of recurrent cell evaluations performed by the forward pass.
    pub fn cell_evaluations(&self) -> usize {
        self.cell_evaluations
    }
}

impl RecurrentNet {
    pub fn cells(&self) -> impl DoubleEndedIterator<Item = &RecurrentCell> {
        self.stages.iter().filter_map(|s| match s {
            RecurrentStage::Cell(c) => Some(c),
            RecurrentStage::Dropout(_) => None,
        })
    }

    /// Checks that layer widths chain from the folded input to the head.
    pub fn validate(&self, input_len: usize) -> Result<()> {
        if self.timesteps == 0 || input_len % self.timesteps != 0 {
            return Err(Error::Divisibility {
                n: input_len,
                t: self.timesteps,
            });
        }
        let mut width = input_len / self.timesteps;
        let mut any = false;
        for cell in self.cells() {
            if cell.input_dim() != width {
                return Err(Error::shape("recurrent stack", (cell.hidden(), cell.input_dim()), (width, 1)));
            }
            width = cell.hidden();
            any = true;
        }
        if !any {
            return Err(Error::param("recurrent network needs at least one cell layer"));
        }
        if self.head.inputs() != width {
            return Err(Error::shape("recurrent head", self.head.weights.shape(), (width, 1)));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self
            .stages
            .iter()
            .flat_map(|s| match s {
                RecurrentStage::Cell(c) => c.params(),
                RecurrentStage::Dropout(_) => Vec::new(),
            })
            .collect();
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .stages
            .iter_mut()
            .flat_map(|s| match s {
                RecurrentStage::Cell(c) => c.params_mut(),
                RecurrentStage::Dropout(_) => Vec::new(),
            })
            .collect();
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    fn last_cell_index(&self) -> Option<usize> {
        self.stages.iter().rposition(|s| matches!(s, RecurrentStage::Cell(_)))
    }

    /// Runs the network on a folded sequence, returning class probabilities and the tape.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        seq: &FoldedSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, RecurrentTape)> {
        if seq.steps() != self.timesteps {
            return Err(Error::shape(
                "recurrent input",
                (seq.steps(), seq.dim()),
                (self.timesteps, seq.dim()),
            ));
        }
        let last_cell = self.last_cell_index().ok_or_else(|| Error::param("no recurrent cell layers"))?;
        let mut tape = RecurrentTape::default();
        let mut current = seq.as_matrix().clone();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                RecurrentStage::Cell(cell) => {
                    if cell.input_dim() != current.cols() {
                        return Err(Error::shape(
                            "recurrent stack",
                            (cell.hidden(), cell.input_dim()),
                            current.shape(),
                        ));
                    }
                    let (out, record) = match cell {
                        RecurrentCell::Rnn(l) => rnn_sequence(l, &current)?,
                        RecurrentCell::Lstm(l) => lstm_sequence(l, &current)?,
                    };
                    tape.cell_evaluations += current.rows();
                    tape.records.push(record);
                    if i == last_cell {
                        current = out;
                    } else {
                        let act = Activation::Relu.apply(&out);
                        tape.records.push(StageRecord::Relu { pre: out });
                        current = act;
                    }
                }
                RecurrentStage::Dropout(d) => {
                    let (out, mask) = d.apply(&current, mode, rng);
                    tape.records.push(StageRecord::Dropout { mask });
                    current = out;
                }
            }
        }
        let top = current.row(current.rows() - 1).to_vec();
        let logits = self.head.forward(&top)?;
        let probs = softmax(&logits)?;
        tape.top_hidden = top;
        tape.probs = probs.clone();
        Ok((probs, tape))
    }

    pub fn predict(&self, seq: &FoldedSequence) -> Result<Vec<f64>> {
        Ok(self.forward(seq, Mode::Eval, &mut crate::rng::NeverRng)?.0)
    }

    /// Backpropagation through time from the gradient of the loss with respect to
    /// the head's logits. Returns gradients aligned with [`RecurrentNet::params`].
    pub fn backward(&self, tape: &RecurrentTape, grad_logits: &[f64]) -> Result<Vec<Matrix>> {
        if tape.is_empty() {
            return Err(Error::MissingCache);
        }
        let head = self.head.backward(&tape.top_hidden, grad_logits)?;

        let steps = self.timesteps;
        let top_width = tape.top_hidden.len();
        let mut grad_seq = Matrix::zeros(steps, top_width);
        grad_seq.row_mut(steps - 1).copy_from_slice(&head.input);

        let mut cell_grads: Vec<Vec<Matrix>> = Vec::new();
        for record in tape.records.iter().rev() {
            grad_seq = match record {
                StageRecord::Relu { pre } => {
                    let mut g = grad_seq;
                    for (gi, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                        if p <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    g
                }
                StageRecord::Dropout { mask } => match mask {
                    Some(m) => grad_seq.hadamard(m)?,
                    None => grad_seq,
                },
                StageRecord::Rnn { .. } | StageRecord::Lstm { .. } => {
                    let cell_index = cell_grads.len();
                    let cell = self
                        .cells()
                        .rev()
                        .nth(cell_index)
                        .ok_or(Error::MissingCache)?;
                    let (gx, grads) = match (cell, record) {
                        (RecurrentCell::Rnn(l), StageRecord::Rnn { input, hidden }) => {
                            rnn_backward(l, input, hidden, &grad_seq)?
                        }
                        (RecurrentCell::Lstm(l), StageRecord::Lstm { input, steps }) => {
                            lstm_backward(l, input, steps, &grad_seq)?
                        }
                        _ => return Err(Error::MissingCache),
                    };
                    cell_grads.push(grads);
                    gx
                }
            };
        }
        let mut out: Vec<Matrix> = cell_grads.into_iter().rev().flatten().collect();
        out.push(head.weights);
        out.push(head.bias);
        Ok(out)
    }
}

/// `X W^T + 1 b^T` for a `T x d` input, i.e. the input contribution at every step.
fn input_projection(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut proj = x.matmul_t(w)?;
    for t in 0..proj.rows() {
        for (p, bj) in proj.row_mut(t).iter_mut().zip(b.as_slice()) {
            *p += bj;
        }
    }
    Ok(proj)
}

fn rnn_sequence(layer: &RnnLayer, x: &Matrix) -> Result<(Matrix, StageRecord)> {
    let hidden = layer.hidden();
    let mut hs = input_projection(x, &layer.w_in, &layer.bias)?;
    let mut h_prev = vec![0.0; hidden];
    for t in 0..x.rows() {
        let rec = layer.w_rec.matvec(&h_prev)?;
        let row = hs.row_mut(t);
        for (a, r) in row.iter_mut().zip(&rec) {
            *a = layer.activation.eval(*a + r);
        }
        h_prev.copy_from_slice(row);
    }
    Ok((
        hs.clone(),
        StageRecord::Rnn {
            input: x.clone(),
            hidden: hs,
        },
    ))
}

fn rnn_backward(layer: &RnnLayer, x: &Matrix, hs: &Matrix, grad_h: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
    let (steps, hidden) = hs.shape();
    let mut grad_pre = Matrix::zeros(steps, hidden);
    let mut grad_rec = Matrix::zeros(hidden, hidden);
    let mut carry = vec![0.0; hidden];
    let zero = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let h = hs.row(t);
        let da: Vec<f64> = (0..hidden)
            .map(|j| {
                let dh = grad_h.get(t, j) + carry[j];
                match layer.activation {
                    Activation::Tanh => dh * (1.0 - h[j] * h[j]),
                    Activation::Relu => {
                        if h[j] > 0.0 {
                            dh
                        } else {
                            0.0
                        }
                    }
                    Activation::Sigmoid => dh * h[j] * (1.0 - h[j]),
                }
            })
            .collect();
        let h_prev = if t > 0 { hs.row(t - 1) } else { &zero };
        grad_rec.add_outer(1.0, &da, h_prev)?;
        carry = layer.w_rec.t_matvec(&da)?;
        grad_pre.row_mut(t).copy_from_slice(&da);
    }
    let grad_in = grad_pre.t_matmul(x)?;
    let grad_bias = column_sums(&grad_pre);
    let grad_x = grad_pre.matmul(&layer.w_in)?;
    Ok((grad_x, vec![grad_in, grad_rec, grad_bias]))
}

fn lstm_sequence(layer: &LstmLayer, x: &Matrix) -> Result<(Matrix, StageRecord)> {
    let hidden = layer.hidden();
    let steps = x.rows();
    let proj: Vec<Matrix> = (0..4)
        .map(|g| input_projection(x, &layer.w[g], &layer.b[g]))
        .collect::<Result<_>>()?;
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Matrix::zeros(steps, hidden);
    let mut records = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut pre: [Vec<f64>; 4] = Default::default();
        for g in 0..4 {
            let mut a = layer.r[g].matvec(&h)?;
            tensor::axpy(1.0, proj[g].row(t), &mut a);
            pre[g] = a;
        }
        let step = lstm_combine(&pre, &c);
        h.copy_from_slice(&step.h);
        c.copy_from_slice(&step.c);
        out.row_mut(t).copy_from_slice(&step.h);
        records.push(step);
    }
    Ok((
        out,
        StageRecord::Lstm {
            input: x.clone(),
            steps: records,
        },
    ))
}

fn lstm_backward(layer: &LstmLayer, x: &Matrix, steps: &[LstmStep], grad_h: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
    let hidden = layer.hidden();
    let n = steps.len();
    let mut grad_pre: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(n, hidden));
    let mut grad_rec: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden, hidden));
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let zero = vec![0.0; hidden];
    for t in (0..n).rev() {
        let s = &steps[t];
        let (h_prev, c_prev) = if t > 0 {
            (&steps[t - 1].h[..], &steps[t - 1].c[..])
        } else {
            (&zero[..], &zero[..])
        };
        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        for j in 0..hidden {
            let dh = grad_h.get(t, j) + dh_next[j];
            let tc = s.c[j].tanh();
            let dc = dc_next[j] + dh * s.output[j] * (1.0 - tc * tc);
            let (f, i, g, o) = (s.forget[j], s.input[j], s.candidate[j], s.output[j]);
            da[0][j] = dc * c_prev[j] * f * (1.0 - f);
            da[1][j] = dc * g * i * (1.0 - i);
            da[2][j] = dc * i * (1.0 - g * g);
            da[3][j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for g in 0..4 {
            grad_rec[g].add_outer(1.0, &da[g], h_prev)?;
            let back = layer.r[g].t_matvec(&da[g])?;
            tensor::axpy(1.0, &back, &mut dh_next);
            grad_pre[g].row_mut(t).copy_from_slice(&da[g]);
        }
    }
    let mut grad_x = Matrix::zeros(n, layer.input_dim());
    let mut grad_w = Vec::with_capacity(4);
    let mut grad_b = Vec::with_capacity(4);
    for g in 0..4 {
        grad_w.push(grad_pre[g].t_matmul(x)?);
        grad_b.push(column_sums(&grad_pre[g]));
        grad_x.add_assign(&grad_pre[g].matmul(&layer.w[g])?)?;
    }
    let mut grads = grad_w;
    grads.extend(grad_rec);
    grads.extend(grad_b);
    Ok((grad_x, grads))
}

/// `cols x 1` vector of per-column sums.
fn column_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        tensor::axpy(1.0, m.row(r), &mut out);
    }
    Matrix::column(&out)
}

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::param(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(k));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn fold_examples() {
        let x: Vec<f64> = (0..4000).map(|v| v as f64).collect();
        let s = FoldedSequence::fold(&x, 2).unwrap();
        assert_eq!((s.steps(), s.dim()), (2, 2000));
        assert_eq!(s.step(1)[0], 2000.0);
        let one = FoldedSequence::fold(&x, 1).unwrap();
        assert_eq!(one.step(0), &x[..]);
        assert!(matches!(
            FoldedSequence::fold(&x, 3),
            Err(Error::Divisibility { n: 4000, t: 3 })
        ));
        assert!(FoldedSequence::fold(&x, 0).is_err());
    }

    #[test]
    fn rnn_step_zero_weights() {
        let layer = RnnLayer {
            w_in: Matrix::zeros(3, 2),
            w_rec: Matrix::zeros(3, 3),
            bias: Matrix::zeros(3, 1),
            activation: Activation::Tanh,
        };
        assert_eq!(layer.step(&[1.0, -4.0], &[0.5, 0.2, 0.1]).unwrap(), vec![0.0; 3]);
        let relu = RnnLayer {
            activation: Activation::Relu,
            ..layer
        };
        assert_eq!(relu.step(&[1.0, -4.0], &[0.5, 0.2, 0.1]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rnn_step_without_recurrence_is_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = RnnLayer::new(4, 3, &mut rng).unwrap();
        layer.w_rec = Matrix::zeros(3, 3);
        layer.bias = rand_matrix(3, 1, 0.5, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1];
        let dense = Dense::from_parts(layer.w_in.clone(), layer.bias.clone()).unwrap();
        let expected: Vec<f64> = dense.forward(&x).unwrap().iter().map(|v| v.tanh()).collect();
        assert_eq!(layer.step(&x, &[0.7, -0.7, 0.2]).unwrap(), expected);
    }

    #[test]
    fn rnn_step_hand_instance() {
        // h = tanh(W1 x + W2 h_prev + b), evaluated scalar by scalar
        let layer = RnnLayer {
            w_in: Matrix::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0]]).unwrap(),
            w_rec: Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.5, 0.0]]).unwrap(),
            bias: Matrix::column(&[0.1, -0.2]),
            activation: Activation::Tanh,
        };
        let h = layer.step(&[1.0, 0.5], &[0.2, -0.4]).unwrap();
        let h0 = (0.5 * 1.0 + -1.0 * 0.5 + 1.0 * 0.2 + 0.5 * -0.4 + 0.1f64).tanh();
        let h1 = (0.25 * 1.0 + 2.0 * 0.5 + -0.5 * 0.2 + 0.0 * -0.4 - 0.2f64).tanh();
        assert!((h[0] - h0).abs() < 1e-12);
        assert!((h[1] - h1).abs() < 1e-12);
    }

    #[test]
    fn lstm_zero_weights() {
        let layer = LstmLayer {
            w: std::array::from_fn(|_| Matrix::zeros(2, 3)),
            r: std::array::from_fn(|_| Matrix::zeros(2, 2)),
            b: std::array::from_fn(|_| Matrix::zeros(2, 1)),
        };
        let s = layer.step(&[1.0, 2.0, 3.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.forget, vec![0.5; 2]);
        assert_eq!(s.input, vec![0.5; 2]);
        assert_eq!(s.output, vec![0.5; 2]);
        assert_eq!(s.candidate, vec![0.0; 2]);
        assert_eq!(s.c, vec![0.0; 2]);
        assert_eq!(s.h, vec![0.0; 2]);
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = LstmLayer::new(3, 2, &mut rng).unwrap();
        layer.b[0] = Matrix::filled(2, 1, 30.0);
        layer.w[0] = Matrix::zeros(2, 3);
        layer.r[0] = Matrix::zeros(2, 2);
        let c_prev = [0.7, -1.3];
        let s = layer.step(&[0.1, 0.2, -0.3], &[0.4, -0.1], &c_prev).unwrap();
        for j in 0..2 {
            assert!((s.forget[j] - 1.0).abs() < 1e-12);
            let expected = c_prev[j] + s.input[j] * s.candidate[j];
            assert!((s.c[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_scalar_hand_instance() {
        let (wf, wi, wc, wo) = (0.5, -0.3, 0.8, 0.1);
        let (rf, ri, rc, ro) = (0.2, 0.4, -0.6, 0.9);
        let (bf, bi, bc, bo) = (0.1, 0.0, -0.2, 0.3);
        let m = |v: f64| Matrix::filled(1, 1, v);
        let layer = LstmLayer {
            w: [m(wf), m(wi), m(wc), m(wo)],
            r: [m(rf), m(ri), m(rc), m(ro)],
            b: [m(bf), m(bi), m(bc), m(bo)],
        };
        let (x, h, c) = (1.5, -0.4, 0.25);
        let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
        let f = sg(wf * x + rf * h + bf);
        let i = sg(wi * x + ri * h + bi);
        let g = (wc * x + rc * h + bc).tanh();
        let o = sg(wo * x + ro * h + bo);
        let c_new = f * c + i * g;
        let h_new = o * c_new.tanh();
        let s = layer.step(&[x], &[h], &[c]).unwrap();
        assert!((s.forget[0] - f).abs() < 1e-12);
        assert!((s.input[0] - i).abs() < 1e-12);
        assert!((s.candidate[0] - g).abs() < 1e-12);
        assert!((s.output[0] - o).abs() < 1e-12);
        assert!((s.c[0] - c_new).abs() < 1e-12);
        assert!((s.h[0] - h_new).abs() < 1e-12);
    }

    #[test]
    fn step_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rnn = RnnLayer::new(3, 2, &mut rng).unwrap();
        assert!(rnn.step(&[1.0], &[0.0, 0.0]).is_err());
        assert!(rnn.step(&[1.0, 2.0, 3.0], &[0.0]).is_err());
        let lstm = LstmLayer::new(3, 2, &mut rng).unwrap();
        assert!(lstm.step(&[1.0, 2.0, 3.0], &[0.0, 0.0], &[0.0]).is_err());
    }

    fn small_net(lstm: bool, layers: usize, timesteps: usize, d: usize, hidden: usize, seed: u64) -> RecurrentNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut width = d;
        for _ in 0..layers {
            let cell = if lstm {
                let mut l = LstmLayer::new(width, hidden, &mut rng).unwrap();
                for b in &mut l.b {
                    *b = rand_matrix(hidden, 1, 0.5, &mut rng);
                }
                RecurrentCell::Lstm(l)
            } else {
                let mut l = RnnLayer::new(width, hidden, &mut rng).unwrap();
                l.bias = rand_matrix(hidden, 1, 0.5, &mut rng);
                RecurrentCell::Rnn(l)
            };
            stages.push(RecurrentStage::Cell(cell));
            width = hidden;
        }
        let mut head = Dense::new(hidden, 4, &mut rng).unwrap();
        head.bias = rand_matrix(4, 1, 0.5, &mut rng);
        RecurrentNet {
            timesteps,
            stages,
            head,
        }
    }

    #[test]
    fn forward_counts_cell_evaluations() {
        for (layers, t) in [(1, 1), (1, 5), (2, 3), (3, 10)] {
            let net = small_net(false, layers, t, 2, 3, 1);
            let x: Vec<f64> = (0..2 * t).map(|v| (v as f64 * 0.37).sin()).collect();
            let seq = FoldedSequence::fold(&x, t).unwrap();
            let (p, tape) = net.forward(&seq, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(tape.cell_evaluations(), layers * t);
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_rnn_is_two_dense_layers() {
        let net = small_net(false, 1, 1, 5, 4, 77);
        let RecurrentStage::Cell(RecurrentCell::Rnn(cell)) = &net.stages[0] else {
            unreachable!()
        };
        let x = [0.2, -0.5, 0.9, 0.0, 1.1];
        let first = Dense::from_parts(cell.w_in.clone(), cell.bias.clone()).unwrap();
        let hidden: Vec<f64> = first.forward(&x).unwrap().iter().map(|v| v.tanh()).collect();
        let expected = softmax(&net.head.forward(&hidden).unwrap()).unwrap();
        let got = net.predict(&FoldedSequence::fold(&x, 1).unwrap()).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_rnn_against_unrolled_evaluation() {
        // T=2, d=3, H=2
        let net = small_net(false, 1, 2, 3, 2, 8);
        let RecurrentStage::Cell(RecurrentCell::Rnn(cell)) = &net.stages[0] else {
            unreachable!()
        };
        let x = [0.4, -0.1, 0.7, -0.9, 0.3, 0.05];
        let w = |r, c| cell.w_in.get(r, c);
        let u = |r, c| cell.w_rec.get(r, c);
        let b = |r| cell.bias.get(r, 0);
        let mut h = [0.0f64; 2];
        for t in 0..2 {
            let xt = &x[t * 3..t * 3 + 3];
            let mut next = [0.0; 2];
            for (j, n) in next.iter_mut().enumerate() {
                let mut a = b(j);
                for k in 0..3 {
                    a += w(j, k) * xt[k];
                }
                for k in 0..2 {
                    a += u(j, k) * h[k];
                }
                *n = a.tanh();
            }
            h = next;
        }
        let mut logits = [0.0f64; 4];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = net.head.bias.get(c, 0) + net.head.weights.get(c, 0) * h[0] + net.head.weights.get(c, 1) * h[1];
        }
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let got = net.predict(&FoldedSequence::fold(&x, 2).unwrap()).unwrap();
        for c in 0..4 {
            assert!((got[c] - (logits[c] - max).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_forward() {
        let net = small_net(true, 1, 2, 2, 2, 1);
        assert!(matches!(
            net.backward(&RecurrentTape::default(), &[0.0; 4]),
            Err(Error::MissingCache)
        ));
    }

    #[test]
    fn zero_learning_signal_gives_zero_gradients() {
        for lstm in [false, true] {
            let net = small_net(lstm, 2, 3, 2, 3, 5);
            let seq = FoldedSequence::fold(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6], 3).unwrap();
            let (_, tape) = net.forward(&seq, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let grads = net.backward(&tape, &[0.0; 4]).unwrap();
            assert_eq!(grads.len(), net.params().len());
            assert!(grads.iter().all(|g| g.norm_sq() == 0.0));
        }
    }

    #[test]
    fn single_step_rnn_gradients_equal_dense_backprop() {
        let net = small_net(false, 1, 1, 4, 3, 12);
        let RecurrentStage::Cell(RecurrentCell::Rnn(cell)) = &net.stages[0] else {
            unreachable!()
        };
        let x = [0.5, -0.25, 0.75, 0.1];
        let (probs, tape) = net
            .forward(&FoldedSequence::fold(&x, 1).unwrap(), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut dlogits = probs.clone();
        dlogits[2] -= 1.0;
        let grads = net.backward(&tape, &dlogits).unwrap();

        let first = Dense::from_parts(cell.w_in.clone(), cell.bias.clone()).unwrap();
        let pre = first.forward(&x).unwrap();
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let g_head = net.head.backward(&hidden, &dlogits).unwrap();
        let dpre: Vec<f64> = g_head.input.iter().zip(&hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        let g_first = first.backward(&x, &dpre).unwrap();

        let close = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&grads[0], &g_first.weights));
        assert!(grads[1].norm_sq() == 0.0, "h_-1 = 0 gives no recurrent gradient");
        assert!(close(&grads[2], &g_first.bias));
        assert!(close(&grads[3], &g_head.weights));
        assert!(close(&grads[4], &g_head.bias));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0])];
        clip_gradients(&mut g, 1.0).unwrap();
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g[0].get(0, 1) - 0.8).abs() < 1e-15);

        let mut small = vec![Matrix::row_vector(&[0.1, 0.2])];
        let before = small.clone();
        clip_gradients(&mut small, 1.0).unwrap();
        assert_eq!(small, before);
        assert!(clip_gradients(&mut small, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn fold_concat_is_identity(d in 1usize..50, t in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..d * t).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
            let s = FoldedSequence::fold(&x, t).unwrap();
            prop_assert_eq!(s.origin_length(), x.len());
            let back = s.concat();
            prop_assert!(back.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn clip_norm_is_min_of_norm_and_threshold(v in prop::collection::vec(-10.0f64..10.0, 1..20), max in 0.01f64..20.0) {
            let mut g = vec![Matrix::row_vector(&v)];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            clip_gradients(&mut g, max).unwrap();
            let after = g[0].norm_sq().sqrt();
            prop_assert!((after - norm.min(max)).abs() < 1e-12);
        }

        #[test]
        fn lstm_gates_bounded_and_cell_state_grows_at_most_one(
            seed in any::<u64>(),
            c_prev in prop::collection::vec(-5.0f64..5.0, 3),
            scale in 0.1f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = LstmLayer::new(4, 3, &mut rng).unwrap();
            for g in 0..4 {
                layer.b[g] = rand_matrix(3, 1, scale, &mut rng);
            }
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-scale..scale)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = layer.step(&x, &h, &c_prev).unwrap();
            let bound = c_prev.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
            for j in 0..3 {
                for gate in [s.forget[j], s.input[j], s.output[j]] {
                    prop_assert!(gate > 0.0 && gate < 1.0);
                }
                prop_assert!(s.c[j].abs() <= bound);
            }
        }
    }
}
