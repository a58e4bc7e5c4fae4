//! Minibatch forward and backward passes for [`RecurrentNet`].
//!
//! A batch is held step-major as one `(T * B) x width` matrix, so input projections,
//! input-weight gradients and input gradients are each a single matrix product per
//! layer, and only the `H x H` recurrence runs step by step. Per-example processing
//! would instead build an `H x d` gradient per trace, which dominates the cost when
//! `d = N / T` is wide.
//!
//! Each example keeps its own dropout stream, drawn in the same order as the
//! single-example pass, so both paths see identical masks.

use rand::Rng;

use super::{column_sums, RecurrentCell, RecurrentNet, RecurrentStage};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::recurrent::{LstmLayer, RnnLayer};
use crate::tensor::{gemm, sigmoid, softmax, Activation, Matrix};

#[derive(Clone, Debug)]
enum BatchRecord {
    Rnn {
        input: Matrix,
        hidden: Matrix,
    },
    Lstm {
        input: Matrix,
        /// Forget, input, candidate and output activations.
        gates: [Matrix; 4],
        cells: Matrix,
        hidden: Matrix,
    },
    Relu {
        pre: Matrix,
    },
    Dropout {
        mask: Option<Matrix>,
    },
}

/// Forward-pass record consumed by [`RecurrentNet::backward_batch`].
#[derive(Clone, Debug)]
pub struct BatchTape {
    batch: usize,
    records: Vec<BatchRecord>,
    top: Matrix,
    probs: Matrix,
}

impl BatchTape {
    /// `B x C` class probabilities, one row per example.
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }
}

/// Rows `t * batch .. (t + 1) * batch` of a step-major `(T * B) x width` matrix.
fn block(m: &Matrix, t: usize, batch: usize) -> Matrix {
    let w = m.cols();
    Matrix::from_vec(batch, w, m.as_slice()[t * batch * w..(t + 1) * batch * w].to_vec()).expect("block shape")
}

fn block_mut(m: &mut Matrix, t: usize, batch: usize) -> &mut [f64] {
    let w = m.cols();
    &mut m.as_mut_slice()[t * batch * w..(t + 1) * batch * w]
}

fn add_bias_rows(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
}

/// `X W^T + 1 b^T` over every step at once.
fn project(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut p = x.matmul_t(w)?;
    add_bias_rows(&mut p, b);
    Ok(p)
}

fn rnn_forward(l: &RnnLayer, x: &Matrix, batch: usize) -> Result<Matrix> {
    let steps = x.rows() / batch;
    let mut hs = project(x, &l.w_in, &l.bias)?;
    for t in 0..steps {
        let mut a = block(&hs, t, batch);
        if t > 0 {
            gemm(1.0, &block(&hs, t - 1, batch), false, &l.w_rec, true, 1.0, &mut a);
        }
        let act = l.activation;
        for (dst, v) in block_mut(&mut hs, t, batch).iter_mut().zip(a.as_slice()) {
            *dst = act.eval(*v);
        }
    }
    Ok(hs)
}

fn rnn_backward(
    l: &RnnLayer,
    x: &Matrix,
    hs: &Matrix,
    grad_h: &Matrix,
    batch: usize,
    want_input: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    let steps = x.rows() / batch;
    let hidden = l.hidden();
    let mut grad_pre = Matrix::zeros(hs.rows(), hidden);
    let mut grad_rec = Matrix::zeros(hidden, hidden);
    let mut carry = Matrix::zeros(batch, hidden);
    for t in (0..steps).rev() {
        let mut da = block(grad_h, t, batch);
        da.add_assign(&carry)?;
        let h = block(hs, t, batch);
        for (d, &hv) in da.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *d *= match l.activation {
                Activation::Tanh => 1.0 - hv * hv,
                Activation::Relu => f64::from(u8::from(hv > 0.0)),
                Activation::Sigmoid => hv * (1.0 - hv),
            };
        }
        if t > 0 {
            gemm(1.0, &da, true, &block(hs, t - 1, batch), false, 1.0, &mut grad_rec);
            carry = da.matmul(&l.w_rec)?;
        }
        block_mut(&mut grad_pre, t, batch).copy_from_slice(da.as_slice());
    }
    let grad_x = if want_input { grad_pre.matmul(&l.w_in)? } else { Matrix::zeros(0, 0) };
    Ok((grad_x, vec![grad_pre.t_matmul(x)?, grad_rec, column_sums(&grad_pre)]))
}

struct LstmForward {
    gates: [Matrix; 4],
    cells: Matrix,
    hidden: Matrix,
}

fn lstm_forward(l: &LstmLayer, x: &Matrix, batch: usize) -> Result<LstmForward> {
    let steps = x.rows() / batch;
    let width = l.hidden();
    let mut gates: [Matrix; 4] = [
        project(x, &l.w[0], &l.b[0])?,
        project(x, &l.w[1], &l.b[1])?,
        project(x, &l.w[2], &l.b[2])?,
        project(x, &l.w[3], &l.b[3])?,
    ];
    let mut cells = Matrix::zeros(x.rows(), width);
    let mut hidden = Matrix::zeros(x.rows(), width);
    for t in 0..steps {
        let h_prev = (t > 0).then(|| block(&hidden, t - 1, batch));
        for (g, gate) in gates.iter_mut().enumerate() {
            let mut a = block(gate, t, batch);
            if let Some(h) = &h_prev {
                gemm(1.0, h, false, &l.r[g], true, 1.0, &mut a);
            }
            for (dst, v) in block_mut(gate, t, batch).iter_mut().zip(a.as_slice()) {
                *dst = if g == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let n = batch * width;
        let off = t * n;
        for k in 0..n {
            let [f, i, cand, o] = [0, 1, 2, 3].map(|g| gates[g].as_slice()[off + k]);
            let c_prev = if t > 0 { cells.as_slice()[off - n + k] } else { 0.0 };
            let c = f * c_prev + i * cand;
            cells.as_mut_slice()[off + k] = c;
            hidden.as_mut_slice()[off + k] = o * c.tanh();
        }
    }
    Ok(LstmForward { gates, cells, hidden })
}

fn lstm_backward(
    l: &LstmLayer,
    x: &Matrix,
    fwd: (&[Matrix; 4], &Matrix, &Matrix),
    grad_h: &Matrix,
    batch: usize,
    want_input: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (gates, cells, hidden) = fwd;
    let steps = x.rows() / batch;
    let width = l.hidden();
    let n = batch * width;
    let mut grad_pre: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(x.rows(), width));
    let mut grad_r: Vec<Matrix> = (0..4).map(|_| Matrix::zeros(width, width)).collect();
    let mut dh_next = Matrix::zeros(batch, width);
    let mut dc_next = vec![0.0; n];
    for t in (0..steps).rev() {
        let off = t * n;
        let mut da: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(batch, width));
        for k in 0..n {
            let [f, i, g, o] = [0, 1, 2, 3].map(|q| gates[q].as_slice()[off + k]);
            let dh = grad_h.as_slice()[off + k] + dh_next.as_slice()[k];
            let tc = cells.as_slice()[off + k].tanh();
            let c_prev = if t > 0 { cells.as_slice()[off - n + k] } else { 0.0 };
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            da[0].as_mut_slice()[k] = dc * c_prev * f * (1.0 - f);
            da[1].as_mut_slice()[k] = dc * g * i * (1.0 - i);
            da[2].as_mut_slice()[k] = dc * i * (1.0 - g * g);
            da[3].as_mut_slice()[k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        if t > 0 {
            let h_prev = block(hidden, t - 1, batch);
            dh_next = Matrix::zeros(batch, width);
            for q in 0..4 {
                gemm(1.0, &da[q], true, &h_prev, false, 1.0, &mut grad_r[q]);
                gemm(1.0, &da[q], false, &l.r[q], false, 1.0, &mut dh_next);
            }
        }
        for q in 0..4 {
            block_mut(&mut grad_pre[q], t, batch).copy_from_slice(da[q].as_slice());
        }
    }
    let mut grad_x = Matrix::zeros(if want_input { x.rows() } else { 0 }, if want_input { l.input_dim() } else { 0 });
    let mut grads = Vec::with_capacity(12);
    for q in 0..4 {
        grads.push(grad_pre[q].t_matmul(x)?);
        if want_input {
            gemm(1.0, &grad_pre[q], false, &l.w[q], false, 1.0, &mut grad_x);
        }
    }
    grads.extend(grad_r);
    grads.extend(grad_pre.iter().map(column_sums));
    Ok((grad_x, grads))
}

impl RecurrentNet {
    /// Runs a batch of unfolded traces, each with its own random stream for dropout.
    /// Row `b` of the returned probabilities equals the single-example forward pass of
    /// `inputs[b]` driven by `rngs[b]`, up to floating-point summation order.
    pub fn forward_batch<R: Rng>(&self, inputs: &[&[f64]], mode: Mode, rngs: &mut [R]) -> Result<BatchTape> {
        let batch = inputs.len();
        if batch == 0 || rngs.len() != batch {
            return Err(Error::param(format!("batch of {batch} traces with {} random streams", rngs.len())));
        }
        let steps = self.timesteps;
        let len = inputs[0].len();
        self.validate(len)?;
        let dim = len / steps;
        // Row t * B + b holds chunk t of trace b.
        let mut current = Matrix::zeros(steps * batch, dim);
        for (b, x) in inputs.iter().enumerate() {
            if x.len() != len {
                return Err(Error::LengthMismatch { model: len, data: x.len() });
            }
            for t in 0..steps {
                current.row_mut(t * batch + b).copy_from_slice(&x[t * dim..(t + 1) * dim]);
            }
        }

        let last_cell = self
            .stages
            .iter()
            .rposition(|s| matches!(s, RecurrentStage::Cell(_)))
            .ok_or_else(|| Error::param("no recurrent cell layers"))?;
        let mut records = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                RecurrentStage::Cell(cell) => {
                    let out = match cell {
                        RecurrentCell::Rnn(l) => {
                            let hidden = rnn_forward(l, &current, batch)?;
                            records.push(BatchRecord::Rnn {
                                input: current,
                                hidden: hidden.clone(),
                            });
                            hidden
                        }
                        RecurrentCell::Lstm(l) => {
                            let fwd = lstm_forward(l, &current, batch)?;
                            let hidden = fwd.hidden.clone();
                            records.push(BatchRecord::Lstm {
                                input: current,
                                gates: fwd.gates,
                                cells: fwd.cells,
                                hidden: fwd.hidden,
                            });
                            hidden
                        }
                    };
                    current = if i == last_cell {
                        out
                    } else {
                        let act = Activation::Relu.apply(&out);
                        records.push(BatchRecord::Relu { pre: out });
                        act
                    };
                }
                RecurrentStage::Dropout(d) => {
                    let width = current.cols();
                    let ones = Matrix::filled(steps, width, 1.0);
                    let mut mask: Option<Matrix> = None;
                    for (b, r) in rngs.iter_mut().enumerate() {
                        if let (_, Some(m)) = d.apply(&ones, mode, r) {
                            let full = mask.get_or_insert_with(|| Matrix::zeros(steps * batch, width));
                            for t in 0..steps {
                                full.row_mut(t * batch + b).copy_from_slice(m.row(t));
                            }
                        }
                    }
                    if let Some(m) = &mask {
                        current = current.hadamard(m)?;
                    }
                    records.push(BatchRecord::Dropout { mask });
                }
            }
        }
        let top = block(&current, steps - 1, batch);
        let mut logits = top.matmul_t(&self.head.weights)?;
        add_bias_rows(&mut logits, &self.head.bias);
        let mut probs = Matrix::zeros(batch, logits.cols());
        for b in 0..batch {
            probs.row_mut(b).copy_from_slice(&softmax(logits.row(b))?);
        }
        Ok(BatchTape {
            batch,
            records,
            top,
            probs,
        })
    }

    /// Gradients summed over the batch, aligned with [`RecurrentNet::params`], given the
    /// `B x C` gradient of the loss with respect to each example's logits.
    pub fn backward_batch(&self, tape: &BatchTape, grad_logits: &Matrix) -> Result<Vec<Matrix>> {
        if grad_logits.shape() != tape.probs.shape() {
            return Err(Error::shape("recurrent batch backward", grad_logits.shape(), tape.probs.shape()));
        }
        let batch = tape.batch;
        let head_w = grad_logits.t_matmul(&tape.top)?;
        let head_b = column_sums(grad_logits);
        let mut grad_seq = Matrix::zeros(self.timesteps * batch, tape.top.cols());
        block_mut(&mut grad_seq, self.timesteps - 1, batch)
            .copy_from_slice(grad_logits.matmul(&self.head.weights)?.as_slice());

        let mut cells = self.stages.iter().rev().filter_map(|s| match s {
            RecurrentStage::Cell(c) => Some(c),
            RecurrentStage::Dropout(_) => None,
        });
        let mut cell_grads: Vec<Vec<Matrix>> = Vec::new();
        for (idx, record) in tape.records.iter().enumerate().rev() {
            // Nothing below the first record needs an input gradient.
            let want_input = idx > 0;
            grad_seq = match record {
                BatchRecord::Relu { pre } => {
                    for (g, &p) in grad_seq.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    grad_seq
                }
                BatchRecord::Dropout { mask: Some(m) } => grad_seq.hadamard(m)?,
                BatchRecord::Dropout { mask: None } => grad_seq,
                BatchRecord::Rnn { input, hidden } => {
                    let Some(RecurrentCell::Rnn(l)) = cells.next() else {
                        return Err(Error::MissingCache);
                    };
                    let (gx, grads) = rnn_backward(l, input, hidden, &grad_seq, batch, want_input)?;
                    cell_grads.push(grads);
                    gx
                }
                BatchRecord::Lstm {
                    input,
                    gates,
                    cells: cs,
                    hidden,
                } => {
                    let Some(RecurrentCell::Lstm(l)) = cells.next() else {
                        return Err(Error::MissingCache);
                    };
                    let (gx, grads) = lstm_backward(l, input, (gates, cs, hidden), &grad_seq, batch, want_input)?;
                    cell_grads.push(grads);
                    gx
                }
            };
        }
        let mut out: Vec<Matrix> = cell_grads.into_iter().rev().flatten().collect();
        out.push(head_w);
        out.push(head_b);
        Ok(out)
    }
}
