//! Feed-forward layers of the convolutional pipeline, each with an exact backward pass.
//!
//! Layers hold parameters only. Forward passes are pure; whatever a backward pass
//! needs (the layer input, pooling argmax, dropout mask) is returned to the caller
//! and handed back explicitly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Uniform Glorot initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("glorot shape")
}

/// Output width of a valid sliding window: `floor((n - window) / stride) + 1`.
pub fn window_count(n: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 || window == 0 {
        return Err(Error::param("window and stride must be at least 1"));
    }
    if n < window {
        return Err(Error::InputTooShort { len: n, window });
    }
    Ok((n - window) / stride + 1)
}

/// 1D convolution (cross-correlation, valid padding) over a `C_in x N` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub num_filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub input_channels: usize,
    /// `F x (K * C_in)`, column index `c * K + k`.
    pub weights: Matrix,
    /// `F x 1`
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Matrix,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        input_channels: usize,
        num_filters: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_filters == 0 || kernel_size == 0 || stride == 0 || input_channels == 0 {
            return Err(Error::param("conv filters, kernel, stride and channels must be >= 1"));
        }
        let fan = kernel_size * input_channels;
        Ok(Conv1d {
            num_filters,
            kernel_size,
            stride,
            input_channels,
            weights: glorot(num_filters, fan, fan, kernel_size * num_filters, rng),
            bias: Matrix::zeros(num_filters, 1),
        })
    }

    /// Builds a layer around explicit parameters.
    pub fn from_parts(weights: Matrix, bias: Matrix, kernel_size: usize, stride: usize) -> Result<Self> {
        if kernel_size == 0 || stride == 0 || weights.rows() == 0 || weights.cols() % kernel_size != 0 {
            return Err(Error::param("inconsistent conv parameters"));
        }
        if bias.shape() != (weights.rows(), 1) {
            return Err(Error::shape("conv bias", bias.shape(), (weights.rows(), 1)));
        }
        Ok(Conv1d {
            num_filters: weights.rows(),
            kernel_size,
            stride,
            input_channels: weights.cols() / kernel_size,
            weights,
            bias,
        })
    }

    pub fn output_width(&self, n: usize) -> Result<usize> {
        window_count(n, self.kernel_size, self.stride)
    }

    fn check_input(&self, x: &Matrix) -> Result<usize> {
        if x.rows() != self.input_channels {
            return Err(Error::shape(
                "conv1d input",
                x.shape(),
                (self.input_channels, self.kernel_size),
            ));
        }
        self.output_width(x.cols())
    }

    /// `(K * C_in) x M` patch matrix.
    fn im2col(&self, x: &Matrix, m: usize) -> Matrix {
        let k = self.kernel_size;
        let mut cols = Matrix::zeros(k * self.input_channels, m);
        for c in 0..self.input_channels {
            let src = x.row(c);
            for j in 0..k {
                let dst = cols.row_mut(c * k + j);
                if self.stride == 1 {
                    dst.copy_from_slice(&src[j..j + m]);
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = src[i * self.stride + j];
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let m = self.check_input(x)?;
        let cols = self.im2col(x, m);
        let mut out = self.weights.matmul(&cols)?;
        for f in 0..self.num_filters {
            let b = self.bias.get(f, 0);
            out.row_mut(f).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<ConvGrads> {
        let m = self.check_input(x)?;
        if grad_out.shape() != (self.num_filters, m) {
            return Err(Error::shape("conv1d backward", grad_out.shape(), (self.num_filters, m)));
        }
        let cols = self.im2col(x, m);
        let weights = grad_out.matmul_t(&cols)?;
        let bias = Matrix::column(&(0..self.num_filters).map(|f| grad_out.row(f).iter().sum()).collect::<Vec<_>>());

        let grad_cols = self.weights.t_matmul(grad_out)?;
        let k = self.kernel_size;
        let mut input = Matrix::zeros(x.rows(), x.cols());
        for c in 0..self.input_channels {
            for j in 0..k {
                let src = grad_cols.row(c * k + j);
                let dst = input.row_mut(c);
                if self.stride == 1 {
                    for (d, s) in dst[j..j + m].iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (i, s) in src.iter().enumerate() {
                        dst[i * self.stride + j] += s;
                    }
                }
            }
        }
        Ok(ConvGrads { input, weights, bias })
    }
}

/// Max pooling along the time axis, independently per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool1d {
    pub pool_size: usize,
    pub stride: usize,
}

/// Forward-pass record needed to route gradients back through a pooling layer.
#[derive(Clone, Debug, Default)]
pub struct PoolCache {
    pub input_shape: (usize, usize),
    /// For each output cell (row-major), the input column that won.
    pub argmax: Vec<usize>,
}

impl MaxPool1d {
    pub fn new(pool_size: usize, stride: usize) -> Result<Self> {
        if pool_size == 0 || stride == 0 {
            return Err(Error::param("pool size and stride must be >= 1"));
        }
        Ok(MaxPool1d { pool_size, stride })
    }

    pub fn output_width(&self, m: usize) -> Result<usize> {
        window_count(m, self.pool_size, self.stride)
    }

    /// Per-window maxima; ties go to the lowest index.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, PoolCache)> {
        let out_w = self.output_width(x.cols())?;
        let mut out = Matrix::zeros(x.rows(), out_w);
        let mut argmax = Vec::with_capacity(x.rows() * out_w);
        for r in 0..x.rows() {
            let src = x.row(r);
            for (i, o) in out.row_mut(r).iter_mut().enumerate() {
                let start = i * self.stride;
                let mut best = start;
                for j in start + 1..start + self.pool_size {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                *o = src[best];
                argmax.push(best);
            }
        }
        Ok((
            out,
            PoolCache {
                input_shape: x.shape(),
                argmax,
            },
        ))
    }

    pub fn backward(&self, cache: &PoolCache, grad_out: &Matrix) -> Result<Matrix> {
        let (rows, cols) = cache.input_shape;
        if grad_out.len() != cache.argmax.len() || grad_out.rows() != rows {
            return Err(Error::MissingCache);
        }
        let mut grad = Matrix::zeros(rows, cols);
        let out_w = grad_out.cols();
        for r in 0..rows {
            let g = grad_out.row(r);
            let idx = &cache.argmax[r * out_w..(r + 1) * out_w];
            let dst = grad.row_mut(r);
            for (&j, &v) in idx.iter().zip(g) {
                dst[j] += v;
            }
        }
        Ok(grad)
    }
}

/// Fully connected affine map `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weights: Matrix,
    /// `out x 1`
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::param("dense layer dimensions must be >= 1"));
        }
        Ok(Dense {
            weights: glorot(outputs, inputs, inputs, outputs, rng),
            bias: Matrix::zeros(outputs, 1),
        })
    }

    pub fn from_parts(weights: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (weights.rows(), 1) {
            return Err(Error::shape("dense bias", bias.shape(), (weights.rows(), 1)));
        }
        Ok(Dense { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weights.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(self.bias.as_slice()) {
            *yi += b;
        }
        Ok(y)
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<DenseGrads> {
        if x.len() != self.inputs() || grad_out.len() != self.outputs() {
            return Err(Error::shape(
                "dense backward",
                (grad_out.len(), x.len()),
                self.weights.shape(),
            ));
        }
        let mut weights = Matrix::zeros(self.outputs(), self.inputs());
        weights.add_outer(1.0, grad_out, x)?;
        Ok(DenseGrads {
            input: self.weights.t_matvec(grad_out)?,
            weights,
            bias: Matrix::column(grad_out),
        })
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are scaled by `1 / keep_prob` at train time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    keep_prob: f64,
}

impl Dropout {
    pub fn new(keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::param(format!("dropout keep probability {keep_prob} outside (0, 1]")));
        }
        Ok(Dropout { keep_prob })
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    /// Returns the output and, in train mode, the multiplicative mask (entries `0` or `1/p`).
    /// Eval mode is the identity and never draws from `rng`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Matrix, mode: Mode, rng: &mut R) -> (Matrix, Option<Matrix>) {
        if mode == Mode::Eval || self.keep_prob == 1.0 {
            return (x.clone(), None);
        }
        let scale = 1.0 / self.keep_prob;
        let mask = x.map(|_| if rng.random::<f64>() < self.keep_prob { scale } else { 0.0 });
        let out = x.hadamard(&mask).expect("mask shape");
        (out, Some(mask))
    }

    pub fn backward(&self, mask: Option<&Matrix>, grad_out: &Matrix) -> Result<Matrix> {
        match mask {
            Some(m) => grad_out.hadamard(m),
            None => Ok(grad_out.clone()),
        }
    }
}
