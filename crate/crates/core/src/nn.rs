//! Building blocks with hand-written backward passes: affine maps, GELU,
//! row-wise layer normalization, two-layer perceptrons, and the parameter
//! tensor plumbing shared by every learnable struct.

use rand::Rng;

use crate::numerics::Matrix;

/// A named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Frozen tensors are persisted but never updated by the optimizer.
    pub trainable: bool,
}

impl<'a> Tensor<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a Matrix) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.data(),
            trainable: true,
        }
    }

    pub fn vector(name: impl Into<String>, v: &'a [f64]) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![v.len()],
            data: v,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

/// A fixed, ordered collection of parameter tensors. Gradients are stored in
/// a value of the same type, so `tensors` and `tensors_mut` must visit the
/// same tensors in the same order.
pub trait Params {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += s · other`
    fn add_scaled(&mut self, other: &Self, s: f64)
    where
        Self: Sized,
    {
        let src: Vec<&[f64]> = other.tensors().into_iter().map(|t| t.data).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// Glorot-style uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, out_dim: usize, in_dim: usize) -> Matrix {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-limit..limit))
}

/// `y = x·wᵀ + b` applied to every row of `x`. `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            w: glorot(rng, out_dim, in_dim),
            b: bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_t(&self.w);
        if let Some(b) = &self.b {
            for i in 0..y.rows() {
                for (v, bi) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        grad.w.add_assign(&dy.t_matmul(x));
        if let Some(gb) = &mut grad.b {
            for i in 0..dy.rows() {
                for (g, d) in gb.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        dy.matmul(&self.w)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor::matrix(format!("{prefix}.w"), &self.w));
        if let Some(b) = &self.b {
            out.push(Tensor::vector(format!("{prefix}.b"), b));
        }
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w.data_mut());
        if let Some(b) = &mut self.b {
            out.push(b.as_mut_slice());
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_matrix(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

/// `dy ⊙ gelu'(x)`
pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad(v);
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over each row, with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (n, d) = x.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[(i, j)] = h;
                y[(i, j)] = h * self.gamma[j] + self.beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let (n, d) = dy.shape();
        let mut dx = Matrix::zeros(n, d);
        for i in 0..n {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                grad.gamma[j] += dyr[j] * xh[j];
                grad.beta[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[(i, j)] = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor::vector(format!("{prefix}.gamma"), &self.gamma));
        out.push(Tensor::vector(format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.gamma.as_mut_slice());
        out.push(self.beta.as_mut_slice());
    }
}

/// Two affine layers with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp2 {
            first: Linear::new(rng, in_dim, hidden, true),
            second: Linear::new(rng, hidden, out_dim, true),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, Mlp2Cache) {
        let pre = self.first.forward(x);
        let act = gelu_matrix(&pre);
        let y = self.second.forward(&act);
        (
            y,
            Mlp2Cache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &Mlp2Cache, dy: &Matrix, grad: &mut Mlp2) -> Matrix {
        let dact = self.second.backward(&cache.act, dy, &mut grad.second);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.first.backward(&cache.input, &dpre, &mut grad.first)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.first.push_tensors(&format!("{prefix}.0"), out);
        self.second.push_tensors(&format!("{prefix}.1"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.first.push_tensors_mut(out);
        self.second.push_tensors_mut(out);
    }
}

impl Params for Mlp2 {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("mlp", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}

impl Params for LayerNorm {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("ln", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}
