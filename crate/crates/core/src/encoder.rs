//! Chiral encoder: determinant kernels over chirality matrices, per-class
//! atom-feature projectors and the global chiral token.
//!
//! Each kernel `w_κ` (`d_p × 3`) lifts a chirality matrix `M` to `O = w_κ·M`,
//! normalizes it, and reports `det(R)` from an oriented thin QR. The output
//! equals `sign(det M)·sqrt(det(ÕᵀÕ))`: it flips sign under reflection of the
//! molecule and is unchanged by rotations, which act on `O` from the right.
//!
//! The normalization centers every column over `d_p` and divides the whole
//! slice by one shared RMS scale, then applies a per-row gain. A per-column
//! scale would not commute with that right action, and a nonzero shift would
//! break it too, so `beta` is persisted but held at zero during training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    chirality_matrix, reference_point, AtomPartition, ChiralUnit, ChiralityMatrix, Molecule,
    Stereocenter, Vec3,
};
use crate::nn::{Mlp2, Mlp2Cache, Params, Tensor};
use crate::numerics::{det3, gram_sqrt_det, inverse3, qr_thin, random_matrix, Matrix};

/// Below this Gram determinant the determinant path contributes no gradient.
pub const SINGULAR_GRAM: f64 = 1e-14;

/// Normalization applied to `O = w·M` before the QR step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelNorm {
    Layer,
    /// Identity map; used to observe the raw determinant identity.
    Bypass,
}

/// How kernel slices are kept away from rank deficiency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankStrategy {
    QrRetraction,
    Regularize,
    None,
}

impl std::str::FromStr for RankStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qr" | "qrretraction" | "qr_retraction" => Ok(RankStrategy::QrRetraction),
            "reg" | "regularize" => Ok(RankStrategy::Regularize),
            "none" => Ok(RankStrategy::None),
            other => Err(Error::Argument(format!("unknown rank strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankStrategy::QrRetraction => "qr",
            RankStrategy::Regularize => "reg",
            RankStrategy::None => "none",
        })
    }
}

/// `k` learnable `d_p × 3` projections plus the normalization gain/shift.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub w: Vec<Matrix>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub norm: KernelNorm,
}

#[derive(Debug, Clone)]
struct SliceCache {
    chat: Matrix,
    scale: f64,
    normalized: Matrix,
    det: f64,
    gram_inv: Option<Matrix>,
}

/// Saved state of one kernel-bank forward pass.
#[derive(Debug, Clone)]
pub struct KernelCache {
    mc: Matrix,
    slices: Vec<SliceCache>,
}

impl KernelBank {
    /// Random slices with orthonormal columns.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize, d_p: usize) -> Result<Self> {
        if d_p < 3 {
            return Err(Error::Shape(format!("projection dimension {d_p} < 3")));
        }
        let bank = KernelBank {
            w: (0..k).map(|_| random_matrix(rng, d_p, 3)).collect(),
            gamma: vec![1.0; d_p],
            beta: vec![0.0; d_p],
            norm: KernelNorm::Layer,
        };
        retract_orthonormal(&bank)
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn d_p(&self) -> usize {
        self.gamma.len()
    }

    /// Fixed frame that orients the column space of every normalized output
    /// of kernel `κ`: `diag(γ)·C·w_κ` (C centers columns), or `w_κ` when
    /// normalization is bypassed.
    fn frame(&self, kappa: usize) -> Matrix {
        let w = &self.w[kappa];
        match self.norm {
            KernelNorm::Bypass => w.clone(),
            KernelNorm::Layer => {
                let mut f = center_columns(w);
                for p in 0..f.rows() {
                    let g = self.gamma[p];
                    f.row_mut(p).iter_mut().for_each(|v| *v *= g);
                }
                f
            }
        }
    }

    fn normalize(&self, o: &Matrix) -> (Matrix, Matrix, f64) {
        let chat_raw = center_columns(o);
        let n = chat_raw.data().len() as f64;
        let ms = chat_raw.data().iter().map(|v| v * v).sum::<f64>() / n;
        let scale = (ms + crate::nn::LN_EPS).sqrt();
        let chat = chat_raw.scaled(1.0 / scale);
        let normalized = Matrix::from_fn(o.rows(), 3, |p, j| {
            chat[(p, j)] * self.gamma[p] + self.beta[p]
        });
        (chat, normalized, scale)
    }

    /// Kernel outputs for one chirality matrix.
    pub fn forward(&self, mc: &Matrix) -> Result<(Vec<f64>, KernelCache)> {
        if mc.shape() != (3, 3) || !mc.is_finite() {
            return Err(Error::Input("chirality matrix must be a finite 3×3".into()));
        }
        let mut out = Vec::with_capacity(self.k());
        let mut slices = Vec::with_capacity(self.k());
        for (kappa, w) in self.w.iter().enumerate() {
            let o = w.matmul(mc);
            let (chat, normalized, scale) = match self.norm {
                KernelNorm::Layer => self.normalize(&o),
                KernelNorm::Bypass => (Matrix::zeros(0, 0), o, 1.0),
            };
            let det = qr_thin(&normalized)?.oriented(&self.frame(kappa)).det_r();
            let gram = normalized.t_matmul(&normalized);
            let gram_inv = if det3(&gram) >= SINGULAR_GRAM {
                inverse3(&gram)
            } else {
                None
            };
            out.push(det);
            slices.push(SliceCache {
                chat,
                scale,
                normalized,
                det,
                gram_inv,
            });
        }
        Ok((
            out,
            KernelCache {
                mc: mc.clone(),
                slices,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `∂L/∂M`.
    ///
    /// Uses `det(R) = s·sqrt(det(ÕᵀÕ))` with a locally constant sign `s`, so
    /// `∂det(R)/∂Õ = det(R)·Õ·(ÕᵀÕ)⁻¹`.
    pub fn backward(&self, cache: &KernelCache, d_out: &[f64], grad: &mut KernelBank) -> Matrix {
        let mut d_mc = Matrix::zeros(3, 3);
        for (kappa, slice) in cache.slices.iter().enumerate() {
            let upstream = d_out[kappa];
            let Some(gram_inv) = &slice.gram_inv else { continue };
            if upstream == 0.0 {
                continue;
            }
            let d_norm = slice.normalized.matmul(gram_inv).scaled(upstream * slice.det);
            let d_o = match self.norm {
                KernelNorm::Bypass => d_norm,
                KernelNorm::Layer => {
                    let rows = d_norm.rows();
                    let mut d_chat = Matrix::zeros(rows, 3);
                    for p in 0..rows {
                        for j in 0..3 {
                            grad.gamma[p] += d_norm[(p, j)] * slice.chat[(p, j)];
                            grad.beta[p] += d_norm[(p, j)];
                            d_chat[(p, j)] = d_norm[(p, j)] * self.gamma[p];
                        }
                    }
                    let n = (rows * 3) as f64;
                    let proj = d_chat
                        .data()
                        .iter()
                        .zip(slice.chat.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    let mut d_c = d_chat;
                    for (v, c) in d_c.data_mut().iter_mut().zip(slice.chat.data()) {
                        *v = (*v - c * proj) / slice.scale;
                    }
                    center_columns(&d_c)
                }
            };
            grad.w[kappa].add_assign(&d_o.matmul_t(&cache.mc));
            d_mc.add_assign(&self.w[kappa].t_matmul(&d_o));
        }
        d_mc
    }

    /// Largest `‖w_κᵀw_κ − I₃‖_F` over the bank.
    pub fn orthonormality_error(&self) -> f64 {
        self.w
            .iter()
            .map(|w| {
                let mut g = w.t_matmul(w);
                g.add_assign(&Matrix::identity(3).scaled(-1.0));
                g.frobenius_norm()
            })
            .fold(0.0, f64::max)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        for (kappa, w) in self.w.iter().enumerate() {
            out.push(Tensor::matrix(format!("{prefix}.w.{kappa}"), w));
        }
        out.push(Tensor::vector(format!("{prefix}.gamma"), &self.gamma));
        out.push(Tensor::vector(format!("{prefix}.beta"), &self.beta).frozen());
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for w in &mut self.w {
            out.push(w.data_mut());
        }
        out.push(self.gamma.as_mut_slice());
        out.push(self.beta.as_mut_slice());
    }
}

impl Params for KernelBank {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("kernels", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}

fn center_columns(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut out = m.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|i| m[(i, j)]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Determinant-kernel outputs for a batch of chirality matrices (`B × k`).
pub fn kernel_forward(bank: &KernelBank, batch: &[ChiralityMatrix]) -> Result<Matrix> {
    let mut out = Matrix::zeros(batch.len(), bank.k());
    for (b, mc) in batch.iter().enumerate() {
        let (row, _) = bank.forward(mc.matrix())?;
        out.row_mut(b).copy_from_slice(&row);
    }
    Ok(out)
}

/// `Σ_κ ‖w_κᵀw_κ − I₃‖_F²`
pub fn regularization_loss(bank: &KernelBank) -> f64 {
    bank.w
        .iter()
        .map(|w| {
            let mut g = w.t_matmul(w);
            g.add_assign(&Matrix::identity(3).scaled(-1.0));
            g.data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Adds `scale · ∂L_reg/∂w` (= `4·w·(wᵀw − I)` per slice) into `grad`.
pub fn regularization_backward(bank: &KernelBank, scale: f64, grad: &mut KernelBank) {
    for (w, g) in bank.w.iter().zip(&mut grad.w) {
        let mut e = w.t_matmul(w);
        e.add_assign(&Matrix::identity(3).scaled(-1.0));
        g.add_assign(&w.matmul(&e).scaled(4.0 * scale));
    }
}

/// Replaces every slice by the orthonormal factor of its thin QR, with
/// column signs chosen so that `R` has a positive diagonal. That keeps the
/// orientation of each slice (and hence the sign of its kernel outputs) and
/// leaves orthonormal slices unchanged.
pub fn retract_orthonormal(bank: &KernelBank) -> Result<KernelBank> {
    let mut out = bank.clone();
    for (kappa, w) in bank.w.iter().enumerate() {
        if gram_sqrt_det(w)? == 0.0 {
            return Err(Error::Degenerate { kernel: kappa });
        }
        let qr = qr_thin(w)?;
        let mut q = qr.q;
        for j in 0..3 {
            if qr.r[(j, j)] < 0.0 {
                for i in 0..q.rows() {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        out.w[kappa] = q;
    }
    Ok(out)
}

/// Learnable encoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub kernels: KernelBank,
    pub proj_c: Mlp2,
    pub proj_r: Mlp2,
    pub proj_n: Mlp2,
    pub global_token: Vec<f64>,
    pub rank_strategy: RankStrategy,
}

impl EncoderParams {
    /// `hidden` is both the projector width and the number of kernels, so the
    /// kernel outputs add directly onto the chiral projector outputs.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        d_f: usize,
        hidden: usize,
        d_p: usize,
        rank_strategy: RankStrategy,
    ) -> Result<Self> {
        let kernels = KernelBank::random(rng, hidden, d_p)?;
        Ok(EncoderParams {
            kernels,
            proj_c: Mlp2::new(rng, d_f, hidden, hidden),
            proj_r: Mlp2::new(rng, d_f, hidden, hidden),
            proj_n: Mlp2::new(rng, d_f, hidden, hidden),
            global_token: (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            rank_strategy,
        })
    }

    pub fn hidden(&self) -> usize {
        self.global_token.len()
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.proj_c.push_tensors(&format!("{prefix}.proj_c"), out);
        self.proj_r.push_tensors(&format!("{prefix}.proj_r"), out);
        self.proj_n.push_tensors(&format!("{prefix}.proj_n"), out);
        out.push(Tensor::vector(format!("{prefix}.global_token"), &self.global_token));
        self.kernels.push_tensors(&format!("{prefix}.kernels"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.proj_c.push_tensors_mut(out);
        self.proj_r.push_tensors_mut(out);
        self.proj_n.push_tensors_mut(out);
        out.push(self.global_token.as_mut_slice());
        self.kernels.push_tensors_mut(out);
    }
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("encoder", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}

/// Initial hidden states of one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMolecule {
    /// Token row first, then one row per chiral unit.
    pub h_c: Matrix,
    pub h_r: Matrix,
    pub h_n: Matrix,
    /// Chiral units in row order (row `i + 1` of `h_c` is `units[i]`).
    pub units: Vec<ChiralUnit>,
    pub related_atoms: Vec<usize>,
    pub nonchiral_atoms: Vec<usize>,
    pub chiral_positions: Vec<Vec3>,
    pub related_positions: Vec<Vec3>,
    pub nonchiral_positions: Vec<Vec3>,
}

impl EncodedMolecule {
    pub fn num_keys(&self) -> usize {
        self.h_r.rows() + self.h_n.rows()
    }

    /// Key atoms in key order (related first, then non-chiral).
    pub fn key_atoms(&self) -> Vec<usize> {
        self.related_atoms
            .iter()
            .chain(&self.nonchiral_atoms)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    kernels: Vec<KernelCache>,
    proj_c: Option<Mlp2Cache>,
    proj_r: Option<Mlp2Cache>,
    proj_n: Option<Mlp2Cache>,
}

/// Chiral units ordered by their lowest center atom index.
pub fn units_in_row_order(mol: &Molecule) -> Vec<ChiralUnit> {
    let mut units = mol.chiral_units().to_vec();
    units.sort_by_key(|u| u.center.atoms().into_iter().min());
    units
}

fn unit_features(mol: &Molecule, unit: &ChiralUnit) -> Vec<f64> {
    let f = mol.features();
    match unit.center {
        Stereocenter::Center(i) => f.row(i).to_vec(),
        Stereocenter::Axis(a, b) => f
            .row(a)
            .iter()
            .zip(f.row(b))
            .map(|(x, y)| 0.5 * (x + y))
            .collect(),
    }
}

fn project(mlp: &Mlp2, x: &Matrix, hidden: usize) -> (Matrix, Option<Mlp2Cache>) {
    if x.rows() == 0 {
        return (Matrix::zeros(0, hidden), None);
    }
    let (y, cache) = mlp.forward(x);
    (y, Some(cache))
}

pub fn encode(
    params: &EncoderParams,
    mol: &Molecule,
    partition: &AtomPartition,
) -> Result<EncodedMolecule> {
    encode_with_cache(params, mol, partition).map(|(e, _)| e)
}

pub fn encode_with_cache(
    params: &EncoderParams,
    mol: &Molecule,
    partition: &AtomPartition,
) -> Result<(EncodedMolecule, EncoderCache)> {
    let hidden = params.hidden();
    if mol.features().cols() != params.proj_c.first.in_dim() {
        return Err(Error::Shape(format!(
            "molecule has {} features per atom, encoder expects {}",
            mol.features().cols(),
            params.proj_c.first.in_dim()
        )));
    }
    let units = units_in_row_order(mol);
    let coords = mol.coords();

    let mut chiral_feats = Matrix::zeros(units.len(), mol.features().cols());
    let mut kernel_rows = Matrix::zeros(units.len(), hidden);
    let mut kernel_caches = Vec::with_capacity(units.len());
    for (row, unit) in units.iter().enumerate() {
        chiral_feats.row_mut(row).copy_from_slice(&unit_features(mol, unit));
        let mc = chirality_matrix(unit, coords);
        let (d, cache) = params.kernels.forward(mc.matrix())?;
        kernel_rows.row_mut(row).copy_from_slice(&d);
        kernel_caches.push(cache);
    }

    let (mut chiral_rows, proj_c) = project(&params.proj_c, &chiral_feats, hidden);
    chiral_rows.add_assign(&kernel_rows);
    let token = Matrix::from_vec(1, hidden, params.global_token.clone());
    let h_c = token.vstack(&chiral_rows);

    let (h_r, proj_r) = project(
        &params.proj_r,
        &mol.features().select_rows(&partition.related),
        hidden,
    );
    let (h_n, proj_n) = project(
        &params.proj_n,
        &mol.features().select_rows(&partition.nonchiral),
        hidden,
    );

    let encoded = EncodedMolecule {
        h_c,
        h_r,
        h_n,
        chiral_positions: units.iter().map(|u| reference_point(u, coords)).collect(),
        related_positions: partition.related.iter().map(|&i| coords[i]).collect(),
        nonchiral_positions: partition.nonchiral.iter().map(|&i| coords[i]).collect(),
        units,
        related_atoms: partition.related.clone(),
        nonchiral_atoms: partition.nonchiral.clone(),
    };
    Ok((
        encoded,
        EncoderCache {
            kernels: kernel_caches,
            proj_c,
            proj_r,
            proj_n,
        },
    ))
}

/// Accumulates encoder gradients. Returns `∂L/∂M` for every chiral unit in
/// row order, for callers that want coordinate gradients.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_hc: &Matrix,
    d_hr: &Matrix,
    d_hn: &Matrix,
    grad: &mut EncoderParams,
) -> Vec<Matrix> {
    for (g, d) in grad.global_token.iter_mut().zip(d_hc.row(0)) {
        *g += d;
    }
    let n_units = d_hc.rows() - 1;
    let d_chiral = Matrix::from_vec(n_units, d_hc.cols(), d_hc.data()[d_hc.cols()..].to_vec());
    if let Some(c) = &cache.proj_c {
        params.proj_c.backward(c, &d_chiral, &mut grad.proj_c);
    }
    if let Some(c) = &cache.proj_r {
        params.proj_r.backward(c, d_hr, &mut grad.proj_r);
    }
    if let Some(c) = &cache.proj_n {
        params.proj_n.backward(c, d_hn, &mut grad.proj_n);
    }
    cache
        .kernels
        .iter()
        .enumerate()
        .map(|(row, kc)| params.kernels.backward(kc, d_chiral.row(row), &mut grad.kernels))
        .collect()
}

/// Pushes `∂L/∂M` of one unit back onto atom coordinates.
pub fn chirality_matrix_backward(unit: &ChiralUnit, d_mc: &Matrix, d_coords: &mut [Vec3]) {
    let [r1, r2, r3, r4] = unit.related;
    let centers = unit.center.atoms();
    let share = 1.0 / centers.len() as f64;
    for k in 0..3 {
        let (a, b, c) = (d_mc[(0, k)], d_mc[(1, k)], d_mc[(2, k)]);
        d_coords[r1][k] += a;
        d_coords[r2][k] += b;
        d_coords[r4][k] += c;
        d_coords[r3][k] -= c;
        for &i in &centers {
            d_coords[i][k] -= share * (a + b);
        }
    }
}
