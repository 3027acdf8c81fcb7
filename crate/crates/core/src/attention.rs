//! Distance-biased cross-attention from chiral queries to related and
//! non-chiral atoms.

use rand::Rng;

use crate::encoder::EncodedMolecule;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{glorot, LayerNorm, LayerNormCache, Linear, Mlp2, Mlp2Cache, Params, Tensor};
use crate::numerics::{norm3, sub3, Matrix, INV_SQRT_2PI};

/// Number of pair types: 0 for related atoms, 1 for non-chiral atoms.
pub const PAIR_TYPES: usize = 2;
pub const SIGMA_FLOOR: f64 = 1e-6;

pub const PAIR_RELATED: usize = 0;
pub const PAIR_NONCHIRAL: usize = 1;

/// Gaussian distance kernel conditioned on pair type, projected to heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GkptParams {
    /// `PAIR_TYPES × G`
    pub e1: Matrix,
    /// `PAIR_TYPES × G`
    pub e2: Matrix,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `G × H`
    pub w_p: Matrix,
}

impl GkptParams {
    /// Centers spread over 0–8 Å, unit affine per pair type.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, heads: usize) -> Self {
        GkptParams {
            e1: Matrix::from_fn(PAIR_TYPES, channels, |_, _| 1.0),
            e2: Matrix::zeros(PAIR_TYPES, channels),
            mu: (0..channels).map(|_| rng.gen_range(0.0..8.0)).collect(),
            sigma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            w_p: glorot(rng, channels, heads),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn heads(&self) -> usize {
        self.w_p.cols()
    }

    fn sigma_eff(&self, g: usize) -> f64 {
        self.sigma[g].max(SIGMA_FLOOR)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor::matrix(format!("{prefix}.e1"), &self.e1));
        out.push(Tensor::matrix(format!("{prefix}.e2"), &self.e2));
        out.push(Tensor::vector(format!("{prefix}.mu"), &self.mu));
        out.push(Tensor::vector(format!("{prefix}.sigma"), &self.sigma));
        out.push(Tensor::matrix(format!("{prefix}.w_p"), &self.w_p));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.e1.data_mut());
        out.push(self.e2.data_mut());
        out.push(self.mu.as_mut_slice());
        out.push(self.sigma.as_mut_slice());
        out.push(self.w_p.data_mut());
    }
}

impl Params for GkptParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("gkpt", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}

fn check_pair_type(pair_type: usize) -> Result<()> {
    if pair_type >= PAIR_TYPES {
        return Err(Error::Argument(format!(
            "pair type {pair_type} outside [0, {PAIR_TYPES})"
        )));
    }
    Ok(())
}

fn densities(params: &GkptParams, dist: f64, pair_type: usize) -> Vec<f64> {
    (0..params.channels())
        .map(|g| {
            let x = params.e1[(pair_type, g)] * dist + params.e2[(pair_type, g)];
            let s = params.sigma_eff(g);
            let z = (x - params.mu[g]) / s;
            INV_SQRT_2PI / s * (-0.5 * z * z).exp()
        })
        .collect()
}

/// Per-head bias for one (distance, pair type).
pub fn gkpt_bias(params: &GkptParams, dist: f64, pair_type: usize) -> Result<Vec<f64>> {
    check_pair_type(pair_type)?;
    if !(dist >= 0.0) {
        return Err(Error::Argument(format!("distance {dist} must be ≥ 0")));
    }
    let dens = densities(params, dist, pair_type);
    let mut out = vec![0.0; params.heads()];
    for (g, d) in dens.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(params.w_p.row(g)) {
            *o += d * w;
        }
    }
    Ok(out)
}

/// Accumulates `∂L/∂params` given `∂L/∂bias` for one entry.
pub fn gkpt_backward(
    params: &GkptParams,
    dist: f64,
    pair_type: usize,
    d_bias: &[f64],
    grad: &mut GkptParams,
) {
    for g in 0..params.channels() {
        let x = params.e1[(pair_type, g)] * dist + params.e2[(pair_type, g)];
        let clamped = params.sigma[g] < SIGMA_FLOOR;
        let s = params.sigma_eff(g);
        let z = (x - params.mu[g]) / s;
        let dens = INV_SQRT_2PI / s * (-0.5 * z * z).exp();
        let mut d_dens = 0.0;
        for h in 0..params.heads() {
            grad.w_p[(g, h)] += dens * d_bias[h];
            d_dens += params.w_p[(g, h)] * d_bias[h];
        }
        if d_dens == 0.0 {
            continue;
        }
        let dx = -d_dens * dens * z / s;
        grad.e1[(pair_type, g)] += dx * dist;
        grad.e2[(pair_type, g)] += dx;
        grad.mu[g] -= dx;
        if !clamped {
            grad.sigma[g] += d_dens * dens * (z * z - 1.0) / s;
        }
    }
}

/// Per-head `(1 + |I_c|) × |keys|` logit biases, token row first.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBias {
    pub heads: Vec<Matrix>,
}

impl PairBias {
    pub fn zeros(heads: usize, queries: usize, keys: usize) -> Self {
        PairBias {
            heads: vec![Matrix::zeros(queries, keys); heads],
        }
    }

    pub fn queries(&self) -> usize {
        self.heads.first().map_or(0, Matrix::rows)
    }

    pub fn keys(&self) -> usize {
        self.heads.first().map_or(0, Matrix::cols)
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Matrix::is_finite)
    }

    pub fn add_assign(&mut self, other: &PairBias) {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_assign(b);
        }
    }
}

/// Keys as `(position, pair type)` in key order.
fn key_geometry(enc: &EncodedMolecule) -> impl Iterator<Item = (Vec3, usize)> + '_ {
    enc.related_positions
        .iter()
        .map(|&p| (p, PAIR_RELATED))
        .chain(enc.nonchiral_positions.iter().map(|&p| (p, PAIR_NONCHIRAL)))
}

pub fn init_pair_bias(params: &GkptParams, enc: &EncodedMolecule) -> Result<PairBias> {
    let nq = enc.h_c.rows();
    let mut bias = PairBias::zeros(params.heads(), nq, enc.num_keys());
    for (i, &q) in enc.chiral_positions.iter().enumerate() {
        for (j, (k, pair_type)) in key_geometry(enc).enumerate() {
            let b = gkpt_bias(params, norm3(sub3(q, k)), pair_type)?;
            for (head, v) in b.into_iter().enumerate() {
                bias.heads[head][(i + 1, j)] = v;
            }
        }
    }
    Ok(bias)
}

pub fn init_pair_bias_backward(
    params: &GkptParams,
    enc: &EncodedMolecule,
    d_bias: &PairBias,
    grad: &mut GkptParams,
) {
    let mut upstream = vec![0.0; params.heads()];
    for (i, &q) in enc.chiral_positions.iter().enumerate() {
        for (j, (k, pair_type)) in key_geometry(enc).enumerate() {
            for (head, u) in upstream.iter_mut().enumerate() {
                *u = d_bias.heads[head][(i + 1, j)];
            }
            gkpt_backward(params, norm3(sub3(q, k)), pair_type, &upstream, grad);
        }
    }
}

/// One cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: usize,
    pub wq: Linear,
    pub wk_r: Linear,
    pub wv_r: Linear,
    pub wk_n: Linear,
    pub wv_n: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn: Mlp2,
    pub ln2: LayerNorm,
}

impl LayerParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Argument(format!(
                "hidden width {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(LayerParams {
            heads,
            wq: Linear::new(rng, hidden, hidden, false),
            wk_r: Linear::new(rng, hidden, hidden, false),
            wv_r: Linear::new(rng, hidden, hidden, false),
            wk_n: Linear::new(rng, hidden, hidden, false),
            wv_n: Linear::new(rng, hidden, hidden, false),
            wo: Linear::new(rng, hidden, hidden, true),
            ln1: LayerNorm::new(hidden),
            ffn: Mlp2::new(rng, hidden, 4 * hidden, hidden),
            ln2: LayerNorm::new(hidden),
        })
    }

    pub fn hidden(&self) -> usize {
        self.wq.in_dim()
    }

    fn head_dim(&self) -> usize {
        self.hidden() / self.heads
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.wq.push_tensors(&format!("{prefix}.wq"), out);
        self.wk_r.push_tensors(&format!("{prefix}.wk_r"), out);
        self.wv_r.push_tensors(&format!("{prefix}.wv_r"), out);
        self.wk_n.push_tensors(&format!("{prefix}.wk_n"), out);
        self.wv_n.push_tensors(&format!("{prefix}.wv_n"), out);
        self.wo.push_tensors(&format!("{prefix}.wo"), out);
        self.ln1.push_tensors(&format!("{prefix}.ln1"), out);
        self.ffn.push_tensors(&format!("{prefix}.ffn"), out);
        self.ln2.push_tensors(&format!("{prefix}.ln2"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.wq.push_tensors_mut(out);
        self.wk_r.push_tensors_mut(out);
        self.wv_r.push_tensors_mut(out);
        self.wk_n.push_tensors_mut(out);
        self.wv_n.push_tensors_mut(out);
        self.wo.push_tensors_mut(out);
        self.ln1.push_tensors_mut(out);
        self.ffn.push_tensors_mut(out);
        self.ln2.push_tensors_mut(out);
    }
}

impl Params for LayerParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors("layer", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.push_tensors_mut(&mut out);
        out
    }
}

#[derive(Debug, Clone)]
struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head softmax weights, `Nq × Nk`.
    weights: Vec<Matrix>,
    mixed: Matrix,
}

/// Saved state of one `attend` call.
#[derive(Debug, Clone)]
pub struct LayerCache {
    h_c: Matrix,
    h_r: Matrix,
    h_n: Matrix,
    attn: Option<AttentionCache>,
    ln1: LayerNormCache,
    ffn: Mlp2Cache,
    ln2: LayerNormCache,
}

impl LayerCache {
    /// Per-head softmax weights (empty when attention was skipped).
    pub fn weights(&self) -> &[Matrix] {
        self.attn.as_ref().map_or(&[], |a| a.weights.as_slice())
    }

    /// Softmax weights averaged over heads.
    pub fn head_averaged(&self) -> Option<Matrix> {
        let weights = self.weights();
        let first = weights.first()?;
        let mut avg = Matrix::zeros(first.rows(), first.cols());
        for w in weights {
            avg.add_assign(w);
        }
        avg.scale(1.0 / weights.len() as f64);
        Some(avg)
    }
}

fn head_slice(m: &Matrix, head: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |i, j| m[(i, head * width + j)])
}

fn add_head_slice(dst: &mut Matrix, src: &Matrix, head: usize, width: usize) {
    for i in 0..src.rows() {
        for j in 0..width {
            dst[(i, head * width + j)] += src[(i, j)];
        }
    }
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// One layer: multi-head cross-attention with additive pair bias, residual
/// and layer norm, then a feed-forward sublayer with residual and layer norm.
/// Returns the updated query rows, the pre-softmax logits (the next layer's
/// bias) and the cache for `attend_backward`.
///
/// Without keys only the token query is allowed; the attention sublayer then
/// contributes nothing and the token goes straight through the norms and the
/// feed-forward path.
pub fn attend(
    layer: &LayerParams,
    layer_index: usize,
    h_c: &Matrix,
    h_r: &Matrix,
    h_n: &Matrix,
    bias_in: &PairBias,
) -> Result<(Matrix, PairBias, LayerCache)> {
    let nq = h_c.rows();
    let nk = h_r.rows() + h_n.rows();
    if nk == 0 && nq > 1 {
        return Err(Error::Input(format!(
            "{} chiral queries but no key atoms",
            nq - 1
        )));
    }
    if bias_in.heads.len() != layer.heads || bias_in.queries() != nq || bias_in.keys() != nk {
        return Err(Error::Shape(format!(
            "pair bias is {}×{}×{}, expected {nq}×{nk}×{}",
            bias_in.queries(),
            bias_in.keys(),
            bias_in.heads.len(),
            layer.heads
        )));
    }

    let (pre_ln1, attn, bias_out) = if nk == 0 {
        (h_c.clone(), None, bias_in.clone())
    } else {
        let dh = layer.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = layer.wq.forward(h_c);
        let k = layer.wk_r.forward(h_r).vstack(&layer.wk_n.forward(h_n));
        let v = layer.wv_r.forward(h_r).vstack(&layer.wv_n.forward(h_n));
        let mut mixed = Matrix::zeros(nq, layer.hidden());
        let mut weights = Vec::with_capacity(layer.heads);
        let mut logits_all = Vec::with_capacity(layer.heads);
        for head in 0..layer.heads {
            let qh = head_slice(&q, head, dh);
            let kh = head_slice(&k, head, dh);
            let vh = head_slice(&v, head, dh);
            let mut logits = qh.matmul_t(&kh).scaled(scale);
            logits.add_assign(&bias_in.heads[head]);
            if !logits.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite attention logits in layer {layer_index}"
                )));
            }
            let a = softmax_rows(&logits);
            add_head_slice(&mut mixed, &a.matmul(&vh), head, dh);
            weights.push(a);
            logits_all.push(logits);
        }
        let out = layer.wo.forward(&mixed);
        let mut pre = h_c.clone();
        pre.add_assign(&out);
        (
            pre,
            Some(AttentionCache {
                q,
                k,
                v,
                weights,
                mixed,
            }),
            PairBias { heads: logits_all },
        )
    };
    let (u, ln1) = layer.ln1.forward(&pre_ln1);
    let (f, ffn) = layer.ffn.forward(&u);
    let mut pre_ln2 = u.clone();
    pre_ln2.add_assign(&f);
    let (out, ln2) = layer.ln2.forward(&pre_ln2);
    if !out.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite activations in layer {layer_index}"
        )));
    }
    Ok((
        out,
        bias_out,
        LayerCache {
            h_c: h_c.clone(),
            h_r: h_r.clone(),
            h_n: h_n.clone(),
            attn,
            ln1,
            ffn,
            ln2,
        },
    ))
}

/// Gradients flowing out of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_hc: Matrix,
    pub d_hr: Matrix,
    pub d_hn: Matrix,
    pub d_bias: PairBias,
}

/// Backward through `attend`. `d_out` is `∂L/∂h_c_out`; `d_bias_out` is
/// `∂L/∂bias_out`.
pub fn attend_backward(
    layer: &LayerParams,
    cache: &LayerCache,
    d_out: &Matrix,
    d_bias_out: &PairBias,
    grad: &mut LayerParams,
) -> LayerGrads {
    let d_pre_ln2 = layer.ln2.backward(&cache.ln2, d_out, &mut grad.ln2);
    let mut d_u = layer.ffn.backward(&cache.ffn, &d_pre_ln2, &mut grad.ffn);
    d_u.add_assign(&d_pre_ln2);
    let d_pre_ln1 = layer.ln1.backward(&cache.ln1, &d_u, &mut grad.ln1);

    let nq = cache.h_c.rows();
    let nr = cache.h_r.rows();
    let nn = cache.h_n.rows();
    let Some(attn) = &cache.attn else {
        return LayerGrads {
            d_hc: d_pre_ln1,
            d_hr: Matrix::zeros(nr, layer.hidden()),
            d_hn: Matrix::zeros(nn, layer.hidden()),
            d_bias: d_bias_out.clone(),
        };
    };

    let dh = layer.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let d_mixed = layer.wo.backward(&attn.mixed, &d_pre_ln1, &mut grad.wo);
    let nk = nr + nn;
    let mut d_q = Matrix::zeros(nq, layer.hidden());
    let mut d_k = Matrix::zeros(nk, layer.hidden());
    let mut d_v = Matrix::zeros(nk, layer.hidden());
    let mut d_bias = Vec::with_capacity(layer.heads);
    for head in 0..layer.heads {
        let a = &attn.weights[head];
        let qh = head_slice(&attn.q, head, dh);
        let kh = head_slice(&attn.k, head, dh);
        let vh = head_slice(&attn.v, head, dh);
        let d_oh = head_slice(&d_mixed, head, dh);
        let d_a = d_oh.matmul_t(&vh);
        add_head_slice(&mut d_v, &a.t_matmul(&d_oh), head, dh);
        let mut d_logits = Matrix::zeros(nq, nk);
        for i in 0..nq {
            let dot: f64 = (0..nk).map(|j| a[(i, j)] * d_a[(i, j)]).sum();
            for j in 0..nk {
                d_logits[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot);
            }
        }
        d_logits.add_assign(&d_bias_out.heads[head]);
        add_head_slice(&mut d_q, &d_logits.matmul(&kh).scaled(scale), head, dh);
        add_head_slice(&mut d_k, &d_logits.t_matmul(&qh).scaled(scale), head, dh);
        d_bias.push(d_logits);
    }

    let mut d_hc = layer.wq.backward(&cache.h_c, &d_q, &mut grad.wq);
    d_hc.add_assign(&d_pre_ln1);
    let split = |m: &Matrix, lo: usize, n: usize| {
        Matrix::from_fn(n, m.cols(), |i, j| m[(lo + i, j)])
    };
    let mut d_hr = layer.wk_r.backward(&cache.h_r, &split(&d_k, 0, nr), &mut grad.wk_r);
    d_hr.add_assign(&layer.wv_r.backward(&cache.h_r, &split(&d_v, 0, nr), &mut grad.wv_r));
    let mut d_hn = layer.wk_n.backward(&cache.h_n, &split(&d_k, nr, nn), &mut grad.wk_n);
    d_hn.add_assign(&layer.wv_n.backward(&cache.h_n, &split(&d_v, nr, nn), &mut grad.wv_n));

    LayerGrads {
        d_hc,
        d_hr,
        d_hn,
        d_bias: PairBias { heads: d_bias },
    }
}

/// Token row plus the mean of the chiral rows.
pub fn pool(h_c: &Matrix) -> Vec<f64> {
    let mut out = h_c.row(0).to_vec();
    let n = h_c.rows() - 1;
    if n == 0 {
        return out;
    }
    for i in 1..h_c.rows() {
        for (o, v) in out.iter_mut().zip(h_c.row(i)) {
            *o += v / n as f64;
        }
    }
    out
}

pub fn pool_backward(d_pooled: &[f64], rows: usize) -> Matrix {
    let n = rows - 1;
    Matrix::from_fn(rows, d_pooled.len(), |i, j| {
        if i == 0 {
            d_pooled[j]
        } else {
            d_pooled[j] / n as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_gradients, finite_diff_grad, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_gkpt(rng: &mut ChaCha8Rng, g: usize, h: usize) -> GkptParams {
        GkptParams {
            e1: Matrix::from_fn(2, g, |_, _| rng.gen_range(0.5..1.5)),
            e2: Matrix::from_fn(2, g, |_, _| rng.gen_range(-0.5..0.5)),
            mu: (0..g).map(|_| rng.gen_range(0.0..4.0)).collect(),
            sigma: (0..g).map(|_| rng.gen_range(0.5..1.5)).collect(),
            w_p: random_matrix(rng, g, h),
        }
    }

    #[test]
    fn gkpt_peak_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = 6;
        let mut p = random_gkpt(&mut rng, g, 3);
        p.e1 = Matrix::zeros(2, g);
        p.e2 = Matrix::from_fn(2, g, |_, j| p.mu[j]);
        p.sigma = vec![1.0; g];
        p.w_p = Matrix::from_fn(g, 3, |_, _| 1.0 / g as f64);
        for b in gkpt_bias(&p, 3.3, 0).unwrap() {
            assert!((b - 0.398942).abs() < 1e-6);
        }
    }

    #[test]
    fn gkpt_zero_projection_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_gkpt(&mut rng, 4, 2);
        p.w_p = Matrix::zeros(4, 2);
        assert_eq!(gkpt_bias(&p, 1.7, 1).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(gkpt_bias(&p, 1.0, 2), Err(Error::Argument(_))));
        assert!(matches!(gkpt_bias(&p, -1.0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn gkpt_matches_direct_formula_seed_41() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = random_gkpt(&mut rng, 8, 3);
        let got = gkpt_bias(&p, 2.37, 1).unwrap();
        for h in 0..3 {
            let mut expected = 0.0;
            for g in 0..8 {
                let x = p.e1[(1, g)] * 2.37 + p.e2[(1, g)];
                let s = p.sigma[g];
                let dens = (-(x - p.mu[g]).powi(2) / (2.0 * s * s)).exp()
                    / (s * (2.0 * std::f64::consts::PI).sqrt());
                expected += dens * p.w_p[(g, h)];
            }
            assert!((got[h] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gkpt_clamps_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_gkpt(&mut rng, 3, 2);
        p.sigma[1] = -4.0;
        assert!(gkpt_bias(&p, 0.5, 0).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gkpt_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_gkpt(&mut rng, 5, 3);
        let upstream = [0.3, -1.2, 0.7];
        for (dist, t) in [(1.3, 0), (2.9, 1), (0.0, 1)] {
            let mut grad = p.zeros_like();
            gkpt_backward(&p, dist, t, &upstream, &mut grad);
            let numeric = finite_diff_grad(
                |theta| {
                    let mut q = p.clone();
                    q.set_flat(theta);
                    let b = gkpt_bias(&q, dist, t).unwrap();
                    b.iter().zip(&upstream).map(|(x, u)| x * u).sum()
                },
                &p.flat(),
                1e-5,
            )
            .unwrap();
            let report = compare_gradients(&grad.flat(), &numeric, 1e-6);
            assert!(report.passed, "{report:?}");
        }
    }

    struct Instance {
        layer: LayerParams,
        h_c: Matrix,
        h_r: Matrix,
        h_n: Matrix,
        bias: PairBias,
    }

    fn instance(seed: u64, nc: usize, nr: usize, nn: usize, h: usize, heads: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = LayerParams::new(&mut rng, h, heads).unwrap();
        for ln in [&mut layer.ln1, &mut layer.ln2] {
            ln.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            ln.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
        if let Some(b) = &mut layer.wo.b {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
        let nq = nc + 1;
        Instance {
            h_c: random_matrix(&mut rng, nq, h),
            h_r: random_matrix(&mut rng, nr, h),
            h_n: random_matrix(&mut rng, nn, h),
            bias: PairBias {
                heads: (0..heads).map(|_| random_matrix(&mut rng, nq, nr + nn)).collect(),
            },
            layer,
        }
    }

    /// Straight-loop reference for the attention sublayer output (before the
    /// residual) and the softmax weights.
    fn dense_oracle(inst: &Instance) -> (Matrix, Vec<Matrix>) {
        let l = &inst.layer;
        let h = l.hidden();
        let dh = h / l.heads;
        let keys: Vec<(Vec<f64>, bool)> = (0..inst.h_r.rows())
            .map(|i| (inst.h_r.row(i).to_vec(), true))
            .chain((0..inst.h_n.rows()).map(|i| (inst.h_n.row(i).to_vec(), false)))
            .collect();
        let lin = |w: &Matrix, x: &[f64], o: usize| -> f64 {
            (0..x.len()).map(|c| w[(o, c)] * x[c]).sum()
        };
        let nq = inst.h_c.rows();
        let mut concat = vec![vec![0.0; h]; nq];
        let mut weights = Vec::new();
        for head in 0..l.heads {
            let mut a = Matrix::zeros(nq, keys.len());
            for i in 0..nq {
                let x = inst.h_c.row(i);
                let mut logits = Vec::new();
                for (j, (key, related)) in keys.iter().enumerate() {
                    let wk = if *related { &l.wk_r.w } else { &l.wk_n.w };
                    let mut s = 0.0;
                    for d in 0..dh {
                        let o = head * dh + d;
                        s += lin(&l.wq.w, x, o) * lin(wk, key, o);
                    }
                    logits.push(s / (dh as f64).sqrt() + inst.bias.heads[head][(i, j)]);
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for (j, v) in logits.iter().enumerate() {
                    a[(i, j)] = (v - m).exp() / z;
                }
                for d in 0..dh {
                    let o = head * dh + d;
                    for (j, (key, related)) in keys.iter().enumerate() {
                        let wv = if *related { &l.wv_r.w } else { &l.wv_n.w };
                        concat[i][o] += a[(i, j)] * lin(wv, key, o);
                    }
                }
            }
            weights.push(a);
        }
        let b = l.wo.b.as_ref().unwrap();
        let out = Matrix::from_fn(nq, h, |i, o| lin(&l.wo.w, &concat[i], o) + b[o]);
        (out, weights)
    }

    #[test]
    fn attention_matches_dense_oracle_seed_43() {
        let inst = instance(43, 2, 3, 2, 8, 2);
        let (out, bias_out, cache) =
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        let (attn_out, weights) = dense_oracle(&inst);
        for (a, b) in cache.weights().iter().zip(&weights) {
            assert!(a.max_abs_diff(b) < 1e-12);
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut pre = inst.h_c.clone();
        pre.add_assign(&attn_out);
        let (u, _) = inst.layer.ln1.forward(&pre);
        let (f, _) = inst.layer.ffn.forward(&u);
        let mut pre2 = u.clone();
        pre2.add_assign(&f);
        let (expected, _) = inst.layer.ln2.forward(&pre2);
        assert!(out.max_abs_diff(&expected) < 1e-10);
        assert_eq!(bias_out.heads.len(), 2);
    }

    #[test]
    fn single_key_gets_all_mass() {
        let inst = instance(5, 1, 1, 0, 8, 2);
        let (_, _, cache) =
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        for w in cache.weights() {
            for i in 0..w.rows() {
                assert_eq!(w[(i, 0)], 1.0);
            }
        }
    }

    #[test]
    fn large_bias_saturates() {
        let mut inst = instance(6, 2, 2, 3, 8, 2);
        for b in &mut inst.bias.heads {
            b.fill(0.0);
            for i in 0..b.rows() {
                b[(i, 3)] = 1e6;
            }
        }
        let (_, _, cache) =
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        for w in cache.weights() {
            for i in 0..w.rows() {
                assert!(w[(i, 3)] > 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn bias_telescopes_over_two_layers() {
        let inst = instance(7, 2, 2, 2, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let second = LayerParams::new(&mut rng, 8, 2).unwrap();
        let (h1, b1, _) = attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        let (_, b2, _) = attend(&second, 1, &h1, &inst.h_r, &inst.h_n, &b1).unwrap();
        let scores = |l: &LayerParams, hc: &Matrix, head: usize| {
            let q = head_slice(&l.wq.forward(hc), head, 4);
            let k = head_slice(
                &l.wk_r.forward(&inst.h_r).vstack(&l.wk_n.forward(&inst.h_n)),
                head,
                4,
            );
            q.matmul_t(&k).scaled(0.5)
        };
        for head in 0..2 {
            let mut unrolled = inst.bias.heads[head].clone();
            unrolled.add_assign(&scores(&inst.layer, &inst.h_c, head));
            unrolled.add_assign(&scores(&second, &h1, head));
            assert!(b2.heads[head].max_abs_diff(&unrolled) < 1e-12);
        }
    }

    #[test]
    fn key_permutation_within_class_is_invisible() {
        let inst = instance(9, 2, 3, 3, 8, 2);
        let (base, _, _) =
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        let perm_r = [2, 0, 1];
        let perm_n = [1, 2, 0];
        let mut cols: Vec<usize> = perm_r.to_vec();
        cols.extend(perm_n.iter().map(|p| p + 3));
        let bias = PairBias {
            heads: inst
                .bias
                .heads
                .iter()
                .map(|b| Matrix::from_fn(b.rows(), 6, |i, j| b[(i, cols[j])]))
                .collect(),
        };
        let (out, _, _) = attend(
            &inst.layer,
            0,
            &inst.h_c,
            &inst.h_r.select_rows(&perm_r),
            &inst.h_n.select_rows(&perm_n),
            &bias,
        )
        .unwrap();
        assert!(out.max_abs_diff(&base) < 1e-10);
    }

    #[test]
    fn token_only_and_missing_keys() {
        let inst = instance(10, 0, 0, 0, 8, 2);
        let (out, bias, cache) =
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(bias.keys(), 0);
        assert!(cache.weights().is_empty());

        let inst = instance(11, 2, 0, 0, 8, 2);
        assert!(matches!(
            attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(LayerParams::new(&mut rng, 8, 3).is_err());
    }

    fn flatten_inputs(inst: &Instance) -> Vec<f64> {
        let mut v = inst.h_c.data().to_vec();
        v.extend_from_slice(inst.h_r.data());
        v.extend_from_slice(inst.h_n.data());
        for b in &inst.bias.heads {
            v.extend_from_slice(b.data());
        }
        v
    }

    fn unflatten_inputs(inst: &Instance, v: &[f64]) -> Instance {
        let mut at = 0;
        let mut take = |m: &Matrix| {
            let out = Matrix::from_vec(m.rows(), m.cols(), v[at..at + m.data().len()].to_vec());
            at += m.data().len();
            out
        };
        let h_c = take(&inst.h_c);
        let h_r = take(&inst.h_r);
        let h_n = take(&inst.h_n);
        let heads = inst.bias.heads.iter().map(&mut take).collect();
        Instance {
            layer: inst.layer.clone(),
            h_c,
            h_r,
            h_n,
            bias: PairBias { heads },
        }
    }

    #[test]
    fn attend_backward_matches_finite_differences() {
        for (nc, nr, nn) in [(2, 3, 2), (0, 0, 0), (1, 0, 2)] {
            let inst = instance(43, nc, nr, nn, 8, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(44);
            let probe = random_matrix(&mut rng, nc + 1, 8);
            let probe_bias: Vec<Matrix> =
                (0..2).map(|_| random_matrix(&mut rng, nc + 1, nr + nn)).collect();
            let value = |i: &Instance| -> f64 {
                let (out, b, _) = attend(&i.layer, 0, &i.h_c, &i.h_r, &i.h_n, &i.bias).unwrap();
                let mut s: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
                for (m, p) in b.heads.iter().zip(&probe_bias) {
                    s += m.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>();
                }
                s
            };
            let (_, _, cache) =
                attend(&inst.layer, 0, &inst.h_c, &inst.h_r, &inst.h_n, &inst.bias).unwrap();
            let mut grad = inst.layer.zeros_like();
            let g = attend_backward(
                &inst.layer,
                &cache,
                &probe,
                &PairBias { heads: probe_bias.clone() },
                &mut grad,
            );

            let numeric = finite_diff_grad(
                |t| {
                    let mut layer = inst.layer.clone();
                    layer.set_flat(t);
                    value(&Instance { layer, ..unflatten_inputs(&inst, &flatten_inputs(&inst)) })
                },
                &inst.layer.flat(),
                1e-5,
            )
            .unwrap();
            let report = compare_gradients(&grad.flat(), &numeric, 1e-5);
            assert!(report.passed, "params ({nc},{nr},{nn}) {report:?}");

            let numeric = finite_diff_grad(
                |t| value(&unflatten_inputs(&inst, t)),
                &flatten_inputs(&inst),
                1e-5,
            )
            .unwrap();
            let mut analytic = g.d_hc.data().to_vec();
            analytic.extend_from_slice(g.d_hr.data());
            analytic.extend_from_slice(g.d_hn.data());
            for b in &g.d_bias.heads {
                analytic.extend_from_slice(b.data());
            }
            let report = compare_gradients(&analytic, &numeric, 1e-5);
            assert!(report.passed, "inputs ({nc},{nr},{nn}) {report:?}");
        }
    }

    #[test]
    fn pool_examples() {
        let t = Matrix::from_rows(&[[1.0, 2.0], [3.0, 5.0]]);
        assert_eq!(pool(&t), vec![4.0, 7.0]);
        let t = Matrix::from_rows(&[[1.0, 2.0], [3.0, 5.0], [3.0, 5.0]]);
        assert_eq!(pool(&t), vec![4.0, 7.0]);
        let t = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(pool(&t), vec![1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let m = random_matrix(&mut rng, 4, 5);
        let p = pool(&m);
        for j in 0..5 {
            let mean = (m[(1, j)] + m[(2, j)] + m[(3, j)]) / 3.0;
            assert!((p[j] - (m[(0, j)] + mean)).abs() < 1e-15);
        }
    }
}
