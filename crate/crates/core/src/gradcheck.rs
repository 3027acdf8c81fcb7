//! Finite-difference audit of every hand-written backward pass.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, attend_backward, init_pair_bias, init_pair_bias_backward, PairBias};
use crate::data::{gen_rs, SyntheticSpec};
use crate::encoder::{encode_backward, encode_with_cache, regularization_backward, regularization_loss};
use crate::error::{Error, Result};
use crate::geometry::{chirality_matrix, partition_atoms, Molecule};
use crate::model::{backward, cross_entropy, forward, forward_pass, loss_classify, ModelConfig, ModelParams};
use crate::nn::Params;
use crate::numerics::{compare_gradients, finite_diff_grad, random_matrix, Matrix};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const AUDIT_TOL: f64 = 1e-4;
/// Weight on the orthogonality penalty inside the `full` block.
const FULL_REG_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Kernel,
    LayerNorm,
    Encoder,
    Gkpt,
    Attention,
    Predictor,
    Reg,
    Full,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::Kernel,
        Block::LayerNorm,
        Block::Encoder,
        Block::Gkpt,
        Block::Attention,
        Block::Predictor,
        Block::Reg,
        Block::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Kernel => "kernel",
            Block::LayerNorm => "layer_norm",
            Block::Encoder => "encoder",
            Block::Gkpt => "gkpt",
            Block::Attention => "attention",
            Block::Predictor => "predictor",
            Block::Reg => "l_reg",
            Block::Full => "full",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Block::ALL.iter().map(|b| b.name()).collect();
                Error::Argument(format!("unknown block {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: Block,
    pub max_rel_error: f64,
    pub num_checked: usize,
    pub passed: bool,
}

impl fmt::Display for BlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} coords={:<5} max_rel={:.3e} {}",
            self.block.name(),
            self.num_checked,
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Shared fixtures: a model, a molecule with spectators and a probe RNG.
struct Fixture {
    params: ModelParams,
    mol: Molecule,
    label: usize,
    rng: ChaCha8Rng,
}

fn probe_sum(x: &Matrix, c: &Matrix) -> f64 {
    x.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn numeric_params<P: Params + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Result<Vec<f64>> {
    finite_diff_grad(
        |t| {
            let mut q = p.clone();
            q.set_flat(t);
            f(&q)
        },
        &p.flat(),
        FD_STEP,
    )
}

fn numeric_matrix(m: &Matrix, f: impl Fn(&Matrix) -> f64) -> Result<Vec<f64>> {
    finite_diff_grad(
        |t| f(&Matrix::from_vec(m.rows(), m.cols(), t.to_vec())),
        m.data(),
        FD_STEP,
    )
}

fn ok<T>(r: Result<T>) -> T {
    r.expect("audit fixture is non-singular")
}

fn kernel(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let bank = &fx.params.encoder.kernels;
    let mc = chirality_matrix(&fx.mol.chiral_units()[0], fx.mol.coords()).0;
    let w: Vec<f64> = (0..bank.k()).map(|_| fx.rng.gen_range(-1.0..1.0)).collect();
    let value = |b: &crate::encoder::KernelBank, m: &Matrix| -> f64 {
        let (d, _) = ok(b.forward(m));
        d.iter().zip(&w).map(|(x, y)| x * y).sum()
    };
    let (_, cache) = bank.forward(&mc)?;
    let mut grad = bank.zeros_like();
    let d_m = bank.backward(&cache, &w, &mut grad);
    let mut analytic = grad.flat();
    analytic.extend_from_slice(d_m.data());
    let mut numeric = numeric_params(bank, |b| value(b, &mc))?;
    numeric.extend(numeric_matrix(&mc, |m| value(bank, m))?);
    Ok((analytic, numeric))
}

fn layer_norm(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = fx.params.config.h;
    let mut ln = fx.params.layers[0].ln1.clone();
    ln.gamma.iter_mut().for_each(|g| *g = fx.rng.gen_range(0.5..1.5));
    ln.beta.iter_mut().for_each(|b| *b = fx.rng.gen_range(-0.3..0.3));
    let x = random_matrix(&mut fx.rng, 3, h);
    let c = random_matrix(&mut fx.rng, 3, h);
    let (_, cache) = ln.forward(&x);
    let mut grad = ln.zeros_like();
    let dx = ln.backward(&cache, &c, &mut grad);
    let mut analytic = grad.flat();
    analytic.extend_from_slice(dx.data());
    let mut numeric = numeric_params(&ln, |l| probe_sum(&l.forward(&x).0, &c))?;
    numeric.extend(numeric_matrix(&x, |m| probe_sum(&ln.forward(m).0, &c))?);
    Ok((analytic, numeric))
}

fn encoder(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let part = partition_atoms(&fx.mol)?;
    let enc = &fx.params.encoder;
    let (e, cache) = encode_with_cache(enc, &fx.mol, &part)?;
    let c_c = random_matrix(&mut fx.rng, e.h_c.rows(), e.h_c.cols());
    let c_r = random_matrix(&mut fx.rng, e.h_r.rows(), e.h_r.cols());
    let c_n = random_matrix(&mut fx.rng, e.h_n.rows(), e.h_n.cols());
    let mut grad = enc.zeros_like();
    encode_backward(enc, &cache, &c_c, &c_r, &c_n, &mut grad);
    let numeric = numeric_params(enc, |p| {
        let (e, _) = ok(encode_with_cache(p, &fx.mol, &part));
        probe_sum(&e.h_c, &c_c) + probe_sum(&e.h_r, &c_r) + probe_sum(&e.h_n, &c_n)
    })?;
    Ok((grad.flat(), numeric))
}

fn gkpt(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let part = partition_atoms(&fx.mol)?;
    let e = encode_with_cache(&fx.params.encoder, &fx.mol, &part)?.0;
    let g = &fx.params.gkpt;
    let bias = init_pair_bias(g, &e)?;
    let probe = PairBias {
        heads: bias.heads.iter().map(|b| random_matrix(&mut fx.rng, b.rows(), b.cols())).collect(),
    };
    let value = |b: &PairBias| -> f64 { b.heads.iter().zip(&probe.heads).map(|(x, c)| probe_sum(x, c)).sum() };
    let mut grad = g.zeros_like();
    init_pair_bias_backward(g, &e, &probe, &mut grad);
    let numeric = numeric_params(g, |p| value(&ok(init_pair_bias(p, &e))))?;
    Ok((grad.flat(), numeric))
}

fn attention(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let part = partition_atoms(&fx.mol)?;
    let e = encode_with_cache(&fx.params.encoder, &fx.mol, &part)?.0;
    let bias = init_pair_bias(&fx.params.gkpt, &e)?;
    let layer = &fx.params.layers[0];
    let (out, b_out, cache) = attend(layer, 0, &e.h_c, &e.h_r, &e.h_n, &bias)?;
    let c_out = random_matrix(&mut fx.rng, out.rows(), out.cols());
    let c_bias = PairBias {
        heads: b_out.heads.iter().map(|b| random_matrix(&mut fx.rng, b.rows(), b.cols())).collect(),
    };
    let value = |l: &crate::attention::LayerParams, h_c: &Matrix, h_r: &Matrix, h_n: &Matrix, b: &PairBias| -> f64 {
        let (o, bo, _) = ok(attend(l, 0, h_c, h_r, h_n, b));
        probe_sum(&o, &c_out) + bo.heads.iter().zip(&c_bias.heads).map(|(x, c)| probe_sum(x, c)).sum::<f64>()
    };
    let mut grad = layer.zeros_like();
    let g = attend_backward(layer, &cache, &c_out, &c_bias, &mut grad);
    let mut analytic = grad.flat();
    analytic.extend_from_slice(g.d_hc.data());
    analytic.extend_from_slice(g.d_hr.data());
    analytic.extend_from_slice(g.d_hn.data());
    for b in &g.d_bias.heads {
        analytic.extend_from_slice(b.data());
    }
    let mut numeric = numeric_params(layer, |l| value(l, &e.h_c, &e.h_r, &e.h_n, &bias))?;
    numeric.extend(numeric_matrix(&e.h_c, |m| value(layer, m, &e.h_r, &e.h_n, &bias))?);
    numeric.extend(numeric_matrix(&e.h_r, |m| value(layer, &e.h_c, m, &e.h_n, &bias))?);
    numeric.extend(numeric_matrix(&e.h_n, |m| value(layer, &e.h_c, &e.h_r, m, &bias))?);
    for head in 0..bias.heads.len() {
        numeric.extend(numeric_matrix(&bias.heads[head], |m| {
            let mut b = bias.clone();
            b.heads[head] = m.clone();
            value(layer, &e.h_c, &e.h_r, &e.h_n, &b)
        })?);
    }
    Ok((analytic, numeric))
}

fn predictor(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let pass = forward_pass(&fx.params, &fx.mol)?;
    let x = Matrix::from_vec(1, pass.pooled.len(), pass.pooled.clone());
    let mlp = &fx.params.predictor;
    let (y, cache) = mlp.forward(&x);
    let c = random_matrix(&mut fx.rng, y.rows(), y.cols());
    let mut grad = mlp.zeros_like();
    let dx = mlp.backward(&cache, &c, &mut grad);
    let mut analytic = grad.flat();
    analytic.extend_from_slice(dx.data());
    let mut numeric = numeric_params(mlp, |p| probe_sum(&p.forward(&x).0, &c))?;
    numeric.extend(numeric_matrix(&x, |m| probe_sum(&mlp.forward(m).0, &c))?);
    Ok((analytic, numeric))
}

fn reg(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    // start away from the orthonormal minimum, where the gradient vanishes
    let mut bank = fx.params.encoder.kernels.clone();
    for w in &mut bank.w {
        w.data_mut().iter_mut().for_each(|v| *v += 0.3 * fx.rng.gen_range(-1.0..1.0));
    }
    let mut grad = bank.zeros_like();
    regularization_backward(&bank, 1.0, &mut grad);
    let numeric = numeric_params(&bank, regularization_loss)?;
    Ok((grad.flat(), numeric))
}

fn full(fx: &mut Fixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = &fx.params;
    let loss = |q: &ModelParams| -> f64 {
        loss_classify(&ok(forward(q, &fx.mol)), fx.label)
            + FULL_REG_WEIGHT * regularization_loss(&q.encoder.kernels)
    };
    let pass = forward_pass(p, &fx.mol)?;
    let (_, d_logits) = cross_entropy(&pass.logits, fx.label);
    let mut grad = p.zeros_like();
    backward(p, &pass, &d_logits, &mut grad);
    regularization_backward(&p.encoder.kernels, FULL_REG_WEIGHT, &mut grad.encoder.kernels);
    let numeric = numeric_params(p, loss)?;
    Ok((grad.flat(), numeric))
}

/// Runs every block on `config` (its seed replaced by `seed`). The analytic
/// gradient of `sabotage`, if given, is deliberately corrupted as a negative
/// control.
pub fn run_gradcheck(config: &ModelConfig, seed: u64, sabotage: Option<Block>) -> Result<Vec<BlockReport>> {
    let config = ModelConfig { seed, ..config.clone() };
    let params = ModelParams::new(&config)?;
    let spec = SyntheticSpec { count: 1, spectators: 2..=2, seed, ..SyntheticSpec::default() };
    let sample = gen_rs(&spec)?.remove(0);
    let mut reports = Vec::with_capacity(Block::ALL.len());
    for block in Block::ALL {
        let mut fx = Fixture {
            params: params.clone(),
            mol: sample.mol.clone(),
            label: sample.label,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9),
        };
        let (mut analytic, numeric) = match block {
            Block::Kernel => kernel(&mut fx),
            Block::LayerNorm => layer_norm(&mut fx),
            Block::Encoder => encoder(&mut fx),
            Block::Gkpt => gkpt(&mut fx),
            Block::Attention => attention(&mut fx),
            Block::Predictor => predictor(&mut fx),
            Block::Reg => reg(&mut fx),
            Block::Full => full(&mut fx),
        }?;
        if sabotage == Some(block) {
            analytic.iter_mut().for_each(|g| *g *= 1.01);
        }
        let r = compare_gradients(&analytic, &numeric, AUDIT_TOL);
        reports.push(BlockReport {
            block,
            max_rel_error: r.max_rel_error,
            num_checked: analytic.len(),
            passed: r.passed,
        });
    }
    Ok(reports)
}
