//! End-to-end model: encoder, attention stack and predictor head, plus
//! losses, optimization and persistence.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod train;

pub use checkpoint::{ensure_config, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{apply_config_text, ModelConfig, TrainConfig};
pub use loss::{argmax, cross_entropy, loss_classify, loss_margin_rank, margin_rank, mse};
pub use optim::{cosine_lr, trainable_mask, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    classify_example, evaluate_accuracy, train_classifier, train_ranking, EpochRecord, RankPair,
    TrainReport, Trainer,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, attend_backward, init_pair_bias, init_pair_bias_backward, pool, pool_backward,
    GkptParams, LayerCache, LayerParams, PairBias,
};
use crate::encoder::{encode_backward, encode_with_cache, EncodedMolecule, EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::{partition_atoms, Molecule};
use crate::nn::{Mlp2, Mlp2Cache, Params, Tensor};
use crate::numerics::Matrix;

/// All learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub gkpt: GkptParams,
    pub layers: Vec<LayerParams>,
    /// `h → h → n_classes`
    pub predictor: Mlp2,
}

impl ModelParams {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::new(&mut rng, config.d_f, config.h, config.d_p, config.rank_strategy)?;
        let gkpt = GkptParams::new(&mut rng, config.n_gkpt, config.n_heads);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::new(&mut rng, config.h, config.n_heads))
            .collect::<Result<Vec<_>>>()?;
        let predictor = Mlp2::new(&mut rng, config.h, config.h, config.n_classes);
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            gkpt,
            layers,
            predictor,
        })
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<Tensor<'a>>) {
        self.encoder.push_tensors("encoder", out);
        self.gkpt.push_tensors("gkpt", out);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.push_tensors(&format!("layer{l}"), out);
        }
        self.predictor.push_tensors("predictor", out);
    }
}

impl Params for ModelParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.push_tensors(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.encoder.push_tensors_mut(&mut out);
        self.gkpt.push_tensors_mut(&mut out);
        for layer in &mut self.layers {
            layer.push_tensors_mut(&mut out);
        }
        self.predictor.push_tensors_mut(&mut out);
        out
    }
}

/// Everything a forward pass produces, kept for the backward pass and for
/// inspection (embeddings, attention maps).
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub encoded: EncodedMolecule,
    encoder: EncoderCache,
    layers: Vec<LayerCache>,
    /// Query rows after the last layer.
    pub h_c: Matrix,
    pub pooled: Vec<f64>,
    predictor: Mlp2Cache,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    /// Final-layer softmax weights averaged over heads (`(1 + |I_c|) × keys`),
    /// or `None` when attention was skipped.
    pub fn final_attention(&self) -> Option<Matrix> {
        self.layers.last()?.head_averaged()
    }

    pub fn layer_caches(&self) -> &[LayerCache] {
        &self.layers
    }
}

pub fn forward_pass(params: &ModelParams, mol: &Molecule) -> Result<ForwardPass> {
    let partition = partition_atoms(mol)?;
    let (encoded, encoder) = encode_with_cache(&params.encoder, mol, &partition)?;
    let mut bias = init_pair_bias(&params.gkpt, &encoded)?;
    let mut h_c = encoded.h_c.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let (out, next_bias, cache) = attend(layer, l, &h_c, &encoded.h_r, &encoded.h_n, &bias)?;
        h_c = out;
        bias = next_bias;
        layers.push(cache);
    }
    let pooled = pool(&h_c);
    let (logits, predictor) = params
        .predictor
        .forward(&Matrix::from_vec(1, pooled.len(), pooled.clone()));
    let logits = logits.into_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits for `{}`", mol.id())));
    }
    Ok(ForwardPass {
        encoded,
        encoder,
        layers,
        h_c,
        pooled,
        predictor,
        logits,
    })
}

/// Output logits (length `n_classes`).
pub fn forward(params: &ModelParams, mol: &Molecule) -> Result<Vec<f64>> {
    forward_pass(params, mol).map(|f| f.logits)
}

/// Pooled molecule representation.
pub fn embed(params: &ModelParams, mol: &Molecule) -> Result<Vec<f64>> {
    forward_pass(params, mol).map(|f| f.pooled)
}

pub fn predict(params: &ModelParams, mol: &Molecule) -> Result<usize> {
    forward(params, mol).map(|l| argmax(&l))
}

/// Accumulates `∂L/∂θ` into `grad` given `∂L/∂logits`.
pub fn backward(params: &ModelParams, pass: &ForwardPass, d_logits: &[f64], grad: &mut ModelParams) {
    let d_logits = Matrix::from_vec(1, d_logits.len(), d_logits.to_vec());
    let d_pooled = params.predictor.backward(&pass.predictor, &d_logits, &mut grad.predictor);
    let mut d_hc = pool_backward(d_pooled.row(0), pass.h_c.rows());
    let enc = &pass.encoded;
    let mut d_hr = Matrix::zeros(enc.h_r.rows(), enc.h_r.cols());
    let mut d_hn = Matrix::zeros(enc.h_n.rows(), enc.h_n.cols());
    let mut d_bias = PairBias::zeros(params.config.n_heads, enc.h_c.rows(), enc.num_keys());
    for l in (0..params.layers.len()).rev() {
        let g = attend_backward(&params.layers[l], &pass.layers[l], &d_hc, &d_bias, &mut grad.layers[l]);
        d_hc = g.d_hc;
        d_hr.add_assign(&g.d_hr);
        d_hn.add_assign(&g.d_hn);
        d_bias = g.d_bias;
    }
    init_pair_bias_backward(&params.gkpt, enc, &d_bias, &mut grad.gkpt);
    encode_backward(&params.encoder, &pass.encoder, &d_hc, &d_hr, &d_hn, &mut grad.encoder);
}
