use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{argmax, backward, cosine_lr, cross_entropy, forward, forward_pass, margin_rank, Adam, ModelParams, TrainConfig};
use crate::encoder::{regularization_backward, regularization_loss, retract_orthonormal, RankStrategy};
use crate::data::LabeledMolecule;
use crate::error::{Error, Result};
use crate::geometry::Molecule;
use crate::nn::Params;

/// Examples per parallel work unit. Fixed so that gradient sums are reduced in
/// the same order regardless of thread count.
const CHUNK: usize = 4;

/// Enantiomer pair where `hi` should score above `lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPair {
    pub hi: Molecule,
    pub lo: Molecule,
}

/// Per-epoch metrics, printed as one `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub l_reg: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} train_acc={:.4} val_acc=",
            self.epoch, self.train_loss, self.train_acc
        )?;
        match self.val_acc {
            Some(v) => write!(f, "{v:.4}")?,
            None => f.write_str("nan")?,
        }
        write!(f, " lr={:.6e} l_reg={:.6e}", self.lr, self.l_reg)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    /// Total loss after every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: Adam,
    pub cfg: TrainConfig,
}

type ExampleFn<'a, E> = dyn Fn(&ModelParams, &E, &mut ModelParams) -> Result<(f64, f64)> + Sync + 'a;

impl Trainer {
    pub fn new(params: ModelParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(params.num_params());
        Ok(Trainer { params, adam, cfg })
    }

    /// One optimizer step on `batch`. `example` accumulates the gradient of a
    /// single example and returns `(loss, correct)`. Returns the batch mean
    /// loss (including the orthogonality penalty when active) and the number
    /// of correct examples.
    pub fn step<E: Sync>(&mut self, batch: &[&E], example: &ExampleFn<'_, E>, lr: f64) -> Result<(f64, f64)> {
        let params = &self.params;
        let parts = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = params.zeros_like();
                let mut loss = 0.0;
                let mut correct = 0.0;
                for e in chunk {
                    let (l, c) = example(params, e, &mut grad)?;
                    loss += l;
                    correct += c;
                }
                Ok((grad, loss, correct))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        let mut correct = 0.0;
        for (g, l, c) in &parts {
            grad.add_scaled(g, 1.0);
            loss += l;
            correct += c;
        }
        let n = batch.len() as f64;
        let mut flat = grad.flat();
        flat.iter_mut().for_each(|v| *v /= n);
        grad.set_flat(&flat);
        loss /= n;

        if self.params.config.rank_strategy == RankStrategy::Regularize && self.cfg.reg_weight > 0.0 {
            loss += self.cfg.reg_weight * regularization_loss(&self.params.encoder.kernels);
            regularization_backward(&self.params.encoder.kernels, self.cfg.reg_weight, &mut grad.encoder.kernels);
        }
        let step = self.adam.step as usize + 1;
        if !loss.is_finite() || !grad.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        self.adam.update(&mut self.params, &grad.flat(), lr);
        if self.params.config.rank_strategy == RankStrategy::QrRetraction {
            self.params.encoder.kernels = retract_orthonormal(&self.params.encoder.kernels)?;
        }
        Ok((loss, correct))
    }

    fn run<E: Sync>(
        &mut self,
        train: &[E],
        example: &ExampleFn<'_, E>,
        validate: &dyn Fn(&ModelParams) -> Result<Option<f64>>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let batches_per_epoch = train.len().div_ceil(self.cfg.batch_size);
        let total = batches_per_epoch * self.cfg.epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.config.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut report = TrainReport::default();
        let mut lr = self.cfg.lr;
        for epoch in 1..=self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0.0;
            for batch_idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&E> = batch_idx.iter().map(|&i| &train[i]).collect();
                report.steps += 1;
                lr = cosine_lr(self.cfg.lr, self.cfg.min_lr_factor, report.steps, total);
                let (loss, c) = self.step(&batch, example, lr)?;
                report.step_losses.push(loss);
                loss_sum += loss * batch.len() as f64;
                correct += c;
            }
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_acc: correct / train.len() as f64,
                val_acc: validate(&self.params)?,
                lr,
                l_reg: regularization_loss(&self.params.encoder.kernels),
            };
            on_epoch(&record);
            report.records.push(record);
        }
        Ok(report)
    }
}

/// Cross-entropy gradient of one labeled molecule; returns `(loss, correct)`.
pub fn classify_example(params: &ModelParams, e: &LabeledMolecule, grad: &mut ModelParams) -> Result<(f64, f64)> {
    if e.label >= params.config.n_classes {
        return Err(Error::Argument(format!(
            "label {} outside [0, {})",
            e.label, params.config.n_classes
        )));
    }
    let pass = forward_pass(params, &e.mol)?;
    let (loss, d_logits) = cross_entropy(&pass.logits, e.label);
    backward(params, &pass, &d_logits, grad);
    let correct = (argmax(&pass.logits) == e.label) as u8 as f64;
    Ok((loss, correct))
}

/// Cross-entropy training with optional validation accuracy per epoch.
pub fn train_classifier(
    trainer: &mut Trainer,
    train: &[LabeledMolecule],
    val: &[LabeledMolecule],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let validate = |p: &ModelParams| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            evaluate_accuracy(p, val).map(Some)
        }
    };
    trainer.run(train, &classify_example, &validate, on_epoch)
}

/// Margin ranking on co-batched pairs with a single-output head.
pub fn train_ranking(
    trainer: &mut Trainer,
    train: &[RankPair],
    val: &[RankPair],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if trainer.params.config.n_classes != 1 {
        return Err(Error::Argument("ranking needs n_classes = 1".into()));
    }
    let margin = trainer.cfg.margin;
    let weight = trainer.cfg.margin_weight;
    let example = move |p: &ModelParams, e: &RankPair, grad: &mut ModelParams| -> Result<(f64, f64)> {
        let hi = forward_pass(p, &e.hi)?;
        let lo = forward_pass(p, &e.lo)?;
        let (loss, d_hi, d_lo) = margin_rank(hi.logits[0], lo.logits[0], margin);
        if loss > 0.0 {
            backward(p, &hi, &[weight * d_hi], grad);
            backward(p, &lo, &[weight * d_lo], grad);
        }
        Ok((weight * loss, (hi.logits[0] > lo.logits[0]) as u8 as f64))
    };
    let validate = |p: &ModelParams| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let hits = val
            .par_iter()
            .map(|e| Ok((forward(p, &e.hi)?[0] > forward(p, &e.lo)?[0]) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(hits.iter().sum::<usize>() as f64 / val.len() as f64))
    };
    trainer.run(train, &example, &validate, on_epoch)
}

/// Fraction of molecules whose argmax matches the label.
pub fn evaluate_accuracy(params: &ModelParams, data: &[LabeledMolecule]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let hits = data
        .par_iter()
        .map(|e| Ok((argmax(&forward(params, &e.mol)?) == e.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}
