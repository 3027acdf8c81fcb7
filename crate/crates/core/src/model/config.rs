use std::fmt::Write as _;

use crate::encoder::RankStrategy;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden width, also the number of determinant kernels.
    pub h: usize,
    pub d_p: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Gaussian channels in the distance kernel.
    pub n_gkpt: usize,
    pub d_f: usize,
    pub rank_strategy: RankStrategy,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            h: 64,
            d_p: 32,
            n_layers: 4,
            n_heads: 2,
            n_gkpt: 64,
            d_f: crate::data::FEATURE_DIM,
            rank_strategy: RankStrategy::QrRetraction,
            n_classes: 2,
            seed: 0,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            h: 8,
            d_p: 4,
            n_layers: 2,
            n_heads: 2,
            n_gkpt: 4,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Argument(msg));
        if self.h == 0 || self.n_heads == 0 || self.h % self.n_heads != 0 {
            return fail(format!("h = {} not divisible by H = {}", self.h, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("L must be at least 1".into());
        }
        // column centering removes one dimension of the projected slice
        if self.d_p < 4 {
            return fail(format!("d_p = {} must be at least 4", self.d_p));
        }
        if self.n_gkpt == 0 || self.d_f == 0 || self.n_classes == 0 {
            return fail("G, d_f and n_classes must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "h={}", self.h);
        let _ = writeln!(s, "d_p={}", self.d_p);
        let _ = writeln!(s, "L={}", self.n_layers);
        let _ = writeln!(s, "H={}", self.n_heads);
        let _ = writeln!(s, "G={}", self.n_gkpt);
        let _ = writeln!(s, "d_f={}", self.d_f);
        let _ = writeln!(s, "rank_strategy={}", self.rank_strategy);
        let _ = writeln!(s, "n_classes={}", self.n_classes);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Returns `false` for keys that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "h" => self.h = parse_num(value)?,
            "d_p" => self.d_p = parse_num(value)?,
            "L" | "n_layers" => self.n_layers = parse_num(value)?,
            "H" | "n_heads" => self.n_heads = parse_num(value)?,
            "G" | "n_gkpt" => self.n_gkpt = parse_num(value)?,
            "d_f" => self.d_f = parse_num(value)?,
            "rank_strategy" => {
                self.rank_strategy = value.parse().map_err(|e: Error| e.to_string())?
            }
            "n_classes" => self.n_classes = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reg_weight: f64,
    pub margin_weight: f64,
    pub margin: f64,
    pub min_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            epochs: 10,
            batch_size: 32,
            reg_weight: 0.1,
            margin_weight: 1.0,
            margin: 0.5,
            min_lr_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument(
                "lr must be positive, epochs and batch_size at least 1".into(),
            ));
        }
        if !(self.reg_weight >= 0.0 && self.margin_weight >= 0.0 && self.margin >= 0.0) {
            return Err(Error::Argument("loss weights and margin must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_factor) {
            return Err(Error::Argument("min_lr_factor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr={}\nepochs={}\nbatch_size={}\nreg_weight={}\nmargin_weight={}\nmargin={}\nmin_lr_factor={}\n",
            self.lr,
            self.epochs,
            self.batch_size,
            self.reg_weight,
            self.margin_weight,
            self.margin,
            self.min_lr_factor
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "lr" => self.lr = parse_num(value)?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "reg_weight" => self.reg_weight = parse_num(value)?,
            "margin_weight" => self.margin_weight = parse_num(value)?,
            "margin" => self.margin = parse_num(value)?,
            "min_lr_factor" => self.min_lr_factor = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}`"))
}

/// Applies `key=value` lines to both configs. Blank lines and `#` comments
/// are skipped; unknown keys are errors.
pub fn apply_config_text(text: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let known = match model.set(key, value).map_err(&parse_err)? {
            true => true,
            false => train.set(key, value).map_err(&parse_err)?,
        };
        if !known {
            return Err(parse_err(format!("unknown key `{key}`")));
        }
    }
    Ok(())
}
