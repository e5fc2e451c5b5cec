//! Experiment configuration: one serializable record covering data,
//! model, optimizer, balancing, and run settings.
//!
//! The on-disk format is plain `key = value` lines with dot-path keys
//! (`data.snr.R = 8`), `#` comments, unknown keys rejected. The same
//! dot-path syntax drives `--set` overrides, and the effective config is
//! echoed back in this format.

use serde::{Deserialize, Serialize};

use crate::balance::AwcConfig;
use crate::data::{DataConfig, Nonlinearity};
use crate::error::{Error, Result};
use crate::models::{CoalitionMask, FusionKind, ModalityId, ModelConfig, ALL_MODALITIES};
use crate::trainer::OptimHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub fusion: FusionKind,
    pub hidden: Vec<usize>,
    pub unified_dim: usize,
    pub attn_layers: usize,
    pub output_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            fusion: m.fusion,
            hidden: m.hidden,
            unified_dim: m.unified_dim,
            attn_layers: m.attn_layers,
            output_scale: m.output_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Score every n-th batch; 0 disables Shapley scoring.
    pub score_every: usize,
    /// Active modalities during training/evaluation, e.g. "RLMW" or "R".
    pub modalities: String,
    /// Progress lines every n epochs on stderr; 0 is silent.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 40,
            seed: 0,
            batch_size: 64,
            score_every: 1,
            modalities: "RLMW".into(),
            log_every: 0,
        }
    }
}

impl RunConfig {
    pub fn mask(&self) -> Result<CoalitionMask> {
        let mut mask = CoalitionMask::EMPTY;
        for c in self.modalities.chars() {
            let m = ModalityId::from_char(c)
                .ok_or_else(|| Error::Config(format!("run.modalities: unknown modality `{c}`")))?;
            mask = mask.with(m);
        }
        if mask.is_empty() {
            return Err(Error::Config("run.modalities must name at least one modality".into()));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub optim: OptimHyper,
    pub balance: AwcConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Model shape derived from the data and model sections; input dims
    /// and joints always track the data config.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dims: self.data.input_dims,
            hidden: self.model.hidden.clone(),
            unified_dim: self.model.unified_dim,
            joints: self.data.joints,
            fusion: self.model.fusion,
            attn_layers: self.model.attn_layers,
            output_scale: self.model.output_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.balance.validate()?;
        if self.run.batch_size < 2 {
            return Err(Error::Config("run.batch_size must be >= 2".into()));
        }
        self.run.mask()?;
        if self.balance.window_epochs > 0 && self.run.score_every == 0 {
            return Err(Error::Config(
                "balance.window_epochs > 0 needs run.score_every >= 1 (partitions come from Shapley scores)"
                    .into(),
            ));
        }
        if self.model.unified_dim == 0 || self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("model dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse the key-value format. The four `data.snr.*` keys are
    /// required (the imbalance profile is the experiment); everything
    /// else falls back to defaults.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut snr_seen = [false; 4];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            cfg.apply_set(key, value.trim())?;
            if let Some(ms) = key.strip_prefix("data.snr.") {
                if let Some(m) = ms.chars().next().and_then(ModalityId::from_char) {
                    snr_seen[m.index()] = true;
                }
            }
        }
        for m in ALL_MODALITIES {
            if !snr_seen[m.index()] {
                return Err(Error::Config(format!("missing required key `data.snr.{m}`")));
            }
        }
        Ok(cfg)
    }

    /// Apply one `key = value` override by dot path.
    pub fn apply_set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key `{key}`: invalid {what} `{value}`"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("integer"));
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad("integer"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("number"));

        if let Some(ms) = key.strip_prefix("data.snr.") {
            let m = single_modality(ms, key)?;
            self.data.snr[m] = parse_f64(value)?;
            return Ok(());
        }
        if let Some(ms) = key.strip_prefix("data.input_dim.") {
            let m = single_modality(ms, key)?;
            self.data.input_dims[m] = parse_usize(value)?;
            return Ok(());
        }
        match key {
            "data.n_samples" => self.data.n_samples = parse_usize(value)?,
            "data.joints" => self.data.joints = parse_usize(value)?,
            "data.latent_dim" => self.data.latent_dim = parse_usize(value)?,
            "data.seed" => self.data.seed = parse_u64(value)?,
            "data.nonlinearity" => {
                self.data.nonlinearity = match value {
                    "none" => Nonlinearity::None,
                    "tanh" => Nonlinearity::TanhLike,
                    _ => return Err(bad("nonlinearity (none|tanh)")),
                }
            }
            "model.fusion" => self.model.fusion = FusionKind::parse(value)?,
            "model.hidden" => {
                self.model.hidden = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad("width list")))
                    .collect::<Result<Vec<_>>>()?;
            }
            "model.unified_dim" => self.model.unified_dim = parse_usize(value)?,
            "model.attn_layers" => self.model.attn_layers = parse_usize(value)?,
            "model.output_scale" => self.model.output_scale = parse_f64(value)?,
            "optim.lr" => self.optim.lr = parse_f64(value)?,
            "optim.beta1" => self.optim.beta1 = parse_f64(value)?,
            "optim.beta2" => self.optim.beta2 = parse_f64(value)?,
            "optim.eps" => self.optim.eps = parse_f64(value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(value)?,
            "optim.lr_decay_every" => self.optim.lr_decay_every = parse_usize(value)?,
            "optim.lr_decay_factor" => self.optim.lr_decay_factor = parse_f64(value)?,
            "balance.alpha_superior" => self.balance.alpha_superior = parse_f64(value)?,
            "balance.alpha_inferior" => self.balance.alpha_inferior = parse_f64(value)?,
            "balance.window_epochs" => self.balance.window_epochs = parse_usize(value)?,
            "balance.fim_sample_size" => self.balance.fim_sample_size = parse_usize(value)?,
            "run.epochs" => self.run.epochs = parse_usize(value)?,
            "run.seed" => self.run.seed = parse_u64(value)?,
            "run.batch_size" => self.run.batch_size = parse_usize(value)?,
            "run.score_every" => self.run.score_every = parse_usize(value)?,
            "run.modalities" => self.run.modalities = value.to_string(),
            "run.log_every" => self.run.log_every = parse_usize(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Effective config in the same key-value format, echoed into output
    /// directories.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("data.n_samples", self.data.n_samples.to_string());
        push("data.joints", self.data.joints.to_string());
        push("data.latent_dim", self.data.latent_dim.to_string());
        push("data.seed", self.data.seed.to_string());
        push(
            "data.nonlinearity",
            match self.data.nonlinearity {
                Nonlinearity::None => "none".into(),
                Nonlinearity::TanhLike => "tanh".into(),
            },
        );
        for m in ALL_MODALITIES {
            push(&format!("data.input_dim.{m}"), self.data.input_dims[m].to_string());
        }
        for m in ALL_MODALITIES {
            push(&format!("data.snr.{m}"), self.data.snr[m].to_string());
        }
        push("model.fusion", self.model.fusion.name().to_string());
        push(
            "model.hidden",
            self.model
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("model.unified_dim", self.model.unified_dim.to_string());
        push("model.attn_layers", self.model.attn_layers.to_string());
        push("model.output_scale", self.model.output_scale.to_string());
        push("optim.lr", self.optim.lr.to_string());
        push("optim.beta1", self.optim.beta1.to_string());
        push("optim.beta2", self.optim.beta2.to_string());
        push("optim.eps", self.optim.eps.to_string());
        push("optim.weight_decay", self.optim.weight_decay.to_string());
        push("optim.lr_decay_every", self.optim.lr_decay_every.to_string());
        push("optim.lr_decay_factor", self.optim.lr_decay_factor.to_string());
        push("balance.alpha_superior", self.balance.alpha_superior.to_string());
        push("balance.alpha_inferior", self.balance.alpha_inferior.to_string());
        push("balance.window_epochs", self.balance.window_epochs.to_string());
        push("balance.fim_sample_size", self.balance.fim_sample_size.to_string());
        push("run.epochs", self.run.epochs.to_string());
        push("run.seed", self.run.seed.to_string());
        push("run.batch_size", self.run.batch_size.to_string());
        push("run.score_every", self.run.score_every.to_string());
        push("run.modalities", self.run.modalities.clone());
        push("run.log_every", self.run.log_every.to_string());
        out
    }
}

fn single_modality(s: &str, key: &str) -> Result<ModalityId> {
    let mut chars = s.chars();
    match (chars.next().and_then(ModalityId::from_char), chars.next()) {
        (Some(m), None) => Ok(m),
        _ => Err(Error::Config(format!("key `{key}`: unknown modality `{s}`"))),
    }
}
