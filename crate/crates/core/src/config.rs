//! Run configuration: every tunable in one flat `key = value` namespace.
//!
//! Files hold one pair per line; `#` starts a comment. Unknown keys and
//! repeated keys are errors. Values are applied over [`RunConfig::default`],
//! and command-line overrides are applied over the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::DatasetSpec;
use crate::error::{MpnError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("n_videos", "number of generated videos"),
    ("segments", "segments per video (T)"),
    ("classes", "event categories (C)"),
    ("regions", "spatial regions per segment (R)"),
    ("visual_dim", "visual feature width (p)"),
    ("audio_dim", "audio feature width (q)"),
    ("noise_sigma", "standard deviation of the additive Gaussian noise"),
    ("signal_gain", "scale applied to class prototypes on event segments"),
    ("min_event_len", "shortest event span in segments"),
    ("data_seed", "generator seed"),
    ("d_model", "co-attention width"),
    ("n_heads", "attention heads"),
    ("d_k", "query/key width per head"),
    ("d_v", "value width per head"),
    ("ff_hidden", "feed-forward hidden width in attention blocks"),
    ("n_mcm", "stacked co-attention modules"),
    ("fbc_rank", "rank of each bilinear factor"),
    ("fbc_atoms", "fused code width (k); must equal d_model"),
    ("lasso_lambda", "soft-threshold strength on fused codes"),
    ("agva_hidden", "hidden width of audio-guided spatial attention"),
    ("classifier_hidden", "hidden width of the category head"),
    ("relevance_hidden", "hidden width of the relevance heads"),
    ("network", "full | classification | localization"),
    ("mcm_order", "SA+SA | CMA+CMA | CMA+SA | SA+CMA"),
    ("squeeze", "fbc | concat | product | addition"),
    ("local_to_global", "apply bottleneck gates to co-attention outputs (true/false)"),
    ("loss_lambda", "weight of the relevance term in the supervised loss"),
    ("learning_rate", "optimizer step size"),
    ("epochs", "training epochs"),
    ("batch_size", "videos per optimizer step"),
    ("seed", "parameter initialisation and shuffling seed"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "optimizer denominator epsilon"),
    ("tau_start", "softmax temperature at epoch 0"),
    ("tau_end", "softmax temperature after annealing"),
    ("anneal_epochs", "epochs over which the temperature decays"),
    ("regime", "full | weak"),
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MpnError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MpnError::Config(format!("invalid value {value:?} for {key} (expected true or false)"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, m, t) = (&mut self.data, &mut self.model, &mut self.train);
        match key {
            "n_videos" => d.n_videos = parse(key, v)?,
            "segments" => d.segments = parse(key, v)?,
            "classes" => d.classes = parse(key, v)?,
            "regions" => d.regions = parse(key, v)?,
            "visual_dim" => d.visual_dim = parse(key, v)?,
            "audio_dim" => d.audio_dim = parse(key, v)?,
            "noise_sigma" => d.noise_sigma = parse(key, v)?,
            "signal_gain" => d.signal_gain = parse(key, v)?,
            "min_event_len" => d.min_event_len = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "d_model" => m.attention.d_model = parse(key, v)?,
            "n_heads" => m.attention.n_heads = parse(key, v)?,
            "d_k" => m.attention.d_k = parse(key, v)?,
            "d_v" => m.attention.d_v = parse(key, v)?,
            "ff_hidden" => m.attention.ff_hidden = parse(key, v)?,
            "n_mcm" => m.attention.n_mcm = parse(key, v)?,
            "fbc_rank" => m.fbc.rank = parse(key, v)?,
            "fbc_atoms" => m.fbc.atoms = parse(key, v)?,
            "lasso_lambda" => m.fbc.lasso_lambda = parse(key, v)?,
            "agva_hidden" => m.agva_hidden = parse(key, v)?,
            "classifier_hidden" => m.classifier_hidden = parse(key, v)?,
            "relevance_hidden" => m.relevance_hidden = parse(key, v)?,
            "network" => m.network = v.parse()?,
            "mcm_order" => m.mcm_order = v.parse()?,
            "squeeze" => m.squeeze = v.parse()?,
            "local_to_global" => m.local_to_global = parse_bool(key, v)?,
            "loss_lambda" => t.loss_lambda = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "tau_start" => t.schedule.tau_start = parse(key, v)?,
            "tau_end" => t.schedule.tau_end = parse(key, v)?,
            "anneal_epochs" => t.schedule.anneal_epochs = parse(key, v)?,
            "regime" => t.regime = v.parse()?,
            _ => return Err(MpnError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        Some(match key {
            "n_videos" => d.n_videos.to_string(),
            "segments" => d.segments.to_string(),
            "classes" => d.classes.to_string(),
            "regions" => d.regions.to_string(),
            "visual_dim" => d.visual_dim.to_string(),
            "audio_dim" => d.audio_dim.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "signal_gain" => d.signal_gain.to_string(),
            "min_event_len" => d.min_event_len.to_string(),
            "data_seed" => d.seed.to_string(),
            "d_model" => m.attention.d_model.to_string(),
            "n_heads" => m.attention.n_heads.to_string(),
            "d_k" => m.attention.d_k.to_string(),
            "d_v" => m.attention.d_v.to_string(),
            "ff_hidden" => m.attention.ff_hidden.to_string(),
            "n_mcm" => m.attention.n_mcm.to_string(),
            "fbc_rank" => m.fbc.rank.to_string(),
            "fbc_atoms" => m.fbc.atoms.to_string(),
            "lasso_lambda" => m.fbc.lasso_lambda.to_string(),
            "agva_hidden" => m.agva_hidden.to_string(),
            "classifier_hidden" => m.classifier_hidden.to_string(),
            "relevance_hidden" => m.relevance_hidden.to_string(),
            "network" => m.network.to_string(),
            "mcm_order" => m.mcm_order.to_string(),
            "squeeze" => m.squeeze.to_string(),
            "local_to_global" => m.local_to_global.to_string(),
            "loss_lambda" => t.loss_lambda.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "tau_start" => t.schedule.tau_start.to_string(),
            "tau_end" => t.schedule.tau_end.to_string(),
            "anneal_epochs" => t.schedule.anneal_epochs.to_string(),
            "regime" => t.regime.to_string(),
            _ => return None,
        })
    }

    /// Apply the pairs in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MpnError::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(MpnError::Config(format!("line {}: key {key:?} given twice", no + 1)));
            }
            self.set(key, value)
                .map_err(|e| MpnError::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Architecture derived from the run settings; data geometry feeds the
    /// model's input widths.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        m.classes = self.data.classes;
        m.regions = self.data.regions;
        m.fbc.p = self.data.visual_dim;
        m.fbc.q = self.data.audio_dim;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train.validate()
    }
}
