use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetConfig, SplitRatios, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig};

/// Everything one training run needs besides the data.
///
/// `model.nodes`, `model.c_in` and `model.n_d` are taken from the dataset
/// when the model is built; the values stored here are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub ratios: SplitRatios,
    /// Adjacency kernel threshold.
    pub theta: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            clip_norm: 5.0,
            ratios: SplitRatios::default(),
            theta: DEFAULT_THETA,
            model: ModelConfig::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order [`TrainConfig::to_text`] writes them.
pub const CONFIG_KEYS: [&str; 29] = [
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "clip_norm",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "theta",
    "t_in",
    "t_out",
    "c_out",
    "d_f",
    "d_a",
    "d_n",
    "layers",
    "heads",
    "ffn_mult",
    "fusion_layers",
    "armsa_layers",
    "dropout",
    "no_adaptive",
    "no_transformer",
    "no_forward_graph",
    "no_backward_graph",
    "no_graphs",
    "no_augmented_residual",
    "variant",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. `variant` replaces all ablation flags with a named variant.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut m.ablations;
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "train_ratio" => self.ratios.train = parse(key, value)?,
            "val_ratio" => self.ratios.val = parse(key, value)?,
            "test_ratio" => self.ratios.test = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "t_in" => m.t_in = parse(key, value)?,
            "t_out" => m.t_out = parse(key, value)?,
            "c_out" => m.c_out = parse(key, value)?,
            "d_f" => m.d_f = parse(key, value)?,
            "d_a" => m.d_a = parse(key, value)?,
            "d_n" => m.d_n = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "fusion_layers" => m.fusion_layers = parse(key, value)?,
            "armsa_layers" => m.armsa_layers = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "no_adaptive" => a.no_adaptive = parse_bool(key, value)?,
            "no_transformer" => a.no_transformer = parse_bool(key, value)?,
            "no_forward_graph" => a.no_forward_graph = parse_bool(key, value)?,
            "no_backward_graph" => a.no_backward_graph = parse_bool(key, value)?,
            "no_graphs" => a.no_graphs = parse_bool(key, value)?,
            "no_augmented_residual" => a.no_augmented_residual = parse_bool(key, value)?,
            "variant" => *a = Ablations::variant(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            )));
        }
        SplitRatios::new(self.ratios.train, self.ratios.val, self.ratios.test)?;
        self.model.validate()
    }

    /// Serializes every key; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &m.ablations;
        let mut out = String::new();
        let values: [String; 28] = [
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.clip_norm.to_string(),
            self.ratios.train.to_string(),
            self.ratios.val.to_string(),
            self.ratios.test.to_string(),
            self.theta.to_string(),
            m.t_in.to_string(),
            m.t_out.to_string(),
            m.c_out.to_string(),
            m.d_f.to_string(),
            m.d_a.to_string(),
            m.d_n.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.ffn_mult.to_string(),
            m.fusion_layers.to_string(),
            m.armsa_layers.to_string(),
            m.dropout.to_string(),
            a.no_adaptive.to_string(),
            a.no_transformer.to_string(),
            a.no_forward_graph.to_string(),
            a.no_backward_graph.to_string(),
            a.no_graphs.to_string(),
            a.no_augmented_residual.to_string(),
        ];
        for (key, value) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            t_in: self.model.t_in,
            t_out: self.model.t_out,
            ratios: self.ratios,
            c_out: self.model.c_out,
        }
    }

    /// The model configuration completed with the dataset's shape.
    pub fn model_config(&self, nodes: usize, c_in: usize, n_d: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            c_in,
            n_d,
            ..self.model.clone()
        }
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
