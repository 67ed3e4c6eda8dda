//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Mse,
    Huber,
    Multi,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::Huber => "huber",
            LossMode::Multi => "multi",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "huber" => Ok(LossMode::Huber),
            "multi" => Ok(LossMode::Multi),
            other => Err(Error::Config(format!(
                "loss_mode must be one of mse, huber, multi (got {other:?})"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_hypergraph: bool,
    pub no_dynamic_weighting: bool,
    pub no_dynamic_tower: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub k_neighbors: usize,
    pub hg_layers: usize,
    pub seq_types: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub mask_dim: usize,
    pub n_task_experts: usize,
    pub n_shared_experts: usize,
    pub moe_layers: usize,
    pub expert_dim: usize,
    pub tower_hidden: usize,
    pub betas: [f64; 3],
    pub ablation: Ablation,
    pub loss_mode: LossMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 256,
            epochs: 20,
            lr: 3e-3,
            embed_dim: 8,
            k_neighbors: 8,
            hg_layers: 2,
            seq_types: 6,
            max_seq_len: 32,
            model_dim: 32,
            heads: 4,
            ffn_hidden: 64,
            mask_dim: 16,
            n_task_experts: 2,
            n_shared_experts: 2,
            moe_layers: 2,
            expert_dim: 32,
            tower_hidden: 16,
            betas: [1.0, 1.0, 1.0],
            ablation: Ablation::default(),
            loss_mode: LossMode::Multi,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "k_neighbors" => self.k_neighbors = parse_value(key, value)?,
            "hg_layers" => self.hg_layers = parse_value(key, value)?,
            "seq_types" => self.seq_types = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "model_dim" => self.model_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_value(key, value)?,
            "mask_dim" => self.mask_dim = parse_value(key, value)?,
            "n_task_experts" => self.n_task_experts = parse_value(key, value)?,
            "n_shared_experts" => self.n_shared_experts = parse_value(key, value)?,
            "moe_layers" => self.moe_layers = parse_value(key, value)?,
            "expert_dim" => self.expert_dim = parse_value(key, value)?,
            "tower_hidden" => self.tower_hidden = parse_value(key, value)?,
            "beta_js" => self.betas[0] = parse_value(key, value)?,
            "beta_ce" => self.betas[1] = parse_value(key, value)?,
            "beta_huber" => self.betas[2] = parse_value(key, value)?,
            "no_hypergraph" => self.ablation.no_hypergraph = parse_value(key, value)?,
            "no_dynamic_weighting" => self.ablation.no_dynamic_weighting = parse_value(key, value)?,
            "no_dynamic_tower" => self.ablation.no_dynamic_tower = parse_value(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("k_neighbors", self.k_neighbors),
            ("seq_types", self.seq_types),
            ("max_seq_len", self.max_seq_len),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("mask_dim", self.mask_dim),
            ("n_task_experts", self.n_task_experts),
            ("n_shared_experts", self.n_shared_experts),
            ("moe_layers", self.moe_layers),
            ("expert_dim", self.expert_dim),
            ("tower_hidden", self.tower_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.seq_types > 35 {
            return Err(Error::Config("seq_types is limited to 35".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        if self.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config(
                "betas must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text with every key materialized, in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("embed_dim", self.embed_dim.to_string());
        kv("k_neighbors", self.k_neighbors.to_string());
        kv("hg_layers", self.hg_layers.to_string());
        kv("seq_types", self.seq_types.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("model_dim", self.model_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("mask_dim", self.mask_dim.to_string());
        kv("n_task_experts", self.n_task_experts.to_string());
        kv("n_shared_experts", self.n_shared_experts.to_string());
        kv("moe_layers", self.moe_layers.to_string());
        kv("expert_dim", self.expert_dim.to_string());
        kv("tower_hidden", self.tower_hidden.to_string());
        kv("beta_js", format!("{:?}", self.betas[0]));
        kv("beta_ce", format!("{:?}", self.betas[1]));
        kv("beta_huber", format!("{:?}", self.betas[2]));
        kv("no_hypergraph", self.ablation.no_hypergraph.to_string());
        kv(
            "no_dynamic_weighting",
            self.ablation.no_dynamic_weighting.to_string(),
        );
        kv(
            "no_dynamic_tower",
            self.ablation.no_dynamic_tower.to_string(),
        );
        kv("loss_mode", self.loss_mode.as_str().to_string());
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    /// Loss weights after ablations: without the hypergraph there is no
    /// embedding for the structural term to supervise.
    pub fn effective_betas(&self) -> [f64; 3] {
        let mut b = self.betas;
        if self.ablation.no_hypergraph {
            b[0] = 0.0;
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let cfg = RunConfig {
            lr: 3e-4,
            ablation: Ablation {
                no_dynamic_tower: true,
                ..Ablation::default()
            },
            loss_mode: LossMode::Huber,
            ..RunConfig::default()
        };
        let back = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::parse("# header\nepochs = 3 # trailing\n\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(RunConfig::parse("epoch = 3").is_err());
        assert!(RunConfig::parse("heads = 5").is_err());
        assert!(RunConfig::parse("loss_mode = l1").is_err());
    }

    #[test]
    fn no_hypergraph_zeroes_structural_weight() {
        let mut cfg = RunConfig::default();
        cfg.ablation.no_hypergraph = true;
        assert_eq!(cfg.effective_betas(), [0.0, 1.0, 1.0]);
    }
}
