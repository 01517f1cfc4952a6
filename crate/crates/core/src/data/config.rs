//! Flat `key = value` configuration with `#` comments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::consensus::GcnForm;
use crate::error::{Error, Result};
use crate::fusion::FuseType;
use crate::losses::ContrastiveMode;

/// Which embedding the retrieval evaluation ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RetrievalEmbedding {
    #[default]
    Fused,
    Instance,
}

impl FromStr for RetrievalEmbedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "instance" => Ok(Self::Instance),
            other => Err(Error::Config(format!("unknown retrieval embedding `{other}` (fused|instance)"))),
        }
    }
}

impl fmt::Display for RetrievalEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::Instance => "instance",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub fuse_type: FuseType,
    pub global_weight_sum: bool,
    pub margin: f64,
    pub contrastive_mode: ContrastiveMode,
    /// Epochs trained with the sum hinge before switching to `contrastive_mode`.
    pub warmup_epochs: usize,
    pub base_weights: [f64; 4],
    pub invert_dynamic_weight: bool,
    pub gcn_form: GcnForm,
    pub concepts: usize,
    pub eta0: f64,
    pub eta_min_ratio: f64,
    pub period_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub retrieval: RetrievalEmbedding,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            feature_dim: 64,
            word_dim: 64,
            heads: 8,
            fuse_type: FuseType::WeightSum,
            global_weight_sum: false,
            margin: 0.2,
            contrastive_mode: ContrastiveMode::Hardest,
            warmup_epochs: 5,
            base_weights: [1.0; 4],
            invert_dynamic_weight: false,
            gcn_form: GcnForm::Paper,
            concepts: 32,
            eta0: 3e-3,
            eta_min_ratio: 0.01,
            period_epochs: 10,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            retrieval: RetrievalEmbedding::Fused,
            seed: 42,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.feature_dim == 0 || self.word_dim == 0 {
            return fail("feature_dim and word_dim must be positive".into());
        }
        if !(self.margin > 0.0) || !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return fail(format!("margin ({}) and eta0 ({}) must be positive", self.margin, self.eta0));
        }
        if !(0.0..=1.0).contains(&self.eta_min_ratio) {
            return fail(format!("eta_min_ratio {} must lie in [0, 1]", self.eta_min_ratio));
        }
        if self.base_weights.iter().any(|w| !(*w > 0.0)) {
            return fail(format!("base_weights must be positive, got {:?}", self.base_weights));
        }
        if self.epochs == 0 || self.patience == 0 || self.period_epochs == 0 {
            return fail("epochs, patience and period_epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size {} leaves no negatives", self.batch_size));
        }
        if self.concepts < 2 {
            return fail(format!("need at least 2 concepts, got {}", self.concepts));
        }
        Ok(())
    }

    pub fn eta_min(&self) -> f64 {
        self.eta0 * self.eta_min_ratio
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "word_dim" => self.word_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "fuse_type" => self.fuse_type = value.parse()?,
            "global_weight_sum" => self.global_weight_sum = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "contrastive_mode" => self.contrastive_mode = value.parse()?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "base_weights" => {
                let parts: Vec<f64> =
                    value.split(',').map(|p| parse_value(key, p.trim())).collect::<Result<_>>()?;
                self.base_weights = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("base_weights needs 4 values, got `{value}`")))?;
            }
            "invert_dynamic_weight" => self.invert_dynamic_weight = parse_value(key, value)?,
            "gcn_form" => self.gcn_form = value.parse()?,
            "concepts" => self.concepts = parse_value(key, value)?,
            "eta0" => self.eta0 = parse_value(key, value)?,
            "eta_min_ratio" => self.eta_min_ratio = parse_value(key, value)?,
            "period_epochs" => self.period_epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "retrieval" => self.retrieval = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses overrides on top of the defaults; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.base_weights;
        writeln!(f, "embed_dim = {}", self.embed_dim)?;
        writeln!(f, "feature_dim = {}", self.feature_dim)?;
        writeln!(f, "word_dim = {}", self.word_dim)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "fuse_type = {}", self.fuse_type)?;
        writeln!(f, "global_weight_sum = {}", self.global_weight_sum)?;
        writeln!(f, "margin = {}", self.margin)?;
        writeln!(f, "contrastive_mode = {}", self.contrastive_mode)?;
        writeln!(f, "warmup_epochs = {}", self.warmup_epochs)?;
        writeln!(f, "base_weights = {},{},{},{}", w[0], w[1], w[2], w[3])?;
        writeln!(f, "invert_dynamic_weight = {}", self.invert_dynamic_weight)?;
        writeln!(f, "gcn_form = {}", self.gcn_form)?;
        writeln!(f, "concepts = {}", self.concepts)?;
        writeln!(f, "eta0 = {}", self.eta0)?;
        writeln!(f, "eta_min_ratio = {}", self.eta_min_ratio)?;
        writeln!(f, "period_epochs = {}", self.period_epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "patience = {}", self.patience)?;
        writeln!(f, "retrieval = {}", self.retrieval)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = TrainConfig::parse(
            "# desk run\nembed_dim = 32\nheads=4 # four heads\n\nfuse_type = adap_sum\nbase_weights = 1, 0.5, 2, 1\n",
        )
        .unwrap();
        assert_eq!(cfg.embed_dim, 32);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.fuse_type, FuseType::AdapSum);
        assert_eq!(cfg.base_weights, [1.0, 0.5, 2.0, 1.0]);
        assert_eq!(cfg.epochs, 30);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("embed_dim = 30\nheads = 8").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("patience = 0").is_err());
        assert!(TrainConfig::parse("fuse_type = max").is_err());
        assert!(TrainConfig::parse("base_weights = 1,2").is_err());
        assert!(TrainConfig::parse("eta0 = 0").is_err());
    }

    #[test]
    fn display_roundtrips() {
        let mut cfg = TrainConfig::default();
        cfg.eta0 = 0.0123456789;
        cfg.gcn_form = GcnForm::Conventional;
        cfg.invert_dynamic_weight = true;
        cfg.seed = u64::MAX;
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
