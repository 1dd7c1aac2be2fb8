//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`loss.kind`, `sampler.rate`, `train.lr`, ...). A file sets any
//! subset of them, later lines and later overrides win, and unknown keys are
//! rejected. [`ConfigMap::resolve`] turns the strings into an [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{parse_num, LossConfig, LossKind};
use crate::sampling::{parse_rate, SamplerKind};

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.classes", "100"),
    ("data.dim", "64"),
    ("data.noise", "0.05"),
    ("data.per_class", "50"),
    ("deterministic", "true"),
    ("loss.d", "0.9"),
    ("loss.kind", "DSoftmax"),
    ("loss.m1", "4"),
    ("loss.m2", "0.5"),
    ("loss.m3", "0.35"),
    ("loss.s", "32"),
    ("ps.addr", ""),
    ("ps.shards", "0"),
    ("sampler.kind", "FullClasses"),
    ("sampler.rate", "1"),
    ("seed", "1"),
    ("train.batch_size", "64"),
    ("train.embed_dim", "64"),
    ("train.encoder", "linear"),
    ("train.epochs", "30"),
    ("train.eval_pairs", "4000"),
    ("train.inter_weight", "1"),
    ("train.lr", "0.4"),
    ("train.lr_gamma", "0.1"),
    ("train.lr_step", "0"),
    ("train.metrics_every", "50"),
    ("train.momentum", "0.9"),
];

/// Ordered string settings, seeded with [`DEFAULTS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_owned(), v.to_owned())).collect(),
        }
    }
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if key == "loss.eps" {
            return Err(Error::config(key, "eps is derived from loss.d and loss.s; set loss.d instead"));
        }
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_owned();
                Ok(())
            }
            None => Err(Error::config(key, "unknown configuration key")),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies `key = value` lines. Blank lines and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", no + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut m = Self::default();
        m.apply_text(&text)?;
        Ok(m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let get = |k: &str| self.values[k].as_str();
        let num = |k: &str| parse_num::<f64>(k, get(k));
        let count = |k: &str| parse_num::<usize>(k, get(k));

        let loss_pairs = ["kind", "s", "d", "m1", "m2", "m3"].map(|k| (k, get(&format!("loss.{k}")).to_owned()));
        let loss = LossConfig::from_kv(loss_pairs.iter().map(|(k, v)| (*k, v.as_str()))).map_err(prefix_loss)?;

        let data = DataConfig {
            classes: count("data.classes")?,
            dim: count("data.dim")?,
            per_class: count("data.per_class")?,
            noise: num("data.noise")?,
        };
        let train = TrainConfig {
            loss,
            sampler: get("sampler.kind").parse()?,
            rate: parse_rate(get("sampler.rate"))?,
            batch_size: count("train.batch_size")?,
            epochs: count("train.epochs")?,
            lr: num("train.lr")?,
            momentum: num("train.momentum")?,
            encoder: get("train.encoder").parse()?,
            embed_dim: count("train.embed_dim")?,
            inter_weight: num("train.inter_weight")?,
            metrics_every: count("train.metrics_every")?,
            eval_pairs: count("train.eval_pairs")?,
            lr_step: count("train.lr_step")?,
            lr_gamma: num("train.lr_gamma")?,
            seed: parse_num("seed", get("seed"))?,
            deterministic: parse_bool("deterministic", get("deterministic"))?,
        };
        let ps = PsConfig {
            shards: count("ps.shards")?,
            addr: Some(get("ps.addr")).filter(|a| !a.is_empty()).map(str::to_owned),
        };
        let cfg = ExperimentConfig { data, train, ps };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ConfigMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn prefix_loss(e: Error) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with("loss.") => Error::Config {
            field: format!("loss.{field}"),
            message,
        },
        other => other,
    }
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(field, format!("expected a boolean, got `{v}`"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Embeddings are the raw features; only class weights train.
    Identity,
    /// Affine map `W x + b`, initialised to the identity when square.
    Linear,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::config("train.encoder", format!("expected identity or linear, got `{s}`"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub sampler: SamplerKind,
    pub rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    /// Multiplier on the D-Softmax inter term; 0 trains the intra term alone.
    pub inter_weight: f64,
    pub metrics_every: usize,
    pub eval_pairs: usize,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs; 0 keeps it constant.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.inter_weight.is_finite() && self.inter_weight >= 0.0) {
            return Err(Error::config("train.inter_weight", "must be finite and non-negative"));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("train.metrics_every", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("train.embed_dim", "must be at least 1"));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return Err(Error::config("train.lr_gamma", "must be positive"));
        }
        check_pairing(self.loss.kind(), self.sampler)?;
        if self.sampler == SamplerKind::FullClasses && self.rate != 1.0 {
            return Err(Error::config("sampler.rate", "FullClasses uses every class; rate must be 1"));
        }
        if self.inter_weight != 1.0 && self.loss.kind() != LossKind::DSoftmax {
            return Err(Error::config("train.inter_weight", "only the D-Softmax inter term can be reweighted"));
        }
        Ok(())
    }
}

/// Entangled and hybrid losses need every batch label in the column set, so they run
/// on all classes or on the Rand-Softmax style subset. D-Softmax takes the full set or
/// either of its own samplers.
pub fn check_pairing(loss: LossKind, sampler: SamplerKind) -> Result<()> {
    let ok = match loss {
        LossKind::DSoftmax => sampler != SamplerKind::RandEntangled,
        _ => matches!(sampler, SamplerKind::FullClasses | SamplerKind::RandEntangled),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config(
            "sampler.kind",
            format!("loss {loss} cannot be trained with sampler {sampler}"),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsConfig {
    /// 0 keeps weights in a plain in-memory matrix.
    pub shards: usize,
    /// Train against a running store server instead of an in-process one.
    pub addr: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ps: PsConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.classes < 2 {
            return Err(Error::config("data.classes", "need at least two classes"));
        }
        if self.data.per_class < 2 {
            return Err(Error::config("data.per_class", "need at least two samples per class"));
        }
        if self.data.dim == 0 {
            return Err(Error::config("data.dim", "must be at least 1"));
        }
        if !(self.data.noise.is_finite() && self.data.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be finite and non-negative"));
        }
        if self.train.encoder == EncoderKind::Identity && self.train.embed_dim != self.data.dim {
            return Err(Error::config("train.embed_dim", "identity encoder needs embed_dim == data.dim"));
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ConfigMap::default().resolve().unwrap();
        assert_eq!(cfg.train.loss.kind(), LossKind::DSoftmax);
        assert_eq!(cfg.train.sampler, SamplerKind::FullClasses);
        assert_eq!(cfg.data.classes, 100);
        assert!(cfg.train.deterministic);
        assert_eq!(cfg.ps.addr, None);
    }

    #[test]
    fn last_writer_wins() {
        let mut m = ConfigMap::default();
        m.apply_text("# comment\nloss.d = 0.5\n\nloss.d=0.7\n").unwrap();
        m.set("loss.d", "0.8").unwrap();
        assert_eq!(m.resolve().unwrap().train.loss.d(), 0.8);
    }

    #[test]
    fn errors_name_the_field() {
        let mut m = ConfigMap::default();
        let e = m.set("loss.bogus", "1").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "loss.bogus"));
        assert!(m.set("loss.eps", "3").is_err());
        m.set("loss.d", "1.5").unwrap();
        let e = m.resolve().unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "loss.d"), "{e}");
        assert!(ConfigMap::default().apply_text("no equals sign").is_err());
    }

    #[test]
    fn pairing_rules() {
        assert!(check_pairing(LossKind::Softmax, SamplerKind::ClassSubset).is_err());
        assert!(check_pairing(LossKind::ArcFace, SamplerKind::BatchSubset).is_err());
        assert!(check_pairing(LossKind::Softmax, SamplerKind::RandEntangled).is_ok());
        assert!(check_pairing(LossKind::DSoftmax, SamplerKind::ClassSubset).is_ok());
        assert!(check_pairing(LossKind::DSoftmax, SamplerKind::RandEntangled).is_err());
        let mut m = ConfigMap::default();
        m.set("loss.kind", "Softmax").unwrap();
        m.set("sampler.kind", "BatchSubset").unwrap();
        m.set("sampler.rate", "1/8").unwrap();
        assert!(m.resolve().unwrap_err().is_config());
    }

    #[test]
    fn display_round_trips() {
        let mut m = ConfigMap::default();
        m.set("seed", "99").unwrap();
        let mut back = ConfigMap::default();
        back.apply_text(&m.to_string()).unwrap();
        assert_eq!(back, m);
    }
}
