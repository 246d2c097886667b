//! Experiment configuration. The file format is a flat list of
//! `section.key = value` lines (a TOML subset), every hyperparameter has a
//! default, and `--set key=value` overrides are applied before validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SslMethod {
    #[serde(rename = "simclr")]
    Simclr,
    #[serde(rename = "swav")]
    Swav,
    #[serde(rename = "dino")]
    Dino,
    #[serde(rename = "none-random")]
    NoneRandom,
    #[serde(rename = "none-supervised-proxy")]
    NoneSupervisedProxy,
}

impl SslMethod {
    pub const ALL: [SslMethod; 5] = [
        SslMethod::Simclr,
        SslMethod::Swav,
        SslMethod::Dino,
        SslMethod::NoneRandom,
        SslMethod::NoneSupervisedProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslMethod::Simclr => "simclr",
            SslMethod::Swav => "swav",
            SslMethod::Dino => "dino",
            SslMethod::NoneRandom => "none-random",
            SslMethod::NoneSupervisedProxy => "none-supervised-proxy",
        }
    }

    pub fn is_self_supervised(self) -> bool {
        matches!(self, SslMethod::Simclr | SslMethod::Swav | SslMethod::Dino)
    }
}

impl fmt::Display for SslMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SslMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ssl method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset directory; empty means generate from `synthetic`.
    pub path: String,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: String::new(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimclrSection {
    pub tau: f64,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for SimclrSection {
    fn default() -> Self {
        Self {
            tau: 0.1,
            head_hidden: 128,
            head_out: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwavSection {
    pub tau: f64,
    pub prototypes: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    /// Prototypes stay fixed for this many initial epochs.
    pub freeze_prototypes_epochs: usize,
}

impl Default for SwavSection {
    fn default() -> Self {
        Self {
            tau: 0.1,
            prototypes: 300,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            head_hidden: 128,
            head_out: 64,
            freeze_prototypes_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoSection {
    pub out_dim: usize,
    pub head_hidden: usize,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for DinoSection {
    fn default() -> Self {
        Self {
            out_dim: 256,
            head_hidden: 128,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            lr: 1e-3,
            weight_decay: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSection {
    pub method: SslMethod,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base rate of the SGD+LARC methods (SimCLR, SwAV, supervised proxy).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub warmup_epochs: usize,
    pub n_global_crops: usize,
    pub n_local_crops: usize,
    pub noise_sigma: f64,
    /// Pre-train once on all bags instead of once per fold's training split.
    pub global_pretrain: bool,
    pub seed: u64,
    pub simclr: SimclrSection,
    pub swav: SwavSection,
    pub dino: DinoSection,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            method: SslMethod::Simclr,
            epochs: 100,
            batch_size: 128,
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coefficient: 0.001,
            warmup_epochs: 10,
            n_global_crops: 2,
            n_local_crops: 8,
            noise_sigma: 0.5,
            global_pretrain: false,
            seed: 1,
            simclr: SimclrSection::default(),
            swav: SwavSection::default(),
            dino: DinoSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilSection {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub accumulation: usize,
    pub instance_cap: usize,
    pub frozen: bool,
    pub k_reduced: usize,
    pub attention_hidden: usize,
    /// Bag draws per epoch; 0 means the size of the training split.
    pub epoch_length: usize,
    /// Random flips of training instances on the square feature grid.
    pub flip_augment: bool,
}

impl Default for MilSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 20,
            lr: 0.015,
            momentum: 0.9,
            weight_decay: 1e-4,
            accumulation: 10,
            instance_cap: 500,
            frozen: true,
            k_reduced: 64,
            attention_hidden: 64,
            epoch_length: 0,
            flip_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5, runs: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "experiment".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub ssl: SslSection,
    pub mil: MilSection,
    pub cv: CvSection,
    pub output: OutputSection,
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A bare word that is not a TOML literal is taken as a string, so
/// `--set ssl.method=dino` works without quotes.
fn parse_override_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl ExperimentConfig {
    /// Parses config text and applies `key=value` overrides in order.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_override_value(v.trim()))?;
        }
        let config: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Applies overrides to an already resolved config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::parse_with_overrides(&self.to_flat_string(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.path.is_empty() {
            self.dataset.synthetic.validate()?;
        }
        let s = &self.ssl;
        if s.epochs == 0 || s.batch_size < 2 {
            return bad("ssl.epochs must be positive and ssl.batch_size at least 2".into());
        }
        if !(s.lr > 0.0 && s.dino.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&s.momentum) || s.weight_decay < 0.0 || s.trust_coefficient <= 0.0 {
            return bad("ssl optimizer settings out of range".into());
        }
        if s.n_global_crops == 0 {
            return bad("ssl.n_global_crops must be positive".into());
        }
        if s.simclr.tau <= 0.0 || s.swav.tau <= 0.0 || s.swav.epsilon <= 0.0 || s.swav.sinkhorn_iters == 0 {
            return bad("temperatures, epsilon and sinkhorn iterations must be positive".into());
        }
        if s.swav.prototypes == 0 || s.dino.out_dim < 2 {
            return bad("prototype count and dino output width must be positive".into());
        }
        let d = &s.dino;
        if !(d.tau_t_start < d.tau_s && d.tau_t_end < d.tau_s && d.tau_t_start > 0.0) {
            return bad("dino teacher temperatures must be positive and below tau_s".into());
        }
        if !(0.0..=1.0).contains(&d.ema_momentum) || !(0.0..=1.0).contains(&d.center_momentum) {
            return bad("dino momenta must lie in [0, 1]".into());
        }
        let m = &self.mil;
        if m.epochs == 0 || m.accumulation == 0 || m.instance_cap == 0 || m.lr <= 0.0 {
            return bad("mil epochs, accumulation, instance cap and lr must be positive".into());
        }
        if self.cv.k < 2 || self.cv.runs == 0 {
            return bad("cv.k must be at least 2 and cv.runs positive".into());
        }
        Ok(())
    }

    /// Every key on its own line, sorted: the resolved config written next
    /// to experiment outputs.
    pub fn to_flat_string(&self) -> String {
        let value = Value::try_from(self).expect("config serializes");
        let mut pairs = Vec::new();
        flatten("", value.as_table().expect("table"), &mut pairs);
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 of the resolved flat text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_flat_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let c = ExperimentConfig::default();
        let text = c.to_flat_string();
        assert!(text.contains("mil.epochs = 50\n"));
        assert!(text.contains("mil.patience = 20\n"));
        assert!(text.contains("mil.accumulation = 10\n"));
        assert!(text.contains("mil.instance_cap = 500\n"));
        assert!(text.contains("ssl.swav.prototypes = 300\n"));
        assert!(text.contains("ssl.method = \"simclr\"\n"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = vec![
            "ssl.method=dino".to_string(),
            "mil.lr = 0.1".to_string(),
            "mil.lr=0.02".to_string(),
            "dataset.synthetic.n_bags_per_class=10".to_string(),
        ];
        let c = ExperimentConfig::parse_with_overrides("cv.k = 3\n", &sets).unwrap();
        assert_eq!(c.ssl.method, SslMethod::Dino);
        assert_eq!(c.mil.lr, 0.02);
        assert_eq!(c.cv.k, 3);
        assert_eq!(c.dataset.synthetic.n_bags_per_class, 10);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn bad_input_rejected() {
        assert!(ExperimentConfig::parse("mil.epochz = 3").is_err());
        assert!(ExperimentConfig::parse("mil.epochs = \"many\"").is_err());
        assert!(ExperimentConfig::parse("ssl.method = \"byol\"").is_err());
        assert!(ExperimentConfig::parse("cv.k = 1").is_err());
        assert!(ExperimentConfig::parse("ssl.dino.tau_t_end = 0.2").is_err());
        assert!(ExperimentConfig::parse_with_overrides("", &["novalue".into()]).is_err());
        assert!(ExperimentConfig::parse("= =").is_err());
    }
}
