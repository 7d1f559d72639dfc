//! Run configuration: TOML in, canonical sorted-key TOML out.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::baselines::MechanismKind;
use crate::error::{Error, Result};

/// Norm regularization constant, or `"none"` to disable it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaSetting {
    Fixed(f64),
    Off,
}

impl AlphaSetting {
    pub fn value(self) -> Option<f64> {
        match self {
            AlphaSetting::Fixed(a) => Some(a),
            AlphaSetting::Off => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            AlphaSetting::Fixed(a) => format!("{a}"),
            AlphaSetting::Off => "none".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(AlphaSetting::Off);
        }
        let a: f64 = s.parse().map_err(|_| Error::Config(format!("alpha {s:?} is neither a number nor \"none\"")))?;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {a}")));
        }
        Ok(AlphaSetting::Fixed(a))
    }
}

impl Serialize for AlphaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaSetting::Fixed(a) => s.serialize_f64(*a),
            AlphaSetting::Off => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = AlphaSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"none\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<AlphaSetting, E> {
                AlphaSetting::parse(&v.to_string()).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<AlphaSetting, E> {
                self.visit_f64(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<AlphaSetting, E> {
                AlphaSetting::parse(v).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Host pretraining without bindings.
    A,
    /// Encoder and injection training on a stage-A host.
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 512, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    /// Cross-attention and nested-attention width.
    pub d_attn: usize,
    pub text_dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            d_model: 64,
            d_attn: 64,
            text_dim: 32,
            blocks: 2,
            mlp_hidden: 128,
            time_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub patch: usize,
    /// Learned query count `M`.
    pub queries: usize,
    pub layers: usize,
    pub hidden: usize,
    pub extractor_seed: u64,
    /// Std of the extractor's frozen positional table.
    pub positional_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_enc: 32,
            patch: 4,
            queries: 64,
            layers: 2,
            hidden: 64,
            extractor_seed: 0,
            positional_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            sample_steps: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mechanism: String,
    pub alpha: AlphaSetting,
    /// Steps of host pretraining (stage A).
    pub steps_a: usize,
    /// Steps of personalization training (stage B).
    pub steps_b: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub clip: f64,
    pub seed: u64,
    /// Keep host parameters fixed during stage B.
    pub freeze_host: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// `noise`: plain MSE on the predicted noise. `velocity`: the same error
/// divided by ᾱ_t, so high-noise steps are not drowned out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Noise,
    Velocity,
}

/// `cosine` decays the rate from `lr` to `lr / 10` over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let f = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
                lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * f).cos()))
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::A,
            mechanism: "nested".into(),
            alpha: AlphaSetting::Fixed(2.0),
            steps_a: 3000,
            steps_b: 9000,
            batch: 8,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::Velocity,
            lr: 2e-3,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            clip: 1.0,
            seed: 0,
            freeze_host: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Empty means the mechanism's default grid.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub alphas: Vec<String>,
    pub queries: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: Vec::new(),
            seeds: (0..5).collect(),
            alphas: vec!["none".into(), "1".into(), "2".into(), "3".into()],
            queries: vec![16, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: String,
    pub host_checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.patch == 0 || m.image_size % m.patch != 0 {
            return bad(format!("model.patch {} does not divide image_size {}", m.patch, m.image_size));
        }
        if self.encoder.patch == 0 || m.image_size % self.encoder.patch != 0 {
            return bad(format!("encoder.patch {} does not divide image_size {}", self.encoder.patch, m.image_size));
        }
        if m.image_size != crate::synth::IMAGE_SIZE {
            return bad(format!("image_size must be {}", crate::synth::IMAGE_SIZE));
        }
        if !(self.encoder.positional_std >= 0.0 && self.encoder.positional_std.is_finite()) {
            return bad(format!("encoder.positional_std must be finite and non-negative, got {}", self.encoder.positional_std));
        }
        if self.encoder.queries == 0 {
            return bad("encoder.queries must be at least 1".into());
        }
        if self.data.samples == 0 {
            return bad("data.samples must be at least 1".into());
        }
        let s = &self.schedule;
        if s.steps == 0 || s.sample_steps == 0 || s.sample_steps > s.steps {
            return bad("schedule needs 1 ≤ sample_steps ≤ steps".into());
        }
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad("schedule needs 0 < beta_start ≤ beta_end < 1".into());
        }
        let t = &self.train;
        if t.batch == 0 {
            return bad("train.batch must be at least 1".into());
        }
        if !(t.lr >= 0.0 && (0.0..1.0).contains(&t.momentum) && t.clip > 0.0) {
            return bad("train needs lr ≥ 0, 0 ≤ momentum < 1, clip > 0".into());
        }
        self.mechanism()?;
        for a in &self.eval.alphas {
            AlphaSetting::parse(a)?;
        }
        Ok(())
    }

    pub fn mechanism(&self) -> Result<MechanismKind> {
        self.train.mechanism.parse()
    }

    /// Sorted-key TOML; equal configs give equal strings.
    pub fn canonical(&self) -> String {
        let v = toml::Value::try_from(self).expect("config is representable as TOML");
        toml::to_string(&v).expect("TOML value serializes")
    }

    /// Canonical text of the settings that must match for two runs to
    /// count as trained under the same budget.
    pub fn budget_echo(&self) -> String {
        let mut c = self.clone();
        c.train.stage = Stage::B;
        c.train.mechanism = String::new();
        c.train.alpha = AlphaSetting::Off;
        c.eval = EvalConfig::default();
        c.paths = PathsConfig::default();
        c.canonical()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[train]\nmechanism = \"ipadapter\"\n").is_err());
    }

    #[test]
    fn canonical_is_sorted_and_stable() {
        let a = RunConfig::parse("[train]\nlr = 0.1\nalpha = \"none\"\n[data]\nsamples = 64\n").unwrap();
        let b = RunConfig::parse("[data]\nsamples   =   64\n[train]\nalpha = \"none\"\nlr = 0.1\n").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(RunConfig::parse(&a.canonical()).unwrap(), a);
        let text = a.canonical();
        let sections: Vec<&str> = text.lines().filter(|l| l.starts_with('[')).collect();
        let mut sorted = sections.clone();
        sorted.sort();
        assert_eq!(sections, sorted);
    }

    #[test]
    fn alpha_forms() {
        let c = RunConfig::parse("[train]\nalpha = 3\n").unwrap();
        assert_eq!(c.train.alpha, AlphaSetting::Fixed(3.0));
        assert!(RunConfig::parse("[train]\nalpha = -1.0\n").is_err());
        assert!(RunConfig::parse("[train]\nalpha = \"off\"\n").is_err());
    }

    #[test]
    fn budget_ignores_mechanism_only() {
        let a = RunConfig::parse("[train]\nmechanism = \"nested\"\n").unwrap();
        let b = RunConfig::parse("[train]\nmechanism = \"global_v\"\n").unwrap();
        let c = RunConfig::parse("[train]\nmechanism = \"global_v\"\nsteps_b = 7\n").unwrap();
        assert_eq!(a.budget_echo(), b.budget_echo());
        assert_ne!(a.budget_echo(), c.budget_echo());
    }
}
