//! Run configuration: a flat TOML document with strict unknown-key
//! rejection so ablation configs stay diffable. Every field except
//! `variant` has a default matching the toy-scale protocol.

use crate::cascade::{CascadeStrategy, McaVariant};
use crate::data::{self, TaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{DecayMode, Schedule, TrainSetup};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn d_strategy() -> String {
    "encoder_decoder".into()
}
fn d_layers() -> usize {
    2
}
fn d_width() -> usize {
    64
}
fn d_heads() -> usize {
    8
}
fn d_feature_dim() -> usize {
    data::FEATURE_DIM
}
fn d_fused() -> usize {
    128
}
fn d_answers() -> usize {
    data::answer_count()
}
fn d_vocab() -> usize {
    data::vocab_size()
}
fn d_true() -> bool {
    true
}
fn d_dropout() -> f64 {
    0.1
}
fn d_ln_eps() -> f64 {
    1e-9
}
fn d_seed() -> u64 {
    42
}
fn d_epochs() -> usize {
    13
}
fn d_base_rate() -> f64 {
    1e-4
}
fn d_warmup_step() -> f64 {
    2.5e-5
}
fn d_decay_after() -> usize {
    10
}
fn d_decay_factor() -> f64 {
    0.2
}
fn d_decay_period() -> usize {
    2
}
fn d_decay_mode() -> String {
    "compound".into()
}
fn d_batch_size() -> usize {
    64
}
fn d_adam_beta1() -> f64 {
    0.9
}
fn d_adam_beta2() -> f64 {
    0.98
}
fn d_adam_eps() -> f64 {
    1e-9
}
fn d_train_samples() -> usize {
    2000
}
fn d_val_samples() -> usize {
    500
}
fn d_noise() -> f64 {
    0.05
}
fn d_weight() -> u32 {
    1
}

/// The full run schema. Field names are the documented config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    #[serde(default = "d_strategy")]
    pub strategy: String,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_width")]
    pub d: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_feature_dim")]
    pub d_x: usize,
    #[serde(default = "d_width")]
    pub d_y: usize,
    #[serde(default = "d_fused")]
    pub d_z: usize,
    #[serde(default = "d_answers")]
    pub answers: usize,
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    #[serde(default = "d_true")]
    pub attn_bias: bool,
    #[serde(default = "d_true")]
    pub positional: bool,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_ln_eps")]
    pub eps: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_base_rate")]
    pub base_rate: f64,
    #[serde(default = "d_warmup_step")]
    pub warmup_step: f64,
    #[serde(default = "d_decay_after")]
    pub decay_after: usize,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "d_decay_period")]
    pub decay_period: usize,
    #[serde(default = "d_decay_mode")]
    pub decay_mode: String,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_train_samples")]
    pub train_samples: usize,
    #[serde(default = "d_val_samples")]
    pub val_samples: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_weight")]
    pub count_weight: u32,
    #[serde(default = "d_weight")]
    pub exists_weight: u32,
    #[serde(default = "d_weight")]
    pub attribute_weight: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub trace: bool,
}

/// Typed bundle built from a validated RunConfig.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub task: TaskSpec,
    pub seed: u64,
    pub epochs: usize,
    pub out: Option<PathBuf>,
    pub trace: bool,
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_str(&text).map_err(|e| match e {
        Error::Config(reason) => Error::Config(format!("{}: {reason}", path.display())),
        other => other,
    })
}

impl RunConfig {
    pub fn minimal(variant: &str) -> Result<RunConfig> {
        parse_str(&format!("variant = {variant:?}"))
    }

    pub fn plan(&self) -> Result<RunPlan> {
        let model = ModelConfig {
            variant: McaVariant::parse(&self.variant)?,
            strategy: CascadeStrategy::parse(&self.strategy)?,
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            d_x: self.d_x,
            d_y: self.d_y,
            d_z: self.d_z,
            answers: self.answers,
            vocab: self.vocab,
            attn_bias: self.attn_bias,
            positional: self.positional,
            dropout: self.dropout,
            eps: self.eps,
        };
        model.validate()?;
        let schedule = Schedule {
            base: self.base_rate,
            warmup_step: self.warmup_step,
            decay_after: self.decay_after,
            decay_factor: self.decay_factor,
            decay_period: self.decay_period,
            mode: DecayMode::parse(&self.decay_mode)?,
            batch_size: self.batch_size,
        };
        schedule.validate()?;
        let task = TaskSpec {
            train: self.train_samples,
            val: self.val_samples,
            noise: self.noise,
            count_weight: self.count_weight,
            exists_weight: self.exists_weight,
            attribute_weight: self.attribute_weight,
        };
        task.validate()?;
        Ok(RunPlan {
            model,
            schedule,
            task,
            seed: self.seed,
            epochs: self.epochs,
            out: self.out.as_ref().map(PathBuf::from),
            trace: self.trace,
        })
    }

    /// Training inputs with this config echoed into the report.
    pub fn setup(&self) -> Result<TrainSetup> {
        let plan = self.plan()?;
        let mut setup = TrainSetup::new(plan.model, plan.schedule, plan.task, plan.epochs, plan.seed);
        setup.adam_beta1 = self.adam_beta1;
        setup.adam_beta2 = self.adam_beta2;
        setup.adam_eps = self.adam_eps;
        setup.config_echo = self.echo_lines();
        Ok(setup)
    }

    /// The config rendered back to TOML with every field explicit; stable
    /// across runs, embedded in checkpoints.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    /// (key, value) pairs for report echoes, in serialized order.
    pub fn echo_lines(&self) -> Vec<(String, String)> {
        let table = toml::Value::try_from(self).expect("flat struct converts");
        let Some(table) = table.as_table() else {
            return Vec::new();
        };
        table
            .iter()
            .map(|(k, v)| {
                let rendered = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), rendered)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = RunConfig::minimal("sa_sga").unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.d, 64);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.d_x, data::FEATURE_DIM);
        assert_eq!(cfg.answers, data::answer_count());
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.model.variant, McaVariant::SaSga);
        assert_eq!(plan.schedule.mode, DecayMode::Compound);
        assert_eq!(plan.epochs, 13);
        assert!(plan.out.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_str("variant = \"id_ga\"\nlayer_count = 3\n").unwrap_err();
        assert!(err.to_string().contains("layer_count"), "{err}");
    }

    #[test]
    fn bad_enum_values_are_field_level_errors() {
        let cfg = parse_str("variant = \"sa_xga\"").unwrap();
        assert!(cfg.plan().is_err());
        let cfg = parse_str("variant = \"sa_sga\"\nstrategy = \"loop\"").unwrap();
        assert!(cfg.plan().is_err());
        let cfg = parse_str("variant = \"sa_sga\"\ndecay_mode = \"never\"").unwrap();
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        let cfg = parse_str("variant = \"sa_sga\"\nd = 65\n").unwrap();
        assert!(cfg.plan().is_err(), "heads must divide d");
        let cfg = parse_str("variant = \"sa_sga\"\ndropout = 1.5\n").unwrap();
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn canonical_toml_round_trips() {
        let cfg = parse_str("variant = \"sa_ga\"\nseed = 7\nout = \"runs/x\"\n").unwrap();
        let text = cfg.canonical_toml();
        let back = parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Canonical text is explicit: defaults appear as concrete keys.
        assert!(text.contains("batch_size = 64"));
    }

    #[test]
    fn echo_lines_cover_every_field() {
        let cfg = RunConfig::minimal("id_ga").unwrap();
        let lines = cfg.echo_lines();
        let keys: Vec<&str> = lines.iter().map(|(k, _)| k.as_str()).collect();
        for expected in ["variant", "strategy", "layers", "seed", "batch_size", "noise"] {
            assert!(keys.contains(&expected), "{expected} missing");
        }
        let variant = lines.iter().find(|(k, _)| k == "variant").unwrap();
        assert_eq!(variant.1, "id_ga");
    }

    #[test]
    fn setup_carries_adam_and_echo() {
        let cfg = parse_str("variant = \"sa_sga\"\nadam_eps = 1e-8\n").unwrap();
        let setup = cfg.setup().unwrap();
        assert_eq!(setup.adam_eps, 1e-8);
        assert_eq!(setup.adam_beta2, 0.98);
        assert!(!setup.config_echo.is_empty());
    }
}
