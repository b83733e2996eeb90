//! Declarative run configuration (TOML).
//!
//! Every section is optional and falls back to the documented defaults.
//! Unknown keys are rejected, and type errors report the dotted key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blackbox::TrainConfig;
use crate::defense::NoiseKind;
use crate::error::{Error, IoContext, Result};
use crate::losses::{LossWeights, NegentropyMode};
use crate::priors::{PriorSpec, Scheduler, PRIOR_NAMES};
use crate::splitnet::zoo::MODEL_NAMES;
use crate::whitebox::{InversionConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; sections without their own seed derive from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Output subdirectory name; derived from the config hash when unset.
    pub run_id: Option<String>,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub attack: AttackSection,
    pub data: DataSection,
    pub blackbox: BlackboxSection,
    pub defense: DefenseSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            run_id: None,
            model: ModelSection::default(),
            prior: PriorSection::default(),
            attack: AttackSection::default(),
            data: DataSection::default(),
            blackbox: BlackboxSection::default(),
            defense: DefenseSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub name: String,
    pub split_index: usize,
    pub weights_path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "toy_cnn".into(),
            split_index: 1,
            weights_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub name: String,
    pub weights_path: Option<PathBuf>,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    pub scheduler: Scheduler,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            name: "identity".into(),
            weights_path: None,
            sampling_steps: 20,
            guidance_scale: 1.0,
            scheduler: Scheduler::default(),
        }
    }
}

impl PriorSection {
    pub fn spec(&self) -> PriorSpec {
        PriorSpec {
            name: self.name.clone(),
            weights_path: self.weights_path.clone(),
            sampling_steps: self.sampling_steps,
            guidance_scale: self.guidance_scale,
            scheduler: self.scheduler,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    #[default]
    Whitebox,
    WhiteboxText,
    Multiframe,
    Blackbox,
}

/// How multi-frame white-box runs treat the frames of a group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameCoupling {
    /// One optimization over all frames, with the temporal term.
    #[default]
    Joint,
    /// Each frame on its own.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub variant: AttackVariant,
    pub text: Option<String>,
    pub coupling: FrameCoupling,
    pub iterations: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub lr_schedule: LrSchedule,
    pub init_std: f64,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
    pub sampling_steps: usize,
    pub lambda_s: f64,
    pub lambda_txt: f64,
    pub lambda_c: f64,
    pub alpha: f64,
    pub negentropy_mode: NegentropyMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        let inv = InversionConfig::default();
        Self {
            variant: AttackVariant::default(),
            text: None,
            coupling: FrameCoupling::default(),
            iterations: inv.iterations,
            learning_rate: inv.learning_rate,
            betas: inv.betas,
            lr_schedule: inv.lr_schedule,
            init_std: inv.init_std,
            seed: None,
            sampling_steps: inv.sampling_steps,
            lambda_s: inv.weights.lambda_s,
            lambda_txt: inv.weights.lambda_txt,
            lambda_c: inv.weights.lambda_c,
            alpha: inv.weights.alpha,
            negentropy_mode: inv.negentropy_mode,
        }
    }
}

impl AttackSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.lambda_s,
            lambda_txt: self.lambda_txt,
            lambda_c: self.lambda_c,
            alpha: self.alpha,
        }
    }

    pub fn inversion(&self, base_seed: u64) -> InversionConfig {
        InversionConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            betas: self.betas,
            lr_schedule: self.lr_schedule.clone(),
            init_std: self.init_std,
            seed: self.seed.unwrap_or(base_seed),
            weights: self.weights(),
            sampling_steps: self.sampling_steps,
            negentropy_mode: self.negentropy_mode,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally generated shapes.
    #[default]
    Synthetic,
    /// PNG files from `images_dir`, in file-name order.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub images_dir: Option<PathBuf>,
    /// Images (or frame groups) to attack.
    pub count: usize,
    pub seed: u64,
    /// Frames per group for multi-frame runs.
    pub frames: usize,
    /// Pixels the object moves between consecutive frames.
    pub shift: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            images_dir: None,
            count: 10,
            seed: 100,
            frames: 4,
            shift: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlackboxSection {
    pub queries: usize,
    pub query_seed: u64,
    pub dataset_dir: Option<PathBuf>,
    pub inverter_path: Option<PathBuf>,
    pub param_budget: Option<usize>,
    pub width: usize,
    pub fusion: bool,
    pub train: TrainConfig,
}

impl Default for BlackboxSection {
    fn default() -> Self {
        Self {
            queries: 4096,
            query_seed: 200,
            dataset_dir: None,
            inverter_path: None,
            param_budget: None,
            width: 16,
            fusion: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub sigmas: Vec<f64>,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    /// Images attacked per sigma; the accuracy uses all of `data.count`.
    pub attack_count: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 0.1, 0.5, 1.0],
            noise_kind: NoiseKind::Gaussian,
            seed: 0,
            attack_count: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Classifier for the inception score; recorded in every report.
    pub classifier: String,
    pub classifier_weights: Option<PathBuf>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            classifier: "toy_cnn".into(),
            classifier_weights: None,
        }
    }
}

/// Read, parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." { "<document>".to_string() } else { key };
        Error::config(key, e.into_inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !MODEL_NAMES.contains(&self.model.name.as_str()) {
            return Err(Error::config(
                "model.name",
                format!("unknown model `{}`; known models: {}", self.model.name, MODEL_NAMES.join(", ")),
            ));
        }
        if self.model.split_index == 0 {
            return Err(Error::config("model.split_index", "split index starts at 1"));
        }
        if !PRIOR_NAMES.contains(&self.prior.name.as_str()) {
            return Err(Error::config(
                "prior.name",
                format!("unknown prior `{}`; known priors: {}", self.prior.name, PRIOR_NAMES.join(", ")),
            ));
        }
        if self.prior.sampling_steps == 0 {
            return Err(Error::config("prior.sampling_steps", "must be at least 1"));
        }
        if !(self.prior.guidance_scale.is_finite() && self.prior.guidance_scale >= 0.0) {
            return Err(Error::config("prior.guidance_scale", "must be finite and >= 0"));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::config("run_id", "must be a plain directory name"));
            }
        }
        self.attack.inversion(self.seed).validate()?;
        if self.attack.sampling_steps == 0 {
            return Err(Error::config("attack.sampling_steps", "must be at least 1"));
        }
        if self.data.count == 0 {
            return Err(Error::config("data.count", "must be at least 1"));
        }
        if self.data.source == DataSource::Directory && self.data.images_dir.is_none() {
            return Err(Error::config("data.images_dir", "required when data.source = \"directory\""));
        }
        if self.data.frames == 0 {
            return Err(Error::config("data.frames", "must be at least 1"));
        }
        if !self.data.shift.is_finite() {
            return Err(Error::config("data.shift", "must be finite"));
        }
        if self.blackbox.queries == 0 {
            return Err(Error::config("blackbox.queries", "must be at least 1"));
        }
        if self.blackbox.width == 0 {
            return Err(Error::config("blackbox.width", "must be at least 1"));
        }
        if self.blackbox.param_budget == Some(0) {
            return Err(Error::config("blackbox.param_budget", "must be positive"));
        }
        self.blackbox.train.validate("blackbox.train")?;
        for (i, s) in self.defense.sigmas.iter().enumerate() {
            if !(s.is_finite() && *s >= 0.0) {
                return Err(Error::config(format!("defense.sigmas[{i}]"), "must be finite and >= 0"));
            }
        }
        if self.defense.sigmas.is_empty() {
            return Err(Error::config("defense.sigmas", "must list at least one sigma"));
        }
        if !MODEL_NAMES.contains(&self.metrics.classifier.as_str()) {
            return Err(Error::config(
                "metrics.classifier",
                format!("unknown classifier `{}`; known models: {}", self.metrics.classifier, MODEL_NAMES.join(", ")),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Apply `key=value` overrides, where `value` is a TOML literal (bare
    /// words are taken as strings). The result is validated again.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("serialized config parses");
        for (key, raw) in overrides {
            let value = parse_literal(raw);
            let parts: Vec<&str> = key.split('.').collect();
            let mut table = &mut doc;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key.clone(), format!("`{p}` is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        parse_config_str(&toml::to_string(&doc).expect("table serializes"))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        let inv = cfg.attack.inversion(cfg.seed);
        assert_eq!(inv.iterations, 1500);
        assert_eq!(inv.learning_rate, 0.1);
        assert_eq!(inv.sampling_steps, 20);
        assert_eq!(inv.init_std, 0.1);
        assert_eq!(inv.weights.lambda_s, 1.0);
        assert_eq!(cfg.blackbox.train.epochs, 96);
        assert_eq!(cfg.blackbox.train.batch_size, 128);
    }

    #[test]
    fn errors_carry_key_paths() {
        let e = parse_config_str("[attack]\niterations = -3\n").unwrap_err();
        assert!(e.to_string().contains("attack.iterations"), "{e}");
        let e = parse_config_str("[attack]\nlambda_q = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("attack"), "{e}");
        assert!(e.to_string().contains("lambda_q"), "{e}");
        let e = parse_config_str("[attack]\niterations = 0\n").unwrap_err();
        assert!(e.to_string().contains("attack.iterations"), "{e}");
        let e = parse_config_str("[blackbox.train]\nbatch_size = \"big\"\n").unwrap_err();
        assert!(e.to_string().contains("blackbox.train.batch_size"), "{e}");
        let e = parse_config_str("[prior]\nname = \"gan\"\n").unwrap_err();
        assert!(e.to_string().contains("prior.name"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let src = "seed = 5\n[attack]\nvariant = \"multiframe\"\nlambda_c = 5.0\ntext = \"a red circle\"\n[blackbox]\nparam_budget = 5000\n";
        let a = parse_config_str(src).unwrap();
        let b = parse_config_str(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
    }

    #[test]
    fn overrides_replace_single_keys() {
        let cfg = parse_config_str("").unwrap();
        let o = cfg
            .with_overrides(&[
                ("attack.iterations".into(), "20".into()),
                ("prior.name".into(), "toy_decoder".into()),
            ])
            .unwrap();
        assert_eq!(o.attack.iterations, 20);
        assert_eq!(o.prior.name, "toy_decoder");
        let e = cfg.with_overrides(&[("attack.iterations".into(), "-1".into())]).unwrap_err();
        assert!(e.to_string().contains("attack.iterations"));
    }
}
