//! Run configuration: a TOML file (`key = value` lines grouped in sections)
//! with `--set section.key=value` overrides from the command line.

use std::fs;
use std::path::Path;

use mpgan::datagen::{AzimuthDistribution, DatasetSpec, FamilyKind, ShapeFamily};
use mpgan::eval::{ExtractorTraining, FEATURE_DIM};
use mpgan::gan::TrainConfig;
use mpgan::joint::JointConfig;
use mpgan::nets::NetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One discriminator under the uniform view prior.
    Single,
    /// K discriminators on slots built from the dataset's oracle view labels.
    MpGanOracle,
    /// Bootstrap, then alternate view prediction and multi-projection training.
    VpMpGan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    /// Training cycles for `single` and `mp-gan-oracle`.
    pub steps: u64,
    pub seed: u64,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Checkpoint period in cycles for `single` and `mp-gan-oracle`.
    pub checkpoint_every: u64,
    pub threads: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: Mode::Single,
            steps: 4000,
            seed: 0,
            batch: t.batch,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            checkpoint_every: 1000,
            threads: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { batch: self.batch, lr: self.lr, beta1: self.beta1, beta2: self.beta2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub family: FamilyKind,
    pub resolution: usize,
    pub shapes: usize,
    pub views_per_shape: usize,
    pub seed: u64,
    pub azimuth: AzimuthDistribution,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::chairs(32, 0);
        Self {
            family: FamilyKind::Chair,
            resolution: d.resolution,
            shapes: d.shapes,
            views_per_shape: d.views_per_shape,
            seed: d.seed,
            azimuth: d.azimuth,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            family: ShapeFamily::of(self.family),
            resolution: self.resolution,
            shapes: self.shapes,
            views_per_shape: self.views_per_shape,
            azimuth: self.azimuth.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generator samples per FID evaluation.
    pub samples: usize,
    pub extractor: ExtractorTraining,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 1000, extractor: ExtractorTraining::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: NetConfig,
    pub train: TrainSection,
    pub joint: JointConfig,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Applies `a.b.c=value` to a table, creating intermediate sections.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| usage(format!("{key}: {part} is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_owned(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional file, applies overrides in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| usage(format!("model: {e}")))?;
        self.dataset.spec().validate().map_err(|e| usage(format!("dataset: {e}")))?;
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(usage("train: batch and lr must be positive, betas in [0, 1)"));
        }
        if t.checkpoint_every == 0 {
            return Err(usage("train: checkpoint_every must be positive"));
        }
        if self.joint.classifier.batch == 0 || self.joint.view_shapes == 0 {
            return Err(usage("joint: classifier batch and view_shapes must be positive"));
        }
        if self.eval.samples <= FEATURE_DIM {
            return Err(usage(format!("eval: samples must be at least {}", FEATURE_DIM + 1)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
