//! Experiment configuration: one JSON document describing data, split,
//! model, objective, training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factorspace::{builtin_condition, partition, Atom, DatasetSplit, SplitCondition};
use crate::metrics::{LassoConfig, DEFAULT_ALPHA, DEFAULT_SAMPLE_SIZE};
use crate::nnmodels::{ModelConfig, Profile};
use crate::synthgen::{DatasetDef, DatasetKind, GridSizes, RenderSpec};
use crate::training::{ObjectiveConfig, ObjectiveFamily, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    #[serde(default)]
    pub grid: GridSizes,
}

impl DatasetConfig {
    pub fn definition(&self) -> Result<DatasetDef> {
        DatasetDef::new(self.name, self.grid)
    }
}

/// A built-in condition by name, or an inline list of atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConditionConfig {
    Named(String),
    Inline { name: String, atoms: Vec<Atom> },
}

impl ConditionConfig {
    pub fn name(&self) -> &str {
        match self {
            ConditionConfig::Named(n) | ConditionConfig::Inline { name: n, .. } => n,
        }
    }

    pub fn resolve(&self, dataset: DatasetKind) -> Result<SplitCondition> {
        match self {
            ConditionConfig::Named(n) => builtin_condition(dataset.name(), n),
            ConditionConfig::Inline { atoms, .. } => Ok(SplitCondition::new(atoms.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Factor pair examined by the latent diagnostics; the first two factors
    /// when absent.
    #[serde(default)]
    pub diagnose: Option<(String, String)>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_sample_size() -> usize {
    DEFAULT_SAMPLE_SIZE
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            alpha: DEFAULT_ALPHA,
            sample_size: DEFAULT_SAMPLE_SIZE,
            diagnose: None,
        }
    }
}

impl MetricConfig {
    pub fn lasso(&self) -> LassoConfig {
        LassoConfig::with_alpha(self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub condition: ConditionConfig,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    /// Rendering parameters; the profile canvas and native channel count when absent.
    #[serde(default)]
    pub render: Option<RenderSpec>,
    /// Explicit architecture; derived from the profile when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn default_profile() -> Profile {
    Profile::Reduced
}

impl ExperimentConfig {
    /// A complete configuration with dataset defaults for `kind`.
    pub fn default_for(kind: DatasetKind, condition: &str, objective: ObjectiveConfig, seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetConfig {
                name: kind,
                grid: GridSizes::default(),
            },
            condition: ConditionConfig::Named(condition.to_string()),
            profile: Profile::Reduced,
            render: None,
            model: None,
            objective,
            train: TrainConfig::for_dataset(kind, seed),
            metrics: MetricConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn render_spec(&self) -> RenderSpec {
        self.render
            .unwrap_or_else(|| RenderSpec::new(self.profile.canvas(), self.dataset.name.native_channels()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let def = self.dataset.definition()?;
        Ok(match &self.model {
            Some(m) => m.clone(),
            None => {
                let render = self.render_spec();
                ModelConfig::for_dataset(self.profile, self.dataset.name, render.channels, def.space.n_factors())
                    .with_output(self.objective.output_activation())
            }
        })
    }

    pub fn split(&self, def: &DatasetDef) -> Result<DatasetSplit> {
        partition(&def.space, &self.condition.resolve(self.dataset.name)?)
    }

    /// Names of the factor pair used by the diagnostics.
    pub fn diagnose_pair(&self) -> Result<(String, String)> {
        match &self.metrics.diagnose {
            Some(p) => Ok(p.clone()),
            None => {
                let def = self.dataset.definition()?;
                let f = def.space.factors();
                Ok((f[0].name.clone(), f[1].name.clone()))
            }
        }
    }

    /// Checks internal consistency; every failure names the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) if m.starts_with(name) => Error::Config(m),
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            other => Error::Config(format!("{name}: {other}")),
        };
        let def = self.dataset.definition().map_err(|e| field("dataset", e))?;
        self.split(&def).map_err(|e| field("condition", e))?;
        let render = self.render_spec();
        render.validate().map_err(|e| field("render", e))?;
        let model = self.model_config()?;
        model.validate().map_err(|e| field("model", e))?;
        if model.canvas != render.size {
            return Err(Error::Config(format!(
                "model.canvas: {} does not match render.size {}",
                model.canvas, render.size
            )));
        }
        if model.channels != render.channels {
            return Err(Error::Config(format!(
                "model.channels: {} does not match render.channels {}",
                model.channels, render.channels
            )));
        }
        if model.n_factors != def.space.n_factors() {
            return Err(Error::Config(format!(
                "model.n_factors: {} but dataset {} has {} factors",
                model.n_factors,
                def.name(),
                def.space.n_factors()
            )));
        }
        self.objective.validate().map_err(|e| field("objective", e))?;
        if self.objective.family != ObjectiveFamily::Supervised && model.output != self.objective.output_activation() {
            return Err(Error::Config(format!(
                "model.output: {:?} cannot be trained with {:?} reconstruction",
                model.output, self.objective.reconstruction
            )));
        }
        self.train.validate().map_err(|e| field("train", e))?;
        if self.train.seed != self.seed {
            return Err(Error::Config(format!(
                "train.seed: {} differs from seed {}",
                self.train.seed, self.seed
            )));
        }
        if !(self.metrics.alpha >= 0.0) || self.metrics.sample_size == 0 {
            return Err(Error::Config(
                "metrics: alpha must be nonnegative and sample_size positive".into(),
            ));
        }
        let (a, b) = self.diagnose_pair()?;
        if a == b {
            return Err(Error::Config("metrics.diagnose: factors must differ".into()));
        }
        for name in [&a, &b] {
            def.space.factor_index(name).map_err(|e| field("metrics.diagnose", e))?;
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig::default_for(DatasetKind::Simple, "simple_midpos", ObjectiveConfig::wae(), 3)
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = sample();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
        assert_ne!(c.clone().with_seed(4).hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let text = r#"{
            "dataset": {"name": "circles", "grid": {"pos_x": 8, "pos_y": 8}},
            "condition": "circles_midpos",
            "objective": {"family": "vae", "reconstruction": "bernoulli_bce"},
            "train": {"batch": 16, "learning_rate": 0.0003, "max_epochs": 2, "seed": 0},
            "output_dir": "out",
            "seed": 0
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.render_spec().size, 32);
        assert_eq!(c.metrics.alpha, DEFAULT_ALPHA);
        assert_eq!(c.diagnose_pair().unwrap(), ("posX".to_string(), "posY".to_string()));
        let def = c.dataset.definition().unwrap();
        assert_eq!(def.space.total(), 64);
    }

    #[test]
    fn inline_condition() {
        let mut c = sample();
        c.condition = ConditionConfig::Inline {
            name: "left".into(),
            atoms: vec![Atom::less_than("posX", 0.2)],
        };
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.condition, c.condition);
        assert_eq!(back.condition.name(), "left");
    }

    #[test]
    fn inconsistencies_name_the_field() {
        let mut c = sample();
        c.render = Some(RenderSpec::new(64, 1));
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("model.canvas"), "{e}");

        let mut c = sample();
        c.train.seed = 99;
        assert!(c.validate().unwrap_err().to_string().contains("train.seed"));

        let mut c = sample();
        c.condition = ConditionConfig::Named("nope".into());
        assert!(c.validate().unwrap_err().to_string().contains("condition"));

        let mut c = sample();
        c.metrics.diagnose = Some(("shape".into(), "hue".into()));
        assert!(c.validate().unwrap_err().to_string().contains("metrics.diagnose"));

        let mut c = sample();
        let mut m = c.model_config().unwrap();
        m.n_factors = 5;
        c.model = Some(m);
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::Config(_))));
    }
}
