use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vind::intractability::{DemoParams, Quadrature};
use vind::lorenz::{LorenzParams, ObservationSynth};
use vind::training::TrainConfig;
use vind::EvalSettings;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n_trials: usize,
    pub trial_len: usize,
    /// Train, test and validation fractions.
    pub split: [f64; 3],
    pub lorenz: LorenzParams,
    pub observation: ObservationSynth,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            trial_len: 250,
            split: [0.66, 0.17, 0.17],
            lorenz: LorenzParams::default(),
            observation: ObservationSynth::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { checkpoint_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_max: usize,
    pub fpi_iters: usize,
    pub fpi_tol: f64,
    pub splits: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self {
            k_max: s.k_max,
            fpi_iters: s.fpi_iters,
            fpi_tol: s.fpi_tol,
            splits: vec!["train".into(), "test".into(), "validation".into()],
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            k_max: self.k_max,
            fpi_iters: self.fpi_iters,
            fpi_tol: self.fpi_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub d_z: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            d_z: vec![2, 3, 4, 5],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoMap {
    /// `a(z) = z`
    Linear,
    /// `a(z) = z + gain·tanh(z)`
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub map: DemoMap,
    pub gain: f64,
    pub params: DemoParams,
    pub quadrature: Quadrature,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            map: DemoMap::Tanh,
            gain: 0.5,
            params: DemoParams::default(),
            quadrature: Quadrature::default(),
        }
    }
}

/// Locations of inputs and outputs; unset entries live under `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_dir: Option<PathBuf>,
}

/// Everything a command needs. `seed` drives data generation and training;
/// it replaces `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: PathsConfig,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub demo: DemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        // minibatches of a sixth of the Lorenz training set; one full-batch
        // step per epoch is too slow to fit within the epoch budget
        let train = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 11,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            threads: 0,
            paths: PathsConfig::default(),
            generate: GenerateConfig::default(),
            train,
            fit: FitConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            demo: DemoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("reading config {}", p.display()), e))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.train.threads = cfg.threads;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.generate.n_trials == 0 || self.generate.trial_len == 0 {
            return Err(CliError::Config("generate.n_trials and generate.trial_len must be positive".into()));
        }
        if self.train.model.d_x != self.generate.observation.d_x {
            return Err(CliError::Config(format!(
                "train.model.d_x = {} but generate.observation.d_x = {}",
                self.train.model.d_x, self.generate.observation.d_x
            )));
        }
        for s in &self.eval.splits {
            if !["train", "test", "validation"].contains(&s.as_str()) {
                return Err(CliError::Config(format!("unknown split {s:?} in eval.splits")));
            }
        }
        if self.sweep.d_z.contains(&0) {
            return Err(CliError::Config("sweep.d_z entries must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot render config: {e}")))
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(|| out.join("data"))
    }

    pub fn fit_dir(&self, out: &Path) -> PathBuf {
        self.paths.fit_dir.clone().unwrap_or_else(|| out.join("fit"))
    }
}
