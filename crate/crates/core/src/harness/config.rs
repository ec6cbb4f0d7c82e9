use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{PretrainConfig, ReplayConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{Regime, ScConfig};
use crate::models::{ModelSpec, Shift};
use crate::networks::NetworkConfig;
use crate::reference::SamplerConfig;

/// A scalar or a list of values to sweep over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> Sweep<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            Sweep::One(v) => vec![v.clone()],
            Sweep::Many(v) => v.clone(),
        }
    }
}

fn default_lambda() -> Sweep<f64> {
    Sweep::One(1e3)
}

fn default_buffer() -> Sweep<usize> {
    Sweep::One(8)
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StreamSpec {
    /// Tasks simulated from the model under per-task shifts.
    Synthetic {
        #[serde(default = "ten")]
        subsets: usize,
        /// Observations per set; the model default when absent.
        set_size: Option<usize>,
        /// Prepend a task 0 drawn from the prior predictive.
        #[serde(default = "yes")]
        include_task0: bool,
        /// Explicit shifts for tasks 1..T.
        #[serde(default)]
        tasks: Vec<Shift>,
        /// Number of tasks with randomly drawn shifts, used when `tasks` is
        /// empty.
        random_tasks: Option<usize>,
        /// Seed for the data; the run seed when absent.
        data_seed: Option<u64>,
    },
    /// One CSV file per task, resampled into sets.
    Csv {
        files: Vec<PathBuf>,
        response: String,
        #[serde(default = "ten")]
        subsets: usize,
        set_size: Option<usize>,
        #[serde(default = "yes")]
        include_task0: bool,
        data_seed: Option<u64>,
    },
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec::Synthetic {
            subsets: 10,
            set_size: None,
            include_task0: true,
            tasks: Vec::new(),
            random_tasks: None,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Draws per set from each trained network.
    pub flow_samples: usize,
    /// Draws per set from the analytic posterior when the model has one;
    /// otherwise the sampler's `n_samples` applies.
    pub reference_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            flow_samples: 4000,
            reference_samples: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelSpec,
    pub regimes: Vec<Regime>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// EWC strength; a list expands EWC regimes into one run per value.
    #[serde(default = "default_lambda")]
    pub lambda: Sweep<f64>,
    /// Replay buffer size `K`; a list expands replay regimes.
    #[serde(default = "default_buffer")]
    pub buffer_size: Sweep<usize>,
    #[serde(default)]
    pub sc: ScConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// One regime × seed × hyperparameter cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub regime: Regime,
    pub seed: u64,
    /// Set only for EWC regimes.
    pub lambda: Option<f64>,
    /// Set only for replay regimes.
    pub buffer_size: Option<usize>,
}

impl RunSpec {
    /// Regime name with the swept values, e.g. `sc-ewc[lambda=100]`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.lambda {
            parts.push(format!("lambda={l:?}"));
        }
        if let Some(k) = self.buffer_size {
            parts.push(format!("K={k}"));
        }
        if parts.is_empty() {
            self.regime.to_string()
        } else {
            format!("{}[{}]", self.regime, parts.join(","))
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config(origin.display().to_string(), e.to_string()))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        if let Some(base) = origin.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative CSV and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let StreamSpec::Csv { files, .. } = &mut self.stream {
            files.iter_mut().for_each(fix);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::config("regimes", "at least one regime is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        for (i, l) in self.lambda.values().iter().enumerate() {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(Error::config(
                    format!("lambda[{i}]"),
                    format!("must be finite and >= 0, got {l}"),
                ));
            }
        }
        if self.lambda.values().is_empty() {
            return Err(Error::config("lambda", "sweep list is empty"));
        }
        for (i, k) in self.buffer_size.values().iter().enumerate() {
            if *k < 1 {
                return Err(Error::config(format!("buffer_size[{i}]"), "must be >= 1"));
            }
        }
        if self.buffer_size.values().is_empty() {
            return Err(Error::config("buffer_size", "sweep list is empty"));
        }
        self.sc
            .validate()
            .map_err(|e| Error::config("sc", e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| Error::config("sampler", e.to_string()))?;
        if self.evaluation.flow_samples < 2 || self.evaluation.reference_samples < 2 {
            return Err(Error::config("evaluation", "sample counts must be >= 2"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be >= 1"));
        }
        if self.replay.sets_per_task == 0 || self.replay.mean_draws == 0 {
            return Err(Error::config(
                "replay",
                "sets_per_task and mean_draws must be >= 1",
            ));
        }
        self.model
            .build()
            .map_err(|e| Error::config("model", e.to_string()))?;
        match &self.stream {
            StreamSpec::Synthetic {
                subsets,
                tasks,
                random_tasks,
                include_task0,
                ..
            } => {
                if *subsets == 0 {
                    return Err(Error::config("stream.subsets", "must be >= 1"));
                }
                for (i, s) in tasks.iter().enumerate() {
                    s.validate()
                        .map_err(|e| Error::config(format!("stream.tasks[{i}]"), e.to_string()))?;
                }
                if tasks.is_empty() && random_tasks == &Some(0) && !include_task0 {
                    return Err(Error::config("stream", "the stream has no tasks"));
                }
            }
            StreamSpec::Csv { files, subsets, .. } => {
                if files.is_empty() {
                    return Err(Error::config(
                        "stream.files",
                        "at least one CSV file is required",
                    ));
                }
                if *subsets == 0 {
                    return Err(Error::config("stream.subsets", "must be >= 1"));
                }
                for (i, f) in files.iter().enumerate() {
                    if !f.is_file() {
                        return Err(Error::config(
                            format!("stream.files[{i}]"),
                            format!("{} does not exist", f.display()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every run cell. Seeds vary slowest, then regimes in the listed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &regime in &self.regimes {
                let lambdas: Vec<Option<f64>> = if regime.uses_ewc() {
                    self.lambda.values().into_iter().map(Some).collect()
                } else {
                    vec![None]
                };
                let ks: Vec<Option<usize>> = if regime.uses_replay() {
                    self.buffer_size.values().into_iter().map(Some).collect()
                } else {
                    vec![None]
                };
                for &lambda in &lambdas {
                    for &buffer_size in &ks {
                        out.push(RunSpec {
                            regime,
                            seed,
                            lambda,
                            buffer_size,
                        });
                    }
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    ExperimentConfig::from_toml(&text, path)
}
