//! Config-driven experiments: stream construction, regime runs, evaluation
//! against reference posteriors and result persistence.

mod config;
mod plot;
mod table;

pub use config::{parse_config, EvalConfig, ExperimentConfig, RunSpec, StreamSpec, Sweep};
pub use plot::{
    aggregate, emit_plot_data, quantile, summarize, PlotKind, Summary, ABS_MEAN_BIAS, ABS_STD_BIAS,
    MMD, MMD_RATIO,
};
pub use table::{ResultRow, ResultTable, COLUMNS};

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{
    pretrain_sb, run_stream, RunManifest, SourceTag, StreamContext, Task, TaskStream,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::Regime;
use crate::models::{load_csv_task, ModelSpec, ProbModel, Shift};
use crate::networks::{load_params, save_params, Posterior, PosteriorNet};
use crate::reference::{
    bias_report, cache_dir_from_env, dataset_hash, mmd_ratio, rwm_sample, PosteriorSamples,
    Provenance, ReferenceCache, SamplerConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{ParamVector, Tensor};

/// Where a task's data came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: usize,
    pub source: SourceTag,
    /// Design shift of a synthetic task; `None` for the prior-predictive task 0.
    pub shift: Option<Shift>,
    /// Data-generating parameters shared by all sets of a shifted task.
    pub theta: Option<Vec<f64>>,
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct BuiltStream {
    pub stream: TaskStream,
    pub info: Vec<TaskInfo>,
}

fn hash_u64(x: &Tensor) -> u64 {
    u64::from_str_radix(&dataset_hash(x)[..16], 16).expect("hex digest")
}

fn prior_predictive_task(
    model: &dyn ProbModel,
    subsets: usize,
    n: usize,
    data_seed: u64,
) -> Result<(Task, TaskInfo)> {
    let mut rng = rng_for(data_seed, "stream-task", &[0]);
    let sets = (0..subsets)
        .map(|_| model.simulate(&mut rng, n).map(|(_, x)| x))
        .collect::<Result<Vec<_>>>()?;
    let task = Task {
        id: 0,
        source: SourceTag::Synthetic,
        sets,
    };
    let info = TaskInfo {
        task_id: 0,
        source: SourceTag::Synthetic,
        shift: None,
        theta: None,
        file: None,
    };
    Ok((task, info))
}

/// Covariate scale in `[0.5, 3]` and Student-t(3) or Gaussian noise with
/// equal odds.
pub fn random_shift(rng: &mut crate::rng::SimRng) -> Shift {
    let covariate_scale = rng.random_range(0.5..=3.0);
    let noise_df = if rng.random_bool(0.5) {
        Some(3.0)
    } else {
        None
    };
    Shift {
        covariate_scale,
        noise_df,
    }
}

/// Task stream for one run seed. Synthetic data is keyed by the stream's
/// `data_seed` when set, otherwise by `seed`; CSV subsets are keyed by the
/// file contents as well, so a file always yields the same sets.
pub fn build_stream(
    cfg: &ExperimentConfig,
    model: &dyn ProbModel,
    seed: u64,
) -> Result<BuiltStream> {
    let mut tasks = Vec::new();
    let mut info = Vec::new();
    match &cfg.stream {
        StreamSpec::Synthetic {
            subsets,
            set_size,
            include_task0,
            tasks: shifts,
            random_tasks,
            data_seed,
        } => {
            let ds = data_seed.unwrap_or(seed);
            let n = set_size.unwrap_or_else(|| model.default_set_size());
            if *include_task0 {
                let (t, i) = prior_predictive_task(model, *subsets, n, ds)?;
                tasks.push(t);
                info.push(i);
            }
            let shifts: Vec<Shift> = if shifts.is_empty() {
                (0..random_tasks.unwrap_or(3))
                    .map(|i| random_shift(&mut rng_for(ds, "shift", &[i as u64 + 1])))
                    .collect()
            } else {
                shifts.clone()
            };
            for (i, shift) in shifts.into_iter().enumerate() {
                let id = i + 1;
                let mut rng = rng_for(ds, "stream-task", &[id as u64]);
                let theta = model.sample_prior(&mut rng);
                let sets = (0..*subsets)
                    .map(|_| model.simulate_data(&theta, n, &shift, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                tasks.push(Task {
                    id,
                    source: SourceTag::Synthetic,
                    sets,
                });
                info.push(TaskInfo {
                    task_id: id,
                    source: SourceTag::Synthetic,
                    shift: Some(shift),
                    theta: Some(theta),
                    file: None,
                });
            }
        }
        StreamSpec::Csv {
            files,
            response,
            subsets,
            set_size,
            include_task0,
            data_seed,
        } => {
            let ds = data_seed.unwrap_or(seed);
            let n = set_size.unwrap_or_else(|| model.default_set_size());
            if *include_task0 {
                let (t, i) = prior_predictive_task(model, *subsets, n, ds)?;
                tasks.push(t);
                info.push(i);
            }
            for (i, file) in files.iter().enumerate() {
                let id = i + 1;
                let sets = csv_subsets(model, file, response, *subsets, n, ds)?;
                tasks.push(Task {
                    id,
                    source: SourceTag::Csv,
                    sets,
                });
                info.push(TaskInfo {
                    task_id: id,
                    source: SourceTag::Csv,
                    shift: None,
                    theta: None,
                    file: Some(file.clone()),
                });
            }
        }
    }
    Ok(BuiltStream {
        stream: TaskStream::new(tasks, model.dim_x())?,
        info,
    })
}

/// Standardized rows of `file` resampled with replacement into sets.
pub fn csv_subsets(
    model: &dyn ProbModel,
    file: &Path,
    response: &str,
    subsets: usize,
    set_size: usize,
    data_seed: u64,
) -> Result<Vec<Tensor>> {
    let t = load_csv_task(file, response, Some(model.dim_x() - 1))?;
    let mut rng = rng_for(data_seed, "csv-subsets", &[hash_u64(&t.rows)]);
    t.subsets(subsets, set_size, &mut rng)
}

/// Reference draws for one set: `analytic_samples` exact draws for models
/// with a closed-form posterior, random-walk Metropolis (cached)
/// otherwise. The random stream is keyed by the data, so equal sets get
/// equal references.
pub fn reference_samples(
    spec: &ModelSpec,
    model: &dyn ProbModel,
    sampler: &SamplerConfig,
    analytic_samples: usize,
    x: &Tensor,
    cache: Option<&ReferenceCache>,
) -> Result<PosteriorSamples> {
    let seed = derive_seed(0, "reference", &[hash_u64(x)]);
    if let Some(exact) = model.analytic_posterior(x) {
        let draws = exact.sample(analytic_samples, &mut crate::rng::seeded(seed))?;
        return PosteriorSamples::new(draws, Provenance::Analytic);
    }
    let compute =
        || rwm_sample(model, x, sampler, &mut crate::rng::seeded(seed)).map(|o| o.samples);
    match cache {
        Some(c) => {
            let model_id = serde_json::to_string(spec)?;
            c.get_or_compute(&ReferenceCache::key(&model_id, x, sampler, seed), compute)
        }
        None => compute(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub reused: bool,
    pub loss_trace: Vec<f64>,
    pub diverged: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PretrainSidecar {
    loss_trace: Vec<f64>,
    diverged: Option<String>,
}

/// Cache key of the pre-trained network for one seed.
pub fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    for part in [
        serde_json::to_string(&cfg.model).expect("serializes"),
        serde_json::to_string(&cfg.network).expect("serializes"),
        serde_json::to_string(&cfg.pretrain).expect("serializes"),
    ] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())
}

/// Loads the shared pre-trained checkpoint for `seed` or trains and stores it.
pub fn pretrained_params(
    cfg: &ExperimentConfig,
    model: &dyn ProbModel,
    net: &PosteriorNet,
    seed: u64,
) -> Result<(ParamVector, PretrainRecord)> {
    let dir = cfg.output_dir.join("pretrained");
    let key = pretrain_key(cfg, seed);
    let path = dir.join(format!("{}.ckpt", &key[..16]));
    let side = dir.join(format!("{}.json", &key[..16]));
    if path.is_file() && side.is_file() {
        let params = load_params(&path, net.layout())?;
        let s: PretrainSidecar = serde_json::from_slice(&std::fs::read(&side)?)?;
        info!(
            "seed {seed}: reusing pre-trained network {}",
            path.display()
        );
        return Ok((
            params,
            PretrainRecord {
                seed,
                checkpoint: path,
                reused: true,
                loss_trace: s.loss_trace,
                diverged: s.diverged,
            },
        ));
    }
    info!("seed {seed}: pre-training");
    let init = net.init_params(&mut rng_for(seed, "init", &[]));
    let out = pretrain_sb(
        model,
        net,
        init,
        &cfg.pretrain,
        &mut rng_for(seed, "pretrain", &[]),
    )?;
    save_params(&path, &out.params)?;
    let sidecar = PretrainSidecar {
        loss_trace: out.loss_trace.clone(),
        diverged: out.diverged.clone(),
    };
    write_atomic(&side, &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok((
        out.params,
        PretrainRecord {
            seed,
            checkpoint: path,
            reused: false,
            loss_trace: out.loss_trace,
            diverged: out.diverged,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub label: String,
    /// `ok`, `partial` (some tasks failed) or `failed: <reason>`.
    pub status: String,
    pub stream: Option<RunManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub seed: u64,
    pub tasks: Vec<TaskInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub reference: String,
    pub test_time_start: String,
    pub pretrained: Vec<PretrainRecord>,
    pub streams: Vec<StreamRecord>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok,
    Partial,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Ok => 0,
            ExitStatus::Partial => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub table: ResultTable,
    pub manifest: ExperimentManifest,
    pub status: ExitStatus,
    /// Final parameters per run cell, in manifest order; `None` for failed runs.
    pub params: Vec<Option<ParamVector>>,
}

fn metric_rows(
    spec: &RunSpec,
    task: usize,
    subset: usize,
    names: &[String],
    method: &PosteriorSamples,
    sb: &PosteriorSamples,
    reference: &PosteriorSamples,
) -> Result<ResultTable> {
    let row = |metric: String, value: f64| ResultRow {
        regime: spec.regime,
        lambda: spec.lambda,
        buffer_size: spec.buffer_size,
        task,
        subset,
        seed: spec.seed,
        metric,
        value,
    };
    let mut t = ResultTable::new();
    let r = mmd_ratio(method, sb, reference)?;
    t.push(row(MMD.into(), r.method_mmd))?;
    t.push(row(MMD_RATIO.into(), r.ratio))?;
    for (b, name) in bias_report(method, reference)?.iter().zip(names) {
        t.push(row(format!("{ABS_MEAN_BIAS}/{name}"), b.mean_bias.abs()))?;
        t.push(row(format!("{ABS_STD_BIAS}/{name}"), b.std_bias.abs()))?;
    }
    Ok(t)
}

fn flow_samples(
    net: &PosteriorNet,
    params: &ParamVector,
    x: &Tensor,
    n: usize,
    seed: u64,
    task: usize,
    subset: usize,
) -> Result<PosteriorSamples> {
    let mut rng = rng_for(seed, "eval", &[task as u64, subset as u64]);
    PosteriorSamples::new(net.sample(params, x, n, &mut rng)?, Provenance::Flow)
}

fn path_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-=.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every cell of the experiment and evaluates the result. CL regimes
/// are scored with their final parameters on every task; test-time SC is
/// scored per task with that task's parameters. Nothing is written to disk
/// besides checkpoints and the reference cache; see [`write_outputs`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let net = PosteriorNet::new(model.dim_theta(), model.dim_x(), &cfg.network)?;
    let names = model.param_names();
    let cache =
        ReferenceCache::new(cache_dir_from_env().unwrap_or_else(|| cfg.output_dir.join("cache")));
    let config_hash = cfg.hash();
    let runs = cfg.runs();
    let mut manifest = ExperimentManifest {
        name: cfg.name.clone(),
        config_hash: config_hash.clone(),
        config: cfg.clone(),
        reference: if model
            .analytic_posterior(&Tensor::zeros(&[1, model.dim_x()]))
            .is_some()
        {
            "draws from the analytic conjugate posterior".into()
        } else {
            format!(
                "random-walk Metropolis, {} draws after {} warmup steps (thin {}), in place of a gradient-based sampler",
                cfg.sampler.n_samples, cfg.sampler.warmup, cfg.sampler.thin
            )
        },
        test_time_start: "each task starts from the pre-trained checkpoint".into(),
        pretrained: Vec::new(),
        streams: Vec::new(),
        runs: Vec::new(),
    };
    let mut table = ResultTable::new();
    let mut params_out = Vec::new();
    let mut any_failure = false;

    for &seed in &cfg.seeds {
        let (pretrained, record) = pretrained_params(cfg, model.as_ref(), &net, seed)?;
        if record.diverged.is_some() {
            any_failure = true;
        }
        manifest.pretrained.push(record);
        let built = build_stream(cfg, model.as_ref(), seed)?;
        manifest.streams.push(StreamRecord {
            seed,
            tasks: built.info.clone(),
        });
        let stream = &built.stream;

        let mut refs: Vec<Vec<PosteriorSamples>> = Vec::new();
        let mut sb: Vec<Vec<PosteriorSamples>> = Vec::new();
        for task in stream.tasks() {
            let mut r = Vec::new();
            let mut s = Vec::new();
            for (j, x) in task.sets.iter().enumerate() {
                r.push(reference_samples(
                    &cfg.model,
                    model.as_ref(),
                    &cfg.sampler,
                    cfg.evaluation.reference_samples,
                    x,
                    Some(&cache),
                )?);
                s.push(flow_samples(
                    &net,
                    &pretrained,
                    x,
                    cfg.evaluation.flow_samples,
                    seed,
                    task.id,
                    j,
                )?);
            }
            refs.push(r);
            sb.push(s);
        }

        for spec in runs.iter().filter(|r| r.seed == seed) {
            let label = spec.label();
            let train = crate::continual::TrainConfig {
                lambda: spec.lambda.unwrap_or(0.0),
                ..cfg.train.clone()
            };
            let replay = crate::continual::ReplayConfig {
                capacity: spec.buffer_size.unwrap_or(1),
                ..cfg.replay.clone()
            };
            let ctx = StreamContext {
                model: model.as_ref(),
                net: &net,
                sc: &cfg.sc,
                train: &train,
                replay: &replay,
            };
            info!("seed {seed}: running {label}");
            let ckpt_dir = cfg.output_dir.join("checkpoints").join(path_label(&label));
            let outcome = match run_stream(
                &ctx,
                spec.regime,
                stream,
                &pretrained,
                seed,
                &config_hash,
                Some(&ckpt_dir),
            ) {
                Ok(o) => o,
                Err(e) => {
                    warn!("{label} seed {seed} failed: {e}");
                    any_failure = true;
                    manifest.runs.push(RunRecord {
                        spec: spec.clone(),
                        label,
                        status: format!("failed: {e}"),
                        stream: None,
                    });
                    params_out.push(None);
                    continue;
                }
            };
            let mut cell = ResultTable::new();
            let evaluated: Result<()> = (|| {
                for (pos, task) in stream.tasks().iter().enumerate() {
                    if spec.regime == Regime::TestTimeSc {
                        // Scored only on its own task, with its own parameters.
                        for (j, x) in task.sets.iter().enumerate() {
                            let m = flow_samples(
                                &net,
                                &outcome.per_task[pos],
                                x,
                                cfg.evaluation.flow_samples,
                                seed,
                                task.id,
                                j,
                            )?;
                            cell.extend(metric_rows(
                                spec,
                                task.id,
                                j,
                                &names,
                                &m,
                                &sb[pos][j],
                                &refs[pos][j],
                            )?);
                        }
                        continue;
                    }
                    for (j, x) in task.sets.iter().enumerate() {
                        let m = if spec.regime == Regime::Sb {
                            sb[pos][j].clone()
                        } else {
                            flow_samples(
                                &net,
                                &outcome.final_params,
                                x,
                                cfg.evaluation.flow_samples,
                                seed,
                                task.id,
                                j,
                            )?
                        };
                        cell.extend(metric_rows(
                            spec,
                            task.id,
                            j,
                            &names,
                            &m,
                            &sb[pos][j],
                            &refs[pos][j],
                        )?);
                    }
                }
                Ok(())
            })();
            let failed_tasks = outcome.manifest.failed_tasks();
            let status = match evaluated {
                Err(e) => {
                    warn!("{label} seed {seed}: evaluation failed: {e}");
                    any_failure = true;
                    format!("failed: evaluation: {e}")
                }
                Ok(()) => {
                    table.extend(cell);
                    if failed_tasks > 0 {
                        any_failure = true;
                        "partial".into()
                    } else {
                        "ok".into()
                    }
                }
            };
            manifest.runs.push(RunRecord {
                spec: spec.clone(),
                label,
                status,
                stream: Some(outcome.manifest),
            });
            params_out.push(Some(outcome.final_params));
        }
    }
    table.finalize()?;
    Ok(ExperimentOutcome {
        table,
        manifest,
        status: if any_failure {
            ExitStatus::Partial
        } else {
            ExitStatus::Ok
        },
        params: params_out,
    })
}

/// Writes `results.csv`, `manifest.json` and every plot file into the
/// configured output directory.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let results = dir.join("results.csv");
    outcome.table.write_csv(&results)?;
    let manifest = dir.join("manifest.json");
    write_atomic(&manifest, &serde_json::to_vec_pretty(&outcome.manifest)?)?;
    let mut written = vec![results, manifest];
    if !outcome.table.is_empty() {
        for kind in PlotKind::ALL {
            written.extend(emit_plot_data(
                &outcome.table,
                kind,
                None,
                &dir.join("plots"),
            )?);
        }
    }
    Ok(written)
}

/// Reads a results directory written by [`write_outputs`] and emits one
/// plot file.
pub fn report(
    results_dir: &Path,
    kind: PlotKind,
    regimes: Option<&[Regime]>,
) -> Result<Vec<PathBuf>> {
    let table = ResultTable::read_csv(&results_dir.join("results.csv"))?;
    if table.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no result rows",
            results_dir.display()
        )));
    }
    emit_plot_data(&table, kind, regimes, &results_dir.join("plots"))
}
