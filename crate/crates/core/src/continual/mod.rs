//! Sequential fine-tuning over a stream of unlabeled tasks: replay buffer
//! upkeep, EWC records, SB pre-training and the per-task training loops.

mod kmedoids;

pub use kmedoids::{kmedoids, medoid_cost};

pub use crate::losses::EwcRecord;

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{sb_loss, CompositeInputs, Regime, ScObjective};
use crate::models::ProbModel;
use crate::networks::{save_params, Posterior, PosteriorNet};
use crate::rng::{rng_for, SimRng};
use crate::tensor::{cosine_lr, Adam, ParamVector, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Synthetic,
    Csv,
}

/// One unlabeled dataset, already split into observation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub source: SourceTag,
    pub sets: Vec<Tensor>,
}

impl Task {
    pub fn set_refs(&self) -> Vec<&Tensor> {
        self.sets.iter().collect()
    }
}

/// Tasks in arrival order. The order is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    dim_x: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, dim_x: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument(
                "a task stream needs at least one task".into(),
            ));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate task id {}",
                    t.id
                )));
            }
            if t.sets.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "task {} has no observation sets",
                    t.id
                )));
            }
            for x in &t.sets {
                if x.rank() != 2 || x.cols() != dim_x || x.rows() == 0 {
                    return Err(Error::Shape {
                        op: "task stream",
                        lhs: x.shape().to_vec(),
                        rhs: vec![dim_x],
                    });
                }
            }
        }
        Ok(Self { tasks, dim_x })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_sets(&self) -> usize {
        self.tasks.iter().map(|t| t.sets.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub task_id: usize,
    pub set: Tensor,
    /// Posterior mean used as the clustering coordinate.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 1 {
            return Err(Error::InvalidArgument(
                "replay buffer capacity must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sets(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.set).collect()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.task_id).collect()
    }
}

/// Appends `entry` while there is room; otherwise clusters all entries plus
/// the new one into `k` groups and keeps only the medoids, in their
/// original order.
pub fn kmedoid_update(buffer: &ReplayBuffer, entry: BufferEntry, k: usize) -> Result<ReplayBuffer> {
    if k < 1 {
        return Err(Error::InvalidArgument("buffer size K must be >= 1".into()));
    }
    let mut entries = buffer.entries.clone();
    entries.push(entry);
    if entries.len() > k {
        let points: Vec<Vec<f64>> = entries.iter().map(|e| e.embedding.clone()).collect();
        let keep = kmedoids(&points, k)?;
        entries = keep.into_iter().map(|i| entries[i].clone()).collect();
    }
    Ok(ReplayBuffer {
        capacity: k,
        entries,
    })
}

/// Column means of `n` posterior draws for `x`.
pub fn posterior_mean(
    posterior: &dyn Posterior,
    params: &ParamVector,
    x: &Tensor,
    n: usize,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let draws = posterior.sample(params, x, n, rng)?;
    let d = draws.cols();
    let mut mean = vec![0.0; d];
    for i in 0..draws.rows() {
        for (m, v) in mean.iter_mut().zip(draws.row(i)) {
            *m += v;
        }
    }
    Ok(mean.into_iter().map(|m| m / draws.rows() as f64).collect())
}

/// Snapshot of `params` and the SC-loss Fisher diagonal over the task's sets.
pub fn make_ewc_record(
    objective: &ScObjective<'_>,
    params: &ParamVector,
    task: &Task,
    rng: &mut SimRng,
) -> Result<EwcRecord> {
    let importance = objective.fisher_diag(params, &task.set_refs(), rng)?;
    Ok(EwcRecord {
        task_id: task.id,
        snapshot: params.clone(),
        importance,
    })
}

/// `sqrt(Σⱼ Wⱼ (Φⱼ − Φ*ⱼ)²)` for one record.
pub fn weighted_drift(record: &EwcRecord, params: &ParamVector) -> Result<f64> {
    params.check_compatible(&record.snapshot)?;
    Ok(params
        .values()
        .iter()
        .zip(record.snapshot.values())
        .zip(record.importance.values())
        .map(|((p, s), w)| w * (p - s) * (p - s))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Observations per simulated set; `None` uses the model default.
    pub set_size: Option<usize>,
    /// Initial learning rate, cosine-annealed over all steps.
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batches_per_epoch: 64,
            batch_size: 32,
            set_size: None,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub params: ParamVector,
    /// Mean SB loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Set when a non-finite loss stopped training; `params` is then the
    /// last parameters with a finite loss.
    pub diverged: Option<String>,
}

/// Online SB training on fresh prior-predictive simulations every step.
pub fn pretrain_sb(
    model: &dyn ProbModel,
    net: &PosteriorNet,
    init: ParamVector,
    cfg: &PretrainConfig,
    rng: &mut SimRng,
) -> Result<PretrainOutcome> {
    net.check_params(&init)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let n_obs = cfg.set_size.unwrap_or_else(|| model.default_set_size());
    let total = cfg.epochs * cfg.batches_per_epoch;
    let mut params = init;
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let mut thetas = Vec::with_capacity(cfg.batch_size * model.dim_theta());
            let mut xs = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (theta, x) = model.simulate(rng, n_obs)?;
                thetas.extend(theta);
                xs.push(x);
            }
            let thetas = Tensor::matrix(cfg.batch_size, model.dim_theta(), thetas)?;
            let refs: Vec<&Tensor> = xs.iter().collect();
            let mut tape = Tape::new();
            let vars = tape.bind(&params);
            let outcome = sb_loss(&mut tape, net, &vars, &thetas, &refs).and_then(|loss| {
                let grads = tape.backward(loss)?.collect(&vars);
                let value = tape.value(loss).item();
                adam.step(&mut params, &grads, cosine_lr(step, total, cfg.lr))?;
                Ok(value)
            });
            match outcome {
                Ok(v) => acc += v,
                Err(
                    e @ (Error::NonFinite { .. }
                    | Error::NonFiniteGradient { .. }
                    | Error::FlowNonFinite { .. }),
                ) => {
                    warn!("sb pre-training diverged at epoch {epoch}, step {step}: {e}");
                    return Ok(PretrainOutcome {
                        params,
                        loss_trace: trace,
                        diverged: Some(format!("epoch {epoch}, step {step}: {e}")),
                    });
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let mean = acc / cfg.batches_per_epoch.max(1) as f64;
        info!("sb epoch {epoch}: loss {mean:.4}");
        trace.push(mean);
    }
    Ok(PretrainOutcome {
        params,
        loss_trace: trace,
        diverged: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Full-data Adam steps per task.
    pub epochs: usize,
    pub lr: f64,
    /// Multiply the initial learning rate by the 1-based task position.
    pub lr_scales_with_task: bool,
    /// EWC strength. Set per run by the harness, not read from config files.
    #[serde(skip)]
    pub lambda: f64,
    /// Consecutive non-finite steps tolerated before a task is abandoned.
    pub max_nonfinite_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            lr_scales_with_task: false,
            lambda: 1e3,
            max_nonfinite_steps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Composite loss before each step; `None` marks a non-finite step.
    pub loss_trace: Vec<Option<f64>>,
    /// True when training stopped early; `params` is then the best-loss
    /// checkpoint seen.
    pub aborted: bool,
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteRatio { .. }
            | Error::FlowNonFinite { .. }
    )
}

/// Adam on the regime objective with a cosine schedule, every step using all
/// sets of the task (plus the buffer for replay regimes).
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    objective: &ScObjective<'_>,
    regime: Regime,
    params: &ParamVector,
    task: &Task,
    buffer: &ReplayBuffer,
    records: &[EwcRecord],
    cfg: &TrainConfig,
    lr0: f64,
    rng: &mut SimRng,
) -> Result<TrainOutcome> {
    if !regime.is_sc() {
        return Err(Error::InvalidArgument(
            "the sb regime does not fine-tune".into(),
        ));
    }
    let current = task.set_refs();
    let buffer_sets = buffer.sets();
    let inputs = CompositeInputs {
        regime,
        current: &current,
        buffer: &buffer_sets,
        records,
        lambda: cfg.lambda,
    };
    let mut p = params.clone();
    let mut adam = Adam::new(p.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamVector)> = None;
    let mut bad_run = 0;
    for step in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = tape.bind(&p);
        let result = objective
            .composite(&mut tape, &p, &vars, &inputs, rng)
            .and_then(|loss| {
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("composite loss at step {step}"),
                    });
                }
                let grads = tape.backward(loss)?.collect(&vars);
                if let Some(seg) = grads.first_non_finite_segment() {
                    return Err(Error::NonFiniteGradient {
                        segment: seg.to_string(),
                    });
                }
                Ok((value, grads))
            });
        match result {
            Ok((value, grads)) => {
                bad_run = 0;
                trace.push(Some(value));
                if best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, p.clone()));
                }
                adam.step(&mut p, &grads, cosine_lr(step, cfg.epochs, lr0))?;
            }
            Err(e) if is_numerical(&e) => {
                warn!("task {}: step {step} skipped: {e}", task.id);
                trace.push(None);
                bad_run += 1;
                if bad_run >= cfg.max_nonfinite_steps {
                    return Ok(TrainOutcome {
                        params: best.map(|(_, b)| b).unwrap_or_else(|| params.clone()),
                        loss_trace: trace,
                        aborted: true,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        params: p,
        loss_trace: trace,
        aborted: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Buffer size `K`. Set per run by the harness, not read from config
    /// files.
    #[serde(skip)]
    pub capacity: usize,
    /// Sets stored per finished task, taken from the front of the task.
    pub sets_per_task: usize,
    /// Posterior draws averaged into the clustering coordinate.
    pub mean_draws: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 8,
            sets_per_task: 1,
            mean_draws: 64,
        }
    }
}

/// Fixed ingredients of a stream run.
#[derive(Clone, Copy)]
pub struct StreamContext<'a> {
    pub model: &'a dyn ProbModel,
    pub net: &'a PosteriorNet,
    pub sc: &'a crate::losses::ScConfig,
    pub train: &'a TrainConfig,
    pub replay: &'a ReplayConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    /// `pretrained` or `previous`.
    pub start: String,
    pub status: String,
    pub loss_trace: Vec<Option<f64>>,
    pub checkpoint: Option<PathBuf>,
    /// Task ids in the buffer after this task.
    pub buffer_task_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskRecord>,
    pub ewc_records: usize,
}

impl RunManifest {
    pub fn failed_tasks(&self) -> usize {
        self.tasks.iter().filter(|t| t.status != "ok").count()
    }
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub final_params: ParamVector,
    /// Parameters after each task, in stream order.
    pub per_task: Vec<ParamVector>,
    pub buffer: ReplayBuffer,
    pub records: Vec<EwcRecord>,
    pub manifest: RunManifest,
}

/// Runs `regime` over the stream starting from `pretrained`.
///
/// Random streams are keyed by `(seed, task id)` and not by regime, so
/// regimes that coincide on a stream give identical parameters. When
/// `checkpoint_dir` is set the parameters after each task are written there.
pub fn run_stream(
    ctx: &StreamContext<'_>,
    regime: Regime,
    stream: &TaskStream,
    pretrained: &ParamVector,
    seed: u64,
    config_hash: &str,
    checkpoint_dir: Option<&Path>,
) -> Result<StreamOutcome> {
    ctx.net.check_params(pretrained)?;
    if stream.dim_x() != ctx.model.dim_x() {
        return Err(Error::LengthMismatch {
            expected: ctx.model.dim_x(),
            actual: stream.dim_x(),
        });
    }
    let objective = ScObjective {
        posterior: ctx.net,
        model: ctx.model,
        cfg: ctx.sc,
    };
    let mut buffer = ReplayBuffer::new(ctx.replay.capacity)?;
    let mut records: Vec<EwcRecord> = Vec::new();
    let mut params = pretrained.clone();
    let mut per_task = Vec::with_capacity(stream.len());
    let mut manifest = RunManifest {
        regime,
        seed,
        config_hash: config_hash.to_string(),
        tasks: Vec::new(),
        ewc_records: 0,
    };

    for (pos, task) in stream.tasks().iter().enumerate() {
        let start = if regime == Regime::TestTimeSc {
            pretrained
        } else {
            &params
        };
        let mut status = "ok".to_string();
        let mut trace = Vec::new();
        let trained = if regime.is_sc() {
            if regime.uses_replay() && buffer.is_empty() && pos > 0 {
                warn!("task {}: replay buffer is empty", task.id);
            }
            let lr0 = if ctx.train.lr_scales_with_task {
                ctx.train.lr * (pos + 1) as f64
            } else {
                ctx.train.lr
            };
            let mut rng = rng_for(seed, "train-task", &[task.id as u64]);
            match train_task(
                &objective, regime, start, task, &buffer, &records, ctx.train, lr0, &mut rng,
            ) {
                Ok(out) => {
                    trace = out.loss_trace;
                    if out.aborted {
                        status =
                            "aborted: repeated non-finite loss; kept best-loss parameters".into();
                    }
                    out.params
                }
                Err(e) => {
                    warn!("task {} failed: {e}", task.id);
                    status = format!("failed: {e}");
                    start.clone()
                }
            }
        } else {
            start.clone()
        };
        let completed = status == "ok";

        if completed && regime.uses_replay() {
            let mut rng = rng_for(seed, "buffer-mean", &[task.id as u64]);
            for x in task.sets.iter().take(ctx.replay.sets_per_task) {
                let embedding =
                    posterior_mean(ctx.net, &trained, x, ctx.replay.mean_draws, &mut rng)?;
                let entry = BufferEntry {
                    task_id: task.id,
                    set: x.clone(),
                    embedding,
                };
                buffer = kmedoid_update(&buffer, entry, ctx.replay.capacity)?;
            }
        }
        if completed && regime.uses_ewc() {
            let mut rng = rng_for(seed, "fisher", &[task.id as u64]);
            match make_ewc_record(&objective, &trained, task, &mut rng) {
                Ok(rec) => records.push(rec),
                Err(e) if is_numerical(&e) => {
                    warn!("task {}: no EWC record: {e}", task.id);
                    status = format!("failed: importance estimate: {e}");
                }
                Err(e) => return Err(e),
            }
        }

        let checkpoint = match checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{}-seed{}-task{}.ckpt", regime, seed, task.id));
                save_params(&path, &trained)?;
                Some(path)
            }
            None => None,
        };
        manifest.tasks.push(TaskRecord {
            task_id: task.id,
            start: if regime == Regime::TestTimeSc || pos == 0 {
                "pretrained"
            } else {
                "previous"
            }
            .to_string(),
            status,
            loss_trace: trace,
            checkpoint,
            buffer_task_ids: buffer.task_ids(),
        });
        per_task.push(trained.clone());
        params = trained;
    }
    manifest.ewc_records = records.len();
    Ok(StreamOutcome {
        final_params: params,
        per_task,
        buffer,
        records,
        manifest,
    })
}

#[cfg(test)]
mod tests;
