//! Acceptance suite. Each test prints one `PASS`/`FAIL` line naming its
//! criterion and the measured values, then asserts the criterion.
//!
//! The scaled stream experiment is defined by `configs/desk.toml`; run with
//! `--nocapture` to see the report lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use ucl_abi::continual::{
    kmedoid_update, run_stream, weighted_drift, BufferEntry, ReplayBuffer, StreamContext,
    TaskStream,
};
use ucl_abi::harness::{
    build_stream, parse_config, pretrained_params, run_experiment, ExperimentConfig, ResultTable,
    StreamSpec, Sweep,
};
use ucl_abi::losses::{CompositeInputs, EwcRecord, Regime, ScConfig, ScObjective};
use ucl_abi::models::{ConjGaussModel, ExactPosterior, ProbModel, Shift};
use ucl_abi::networks::{NetworkConfig, PosteriorNet};
use ucl_abi::reference::{batch_means_mcse, rwm_sample, SamplerConfig};
use ucl_abi::rng::seeded;
use ucl_abi::tensor::{ParamVector, Tape, Tensor};

fn report(name: &str, pass: bool, elapsed: Duration, budget: Option<Duration>, detail: String) {
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    let budget = budget
        .map(|b| format!(" / {}s", b.as_secs()))
        .unwrap_or_default();
    println!(
        "{verdict}  {name}  [{:.1}s{budget}]  {detail}",
        elapsed.as_secs_f64()
    );
    assert!(pass, "{name}: {detail}");
    assert!(
        in_time,
        "{name}: over the time budget ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let mut cfg = parse_config(&path).expect("desk config");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn scratch(name: &str) -> PathBuf {
    let dir =
        std::env::temp_dir().join(format!("ucl-abi-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

struct DeskRun {
    table: ResultTable,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let out = run_experiment(&desk_config(&scratch("desk-a"))).expect("desk experiment");
        DeskRun {
            table: out.table,
            elapsed: t.elapsed(),
        }
    })
}

/// `mmd_ratio` values by `(regime, buffer size, seed, task)`.
fn ratios(table: &ResultTable) -> BTreeMap<(Regime, Option<usize>, u64, usize), Vec<f64>> {
    let mut m: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in table.rows().iter().filter(|r| r.metric == "mmd_ratio") {
        m.entry((r.regime, r.buffer_size, r.seed, r.task))
            .or_default()
            .push(r.value);
    }
    m
}

fn seeds_of(table: &ResultTable) -> Vec<u64> {
    let mut s: Vec<u64> = table.rows().iter().map(|r| r.seed).collect();
    s.sort();
    s.dedup();
    s
}

fn task_one_ratios(
    all: &BTreeMap<(Regime, Option<usize>, u64, usize), Vec<f64>>,
    regime: Regime,
    seed: u64,
) -> Vec<f64> {
    all.iter()
        .filter(|((r, _, s, t), _)| *r == regime && *s == seed && *t == 1)
        .flat_map(|(_, v)| v.clone())
        .collect()
}

/// Median over tasks of the per-task median ratio.
fn median_over_tasks(
    all: &BTreeMap<(Regime, Option<usize>, u64, usize), Vec<f64>>,
    regime: Regime,
    seed: u64,
) -> f64 {
    median(
        all.iter()
            .filter(|((r, _, s, _), _)| *r == regime && *s == seed)
            .map(|(_, v)| median(v.clone()))
            .collect(),
    )
}

#[test]
fn c1_oracle_zero_loss() {
    let t = Instant::now();
    let model = ConjGaussModel::new(1, 1.0).unwrap();
    let q = ExactPosterior::new(model.clone());
    let cfg = ScConfig {
        draws: 16,
        clip: 1e6,
    };
    let obj = ScObjective {
        posterior: &q,
        model: &model,
        cfg: &cfg,
    };
    let params = q.params();
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(5..=200);
        let (_, x) = model.simulate(&mut rng, n).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&params);
        let loss = obj
            .sc_loss(&mut tape, &params, &vars, &[&x], &mut rng)
            .unwrap();
        worst = worst.max(tape.value(loss).item());
    }
    report(
        "oracle zero loss",
        worst < 1e-8,
        t.elapsed(),
        Some(Duration::from_secs(10)),
        format!("max SC loss over 50 datasets {worst:.3e} (< 1e-8)"),
    );
}

#[test]
fn c2_gradient_integrity() {
    let t = Instant::now();
    let model = ConjGaussModel::new(2, 1.0).unwrap();
    assert_eq!(model.dim_theta(), 3);
    let net = PosteriorNet::new(
        3,
        3,
        &NetworkConfig {
            flow_layers: 2,
            flow_hidden: 8,
            summary_hidden: 8,
            summary_dim: 4,
        },
    )
    .unwrap();
    let mut rng = seeded(201);
    let mut params = net.init_params(&mut rng);
    for v in params.values_mut() {
        *v += 0.2 * rng.random_range(-1.0..1.0);
    }
    let current: Vec<Tensor> = (0..2)
        .map(|_| model.simulate(&mut rng, 8).unwrap().1)
        .collect();
    let buffer: Vec<Tensor> = (0..2)
        .map(|_| model.simulate(&mut rng, 8).unwrap().1)
        .collect();
    let records: Vec<EwcRecord> = (0..2)
        .map(|i| EwcRecord {
            task_id: i + 1,
            snapshot: params.map(|v| v + 0.1),
            importance: ParamVector::from_values(
                params.layout().clone(),
                (0..params.len())
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect(),
            )
            .unwrap(),
        })
        .collect();
    let cfg = ScConfig::default();
    let obj = ScObjective {
        posterior: &net,
        model: &model,
        cfg: &cfg,
    };
    let cur: Vec<&Tensor> = current.iter().collect();
    let buf: Vec<&Tensor> = buffer.iter().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for regime in [
        Regime::NaiveSc,
        Regime::TestTimeSc,
        Regime::ScEr,
        Regime::ScEwc,
        Regime::ScErEwc,
    ] {
        let inputs = CompositeInputs {
            regime,
            current: &cur,
            buffer: &buf,
            records: &records,
            lambda: 3.0,
        };
        let draws = obj
            .draw(&params, &inputs.sc_sets(), &mut seeded(202))
            .unwrap();
        let eval = |p: &ParamVector| {
            let mut tape = Tape::new();
            let vars = tape.bind(p);
            let l = obj
                .composite_with_draws(&mut tape, &vars, &inputs, &draws)
                .unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let vars = tape.bind(&params);
        let l = obj
            .composite_with_draws(&mut tape, &vars, &inputs, &draws)
            .unwrap();
        let g = tape.backward(l).unwrap().collect(&vars);
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = g.values()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
                worst_at = format!("{regime} param {i}");
            }
        }
    }
    report(
        "gradient integrity",
        worst < 1e-4,
        t.elapsed(),
        Some(Duration::from_secs(60)),
        format!("max relative error {worst:.2e} at {worst_at} (< 1e-4), 5 regimes"),
    );
}

/// Exhaustive medoid search, written independently of the library.
fn exhaustive_medoids(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let m: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let cost: f64 = points
            .iter()
            .map(|p| {
                m.iter()
                    .map(|&j| dist(p, &points[j]))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        if cost < best.0 {
            best = (cost, m);
        }
    }
    best.1
}

#[test]
fn c3_kmedoids_correctness() {
    let t = Instant::now();
    let mut rng = seeded(301);
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=3.min(n));
        let dim = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let entry = |i: usize| BufferEntry {
            task_id: i,
            set: Tensor::matrix(1, 2, vec![i as f64, 0.0]).unwrap(),
            embedding: points[i].clone(),
        };
        let mut buf = ReplayBuffer::new(n).unwrap();
        for i in 0..n - 1 {
            buf = kmedoid_update(&buf, entry(i), n).unwrap();
        }
        let buf = kmedoid_update(&buf, entry(n - 1), k).unwrap();
        let mut got = buf.task_ids();
        got.sort();
        if got != exhaustive_medoids(&points, k) {
            mismatches += 1;
            eprintln!("case {case}: n={n} k={k} got {got:?}");
        }
    }
    report(
        "k-medoids correctness",
        mismatches == 0,
        t.elapsed(),
        Some(Duration::from_secs(30)),
        format!("{mismatches} of 200 instances differ from exhaustive search (n <= 8, K <= 3)"),
    );
}

#[test]
fn c4_mcmc_validity() {
    let t = Instant::now();
    let model = ConjGaussModel::new(1, 1.0).unwrap();
    let cfg = SamplerConfig {
        n_samples: 200_000,
        warmup: 2000,
        step_scale: 0.5,
        thin: 1,
    };
    let mut rng = seeded(401);
    let mut failures = Vec::new();
    let mut worst_z: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    for ds in 0..10 {
        let (_, x) = model.simulate(&mut rng, 100).unwrap();
        let exact = model.analytic_posterior(&x).unwrap();
        let out = rwm_sample(&model, &x, &cfg, &mut seeded(402 + ds)).unwrap();
        let s = &out.samples;
        let (mean, cov, d) = (s.mean(), s.covariance(), model.dim_theta());
        for j in 0..d {
            let col: Vec<f64> = (0..s.len()).map(|i| s.draws().at(i, j)).collect();
            let z = (mean[j] - exact.mean[j]).abs() / batch_means_mcse(&col);
            worst_z = worst_z.max(z);
            if z >= 3.0 {
                failures.push(format!("dataset {ds} mean[{j}] off by {z:.2} MCSE"));
            }
            for k in 0..d {
                let scale = (exact.cov_at(j, j) * exact.cov_at(k, k)).sqrt();
                let e = (cov[j * d + k] - exact.cov_at(j, k)).abs() / scale;
                worst_cov = worst_cov.max(e);
                if e >= 0.1 {
                    failures.push(format!(
                        "dataset {ds} cov[{j},{k}] off by {:.1}%",
                        100.0 * e
                    ));
                }
            }
        }
    }
    report(
        "mcmc validity",
        failures.is_empty(),
        t.elapsed(),
        Some(Duration::from_secs(120)),
        format!(
            "10 datasets: worst mean error {worst_z:.2} MCSE (< 3), worst covariance error {:.1}% (< 10%) {failures:?}",
            100.0 * worst_cov
        ),
    );
}

#[test]
fn c5_forgetting_reproduction() {
    let run = desk_run();
    let all = ratios(&run.table);
    let seeds = seeds_of(&run.table);
    let mut naive_all = Vec::new();
    let mut er_better = 0;
    for &s in &seeds {
        let naive = task_one_ratios(&all, Regime::NaiveSc, s);
        let er = task_one_ratios(&all, Regime::ScEr, s);
        naive_all.extend(naive.iter().copied());
        if median(er) < median(naive) {
            er_better += 1;
        }
    }
    let naive_med = median(naive_all);
    report(
        "forgetting reproduction",
        seeds.len() == 5 && naive_med > 1.0 && er_better >= 4,
        run.elapsed,
        Some(Duration::from_secs(15 * 60)),
        format!("task-1 median ratio naive-sc {naive_med:.3} (> 1); sc-er < naive-sc in {er_better}/5 seeds (>= 4)"),
    );
}

#[test]
fn c6_mitigation_ordering() {
    let run = desk_run();
    let all = ratios(&run.table);
    let seeds = seeds_of(&run.table);
    let mut ordered = 0;
    let mut per_seed = Vec::new();
    for &s in &seeds {
        let [er, erewc, ewc, naive] = [
            Regime::ScEr,
            Regime::ScErEwc,
            Regime::ScEwc,
            Regime::NaiveSc,
        ]
        .map(|r| median_over_tasks(&all, r, s));
        if er <= erewc && erewc <= ewc && ewc < naive {
            ordered += 1;
        }
        per_seed.push(format!("[{er:.2} {erewc:.2} {ewc:.2} {naive:.2}]"));
    }
    let er_median = median(
        all.iter()
            .filter(|((r, ..), _)| *r == Regime::ScEr)
            .flat_map(|(_, v)| v.clone())
            .collect(),
    );
    report(
        "mitigation ordering",
        2 * ordered > seeds.len() && er_median < 1.0,
        run.elapsed,
        None,
        format!(
            "sc-er <= sc-er-ewc <= sc-ewc < naive-sc in {ordered}/{} seeds (majority); sc-er median {er_median:.3} (< 1); per seed {}",
            seeds.len(),
            per_seed.join(" ")
        ),
    );
}

#[test]
fn c7_ewc_anchor() {
    let t = Instant::now();
    let mut cfg = desk_config(&scratch("anchor"));
    let model = cfg.model.build().unwrap();
    let net = PosteriorNet::new(model.dim_theta(), model.dim_x(), &cfg.network).unwrap();
    let mut ratios = Vec::new();
    let mut pass = true;
    cfg.regimes = vec![Regime::ScEwc];
    for &seed in &cfg.seeds.clone() {
        let (pretrained, _) = pretrained_params(&cfg, model.as_ref(), &net, seed).unwrap();
        let built = build_stream(&cfg, model.as_ref(), seed).unwrap();
        let two = TaskStream::new(built.stream.tasks()[..2].to_vec(), model.dim_x()).unwrap();
        let drift = |lambda: f64| {
            let train = ucl_abi::continual::TrainConfig {
                lambda,
                ..cfg.train.clone()
            };
            let ctx = StreamContext {
                model: model.as_ref(),
                net: &net,
                sc: &cfg.sc,
                train: &train,
                replay: &cfg.replay,
            };
            let out =
                run_stream(&ctx, Regime::ScEwc, &two, &pretrained, seed, "anchor", None).unwrap();
            weighted_drift(&out.records[0], &out.per_task[1]).unwrap()
        };
        let (weak, strong) = (drift(1e2), drift(1e5));
        let r = weak / strong;
        pass &= r >= 10.0;
        ratios.push(format!("{r:.1} ({weak:.3e}/{strong:.3e})"));
    }
    report(
        "ewc anchor",
        pass,
        t.elapsed(),
        Some(Duration::from_secs(600)),
        format!(
            "W-weighted drift ratio lambda=1e2 / lambda=1e5 per seed {:?} (>= 10 each)",
            ratios
        ),
    );
}

#[test]
fn c8_buffer_budget() {
    let t = Instant::now();
    let mut cfg = desk_config(&scratch("budget"));
    let StreamSpec::Synthetic { tasks, .. } = &mut cfg.stream else {
        panic!("desk stream is synthetic");
    };
    tasks.push(Shift {
        covariate_scale: 2.5,
        noise_df: None,
    });
    let k_all = tasks.len();
    cfg.regimes = vec![Regime::Sb, Regime::ScEr];
    cfg.buffer_size = Sweep::Many(vec![1, k_all]);
    let out = run_experiment(&cfg).unwrap();
    let pooled = |k: usize| {
        median(
            out.table
                .rows()
                .iter()
                .filter(|r| {
                    r.metric == "mmd_ratio" && r.regime == Regime::ScEr && r.buffer_size == Some(k)
                })
                .map(|r| r.value)
                .collect(),
        )
    };
    let (small, full) = (pooled(1), pooled(k_all));
    report(
        "buffer budget",
        small >= full,
        t.elapsed(),
        None,
        format!("4-task stream: sc-er median ratio K=1 {small:.3} >= K={k_all} {full:.3}"),
    );
}

#[test]
fn c9_determinism() {
    let first = desk_run();
    let t = Instant::now();
    let second = run_experiment(&desk_config(&scratch("desk-b"))).unwrap();
    let (a, b) = (
        first.table.to_csv().unwrap(),
        second.table.to_csv().unwrap(),
    );
    report(
        "determinism",
        a == b,
        t.elapsed(),
        None,
        format!(
            "{} result rows, {} bytes each; tables identical: {}",
            first.table.len(),
            a.len(),
            a == b
        ),
    );
}
