use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::losses::ScConfig;
use crate::models::{ConjGaussModel, Shift};
use crate::networks::NetworkConfig;
use crate::rng::seeded;

fn brute_force(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    fn combos(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            combos(n, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    combos(points.len(), k, 0, &mut Vec::new(), &mut all);
    let cost = |m: &[usize]| -> f64 {
        points
            .iter()
            .map(|p| {
                m.iter()
                    .map(|&j| {
                        p.iter()
                            .zip(&points[j])
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    let mut best = all[0].clone();
    let mut best_cost = cost(&best);
    for m in &all[1..] {
        let c = cost(m);
        if c < best_cost {
            best_cost = c;
            best = m.clone();
        }
    }
    best
}

fn entry(task_id: usize, embedding: Vec<f64>) -> BufferEntry {
    let set = Tensor::matrix(1, 2, vec![task_id as f64, 0.5]).unwrap();
    BufferEntry {
        task_id,
        set,
        embedding,
    }
}

#[test]
fn two_clusters_pick_the_central_points() {
    let pts = vec![
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![0.1, 0.2],
        vec![10.0, 10.0],
        vec![10.2, 9.9],
        vec![9.7, 10.4],
    ];
    let got = kmedoids(&pts, 2).unwrap();
    assert_eq!(got, brute_force(&pts, 2));
    assert!(got[0] < 3 && got[1] >= 3);
}

#[test]
fn kmedoids_matches_exhaustive_search_on_small_instances() {
    let mut rng = seeded(11);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=3.min(n));
        let dim = rng.random_range(1..=3);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        assert_eq!(
            kmedoids(&pts, k).unwrap(),
            brute_force(&pts, k),
            "{pts:?} k={k}"
        );
    }
}

#[test]
fn update_appends_below_capacity_and_keeps_everything_at_k_equals_n() {
    let mut buf = ReplayBuffer::new(3).unwrap();
    for i in 0..3 {
        buf = kmedoid_update(&buf, entry(i, vec![i as f64]), 3).unwrap();
    }
    assert_eq!(buf.task_ids(), vec![0, 1, 2]);
    let got = kmedoid_update(&buf, entry(3, vec![0.01]), 3).unwrap();
    assert_eq!(got.len(), 3);
    assert!(kmedoid_update(&buf, entry(4, vec![0.0]), 0).is_err());
    assert!(ReplayBuffer::new(0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn buffer_never_exceeds_capacity(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 8])) {
        let mut rng = seeded(seed);
        let mut buf = ReplayBuffer::new(k).unwrap();
        let mut inserted = Vec::new();
        for i in 0..100 {
            let e = entry(i, vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            inserted.push(e.clone());
            buf = kmedoid_update(&buf, e, k).unwrap();
            prop_assert!(buf.len() <= k);
            for kept in buf.entries() {
                prop_assert_eq!(kept, &inserted[kept.task_id]);
            }
        }
    }
}

struct Fixture {
    model: ConjGaussModel,
    net: PosteriorNet,
    sc: ScConfig,
    pretrained: ParamVector,
}

fn small_cfg() -> NetworkConfig {
    NetworkConfig {
        flow_layers: 2,
        flow_hidden: 16,
        summary_hidden: 16,
        summary_dim: 4,
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = ConjGaussModel::new(1, 1.0).unwrap();
        let net = PosteriorNet::new(2, 2, &small_cfg()).unwrap();
        let init = net.init_params(&mut seeded(1));
        let cfg = PretrainConfig {
            epochs: 10,
            batches_per_epoch: 16,
            batch_size: 16,
            set_size: Some(50),
            lr: 5e-3,
        };
        let out = pretrain_sb(&model, &net, init, &cfg, &mut seeded(2)).unwrap();
        assert!(out.diverged.is_none());
        Fixture {
            model,
            net,
            sc: ScConfig {
                draws: 8,
                clip: 1e6,
            },
            pretrained: out.params,
        }
    })
}

fn shifted_task(
    model: &ConjGaussModel,
    id: usize,
    shift: Shift,
    n_sets: usize,
    n_obs: usize,
    seed: u64,
) -> Task {
    let mut rng = rng_for(seed, "task-data", &[id as u64]);
    let theta = model.sample_prior(&mut rng);
    let sets = (0..n_sets)
        .map(|_| {
            model
                .simulate_data(&theta, n_obs, &shift, &mut rng)
                .unwrap()
        })
        .collect();
    Task {
        id,
        source: SourceTag::Synthetic,
        sets,
    }
}

fn stream(seed: u64, n_tasks: usize) -> TaskStream {
    let f = fixture();
    let shifts = [
        Shift {
            covariate_scale: 0.5,
            noise_df: None,
        },
        Shift {
            covariate_scale: 3.0,
            noise_df: Some(3.0),
        },
        Shift {
            covariate_scale: 1.5,
            noise_df: Some(3.0),
        },
        Shift {
            covariate_scale: 2.5,
            noise_df: None,
        },
    ];
    let tasks = (0..n_tasks)
        .map(|i| shifted_task(&f.model, i + 1, shifts[i % shifts.len()], 3, 40, seed))
        .collect();
    TaskStream::new(tasks, 2).unwrap()
}

fn objective(f: &Fixture) -> ScObjective<'_> {
    ScObjective {
        posterior: &f.net,
        model: &f.model,
        cfg: &f.sc,
    }
}

fn eval_sc(f: &Fixture, params: &ParamVector, task: &Task) -> f64 {
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = objective(f)
        .sc_loss(&mut tape, params, &vars, &task.set_refs(), &mut seeded(99))
        .unwrap();
    tape.value(loss).item()
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let f = fixture();
    let init = f.net.init_params(&mut seeded(5));
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let out = pretrain_sb(&f.model, &f.net, init.clone(), &cfg, &mut seeded(1)).unwrap();
    assert_eq!(out.params, init);

    let s = stream(1, 1);
    let buf = ReplayBuffer::new(8).unwrap();
    let train = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_task(
        &objective(f),
        Regime::NaiveSc,
        &f.pretrained,
        &s.tasks()[0],
        &buf,
        &[],
        &train,
        1e-3,
        &mut seeded(1),
    )
    .unwrap();
    assert_eq!(out.params, f.pretrained);
    assert!(out.loss_trace.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let f = fixture();
    let cfg = PretrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 4,
        set_size: Some(10),
        lr: 1e-3,
    };
    let init = f.net.init_params(&mut seeded(8));
    let a = pretrain_sb(&f.model, &f.net, init.clone(), &cfg, &mut seeded(4)).unwrap();
    let b = pretrain_sb(&f.model, &f.net, init, &cfg, &mut seeded(4)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_trace.len(), 2);
}

#[test]
fn pretrained_posterior_mean_tracks_the_analytic_mean() {
    let model = ConjGaussModel::new(1, 1.0).unwrap();
    let net = PosteriorNet::new(2, 2, &NetworkConfig::default()).unwrap();
    let cfg = PretrainConfig {
        epochs: 20,
        batches_per_epoch: 32,
        batch_size: 16,
        set_size: None,
        lr: 5e-3,
    };
    let init = net.init_params(&mut seeded(21));
    let out = pretrain_sb(&model, &net, init, &cfg, &mut seeded(22)).unwrap();
    let mut rng = seeded(23);
    let mut err = 0.0;
    for _ in 0..20 {
        let (_, x) = model.simulate(&mut rng, 100).unwrap();
        let exact = model.analytic_posterior(&x).unwrap();
        let mean = posterior_mean(&net, &out.params, &x, 1000, &mut rng).unwrap();
        err += mean
            .iter()
            .zip(&exact.mean)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
    }
    let avg = err / 20.0;
    assert!(avg < 0.15, "average absolute mean error {avg}");
}

#[test]
fn sc_training_lowers_the_loss() {
    let f = fixture();
    let train = TrainConfig {
        epochs: 15,
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let buf = ReplayBuffer::new(8).unwrap();
    let mut improved = 0;
    for seed in 0..20 {
        let task = shifted_task(
            &f.model,
            1,
            Shift {
                covariate_scale: 2.0,
                noise_df: None,
            },
            3,
            40,
            seed,
        );
        let out = train_task(
            &objective(f),
            Regime::NaiveSc,
            &f.pretrained,
            &task,
            &buf,
            &[],
            &train,
            train.lr,
            &mut seeded(seed),
        )
        .unwrap();
        if eval_sc(f, &out.params, &task) < eval_sc(f, &f.pretrained, &task) {
            improved += 1;
        }
    }
    assert!(improved >= 18, "{improved}/20");
}

#[test]
fn ewc_record_snapshots_and_is_reproducible() {
    let f = fixture();
    let s = stream(3, 1);
    let a = make_ewc_record(&objective(f), &f.pretrained, &s.tasks()[0], &mut seeded(6)).unwrap();
    let b = make_ewc_record(&objective(f), &f.pretrained, &s.tasks()[0], &mut seeded(6)).unwrap();
    assert_eq!(a.snapshot, f.pretrained);
    assert!(a.importance.values().iter().all(|&w| w >= 0.0));
    assert_eq!(a, b);
    assert_eq!(weighted_drift(&a, &f.pretrained).unwrap(), 0.0);
}

fn ctx<'a>(f: &'a Fixture, train: &'a TrainConfig, replay: &'a ReplayConfig) -> StreamContext<'a> {
    StreamContext {
        model: &f.model,
        net: &f.net,
        sc: &f.sc,
        train,
        replay,
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        lr: 5e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn single_task_regimes_coincide() {
    let f = fixture();
    let (train, replay) = (quick_train(), ReplayConfig::default());
    let s = stream(4, 1);
    let run = |r| run_stream(&ctx(f, &train, &replay), r, &s, &f.pretrained, 7, "h", None).unwrap();
    let naive = run(Regime::NaiveSc);
    assert_eq!(naive.final_params, run(Regime::TestTimeSc).final_params);
    assert_eq!(naive.final_params, run(Regime::ScEr).final_params);
    assert_ne!(naive.final_params, f.pretrained);
}

#[test]
fn large_buffer_never_clusters_and_runs_are_deterministic() {
    let f = fixture();
    let train = quick_train();
    let replay = ReplayConfig {
        capacity: 100,
        sets_per_task: 2,
        mean_draws: 16,
    };
    let s = stream(5, 3);
    let a = run_stream(
        &ctx(f, &train, &replay),
        Regime::ScEr,
        &s,
        &f.pretrained,
        3,
        "h",
        None,
    )
    .unwrap();
    assert_eq!(a.buffer.task_ids(), vec![1, 1, 2, 2, 3, 3]);
    let expected: Vec<&Tensor> = s
        .tasks()
        .iter()
        .flat_map(|t| t.sets.iter().take(2))
        .collect();
    assert_eq!(a.buffer.sets(), expected);
    let b = run_stream(
        &ctx(f, &train, &replay),
        Regime::ScEr,
        &s,
        &f.pretrained,
        3,
        "h",
        None,
    )
    .unwrap();
    assert_eq!(a.per_task, b.per_task);
    assert_eq!(a.manifest, b.manifest);

    let small = ReplayConfig {
        capacity: 2,
        ..replay
    };
    let c = run_stream(
        &ctx(f, &train, &small),
        Regime::ScEr,
        &s,
        &f.pretrained,
        3,
        "h",
        None,
    )
    .unwrap();
    assert_eq!(c.buffer.len(), 2);
}

#[test]
fn ewc_records_follow_completed_tasks_and_test_time_keeps_no_state() {
    let f = fixture();
    let (train, replay) = (quick_train(), ReplayConfig::default());
    let s = stream(6, 3);
    let ewc = run_stream(
        &ctx(f, &train, &replay),
        Regime::ScEwc,
        &s,
        &f.pretrained,
        1,
        "h",
        None,
    )
    .unwrap();
    assert_eq!(ewc.records.len(), 3);
    assert_eq!(ewc.manifest.ewc_records, 3);
    assert!(ewc
        .records
        .iter()
        .all(|r| r.importance.values().iter().all(|&w| w >= 0.0)));
    assert_eq!(ewc.records[1].snapshot, ewc.per_task[1]);
    assert!(ewc.buffer.is_empty());

    let tt = run_stream(
        &ctx(f, &train, &replay),
        Regime::TestTimeSc,
        &s,
        &f.pretrained,
        1,
        "h",
        None,
    )
    .unwrap();
    assert!(tt.buffer.is_empty() && tt.records.is_empty());
    assert!(tt.manifest.tasks.iter().all(|t| t.start == "pretrained"));
}

#[test]
fn test_time_results_do_not_depend_on_task_order() {
    let f = fixture();
    let (train, replay) = (quick_train(), ReplayConfig::default());
    let s = stream(7, 3);
    let mut reversed = s.tasks().to_vec();
    reversed.reverse();
    let r = TaskStream::new(reversed, 2).unwrap();
    let a = run_stream(
        &ctx(f, &train, &replay),
        Regime::TestTimeSc,
        &s,
        &f.pretrained,
        2,
        "h",
        None,
    )
    .unwrap();
    let b = run_stream(
        &ctx(f, &train, &replay),
        Regime::TestTimeSc,
        &r,
        &f.pretrained,
        2,
        "h",
        None,
    )
    .unwrap();
    for i in 0..3 {
        assert_eq!(a.per_task[i], b.per_task[2 - i]);
    }
}

#[test]
fn checkpoints_are_written_per_task() {
    let f = fixture();
    let (train, replay) = (quick_train(), ReplayConfig::default());
    let s = stream(8, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stream(
        &ctx(f, &train, &replay),
        Regime::NaiveSc,
        &s,
        &f.pretrained,
        2,
        "h",
        Some(dir.path()),
    )
    .unwrap();
    for (rec, p) in out.manifest.tasks.iter().zip(&out.per_task) {
        let path = rec.checkpoint.as_ref().unwrap();
        assert_eq!(
            &crate::networks::load_params(path, f.net.layout()).unwrap(),
            p
        );
    }
}

#[test]
fn naive_fine_tuning_forgets_the_first_task() {
    let f = fixture();
    let train = TrainConfig {
        epochs: 15,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let replay = ReplayConfig::default();
    let mut forgot = 0;
    for seed in 0..10 {
        let s = stream(100 + seed, 3);
        let out = run_stream(
            &ctx(f, &train, &replay),
            Regime::NaiveSc,
            &s,
            &f.pretrained,
            seed,
            "h",
            None,
        )
        .unwrap();
        let t1 = &s.tasks()[0];
        if eval_sc(f, &out.final_params, t1) > eval_sc(f, &out.per_task[0], t1) {
            forgot += 1;
        }
    }
    assert!(forgot > 5, "{forgot}/10");
}

#[test]
fn stream_rejects_bad_shapes() {
    let bad = Task {
        id: 1,
        source: SourceTag::Csv,
        sets: vec![Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()],
    };
    assert!(TaskStream::new(vec![bad], 2).is_err());
    assert!(TaskStream::new(vec![], 2).is_err());
}
