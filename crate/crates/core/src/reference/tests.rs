use proptest::prelude::*;
use rand::seq::SliceRandom;

use super::*;
use crate::models::{ConjGaussModel, ProbModel};
use crate::rng::seeded;

fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> PosteriorSamples {
    let mut rng = seeded(seed);
    let data = (0..n * d).map(|_| shift + std_normal(&mut rng)).collect();
    PosteriorSamples::new(Tensor::matrix(n, d, data).unwrap(), Provenance::Analytic).unwrap()
}

fn naive_mmd2(a: &Tensor, b: &Tensor, h: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * h * h)).exp()
    };
    let (m, n) = (a.rows(), b.rows());
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(a.row(i), a.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(b.row(i), b.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += k(a.row(i), b.row(j));
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

#[test]
fn mmd_matches_the_double_loop() {
    let a = gaussian(500, 1, 0.0, 1);
    let b = gaussian(500, 1, 1.0, 2);
    let got = mmd2(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
    let want = naive_mmd2(a.draws(), b.draws(), 1.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn identical_samples_have_zero_mmd() {
    let a = gaussian(200, 2, 0.0, 3);
    let v = mmd2(&a, &a, Bandwidth::Median).unwrap();
    assert!(v <= 1e-12, "{v}");
    assert_eq!(mmd(&a, &a, Bandwidth::Median).unwrap(), v.max(0.0).sqrt());
    assert!(mmd(&a, &a, Bandwidth::Median).unwrap() < 1e-6);
}

#[test]
fn separated_point_masses_approach_two() {
    let a = PosteriorSamples::new(Tensor::zeros(&[10, 2]), Provenance::Flow).unwrap();
    let b = PosteriorSamples::new(Tensor::filled(&[10, 2], 3.0), Provenance::Flow).unwrap();
    let v = mmd2(&a, &b, Bandwidth::Fixed(1e-3)).unwrap();
    assert!((v - 2.0).abs() < 1e-12);
}

#[test]
fn mmd_rejects_bad_inputs() {
    assert!(PosteriorSamples::new(Tensor::zeros(&[1, 2]), Provenance::Flow).is_err());
    let a = gaussian(10, 2, 0.0, 1);
    let b = gaussian(10, 3, 0.0, 1);
    assert!(mmd2(&a, &b, Bandwidth::Median).is_err());
    assert!(mmd2(&a, &a, Bandwidth::Fixed(0.0)).is_err());
}

fn shuffled(s: &PosteriorSamples, seed: u64) -> PosteriorSamples {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.shuffle(&mut seeded(seed));
    PosteriorSamples::new(s.draws().select_rows(&idx).unwrap(), s.provenance()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn mmd_is_symmetric_and_ignores_row_order(
        seed in any::<u64>(),
        n in 2usize..40,
        m in 2usize..40,
        shift in -2.0f64..2.0,
    ) {
        let a = gaussian(n, 2, 0.0, seed);
        let b = gaussian(m, 2, shift, seed.wrapping_add(1));
        prop_assert_eq!(mmd2(&a, &b, Bandwidth::Median).unwrap(), mmd2(&b, &a, Bandwidth::Median).unwrap());
        let (sa, sb) = (shuffled(&a, seed), shuffled(&b, seed ^ 7));
        prop_assert_eq!(median_bandwidth(a.draws(), b.draws()), median_bandwidth(sa.draws(), sb.draws()));
        let base = mmd2(&a, &b, Bandwidth::Median).unwrap();
        let perm = mmd2(&sa, &sb, Bandwidth::Median).unwrap();
        prop_assert!((base - perm).abs() < 1e-12);
    }

    #[test]
    fn bias_of_a_sample_against_itself_is_zero(seed in any::<u64>(), n in 2usize..50) {
        let a = gaussian(n, 3, 0.5, seed);
        for b in bias_report(&a, &a).unwrap() {
            prop_assert_eq!(b.mean_bias, 0.0);
            prop_assert_eq!(b.std_bias, 0.0);
        }
    }
}

#[test]
fn median_bandwidth_thins_large_pools() {
    let a = gaussian(1500, 2, 0.0, 5);
    let b = gaussian(1500, 2, 0.0, 6);
    let h = median_bandwidth(a.draws(), b.draws());
    // Median distance between two independent N(0, I₂) points is 2·sqrt(ln 2).
    assert!((h - 2.0 * 2f64.ln().sqrt()).abs() < 0.05, "{h}");
    assert_eq!(
        h,
        median_bandwidth(shuffled(&a, 1).draws(), shuffled(&b, 2).draws())
    );
}

#[test]
fn ratio_examples() {
    let reference = gaussian(150, 2, 0.0, 10);
    let sb = gaussian(150, 2, 0.8, 11);
    let method = gaussian(150, 2, 0.3, 12);
    assert_eq!(mmd_ratio(&sb, &sb, &reference).unwrap().ratio, 1.0);
    assert_eq!(mmd_ratio(&reference, &sb, &reference).unwrap().ratio, 0.0);
    let r = mmd_ratio(&method, &sb, &reference).unwrap();
    let want = mmd(&method, &reference, Bandwidth::Median).unwrap()
        / mmd(&sb, &reference, Bandwidth::Median).unwrap();
    assert_eq!(r.ratio, want);
    assert!(!r.floored);
    let z = mmd_ratio(&method, &reference, &reference).unwrap();
    assert!(z.floored && z.ratio > 1.0);
}

#[test]
fn bias_matches_direct_moments() {
    let a = gaussian(300, 2, 0.4, 20);
    let b = gaussian(250, 2, -0.1, 21);
    let got = bias_report(&a, &b).unwrap();
    for j in 0..2 {
        let col = |s: &PosteriorSamples| -> (f64, f64) {
            let v: Vec<f64> = (0..s.len()).map(|i| s.draws().at(i, j)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var.sqrt())
        };
        let ((ma, sa), (mb, sb)) = (col(&a), col(&b));
        assert!((got[j].mean_bias - (ma - mb)).abs() < 1e-12);
        assert!((got[j].std_bias - (sa - sb)).abs() < 1e-12);
    }

    let c = 0.75;
    let mut shifted = a.draws().clone();
    for i in 0..shifted.rows() {
        shifted.data_mut()[i * 2 + 1] += c;
    }
    let s = PosteriorSamples::new(shifted, Provenance::Flow).unwrap();
    let r = bias_report(&s, &a).unwrap();
    assert!((r[1].mean_bias - c).abs() < 1e-12);
    assert!(r[1].std_bias.abs() < 1e-12);
    assert_eq!(r[0].mean_bias, 0.0);
}

fn check_rwm(model: &ConjGaussModel, x: &Tensor, cfg: &SamplerConfig, seed: u64) {
    let out = rwm_sample(model, x, cfg, &mut seeded(seed)).unwrap();
    let exact = model.analytic_posterior(x).unwrap();
    let s = &out.samples;
    let mean = s.mean();
    let cov = s.covariance();
    let d = model.dim_theta();
    for j in 0..d {
        let col: Vec<f64> = (0..s.len()).map(|i| s.draws().at(i, j)).collect();
        let se = batch_means_mcse(&col);
        assert!(
            (mean[j] - exact.mean[j]).abs() < 3.0 * se,
            "coord {j}: {} vs {} (se {se})",
            mean[j],
            exact.mean[j]
        );
        for k in 0..d {
            let scale = (exact.cov_at(j, j) * exact.cov_at(k, k)).sqrt();
            assert!(
                (cov[j * d + k] - exact.cov_at(j, k)).abs() < 0.1 * scale,
                "cov[{j},{k}]"
            );
        }
    }
    assert!(
        out.acceptance > 0.1 && out.acceptance < 0.5,
        "{}",
        out.acceptance
    );
}

#[test]
fn rwm_recovers_the_conjugate_posterior() {
    let model = ConjGaussModel::new(1, 1.0).unwrap();
    let (_, x) = model.simulate(&mut seeded(30), 100).unwrap();
    let cfg = SamplerConfig {
        n_samples: 20_000,
        warmup: 2000,
        step_scale: 0.5,
        thin: 1,
    };
    check_rwm(&model, &x, &cfg, 31);
}

#[test]
fn rwm_is_deterministic_and_reports_low_acceptance() {
    let model = ConjGaussModel::new(1, 1.0).unwrap();
    let (_, x) = model.simulate(&mut seeded(32), 50).unwrap();
    let cfg = SamplerConfig {
        n_samples: 200,
        warmup: 100,
        step_scale: 0.3,
        thin: 2,
    };
    let a = rwm_sample(&model, &x, &cfg, &mut seeded(1)).unwrap();
    let b = rwm_sample(&model, &x, &cfg, &mut seeded(1)).unwrap();
    assert_eq!(a.samples, b.samples);
    let bad = SamplerConfig {
        warmup: 0,
        step_scale: 1e3,
        ..cfg
    };
    match rwm_sample(&model, &x, &bad, &mut seeded(1)) {
        Err(Error::LowAcceptance { step_scale, .. }) => assert_eq!(step_scale, 1e3),
        other => panic!("expected low acceptance, got {other:?}"),
    }
}

#[test]
fn batch_means_on_iid_noise_matches_the_naive_error() {
    let mut rng = seeded(40);
    let v: Vec<f64> = (0..40_000).map(|_| std_normal(&mut rng)).collect();
    let se = batch_means_mcse(&v);
    assert!((se / (1.0 / 200.0) - 1.0).abs() < 0.25, "{se}");
}

#[test]
fn cache_round_trips_and_computes_once() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ReferenceCache::new(dir.path());
    let s = gaussian(20, 3, 0.1, 50);
    let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let key = ReferenceCache::key("conj", &x, &SamplerConfig::default(), 1);
    assert_ne!(
        key,
        ReferenceCache::key("conj", &x, &SamplerConfig::default(), 2)
    );
    let y = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
    assert_ne!(
        key,
        ReferenceCache::key("conj", &y, &SamplerConfig::default(), 1)
    );
    assert!(cache.load(&key).unwrap().is_none());
    let first = cache.get_or_compute(&key, || Ok(s.clone())).unwrap();
    let second = cache.get_or_compute(&key, || panic!("cache miss")).unwrap();
    assert_eq!(first, s);
    assert_eq!(second, s);

    let bytes = cache::encode(&s);
    assert!(matches!(
        cache::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    let mut wrong = bytes.clone();
    wrong[4] = 9;
    assert!(cache::decode(&wrong).is_err());
}
