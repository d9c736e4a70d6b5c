use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wigtype::ensemble::{self, DbmMode, DbmOptions, EnsembleSpec, EntryLaw, FlowParams, Manifest, StatisticSpec};
use wigtype::profile::fixtures;
use wigtype::qve::SolverOptions;
use wigtype::spectrum::SpectrumConfig;
use wigtype::{SpectralData, TestFunction, VarianceProfile};

fn spectral(p: &VarianceProfile) -> SpectralData {
    SpectralData::from_profile(p, &SpectrumConfig::default()).unwrap()
}

#[test]
fn gaussian_entries_are_centred() {
    let spec = EnsembleSpec::gaussian(VarianceProfile::constant(2).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| ensemble::sample_matrix(&spec, &mut rng)[(0, 1)]).collect();
    let s = ensemble::Summary::of(&xs);
    assert!(s.mean.abs() <= 4.0 * s.variance.sqrt() / (n as f64).sqrt());
    assert!((s.variance - 0.5).abs() < 0.01);
}

fn sample_kurtosis(law: &EntryLaw, var: f64, n: usize, count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<f64> = (0..count).map(|_| law.sample(&mut rng, var, n)).collect();
    // Every law is centred, so raw moments are the right estimators.
    let m2 = xs.iter().map(|x| x.powi(2)).sum::<f64>() / count as f64;
    let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / count as f64;
    (m2, m4 - 3.0 * m2 * m2)
}

#[test]
fn rademacher_fourth_cumulant_is_minus_two() {
    let (v, k4) = sample_kurtosis(&EntryLaw::RademacherScaled, 1.0, 1, 200_000);
    assert!((v - 1.0).abs() < 1e-12);
    assert!((k4 + 2.0).abs() < 1e-9);
    assert_eq!(EntryLaw::RademacherScaled.scaled_cumulants(1.0), (0.0, -2.0));
}

#[test]
fn gaussian_divisible_preserves_the_variance() {
    let n = 100;
    let t0 = 0.3;
    let law = EntryLaw::GaussianDivisible { base: Box::new(EntryLaw::RademacherScaled), t0 };
    let var = 1.0 / n as f64;
    let (v, k4) = sample_kurtosis(&law, var, n, 400_000);
    assert!((v / var - 1.0).abs() < 0.01, "variance ratio {}", v / var);
    // kappa_4 of the Rademacher part alone, N^2-scaled: -2 (1 - t0)^2.
    let (_, declared) = law.scaled_cumulants(1.0);
    assert!((declared + 2.0 * (1.0 - t0).powi(2)).abs() < 1e-12);
    let shift = (declared - EntryLaw::RademacherScaled.scaled_cumulants(1.0).1).abs();
    assert!(shift <= 4.0 * t0);
    assert!((k4 * (n * n) as f64 - declared).abs() < 0.05, "{}", k4 * (n * n) as f64);
}

#[test]
fn bernoulli_shifted_third_cumulant() {
    let law = EntryLaw::BernoulliShifted { p: 0.2 };
    let (s3, _) = law.scaled_cumulants(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<f64> = (0..400_000).map(|_| law.sample(&mut rng, 1.0, 1)).collect();
    let m3 = xs.iter().map(|x| x.powi(3)).sum::<f64>() / xs.len() as f64;
    assert!((m3 - s3).abs() < 0.03, "{m3} vs {s3}");
    assert!(EnsembleSpec::new(fixtures::two_block(10), EntryLaw::BernoulliShifted { p: 1.0 }).is_err());
}

#[test]
fn small_eigenproblems() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -1.0, 2.0]));
    assert_eq!(ensemble::eigen_spectrum(&d).unwrap(), vec![-1.0, 2.0, 3.0]);
    let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let e = ensemble::eigen_spectrum(&x).unwrap();
    assert!((e[0] + 1.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
}

#[test]
fn sampled_spectra_preserve_the_trace() {
    let spec = EnsembleSpec::gaussian(fixtures::three_block(120));
    for k in 0..3 {
        let w = ensemble::sample_matrix_seeded(&spec, 9, k);
        assert_eq!(w, w.transpose());
        let e = ensemble::eigen_spectrum(&w).unwrap();
        assert!((e.iter().sum::<f64>() - w.trace()).abs() < 1e-10);
    }
}

#[test]
fn statistics_vanish_at_their_centres() {
    let n = 200;
    let sd = spectral(&fixtures::two_block(n));
    let gammas = sd.quantiles(n);
    assert_eq!(ensemble::sev_statistic(&gammas, &sd, n / 2).unwrap(), 0.0);

    // N int rho up to E equal to the count: shift the eigenvalues so that E sits
    // exactly at a quantile level.
    let e = gammas[n / 2 - 1] + 1e-9;
    let c = ensemble::counting_statistic(&gammas, &sd, e).unwrap();
    assert!(c.abs() < 1e-5, "{c}");
    assert!(ensemble::counting_statistic(&gammas, &sd, sd.beta).is_err());

    assert_eq!(ensemble::lss_statistic(&gammas, &TestFunction::zero(), &sd), 0.0);
}

#[test]
fn rigidity_and_local_law_on_a_sample() {
    let n = 400;
    let p = fixtures::two_block(n);
    let sd = spectral(&p);
    let spec = EnsembleSpec::gaussian(p.clone());
    let e = ensemble::eigen_spectrum(&ensemble::sample_matrix_seeded(&spec, 1, 0)).unwrap();
    let r = ensemble::rigidity_ratio(&e, &sd.quantiles(n));
    assert!(r < 10.0 * (n as f64).ln(), "rigidity {r}");
    let eta = (n as f64).powf(-0.5);
    let zs: Vec<C> = (0..9).map(|k| C::new(-1.6 + 0.4 * k as f64, eta)).collect();
    let ll = ensemble::local_law_error(&e, &p, &zs, &SolverOptions::default()).unwrap();
    assert!(ll < 10.0 * (n as f64).ln(), "local law {ll}");
    assert!(ensemble::esd_ks(&e, &sd) < 0.05);
}

#[test]
fn dbm_with_zero_time_returns_the_initial_state() {
    let init = vec![-1.0, -0.2, 0.4, 1.3];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [DbmMode::MatrixFlow, DbmMode::SdeEuler] {
        let opts = DbmOptions { t_end: 0.0, dt: 0.01, mode, record_every: 1, coupling: None };
        let traj = ensemble::dbm_run(&init, &opts, &mut rng).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].particles, init);
    }
    let opts = DbmOptions { t_end: 0.1, dt: 0.01, mode: DbmMode::SdeEuler, record_every: 1, coupling: None };
    assert!(ensemble::dbm_run(&[1.0, 0.0], &opts, &mut rng).is_err());
}

#[test]
fn dbm_keeps_particles_sorted() {
    let spec = EnsembleSpec::goe(60).unwrap();
    let init = ensemble::eigen_spectrum(&ensemble::sample_matrix_seeded(&spec, 2, 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for mode in [DbmMode::MatrixFlow, DbmMode::SdeEuler] {
        let opts = DbmOptions { t_end: 0.05, dt: 1e-4, mode, record_every: 50, coupling: None };
        let traj = ensemble::dbm_run(&init, &opts, &mut rng).unwrap();
        assert!((traj.last().unwrap().t - 0.05).abs() < 1e-12);
        for s in &traj {
            assert!(s.particles.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn empty_batches_and_determinism() {
    let spec = EnsembleSpec::new(fixtures::two_block(40), EntryLaw::RademacherScaled).unwrap();
    let stats = vec![StatisticSpec::Sev { i0: None }, StatisticSpec::Gap { index: Some(10) }];
    let empty = ensemble::mc_harness(&Manifest::new(spec.clone(), stats.clone(), 0, 4), None).unwrap();
    assert_eq!(empty.len(), 2);
    assert!(empty.iter().all(|r| r.samples.is_empty() && r.n_samples == 0));

    let m = Manifest::new(spec, stats, 40, 4).with_flow(FlowParams { t: 0.1, steps: 20, mode: DbmMode::SdeEuler });
    let a = ensemble::mc_harness(&m, Some(1)).unwrap();
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(json, serde_json::to_string(&ensemble::mc_harness(&m, Some(1)).unwrap()).unwrap());
    assert_eq!(json, serde_json::to_string(&ensemble::mc_harness(&m, Some(8)).unwrap()).unwrap());
    assert_eq!(a[0].samples.len(), 40);
}

#[test]
fn manifest_json_round_trip() {
    let text = r#"{
        "statistic": {"name": "sev"},
        "ensemble": {"profile": {"kind": "fixture", "name": "goe", "n": 50}, "entry_law": {"law": "gaussian"}},
        "samples": 3,
        "seed": 7,
        "params": {"flow": {"t": 0.2}}
    }"#;
    let m: Manifest = serde_json::from_str(text).unwrap();
    assert_eq!(m.statistic.len(), 1);
    assert_eq!(m.params.flow.as_ref().unwrap().mode, DbmMode::MatrixFlow);
    let back: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn txy_leading_term_of_the_constant_profile() {
    let p = VarianceProfile::constant(300).unwrap();
    let o = SolverOptions::default();
    let z = C::new(0.3, 0.5);
    let w = C::new(-0.2, -0.4);
    let mz = ensemble::m_off_axis(&p, z, &o).unwrap();
    let mw = ensemble::m_off_axis(&p, w, &o).unwrap();
    let l = ensemble::txy_leading(&p, &mz, &mw).unwrap();
    let r = mz[0] * mw[0];
    let expect = r / 300.0 / (1.0 - r);
    assert!((l[(0, 0)] - expect).norm() < 1e-14);
}

#[test]
fn txy_leading_term_is_real_and_symmetric_after_scaling() {
    // (1 - S D)^{-1} S is symmetric, so dividing column c by D_c = m_c(z) m_c(w)
    // gives a symmetric matrix; with w = conj(z) every entry is real.
    let p = fixtures::three_block(300);
    let o = SolverOptions::default();
    let z = C::new(0.4, 0.3);
    let mz = ensemble::m_off_axis(&p, z, &o).unwrap();
    let mw = ensemble::m_off_axis(&p, z.conj(), &o).unwrap();
    let l = ensemble::txy_leading(&p, &mz, &mw).unwrap();
    let scaled = DMatrix::from_fn(3, 3, |a, c| l[(a, c)] / (mz[c] * mw[c]));
    for a in 0..3 {
        for c in 0..3 {
            assert!((scaled[(a, c)] - scaled[(c, a)]).norm() < 1e-12, "{scaled}");
        }
    }
    assert!(l.iter().all(|v| v.im.abs() < 1e-12), "{l}");
}

#[test]
fn txy_diagnostic_stays_under_its_bound() {
    let spec = EnsembleSpec::gaussian(VarianceProfile::constant(400).unwrap());
    let r = ensemble::txy_diagnostic(&spec, C::new(0.2, 0.5), C::new(-0.1, -0.5), 500, 21, None).unwrap();
    assert!(r.gap <= r.bound, "{} vs {}", r.gap, r.bound);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ks_distance_properties(xs in prop::collection::vec(-3.0f64..3.0, 1..60), shift in 0.0f64..2.0) {
        let d = ensemble::ks_to_std_normal(&xs);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(ensemble::ks_two_sample(&xs, &xs), 0.0);
        let moved: Vec<f64> = xs.iter().map(|x| x + shift + 10.0).collect();
        prop_assert_eq!(ensemble::ks_two_sample(&xs, &moved), 1.0);
    }

    #[test]
    fn summary_is_shift_equivariant(xs in prop::collection::vec(-5.0f64..5.0, 3..40), c in -10.0f64..10.0) {
        let a = ensemble::Summary::of(&xs);
        let ys: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = ensemble::Summary::of(&ys);
        prop_assert!((b.mean - a.mean - c).abs() < 1e-9);
        prop_assert!((b.variance - a.variance).abs() < 1e-8 * (1.0 + a.variance));
    }

    #[test]
    fn per_sample_streams_do_not_depend_on_order(seed in any::<u64>(), k in 0u64..1000) {
        let spec = EnsembleSpec::gaussian(fixtures::two_block(6));
        let a = ensemble::sample_matrix_seeded(&spec, seed, k);
        let _ = ensemble::sample_matrix_seeded(&spec, seed, k + 1);
        prop_assert_eq!(a, ensemble::sample_matrix_seeded(&spec, seed, k));
    }
}
