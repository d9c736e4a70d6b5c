//! Monte Carlo checks of the distributional limits at N = 1000.
//!
//! Each test samples a few thousand full spectra, so these are the slowest
//! tests in the crate (several minutes each on one core).

use std::f64::consts::PI;

use gauss_quad::legendre::GaussLegendre;

use wigtype::ensemble::{self, EnsembleSpec, Manifest, StatisticSpec};
use wigtype::lss;
use wigtype::spectrum::SpectrumConfig;
use wigtype::{SpectralData, TestFunction, VarianceProfile};

const N: usize = 1000;

fn meso_scale() -> f64 {
    (N as f64).powf(-0.3)
}

/// `(1/2 pi^2) int int ((g(x) - g(y)) / (x - y))^2` for `g(y) = (1 - y^2)^4`.
///
/// The difference quotient is a polynomial on `[-1, 1]^2`; with one point
/// outside, the inner integral is `g(x)^2 (1/(1-x) + 1/(1+x))`.
fn bump_limit_variance() -> f64 {
    let g = |y: f64| (1.0 - y * y).powi(4);
    let dg = |y: f64| -8.0 * y * (1.0 - y * y).powi(3);
    let rule = GaussLegendre::new(std::num::NonZeroUsize::new(20).unwrap());
    let inner: f64 = rule.integrate(-1.0, 1.0, |x| {
        rule.integrate(-1.0, 1.0, |y| {
            let q = if (x - y).abs() < 1e-14 { dg(x) } else { (g(x) - g(y)) / (x - y) };
            q * q
        })
    });
    let outer = rule.integrate(-1.0, 1.0, |x| 4.0 * (1.0 - x * x).powi(7));
    (inner + outer) / (2.0 * PI * PI)
}

/// Raw variance of the count below `E = 0` over GOE samples of size `n`.
fn goe_counting_variance(n: usize, samples: usize, seed: u64) -> f64 {
    let m = Manifest::new(EnsembleSpec::goe(n).unwrap(), vec![StatisticSpec::Counting { energy: 0.0 }], samples, seed);
    let r = ensemble::mc_harness(&m, None).unwrap().remove(0);
    assert!(r.failures.is_empty());
    r.summary.variance * (n as f64).ln() / (PI * PI)
}

#[test]
fn goe_counting_variance_grows_like_log_n() {
    // The O(1) constant in Var = (log N + C) / pi^2 is still a third of the
    // total at N = 1000, so compare the growth between two sizes instead.
    let small = goe_counting_variance(100, 8000, 2003);
    let large = goe_counting_variance(N, 2000, 2001);
    let slope = 10f64.ln() / (PI * PI);
    assert!((large - small - slope).abs() <= 0.1, "growth {} vs {slope}", large - small);
}

#[test]
fn goe_mesoscopic_statistics() {
    let t = meso_scale();
    let bump = TestFunction::regular(0.0, t).unwrap();
    // Ramp at the mesoscopic scale, plateau across the rest of the spectrum.
    let step = TestFunction::mollified_step(t, 0.0, 2.6, 0.3).unwrap();
    let ens = EnsembleSpec::goe(N).unwrap();
    let sd = SpectralData::from_profile(&ens.profile, &SpectrumConfig::default()).unwrap();
    let opts = lss::VarianceOptions::default();
    let predicted: Vec<f64> = [&bump, &step].iter().map(|f| lss::variance_hat(f, &sd, &opts).unwrap().value).collect();

    let stats = vec![StatisticSpec::Lss { testfn: bump }, StatisticSpec::Lss { testfn: step }];
    let r = ensemble::mc_harness(&Manifest::new(ens, stats, 2000, 2002), None).unwrap();
    assert!(r.iter().all(|x| x.failures.is_empty() && x.samples.len() == 2000));

    let v = r[0].summary.variance;
    let limit = bump_limit_variance();
    assert!((v - limit).abs() <= 0.25 * limit, "bump variance {v} vs limit {limit}");
    assert!((v - predicted[0]).abs() <= 0.2 * predicted[0], "bump variance {v} vs V = {}", predicted[0]);

    let v = r[1].summary.variance;
    assert!((v - predicted[1]).abs() <= 0.2 * predicted[1], "step variance {v} vs V = {}", predicted[1]);
}

#[test]
fn expectation_correction_matches_sampled_means() {
    let p = VarianceProfile::constant(N).unwrap();
    let f = TestFunction::mollified_step(0.3, -0.5, 0.8, 0.3).unwrap();
    let sd = SpectralData::from_profile(&p, &SpectrumConfig::default()).unwrap();
    let predicted = lss::expectation_correction(&f, &sd, 16, 4.0).unwrap().total;

    let m = Manifest::new(EnsembleSpec::gaussian(p), vec![StatisticSpec::Lss { testfn: f }], 2000, 2002);
    let r = ensemble::mc_harness(&m, None).unwrap().remove(0);
    let mean = r.summary.mean;
    assert!((mean - predicted).abs() <= 0.3, "sampled {mean} vs predicted {predicted}");
}
