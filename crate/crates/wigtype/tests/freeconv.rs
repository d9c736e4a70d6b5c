use num_complex::Complex64 as C;

use wigtype::freeconv;
use wigtype::profile::fixtures;
use wigtype::qve::{self, SolverOptions};
use wigtype::spectrum::SpectrumConfig;
use wigtype::{SpectralData, VarianceProfile};

fn cfg() -> SpectrumConfig {
    SpectrumConfig::default()
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

#[test]
fn semicircle_plus_semicircle_is_wider_semicircle() {
    let p = VarianceProfile::constant(200).unwrap();
    let fc = freeconv::convolve(&p, 0.21, false, &cfg()).unwrap();
    assert!((fc.spectral.alpha + 2.2).abs() <= 1e-4);
    assert!((fc.spectral.beta - 2.2).abs() <= 1e-4);
}

#[test]
fn zero_time_is_the_identity() {
    let p = fixtures::two_block(200);
    let fc = freeconv::convolve(&p, 0.0, false, &cfg()).unwrap();
    let base = SpectralData::from_profile(&p, &cfg()).unwrap();
    assert_eq!(fc.spectral.alpha, base.alpha);
    assert_eq!(fc.spectral.beta, base.beta);
    assert_eq!(fc.spectral.density, base.density);
    assert!(fc.subordination_residual == 0.0);
}

#[test]
fn two_block_subordination_residual() {
    let fc = freeconv::convolve(&fixtures::two_block(200), 0.05, false, &cfg()).unwrap();
    assert!(fc.subordination_residual < 1e-8, "{}", fc.subordination_residual);
}

#[test]
fn diagonal_variant_gap_scales_like_one_over_n() {
    let p = VarianceProfile::constant(256).unwrap();
    let grid = freeconv::spot_grid(-2.0, 2.0, 10);
    assert_eq!(freeconv::diagonal_variant_gap(&p, 0.0, &grid, &cfg()).unwrap().quantile_shift, 0.0);

    let t = 0.1;
    let g256 = freeconv::diagonal_variant_gap(&p, t, &grid, &cfg()).unwrap();
    let c = g256.quantile_shift / (t / 256.0);
    assert!(c <= 10.0, "fitted constant {c}");
    let g512 = freeconv::diagonal_variant_gap(&VarianceProfile::constant(512).unwrap(), t, &grid, &cfg()).unwrap();
    let ratio = g512.quantile_shift / g256.quantile_shift;
    assert!((ratio - 0.5).abs() <= 0.1, "ratio {ratio}");
}

#[test]
fn characteristics() {
    let z = C::new(0.3, 0.01);
    let m = C::new(-0.2, 0.9);
    assert_eq!(freeconv::characteristic(z, 0.4, 0.4, m), z);

    // Im z_t grows linearly in t0 - t, at rate Im m_sc in [c, 1].
    let p = VarianceProfile::constant(100).unwrap();
    let z = C::new(0.1, 0.001);
    let t0 = 0.01;
    let m_t0 = freeconv::aggregate(&p.augmented(t0, false).unwrap(), z, &opts()).unwrap();
    let zt = freeconv::characteristic(z, t0, 0.0, m_t0);
    assert!(zt.im >= 0.001 + 0.5 * t0 && zt.im <= 0.001 + t0);
}

#[test]
fn aggregate_is_constant_along_characteristics() {
    let p = fixtures::two_block(100);
    let t0 = 0.2;
    let at_t0 = p.augmented(t0, false).unwrap();
    let mut worst: f64 = 0.0;
    for e in [-1.5, -0.4, 0.0, 0.7, 1.9] {
        for eta in [1e-3, 0.05, 0.5] {
            let z = C::new(e, eta);
            let m0 = freeconv::aggregate(&at_t0, z, &opts()).unwrap();
            for t in [0.0, 0.05, 0.15] {
                let zt = freeconv::characteristic(z, t0, t, m0);
                let mt = freeconv::aggregate(&p.augmented(t, false).unwrap(), zt, &opts()).unwrap();
                worst = worst.max((mt - m0).norm());
            }
        }
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn burgers_equation_residuals() {
    let p = VarianceProfile::constant(50).unwrap();
    let r = freeconv::burgers_residual(&p, C::new(1.0, 0.5), 0.1, 1e-4, &opts()).unwrap();
    assert!(r <= 1e-6, "{r}");
    let r0 = freeconv::burgers_residual(&p, C::new(1.0, 0.5), 0.0, 1e-4, &opts()).unwrap();
    assert!(r0 <= 1e-5, "{r0}");
    let far = freeconv::burgers_residual(&p, C::new(0.0, 50.0), 0.1, 1e-4, &opts()).unwrap();
    assert!(far <= 1e-8, "{far}");
    assert!(freeconv::burgers_residual(&p, C::new(0.0, 1.0), 0.1, 0.0, &opts()).is_err());
}

#[test]
fn subordination_matches_the_augmented_qve() {
    let p = fixtures::three_block(90);
    let t = 0.3;
    let aug = p.augmented(t, false).unwrap();
    for e in [-1.0, 0.0, 0.8] {
        let z = C::new(e, 0.01);
        let direct = aug.mean(&qve::m_at(&aug, z, &opts()).unwrap());
        let via = freeconv::subordinate(|w| freeconv::aggregate(&p, w, &opts()), t, z).unwrap();
        assert!((direct - via).norm() < 1e-9);
    }
}

#[test]
fn eps_star_of_a_one_cut_family() {
    let p = VarianceProfile::constant(40).unwrap();
    assert_eq!(freeconv::eps_star(&p, 0.5, 1e-3, &cfg()).unwrap(), 0.5);
    let ts = freeconv::geometric_times(1e-3, 1.0, 4);
    assert!((ts[0] - 1e-3).abs() < 1e-15 && (ts[3] - 1.0).abs() < 1e-12 && (ts[1] - 1e-2).abs() < 1e-12);
}
