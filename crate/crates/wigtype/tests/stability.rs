use num_complex::Complex64 as C;
use proptest::prelude::*;

use wigtype::ensemble::m_off_axis;
use wigtype::profile::fixtures;
use wigtype::qve::{self, SolverOptions};
use wigtype::stability;
use wigtype::VarianceProfile;

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn op(p: &VarianceProfile, z: C, w: C) -> stability::StabilityOperator {
    let mz = m_off_axis(p, z, &opts()).unwrap();
    let mw = m_off_axis(p, w, &opts()).unwrap();
    stability::stability_from_m(p, z, &mz, w, &mw).unwrap()
}

#[test]
fn constant_profile_on_the_bulk_axis_has_lambda_one() {
    let p = VarianceProfile::constant(100).unwrap();
    for e in [-1.5, -0.3, 0.0, 1.2] {
        let b = stability::build_stability(&p, C::new(e, 0.0), C::new(e, 0.0), &opts()).unwrap();
        assert!((b.lambda1 - 1.0).abs() < 1e-9);
        assert!((b.sqrt_n_v(&p)[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rhs_zero_gives_zero() {
    let p = fixtures::two_block(50);
    let o = op(&p, C::new(0.2, 0.1), C::new(-0.4, 0.3));
    let x = stability::stab_resolvent_apply(&p, o, &[C::new(0.0, 0.0); 50]).unwrap();
    assert!(x.iter().all(|v| v.norm() == 0.0));
}

/// `max_x sum_y |((1 - S m(z) m(w))^{-1})_xy|` on a dense profile.
fn linf_norm(p: &VarianceProfile, z: C, w: C) -> f64 {
    let mz = m_off_axis(p, z, &opts()).unwrap();
    let mw = m_off_axis(p, w, &opts()).unwrap();
    let r = stability::resolvent_matrix(p, &mz, &mw).unwrap();
    (0..r.nrows()).map(|i| r.row(i).iter().map(|v| v.norm()).sum::<f64>()).fold(0.0, f64::max)
}

#[test]
fn same_half_plane_resolvent_is_bounded() {
    let p = fixtures::two_block(40).to_dense();
    let mut worst: f64 = 0.0;
    for x in [-1.5, -0.5, 0.0, 0.6, 1.4] {
        for y in [-1.2, 0.0, 0.9] {
            for eta in [1e-5, 1e-3, 1e-1] {
                worst = worst.max(linf_norm(&p, C::new(x, eta), C::new(y, eta)));
                worst = worst.max(linf_norm(&p, C::new(x, -eta), C::new(y, -2.0 * eta)));
            }
        }
    }
    assert!(worst <= 5.0, "{worst}");
}

#[test]
fn g_is_symmetric_on_random_bulk_pairs() {
    let p = fixtures::three_block(90);
    let mut rng_state = 7u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng_state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..20 {
        let z = C::new(-1.5 + 3.0 * next(), 0.01 + next());
        let w = C::new(-1.5 + 3.0 * next(), if next() < 0.5 { -1.0 } else { 1.0 } * (0.01 + next()));
        let a = stability::kernels(&p, z, w, &opts()).unwrap().g;
        let b = stability::kernels(&p, w, z, &opts()).unwrap().g;
        assert!((a - b).norm() <= 1e-8 * (1.0 + a.norm()), "{a} {b}");
    }
}

#[test]
fn g_bounds_on_a_bulk_grid() {
    let p = fixtures::two_block(100);
    let mut opposite: f64 = 0.0;
    let mut same: f64 = 0.0;
    for x in [-1.2, -0.3, 0.4, 1.1] {
        for y in [-1.0, 0.1, 0.8] {
            for ez in [1e-3, 1e-2, 1e-1, 1.0] {
                for ew in [1e-3, 1e-1, 1.0] {
                    let z = C::new(x, ez);
                    let g = stability::kernels(&p, z, C::new(y, -ew), &opts()).unwrap().g;
                    opposite = opposite.max(g.norm() * (ez + ew).powi(2));
                    let g = stability::kernels(&p, z, C::new(y, ew), &opts()).unwrap().g;
                    same = same.max(g.norm());
                }
            }
        }
    }
    assert!(opposite <= 2.0, "{opposite}");
    assert!(same <= 10.0, "{same}");
}

#[test]
fn p_stays_bounded_at_fixed_separation() {
    let p = fixtures::two_block(100);
    let (x, y) = (0.2, 0.3);
    let mut worst: f64 = 0.0;
    for k in 0..12 {
        let eta = 10f64.powf(-1.0 - 0.5 * k as f64);
        worst = worst.max(stability::boundary_singularity(&p, x, y, eta, &opts()).unwrap().p.norm());
    }
    assert!(worst <= 20.0, "{worst}");
}

#[test]
fn edge_relation() {
    let c = VarianceProfile::constant(100).unwrap();
    let r = stability::edge_eigvec_relation(&c, 2.0, 1e-2, &opts()).unwrap();
    assert!(r.relative.iter().all(|v| *v <= 0.1), "{:?}", r.relative);

    let p = fixtures::two_block(100);
    let beta = wigtype::SpectralData::from_profile(&p, &Default::default()).unwrap().beta;
    let r = stability::edge_eigvec_relation(&p, beta, 1e-3, &opts()).unwrap();
    assert!(r.relative.iter().all(|v| *v <= 0.05), "{:?}", r.relative);

    let r = stability::edge_eigvec_relation(&p, beta, 0.0, &opts()).unwrap();
    assert!(r.lhs.iter().chain(&r.rhs).all(|v| *v == 0.0));
}

#[test]
fn perron_log_derivative_is_imaginary_in_the_bulk() {
    let p = fixtures::three_block(90);
    for e in [-1.0, -0.2, 0.5, 1.3] {
        let v = stability::perron_log_derivative(&p, e, &opts()).unwrap();
        assert!(v.re.abs() <= 1e-6 && v.im > 0.0, "{v}");
    }
}

#[test]
fn m_prime_matches_finite_differences() {
    let p = fixtures::two_block(100);
    let z = C::new(0.4, 0.05);
    let h = 1e-6;
    let m = qve::m_at(&p, z, &opts()).unwrap();
    let dm = stability::m_prime(&p, &m).unwrap();
    let up = qve::m_at(&p, z + h, &opts()).unwrap();
    let down = qve::m_at(&p, z - h, &opts()).unwrap();
    for i in 0..2 {
        assert!(((up[i] - down[i]) / (2.0 * h) - dm[i]).norm() < 1e-6);
    }
}

fn bulk_point() -> impl Strategy<Value = C> {
    (-1.5f64..1.5, prop_oneof![Just(0.0), 1e-4f64..2.0]).prop_map(|(e, eta)| C::new(e, eta))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_one_never_exceeds_one(z in bulk_point(), w in bulk_point(), flip in any::<bool>()) {
        let p = fixtures::three_block(90);
        let w = if flip { w.conj() } else { w };
        let o = op(&p, z, w);
        prop_assert!(o.lambda1 <= 1.0 + 1e-12);
        prop_assert!(o.gap > 0.0);
    }

    #[test]
    fn norm_is_convex_in_the_arguments(z in bulk_point(), w in bulk_point()) {
        let p = fixtures::two_block(100);
        let mixed = op(&p, z, w.conj()).lambda1;
        let bound = 0.5 * (op(&p, z, z).lambda1 + op(&p, w, w).lambda1);
        prop_assert!(mixed <= bound + 1e-12);
    }
}
