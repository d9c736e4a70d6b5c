//! Free convolution with the semicircle law.
//!
//! The production path solves the QVE of the augmented profile `S + t J/N`,
//! whose solution satisfies `m_t(z) = m_0(z + t mbar_t(z))` entrywise. The
//! implicit subordination equation for the aggregate is kept as an oracle.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;
use crate::qve::{self, SolverOptions};
use crate::spectrum::{SpectralData, SpectrumConfig};

type C = Complex64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeConvolution {
    pub t: f64,
    /// Whether the `t/N` diagonal (GOE increment) variant was used.
    pub diagonal: bool,
    #[serde(skip)]
    pub base: Option<VarianceProfile>,
    #[serde(skip)]
    pub augmented: Option<VarianceProfile>,
    pub spectral: SpectralData,
    /// Largest `|m_t(z) - m_0(z + t mbar_t(z))|` over the spot-check grid.
    pub subordination_residual: f64,
}

/// Deterministic spot-check points in the bulk of `[alpha, beta]`.
pub fn spot_grid(alpha: f64, beta: f64, count: usize) -> Vec<C> {
    let c = 0.5 * (alpha + beta);
    let h = 0.5 * (beta - alpha);
    (0..count)
        .map(|k| {
            let u = (k as f64 + 0.5) / count as f64;
            let e = c + 0.8 * h * (2.0 * u - 1.0);
            let eta = 10f64.powf(-3.0 + 2.7 * ((k * 7) % count) as f64 / count as f64);
            C::new(e, eta)
        })
        .collect()
}

/// `rho ⊞ sigma_t` through the augmented QVE.
pub fn convolve(profile: &VarianceProfile, t: f64, diagonal: bool, config: &SpectrumConfig) -> Result<FreeConvolution> {
    let augmented = profile.augmented(t, diagonal)?;
    let spectral = SpectralData::from_profile(&augmented, config).map_err(|e| match e {
        Error::MultiCut { .. } | Error::CuspSuspect { .. } => {
            Error::AssumptionViolated(format!("augmented profile at t = {t} is not one-cut: {e}"))
        }
        other => other,
    })?;
    let grid = spot_grid(spectral.alpha, spectral.beta, 20);
    let subordination_residual = if diagonal {
        f64::NAN
    } else {
        subordination_residual(profile, &augmented, t, &grid, &config.solver)?
    };
    Ok(FreeConvolution {
        t,
        diagonal,
        base: Some(profile.clone()),
        augmented: Some(augmented),
        spectral,
        subordination_residual,
    })
}

/// `max_z max_i |m_t,i(z) - m_0,i(z + t mbar_t(z))|`.
pub fn subordination_residual(
    base: &VarianceProfile,
    augmented: &VarianceProfile,
    t: f64,
    grid: &[C],
    opts: &SolverOptions,
) -> Result<f64> {
    let vals: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&z| {
            let mt = qve::solve_continued(augmented, z, opts)?.m;
            let zeta = z + augmented.mean(&mt) * t;
            let m0 = qve::solve_continued(base, zeta, opts)?.m;
            Ok(mt.iter().zip(&m0).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
        })
        .collect();
    vals.into_iter().try_fold(0.0_f64, |acc, v| Ok(acc.max(v?)))
}

/// Solves `m = base(z + t m)` for the aggregate by damped fixed point.
/// `z` may be real as long as `base` returns upper half-plane values.
pub fn subordinate<F>(base: F, t: f64, z: C) -> Result<C>
where
    F: Fn(C) -> Result<C>,
{
    if t == 0.0 {
        return base(z);
    }
    let mut m = base(z + C::new(0.0, t))?;
    let mut theta = 1.0;
    let mut res = (base(z + m * t)? - m).norm();
    for _ in 0..5000 {
        if res < 1e-13 {
            return Ok(m);
        }
        let target = base(z + m * t)?;
        let trial = m * (1.0 - theta) + target * theta;
        if trial.im <= 0.0 {
            theta *= 0.5;
            continue;
        }
        let r = (base(z + trial * t)? - trial).norm();
        if r < res {
            m = trial;
            res = r;
            theta = (theta * 1.5).min(1.0);
        } else {
            theta *= 0.5;
            if theta < 1e-10 {
                break;
            }
        }
    }
    if res < 1e-10 {
        Ok(m)
    } else {
        Err(Error::NonConvergence { z, residual: res })
    }
}

/// Aggregate `mbar_0(w)` of a profile, with `w` in the closed upper half-plane.
pub fn aggregate(profile: &VarianceProfile, w: C, opts: &SolverOptions) -> Result<C> {
    Ok(profile.mean(&qve::m_at(profile, w, opts)?))
}

/// Gap between the plain and the diagonal-variant augmented profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGap {
    pub t: f64,
    pub n: usize,
    /// `sup_z ||m - m_hat||_inf`.
    pub m_gap: f64,
    /// `max_i |gamma_i - gamma_hat_i|`.
    pub quantile_shift: f64,
}

pub fn diagonal_variant_gap(profile: &VarianceProfile, t: f64, grid: &[C], config: &SpectrumConfig) -> Result<DiagonalGap> {
    let n = profile.n();
    if t == 0.0 {
        return Ok(DiagonalGap { t, n, m_gap: 0.0, quantile_shift: 0.0 });
    }
    let plain = profile.augmented(t, false)?;
    let diag = profile.augmented(t, true)?;
    let m_gap = qve::perturbation_gap(&plain, &diag, grid, &config.solver)?;
    let a = SpectralData::from_profile(&plain, config)?;
    let b = SpectralData::from_profile(&diag, config)?;
    let qa = a.quantiles(n);
    let qb = b.quantiles(n);
    let quantile_shift = qa.iter().zip(&qb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(DiagonalGap { t, n, m_gap, quantile_shift })
}

/// Characteristic `z_t = z + (t0 - t) m_{t0}(z)`.
pub fn characteristic(z: C, t0: f64, t: f64, m_t0: C) -> C {
    z + m_t0 * (t0 - t)
}

/// `|d/dt mbar_t - mbar_t d/dz mbar_t|` by finite differences on the augmented QVE.
///
/// Central differences in `t` when `t >= h`, a second-order one-sided stencil otherwise.
pub fn burgers_residual(profile: &VarianceProfile, z: C, t: f64, h: f64, opts: &SolverOptions) -> Result<f64> {
    if !(h > 0.0) || t < 0.0 || z.im <= 0.0 {
        return Err(Error::StencilOutOfRange(format!("t = {t}, h = {h}, z = {z}")));
    }
    let m = |tt: f64, zz: C| -> Result<C> { aggregate(&profile.augmented(tt, false)?, zz, opts) };
    let dt = if t >= h {
        (m(t + h, z)? - m(t - h, z)?) / (2.0 * h)
    } else {
        (m(t, z)? * -3.0 + m(t + h, z)? * 4.0 - m(t + 2.0 * h, z)?) / (2.0 * h)
    };
    let dz = (m(t, z + h)? - m(t, z - h)?) / (2.0 * h);
    Ok((dt - m(t, z)? * dz).norm())
}

/// Largest `t <= t_max` (to `tol`) for which the augmented profile passes the one-cut check.
pub fn eps_star(profile: &VarianceProfile, t_max: f64, tol: f64, config: &SpectrumConfig) -> Result<f64> {
    let ok = |t: f64| convolve(profile, t, false, config).is_ok();
    if ok(t_max) {
        return Ok(t_max);
    }
    if !ok(0.0) {
        return Err(Error::AssumptionViolated("base profile is not one-cut".into()));
    }
    let (mut lo, mut hi) = (0.0, t_max);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Geometric time grid `t_min, ..., t_max` with `count` points.
pub fn geometric_times(t_min: f64, t_max: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![t_max];
    }
    (0..count)
        .map(|k| t_min * (t_max / t_min).powf(k as f64 / (count - 1) as f64))
        .collect()
}
