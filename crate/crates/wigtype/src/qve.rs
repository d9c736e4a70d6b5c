//! Solver for the quadratic vector equation `-1/m_i(z) = z + (S m(z))_i`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;

type C = Complex64;

/// Knobs of the fixed-point / Newton solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Residual tolerance in the bulk.
    pub tol: f64,
    /// Relaxed tolerance accepted within `edge_band` of known edges.
    pub edge_tol: f64,
    pub edge_band: f64,
    /// Support edges, if already known.
    pub edges: Option<(f64, f64)>,
    /// Damped fixed-point steps tried before switching to Newton.
    pub fixed_point_steps: usize,
    /// Overall iteration budget.
    pub max_iter: usize,
    /// Polish with Newton's method once the fixed point slows down.
    pub newton: bool,
    /// Smallest imaginary part used for boundary values.
    pub eta_floor: f64,
    /// Two-point Richardson extrapolation of boundary values.
    pub richardson: bool,
    /// Finish boundary values with Newton's method directly on the real axis
    /// when it converges to an upper-half-plane solution near the extrapolated one.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-11,
            edge_tol: 1e-9,
            edge_band: 1e-3,
            edges: None,
            fixed_point_steps: 60,
            max_iter: 20_000,
            newton: true,
            eta_floor: 1e-6,
            richardson: true,
            polish: true,
        }
    }
}

impl SolverOptions {
    /// `tol`, relative to `|z|` once `|z| > 1`: near infinity `1/m` and `z` nearly
    /// cancel and absolute residuals cannot drop below `|z|` ulps.
    fn tol_at(&self, z: C) -> f64 {
        self.tol * z.norm().max(1.0)
    }

    fn accept(&self, z: C, residual: f64) -> bool {
        if residual <= self.tol_at(z) {
            return true;
        }
        match self.edges {
            Some((a, b)) if residual <= self.edge_tol => {
                (z.re - a).abs() < self.edge_band || (z.re - b).abs() < self.edge_band
            }
            _ => false,
        }
    }
}

/// Solution of the QVE at one spectral parameter, in block coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvePoint {
    pub z: C,
    pub m: Vec<C>,
    pub residual: f64,
    pub iterations: usize,
}

/// `max_a |1/m_a + z + (S m)_a|`.
pub fn residual(profile: &VarianceProfile, z: C, m: &[C]) -> f64 {
    let sm = profile.apply(m);
    m.iter()
        .zip(&sm)
        .map(|(mi, s)| (mi.inv() + z + s).norm())
        .fold(0.0, f64::max)
}

fn in_upper(m: &[C]) -> bool {
    m.iter().all(|v| v.im > 0.0 && v.re.is_finite() && v.im.is_finite())
}

/// Solves the QVE at `z` with `Im z > 0`.
///
/// Damped fixed-point iteration `m <- (1-theta) m + theta (-1/(z + S m))`,
/// halving `theta` whenever the residual grows, followed by a Newton polish.
/// The fixed-point map preserves the upper half-plane, so the damped iterates
/// never leave it; Newton steps are backtracked to keep that property.
pub fn solve_qve(profile: &VarianceProfile, z: C, init: Option<&[C]>, opts: &SolverOptions) -> Result<QvePoint> {
    if !(z.im > 0.0) || !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::InvalidArgument(format!("spectral parameter {z} is not in the upper half-plane")));
    }
    let b = profile.blocks();
    let mut m: Vec<C> = match init {
        Some(v) if v.len() == b && in_upper(v) => v.to_vec(),
        Some(v) if v.len() != b => {
            return Err(Error::InvalidArgument(format!("initial vector has length {} instead of {b}", v.len())))
        }
        _ => vec![-z.inv(); b],
    };
    let mut res = residual(profile, z, &m);
    let tol = opts.tol_at(z);
    let mut theta = 1.0;
    let mut iter = 0;
    let mut newton_failed = false;

    while iter < opts.max_iter {
        if res <= tol || (res.is_finite() && opts.accept(z, res) && iter >= opts.max_iter / 2) {
            break;
        }
        if opts.newton && !newton_failed && (iter >= opts.fixed_point_steps || res < 1e-4) && b <= 2048 {
            match newton(profile, z, &mut m, &mut res, tol, &mut iter) {
                true => continue,
                false => newton_failed = true,
            }
            if res <= tol {
                break;
            }
        }
        iter += 1;
        let sm = profile.apply(&m);
        let target: Vec<C> = sm.iter().map(|s| -(z + s).inv()).collect();
        loop {
            let trial: Vec<C> = m.iter().zip(&target).map(|(a, t)| a * (1.0 - theta) + t * theta).collect();
            let r = residual(profile, z, &trial);
            if r <= res || theta < 1e-8 {
                m = trial;
                res = r;
                theta = (theta * 1.5).min(1.0);
                break;
            }
            theta *= 0.5;
        }
        if !in_upper(&m) {
            return Err(Error::HalfPlaneViolation { z });
        }
    }
    if !opts.accept(z, res) {
        return Err(Error::NonConvergence { z, residual: res });
    }
    Ok(QvePoint { z, m, residual: res, iterations: iter })
}

/// Newton iterations on `F(m) = 1/m + z + S m`; returns true on convergence.
fn newton(profile: &VarianceProfile, z: C, m: &mut Vec<C>, res: &mut f64, tol: f64, iter: &mut usize) -> bool {
    let b = m.len();
    let mm = profile.reduced_matrix().map(|v| C::new(v, 0.0));
    for _ in 0..60 {
        if *res <= tol {
            return true;
        }
        *iter += 1;
        let sm = profile.apply(m);
        let f = DVector::from_iterator(b, m.iter().zip(&sm).map(|(mi, s)| -(mi.inv() + z + s)));
        let mut jac = mm.clone();
        for a in 0..b {
            jac[(a, a)] -= (m[a] * m[a]).inv();
        }
        let Some(step) = jac.lu().solve(&f) else { return false };
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<C> = m.iter().zip(step.iter()).map(|(a, d)| a + d * s).collect();
            if in_upper(&trial) {
                let r = residual(profile, z, &trial);
                if r < *res {
                    *m = trial;
                    *res = r;
                    accepted = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !accepted {
            return *res <= tol;
        }
    }
    *res <= tol
}

/// Solves at an arbitrary `z` off the real axis by continuation in `Im z`.
pub fn solve_continued(profile: &VarianceProfile, z: C, opts: &SolverOptions) -> Result<QvePoint> {
    if z.im == 0.0 {
        return Err(Error::InvalidArgument("real spectral parameter".into()));
    }
    if z.im < 0.0 {
        let mut p = solve_continued(profile, z.conj(), opts)?;
        p.z = z;
        p.m.iter_mut().for_each(|v| *v = v.conj());
        return Ok(p);
    }
    let mut etas = vec![z.im];
    while *etas.last().unwrap() < 1.0 {
        let e = etas.last().unwrap() * 2.0;
        etas.push(e);
    }
    etas.reverse();
    let mut init: Option<Vec<C>> = None;
    let mut last = None;
    for &eta in &etas {
        let p = solve_qve(profile, C::new(z.re, eta), init.as_deref(), opts)?;
        init = Some(p.m.clone());
        last = Some(p);
    }
    Ok(last.expect("nonempty schedule"))
}

/// Aggregate `(1/N) sum_i m_i`.
pub fn mean_m(profile: &VarianceProfile, m: &[C]) -> C {
    profile.mean(m)
}

/// Default continuation schedule `2^k * eta_floor`, `k = 20, ..., 0`.
pub fn default_eta_schedule(eta_floor: f64) -> Vec<f64> {
    (0..=20).rev().map(|k| eta_floor * (1u64 << k) as f64).collect()
}

/// QVE solutions on an energy grid, one column per `eta` of a decreasing schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QveSolution {
    #[serde(skip)]
    pub profile: Option<VarianceProfile>,
    pub energies: Vec<f64>,
    pub etas: Vec<f64>,
    /// `m[e][k]` is the block vector at `energies[e] + i etas[k]`.
    pub m: Vec<Vec<Vec<C>>>,
    pub residual: Vec<Vec<f64>>,
    pub eta_floor: f64,
    pub options: SolverOptions,
}

/// Solutions down the eta schedule at one energy, with their residuals.
type Column = (Vec<Vec<C>>, Vec<f64>);

/// Solves on the grid `energies x eta_schedule`, warm-starting each `eta`
/// from the previous one at the same energy.
pub fn solve_grid(
    profile: &VarianceProfile,
    energies: &[f64],
    eta_schedule: &[f64],
    opts: &SolverOptions,
) -> Result<QveSolution> {
    if eta_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty eta schedule".into()));
    }
    if eta_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("eta schedule must be strictly decreasing".into()));
    }
    let floor = *eta_schedule.last().unwrap();
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument("eta schedule must stay positive".into()));
    }
    let columns: Vec<Result<Column>> = energies
        .par_iter()
        .map(|&e| {
            let mut ms = Vec::with_capacity(eta_schedule.len());
            let mut rs = Vec::with_capacity(eta_schedule.len());
            let mut init: Option<Vec<C>> = None;
            for &eta in eta_schedule {
                let p = solve_qve(profile, C::new(e, eta), init.as_deref(), opts)?;
                init = Some(p.m.clone());
                rs.push(p.residual);
                ms.push(p.m);
            }
            Ok((ms, rs))
        })
        .collect();
    let mut m = Vec::with_capacity(energies.len());
    let mut residual = Vec::with_capacity(energies.len());
    for c in columns {
        let (a, b) = c?;
        m.push(a);
        residual.push(b);
    }
    Ok(QveSolution {
        profile: Some(profile.clone()),
        energies: energies.to_vec(),
        etas: eta_schedule.to_vec(),
        m,
        residual,
        eta_floor: floor,
        options: *opts,
    })
}

/// Boundary value from the two smallest rungs `m(eta)` and `m(2 eta)`.
pub fn richardson(m_eta: &[C], m_2eta: &[C]) -> Vec<C> {
    m_eta
        .iter()
        .zip(m_2eta)
        .map(|(a, b)| {
            let v = a * 2.0 - b;
            C::new(v.re, v.im.max(0.0))
        })
        .collect()
}

/// `m(E + i0)` directly from the profile: continuation down to `eta_floor`,
/// optionally Richardson-extrapolated with the `2 eta_floor` rung.
pub fn boundary_value(profile: &VarianceProfile, e: f64, opts: &SolverOptions) -> Result<Vec<C>> {
    let top = solve_continued(profile, C::new(e, 2.0 * opts.eta_floor), opts)?;
    if !opts.richardson {
        let p = solve_qve(profile, C::new(e, opts.eta_floor), Some(&top.m), opts)?;
        return Ok(p.m);
    }
    let p = solve_qve(profile, C::new(e, opts.eta_floor), Some(&top.m), opts)?;
    let m = richardson(&p.m, &top.m);
    Ok(if opts.polish { polish_real(profile, e, m) } else { m })
}

/// Newton's method for the QVE at real `e`, started from an extrapolated boundary
/// value. Keeps the start unless Newton converges nearby with `Im m >= 0`.
pub fn polish_real(profile: &VarianceProfile, e: f64, start: Vec<C>) -> Vec<C> {
    let b = start.len();
    if b > 2048 || start.iter().any(|v| v.im < 1e-7) {
        return start;
    }
    let z = C::new(e, 0.0);
    let mm = profile.reduced_matrix().map(|v| C::new(v, 0.0));
    let mut m = start.clone();
    let mut res = residual(profile, z, &m);
    for _ in 0..30 {
        if res < 1e-14 {
            break;
        }
        let sm = profile.apply(&m);
        let f = DVector::from_iterator(b, m.iter().zip(&sm).map(|(mi, s)| -(mi.inv() + z + s)));
        let mut jac = mm.clone();
        for a in 0..b {
            jac[(a, a)] -= (m[a] * m[a]).inv();
        }
        let Some(step) = jac.lu().solve(&f) else { return start };
        let trial: Vec<C> = m.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
        let r = residual(profile, z, &trial);
        if !(r < res) || trial.iter().any(|v| v.im <= 0.0) {
            break;
        }
        m = trial;
        res = r;
    }
    let moved = m.iter().zip(&start).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    if res < 1e-12 && moved < 1e-4 {
        m
    } else {
        start
    }
}

/// Boundary values at many energies, in parallel; order preserved.
pub fn boundary_values_at(profile: &VarianceProfile, energies: &[f64], opts: &SolverOptions) -> Result<Vec<Vec<C>>> {
    energies.par_iter().map(|&e| boundary_value(profile, e, opts)).collect()
}

impl QveSolution {
    fn profile(&self) -> Result<&VarianceProfile> {
        self.profile
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("solution detached from its profile".into()))
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Aggregate `(1/N) sum m_i` at the smallest `eta`, per energy.
    pub fn m_bar_floor(&self) -> Vec<C> {
        let k = self.etas.len() - 1;
        let p = self.profile.as_ref().expect("attached profile");
        self.m.iter().map(|col| p.mean(&col[k])).collect()
    }

    /// Largest residual over the whole grid.
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// `m(E + i0)`: stored rungs when `E` is a grid energy, otherwise a
    /// warm-started solve from the nearest grid energy.
    pub fn boundary_values(&self, e: f64) -> Result<Vec<C>> {
        let profile = self.profile()?;
        if self.energies.is_empty() {
            return Err(Error::OutOfGrid(e));
        }
        let lo = self.energies.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(e >= lo && e <= hi) {
            return Err(Error::OutOfGrid(e));
        }
        let (idx, dist) = self
            .energies
            .iter()
            .enumerate()
            .map(|(i, &x)| (i, (x - e).abs()))
            .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        let k = self.etas.len();
        let opts = SolverOptions { eta_floor: self.eta_floor, ..self.options };
        let finish = |m: Vec<C>| if opts.polish { polish_real(profile, e, m) } else { m };
        let doubled = k >= 2 && (self.etas[k - 2] - 2.0 * self.etas[k - 1]).abs() < 1e-12 * self.etas[k - 2];
        if dist == 0.0 {
            let m0 = &self.m[idx][k - 1];
            if opts.richardson && doubled {
                return Ok(finish(richardson(m0, &self.m[idx][k - 2])));
            }
            return Ok(m0.clone());
        }
        // Restart the schedule from the first rung that is coarse compared to the energy offset.
        let start = self.etas.iter().position(|&eta| eta <= 10.0 * dist).unwrap_or(k - 1).saturating_sub(1);
        let mut init = self.m[idx][start].clone();
        let mut rungs: Vec<Vec<C>> = Vec::new();
        for &eta in &self.etas[start..] {
            let p = solve_qve(profile, C::new(e, eta), Some(&init), &opts)?;
            init = p.m.clone();
            rungs.push(p.m);
        }
        let n = rungs.len();
        if opts.richardson && n >= 2 && doubled {
            return Ok(finish(richardson(&rungs[n - 1], &rungs[n - 2])));
        }
        Ok(rungs.pop().expect("nonempty"))
    }
}

/// Real solution of the QVE at `e` outside the support, by Newton from `init`.
///
/// Returns `None` unless Newton converges to a solution on the stable branch,
/// i.e. with `lambda_1(|m| S |m|) < 1`.
pub fn solve_real(profile: &VarianceProfile, e: f64, init: &[f64]) -> Option<Vec<f64>> {
    let b = profile.blocks();
    let mm = profile.reduced_matrix();
    let res = |m: &[f64]| -> f64 {
        let sm = profile.apply(m);
        m.iter().zip(&sm).map(|(a, s)| (1.0 / a + e + s).abs()).fold(0.0, f64::max)
    };
    let mut m = init.to_vec();
    let sign = m[0].signum();
    let mut r = res(&m);
    for _ in 0..100 {
        if r < 1e-14 {
            break;
        }
        let sm = profile.apply(&m);
        let f = DVector::from_iterator(b, m.iter().zip(&sm).map(|(a, s)| -(1.0 / a + e + s)));
        let mut jac: DMatrix<f64> = mm.clone();
        for a in 0..b {
            jac[(a, a)] -= 1.0 / (m[a] * m[a]);
        }
        let step = jac.lu().solve(&f)?;
        let mut s = 1.0;
        let mut ok = false;
        for _ in 0..40 {
            let trial: Vec<f64> = m.iter().zip(step.iter()).map(|(a, d)| a + d * s).collect();
            if trial.iter().all(|v| v.signum() == sign && v.is_finite()) {
                let rt = res(&trial);
                if rt < r {
                    m = trial;
                    r = rt;
                    ok = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !ok {
            break;
        }
    }
    if r > 1e-12 {
        return None;
    }
    let abs: Vec<f64> = m.iter().map(|v| v.abs()).collect();
    if crate::stability::perron_symmetric(profile, &abs, &abs).ok()?.0 >= 1.0 {
        return None;
    }
    Some(m)
}

/// Perturbation distance `sup_z max_i |m_i(z) - m'_i(z)|` between two profiles of equal size.
pub fn perturbation_gap(a: &VarianceProfile, b: &VarianceProfile, zs: &[C], opts: &SolverOptions) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::InvalidArgument("profiles differ in N".into()));
    }
    let gaps: Vec<Result<f64>> = zs
        .par_iter()
        .map(|&z| {
            let ma = a.expand_vector(&solve_continued(a, z, opts)?.m);
            let mb = b.expand_vector(&solve_continued(b, z, opts)?.m);
            Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max))
        })
        .collect();
    let mut out: f64 = 0.0;
    for g in gaps {
        out = out.max(g?);
    }
    Ok(out)
}

/// Semicircle Stieltjes transform `(-z + sqrt(z^2 - 4)) / 2` on the physical sheet.
pub fn m_sc(z: C) -> C {
    let s = (z - 2.0).sqrt() * (z + 2.0).sqrt();
    let m = (-z + s) * 0.5;
    if z.im >= 0.0 {
        if m.im < 0.0 || (z.im == 0.0 && m.norm() > 1.0 + 1e-12) {
            (-z - s) * 0.5
        } else {
            m
        }
    } else {
        m_sc(z.conj()).conj()
    }
}

/// `m(z)` for any `z`: continuation off the axis, conjugation below it, and
/// the boundary value from above (`E + i0`) on the real axis.
pub fn m_at(profile: &VarianceProfile, z: C, opts: &SolverOptions) -> Result<Vec<C>> {
    if z.im == 0.0 {
        boundary_value(profile, z.re, opts)
    } else {
        Ok(solve_continued(profile, z, opts)?.m)
    }
}

/// Boundary value from below, `m(E - i0)`.
pub fn boundary_value_below(profile: &VarianceProfile, e: f64, opts: &SolverOptions) -> Result<Vec<C>> {
    Ok(boundary_value(profile, e, opts)?.into_iter().map(|v| v.conj()).collect())
}
