//! Stability operators `F(z, w) = |m(z)m(w)|^{1/2} S |m(z)m(w)|^{1/2}`, the
//! resolvent `(1 - S m(z)m(w))^{-1}` and the variance kernels `g`, `h`, `P`.
//!
//! Everything is computed in the reduced block space. On block-constant
//! vectors the orthonormal basis `1_a / sqrt(n_a)` turns `S` into the
//! symmetric matrix `sqrt(phi_a phi_b) K_ab + delta_a / N [a = b]`; the
//! within-block complements contribute scalar factors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;
use crate::qve::{self, SolverOptions};

type C = Complex64;

/// Denominators below this magnitude are reported as [`Error::NearSingular`].
pub const NEAR_SINGULAR_FLOOR: f64 = 1e-13;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 200_000;

/// `sqrt(phi_a phi_b) sqrt(d_a d_b) K_ab + delta_a d_a / N [a = b]`.
pub fn reduced_symmetric(profile: &VarianceProfile, d: &[f64]) -> DMatrix<f64> {
    let phi = profile.weights();
    let k = profile.k();
    let inv = 1.0 / profile.n() as f64;
    let delta = profile.delta();
    let b = profile.blocks();
    DMatrix::from_fn(b, b, |i, j| {
        let mut v = (phi[i] * phi[j] * d[i] * d[j]).sqrt() * k[(i, j)];
        if i == j {
            v += delta[i] * d[i] * inv;
        }
        v
    })
}

/// Power iteration from the normalized all-ones vector.
/// Returns `(lambda, v, iterations, residual)`.
fn power_iteration(f: &DMatrix<f64>, start: DVector<f64>) -> Result<(f64, DVector<f64>, usize, f64)> {
    let mut v = start.normalize();
    let mut res = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let fv = f * &v;
        let lambda = v.dot(&fv);
        res = (&fv - &v * lambda).norm();
        if res <= POWER_TOL * lambda.abs().max(1.0) {
            return Ok((lambda, v, it, res));
        }
        let nrm = fv.norm();
        if nrm == 0.0 {
            return Ok((0.0, v, it, 0.0));
        }
        v = fv / nrm;
    }
    Err(Error::PowerIterationStall { iterations: POWER_MAX_ITER, residual: res })
}

/// Perron eigenpair of `|x|^{1/2}|y|^{1/2} S |x|^{1/2}|y|^{1/2}` in reduced coordinates,
/// with `x`, `y` given as block magnitudes.
pub fn perron_symmetric(profile: &VarianceProfile, x: &[f64], y: &[f64]) -> Result<(f64, DVector<f64>)> {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a * b).abs()).collect();
    let f = reduced_symmetric(profile, &d);
    let start = DVector::from_iterator(d.len(), profile.weights().into_iter().map(f64::sqrt));
    let (l, v, _, _) = power_iteration(&f, start)?;
    Ok((l.max(max_complement(profile, &d)), v))
}

fn max_complement(profile: &VarianceProfile, d: &[f64]) -> f64 {
    let inv = 1.0 / profile.n() as f64;
    profile
        .delta()
        .iter()
        .zip(d)
        .zip(profile.complement_multiplicity())
        .filter(|(_, mult)| *mult > 0.0)
        .map(|((del, di), _)| (del * di * inv).abs())
        .fold(0.0, f64::max)
}

/// The stability operator at one pair `(z, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOperator {
    pub z: C,
    pub w: C,
    pub mz: Vec<C>,
    pub mw: Vec<C>,
    /// `|m_a(z) m_a(w)|`.
    pub d: Vec<f64>,
    /// Reduced symmetric matrix of `F`.
    pub f: DMatrix<f64>,
    pub lambda1: f64,
    /// Perron vector in the orthonormal block basis (unit length, positive).
    pub v: Vec<f64>,
    /// `lambda1 - max_{j != 1} |lambda_j|`, complement eigenvalues included.
    pub gap: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl StabilityOperator {
    /// `sqrt(N) v_i` for each block: the entries of the full Perron vector, rescaled.
    pub fn sqrt_n_v(&self, profile: &VarianceProfile) -> Vec<f64> {
        self.v.iter().zip(profile.weights()).map(|(v, p)| v / p.sqrt()).collect()
    }

    /// The deflated remainder `A = F - lambda1 v v^T` (reduced).
    pub fn deflated(&self) -> DMatrix<f64> {
        let v = DVector::from_column_slice(&self.v);
        &self.f - &v * v.transpose() * self.lambda1
    }

    /// `v^T diag(c) v` for a block-diagonal weight `c`.
    pub fn quadratic_form(&self, c: &[C]) -> C {
        self.v.iter().zip(c).map(|(v, c)| c * (v * v)).sum()
    }

    /// `U = m(z)m(w)/|m(z)m(w)|` per block.
    pub fn phase(&self) -> Vec<C> {
        self.mz.iter().zip(&self.mw).map(|(a, b)| {
            let p = a * b;
            p / p.norm()
        }).collect()
    }
}

/// Builds `F(z, w)` from solved vectors `m(z)`, `m(w)`.
pub fn stability_from_m(profile: &VarianceProfile, z: C, mz: &[C], w: C, mw: &[C]) -> Result<StabilityOperator> {
    let b = profile.blocks();
    if mz.len() != b || mw.len() != b {
        return Err(Error::InvalidArgument("vectors must have one entry per block".into()));
    }
    let d: Vec<f64> = mz.iter().zip(mw).map(|(a, c)| (a * c).norm()).collect();
    let f = reduced_symmetric(profile, &d);
    let start = DVector::from_iterator(b, profile.weights().into_iter().map(f64::sqrt));
    let (lambda1, v, iterations, residual) = power_iteration(&f, start)?;
    let v: Vec<f64> = v.iter().map(|x| x.abs()).collect();

    let vv = DVector::from_column_slice(&v);
    let a = &f - &vv * vv.transpose() * lambda1;
    let second = deflated_top(&a, &vv)?.max(max_complement(profile, &d));
    Ok(StabilityOperator {
        z,
        w,
        mz: mz.to_vec(),
        mw: mw.to_vec(),
        d,
        f,
        lambda1,
        v,
        gap: lambda1 - second,
        iterations,
        residual,
    })
}

/// Largest `|eigenvalue|` of the deflated matrix, by a second power iteration.
fn deflated_top(a: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    let b = a.nrows();
    if b == 1 {
        return Ok(a[(0, 0)].abs());
    }
    // Deterministic start, orthogonal to the Perron direction.
    let mut x = DVector::from_fn(b, |i, _| 1.0 + 0.5 * ((i + 1) as f64).sin());
    x -= v * v.dot(&x);
    if x.norm() == 0.0 {
        return Ok(0.0);
    }
    x = x.normalize();
    let mut mu = 0.0;
    for _ in 0..20_000 {
        let y = a * &x;
        let nrm = y.norm();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        if (nrm - mu).abs() <= 1e-13 * nrm.max(1e-300) {
            // Two consecutive Rayleigh-type estimates agree; also check the
            // eigen-residual of the two-step map to catch +/- pairs.
            let yy = a * &y;
            if (yy / nrm - &x * nrm).norm() <= 1e-8 * nrm {
                return Ok(nrm);
            }
        }
        mu = nrm;
        x = y / nrm;
    }
    // Slow convergence (nearly equal subdominant moduli): settle it exactly.
    let eig = SymmetricEigen::new(a.clone());
    Ok(eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs())))
}

/// Builds `F(z, w)`; real arguments are read as boundary values from above.
pub fn build_stability(profile: &VarianceProfile, z: C, w: C, opts: &SolverOptions) -> Result<StabilityOperator> {
    let mz = qve::m_at(profile, z, opts)?;
    let mw = qve::m_at(profile, w, opts)?;
    stability_from_m(profile, z, &mz, w, &mw)
}

/// `m'(z)` from the differentiated QVE `(1 - m^2 S) m' = m^2`.
pub fn m_prime(profile: &VarianceProfile, m: &[C]) -> Result<Vec<C>> {
    let b = m.len();
    let mm = profile.reduced_matrix();
    let mut a = DMatrix::<C>::identity(b, b);
    for i in 0..b {
        let m2 = m[i] * m[i];
        for j in 0..b {
            a[(i, j)] -= m2 * mm[(i, j)];
        }
    }
    let rhs = DVector::from_iterator(b, m.iter().map(|v| v * v));
    let sol = a.lu().solve(&rhs).ok_or(Error::NearSingular(0.0))?;
    Ok(sol.iter().copied().collect())
}

/// `(1 - S m(z)m(w))^{-1}` prepared through the Sherman–Morrison split around
/// the Perron mode of `F(z, w)`.
#[derive(Debug, Clone)]
pub struct StabResolvent {
    pub op: StabilityOperator,
    d: Vec<C>,
    /// `(U^* - A)^{-1}` in the orthonormal block basis.
    b_inv: DMatrix<C>,
    b_inv_v: DVector<C>,
    /// `1 - lambda1 v^T (U^* - A)^{-1} v`.
    pub denominator: C,
    /// `1 / (1 - delta_a D_a / N)` on the within-block complements.
    complement: Vec<C>,
    sqrt_sizes: Vec<f64>,
    reduced: DMatrix<f64>,
}

impl StabResolvent {
    pub fn new(profile: &VarianceProfile, op: StabilityOperator) -> Result<Self> {
        let b = profile.blocks();
        let d: Vec<C> = op.mz.iter().zip(&op.mw).map(|(a, c)| a * c).collect();
        let u = op.phase();
        let a = op.deflated();
        let mut bm = DMatrix::<C>::from_fn(b, b, |i, j| C::new(-a[(i, j)], 0.0));
        for i in 0..b {
            bm[(i, i)] += u[i].conj();
        }
        let b_inv = bm.try_inverse().ok_or(Error::NearSingular(0.0))?;
        let v = DVector::from_iterator(b, op.v.iter().map(|&x| C::new(x, 0.0)));
        let b_inv_v = &b_inv * &v;
        let denominator = C::new(1.0, 0.0) - v.dot(&b_inv_v) * op.lambda1;
        if denominator.norm() < NEAR_SINGULAR_FLOOR {
            return Err(Error::NearSingular(denominator.norm()));
        }
        let inv_n = 1.0 / profile.n() as f64;
        let mut complement = Vec::with_capacity(b);
        for (a, (&del, &mult)) in profile.delta().iter().zip(&profile.complement_multiplicity()).enumerate() {
            let den = C::new(1.0, 0.0) - d[a] * (del * inv_n);
            if mult > 0.0 && den.norm() < NEAR_SINGULAR_FLOOR {
                return Err(Error::NearSingular(den.norm()));
            }
            complement.push(den.inv());
        }
        let sqrt_sizes = profile.sizes().iter().map(|&s| (s as f64).sqrt()).collect();
        Ok(StabResolvent {
            op,
            d,
            b_inv,
            b_inv_v,
            denominator,
            complement,
            sqrt_sizes,
            reduced: profile.reduced_matrix(),
        })
    }

    /// `(U^* - F)^{-1} y` in the orthonormal basis.
    fn core(&self, y: &DVector<C>) -> DVector<C> {
        let first = &self.b_inv * y;
        let proj = self.b_inv_v.dot(y);
        first + &self.b_inv_v * (proj * self.op.lambda1 / self.denominator)
    }

    /// Applies the resolvent to a block-constant vector given by its block values.
    pub fn apply_blocks(&self, rhs: &[C]) -> Vec<C> {
        let b = rhs.len();
        let u = self.op.phase();
        // orthonormal coordinates, then |D|^{1/2}
        let y = DVector::from_fn(b, |a, _| rhs[a] * self.sqrt_sizes[a] * self.op.d[a].sqrt());
        let x = self.core(&y);
        (0..b)
            .map(|a| x[a] * u[a].conj() / self.op.d[a].sqrt() / self.sqrt_sizes[a])
            .collect()
    }

    /// Applies the resolvent to a full `N`-vector.
    pub fn apply_full(&self, profile: &VarianceProfile, rhs: &[C]) -> Result<Vec<C>> {
        if rhs.len() != profile.n() {
            return Err(Error::InvalidArgument("right-hand side must have length N".into()));
        }
        let sizes = profile.sizes();
        let mut means = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mean: C = rhs[start..start + s].iter().sum::<C>() / s as f64;
            means.push(mean);
            start += s;
        }
        let xb = self.apply_blocks(&means);
        let mut out = Vec::with_capacity(rhs.len());
        let mut start = 0;
        for (a, &s) in sizes.iter().enumerate() {
            for r in &rhs[start..start + s] {
                out.push(xb[a] + (r - means[a]) * self.complement[a]);
            }
            start += s;
        }
        Ok(out)
    }

    /// Residual `max |(1 - S D) x - rhs|` for a block solution.
    pub fn block_residual(&self, rhs: &[C], x: &[C]) -> f64 {
        let b = rhs.len();
        (0..b)
            .map(|a| {
                let sdx: C = (0..b).map(|c| self.reduced[(a, c)] * self.d[c] * x[c]).sum();
                (x[a] - sdx - rhs[a]).norm()
            })
            .fold(0.0, f64::max)
    }

    /// `tr(diag(c) (1 - S D)^{-1})` over all `N` coordinates.
    pub fn trace_weighted(&self, profile: &VarianceProfile, c: &[C]) -> C {
        let u = self.op.phase();
        let mut acc = C::new(0.0, 0.0);
        for a in 0..c.len() {
            let core = self.b_inv[(a, a)] + self.b_inv_v[a] * self.b_inv_v[a] * self.op.lambda1 / self.denominator;
            acc += c[a] * u[a].conj() * core;
        }
        for (a, mult) in profile.complement_multiplicity().into_iter().enumerate() {
            acc += c[a] * self.complement[a] * mult;
        }
        acc
    }

    /// Full matrix entry `[(1 - S D)^{-1}]_{xy}` for row indices `x`, `y`.
    pub fn entry(&self, profile: &VarianceProfile, x: usize, y: usize) -> C {
        let idx = profile.block_index();
        let (a, b) = (idx[x], idx[y]);
        let nb = profile.sizes()[b] as f64;
        let mut e = vec![C::new(0.0, 0.0); profile.blocks()];
        e[b] = C::new(1.0 / nb, 0.0);
        let col = self.apply_blocks(&e);
        let mut v = col[a];
        if a == b {
            let delta = if x == y { 1.0 } else { 0.0 };
            v += self.complement[b] * (delta - 1.0 / nb);
        }
        v
    }
}

/// Solves `(1 - S m(z)m(w)) x = rhs` for a full `N`-vector.
pub fn stab_resolvent_apply(profile: &VarianceProfile, op: StabilityOperator, rhs: &[C]) -> Result<Vec<C>> {
    StabResolvent::new(profile, op)?.apply_full(profile, rhs)
}

/// Dense `(1 - m(z)m(w) S)^{-1}` for small `N`; used for entrywise bounds.
pub fn resolvent_matrix(profile: &VarianceProfile, mz: &[C], mw: &[C]) -> Result<DMatrix<C>> {
    let n = profile.n();
    if n > 4096 {
        return Err(Error::InvalidArgument("dense stability matrices are capped at N = 4096".into()));
    }
    let idx = profile.block_index();
    let s = profile.expand();
    let m = DMatrix::<C>::from_fn(n, n, |i, j| {
        let d = mz[idx[i]] * mw[idx[i]];
        let id = if i == j { 1.0 } else { 0.0 };
        C::new(id, 0.0) - d * s[(i, j)]
    });
    m.try_inverse().ok_or(Error::NearSingular(0.0))
}

/// Kernels `g(z, w)`, `h(z, w)` and `P(z, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceKernels {
    pub z: C,
    pub w: C,
    pub g: C,
    pub h: C,
    pub p: C,
}

/// Direct block evaluation of `g`, `h`, `P` from `m(z)`, `m(w)`.
///
/// With `R = (1 - S D)^{-1}`, `D = m(z)m(w)` and `c = m'(z)/m(z)`:
/// `h = tr(c R)` and `g = d/dw h = tr(c R S m(z)m'(w) R)`.
pub fn kernels_from_m(profile: &VarianceProfile, z: C, mz: &[C], w: C, mw: &[C]) -> Result<VarianceKernels> {
    let b = profile.blocks();
    let dz = m_prime(profile, mz)?;
    let dw = m_prime(profile, mw)?;
    let c: Vec<C> = dz.iter().zip(mz).map(|(d, m)| d / m).collect();
    let d: Vec<C> = mz.iter().zip(mw).map(|(a, c)| a * c).collect();
    let mm = profile.reduced_matrix();
    let mut a = DMatrix::<C>::identity(b, b);
    for i in 0..b {
        for j in 0..b {
            a[(i, j)] -= mm[(i, j)] * d[j];
        }
    }
    let r = a.try_inverse().ok_or(Error::NearSingular(0.0))?;
    let mid = DMatrix::<C>::from_fn(b, b, |i, j| mm[(i, j)] * mz[j] * dw[j]);
    let rmr = &r * mid * &r;
    let inv_n = 1.0 / profile.n() as f64;
    let mut h = C::new(0.0, 0.0);
    let mut g = C::new(0.0, 0.0);
    let mut tr0 = C::new(0.0, 0.0);
    for (i, (&mult, &del)) in profile.complement_multiplicity().iter().zip(profile.delta()).enumerate() {
        h += c[i] * r[(i, i)];
        g += c[i] * rmr[(i, i)];
        tr0 += c[i] * profile.sizes()[i] as f64;
        if mult > 0.0 {
            let ri = (C::new(1.0, 0.0) - d[i] * (del * inv_n)).inv();
            h += c[i] * ri * mult;
            g += c[i] * ri * ri * (del * inv_n) * mz[i] * dw[i] * mult;
        }
    }
    Ok(VarianceKernels { z, w, g, h, p: h - tr0 })
}

/// Kernels at `(z, w)`; real arguments are boundary values from above.
pub fn kernels(profile: &VarianceProfile, z: C, w: C, opts: &SolverOptions) -> Result<VarianceKernels> {
    let mz = qve::m_at(profile, z, opts)?;
    let mw = qve::m_at(profile, w, opts)?;
    kernels_from_m(profile, z, &mz, w, &mw)
}

/// `P(x + i eta, y - i eta)` via the Sherman–Morrison split, with `(y - x) P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySingularity {
    pub x: f64,
    pub y: f64,
    pub eta: f64,
    pub p: C,
    pub scaled: C,
}

pub fn boundary_singularity(profile: &VarianceProfile, x: f64, y: f64, eta: f64, opts: &SolverOptions) -> Result<BoundarySingularity> {
    let (mz, mw) = if eta > 0.0 {
        let mz = qve::solve_continued(profile, C::new(x, eta), opts)?.m;
        let mw = qve::solve_continued(profile, C::new(y, -eta), opts)?.m;
        (mz, mw)
    } else {
        (qve::boundary_value(profile, x, opts)?, qve::boundary_value_below(profile, y, opts)?)
    };
    boundary_singularity_from_m(profile, x, y, eta, &mz, &mw)
}

pub fn boundary_singularity_from_m(
    profile: &VarianceProfile,
    x: f64,
    y: f64,
    eta: f64,
    mz: &[C],
    mw: &[C],
) -> Result<BoundarySingularity> {
    let z = C::new(x, eta);
    let w = C::new(y, -eta);
    let op = stability_from_m(profile, z, mz, w, mw)?;
    let res = StabResolvent::new(profile, op)?;
    let dz = m_prime(profile, mz)?;
    let c: Vec<C> = dz.iter().zip(mz).map(|(d, m)| d / m).collect();
    let h = res.trace_weighted(profile, &c);
    let tr0: C = c.iter().zip(profile.sizes()).map(|(c, &s)| c * s as f64).sum();
    let p = h - tr0;
    Ok(BoundarySingularity { x, y, eta, p, scaled: p * (y - x) })
}

/// Least-squares fit of `P ~ a / (y - x) + b` on real parts; returns `a`.
pub fn fit_singularity(points: &[BoundarySingularity]) -> f64 {
    // Columns 1/(y - x) and 1.
    let n = points.len() as f64;
    let (mut s11, mut s12, s22, mut r1, mut r2) = (0.0, 0.0, n, 0.0, 0.0);
    for p in points {
        let u = 1.0 / (p.y - p.x);
        s11 += u * u;
        s12 += u;
        r1 += u * p.p.re;
        r2 += p.p.re;
    }
    let det = s11 * s22 - s12 * s12;
    (r1 * s22 - s12 * r2) / det
}

/// Edge relation `Im m_i(beta - E) = (|m_i(beta)| v_i(beta) / q) Im m_sc(2 - E) + O(E)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRelation {
    pub e: f64,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Per-block `|lhs - rhs| / rhs`.
    pub relative: Vec<f64>,
    pub q: f64,
}

/// Checks the edge relation at distance `e` below the upper edge `beta`.
pub fn edge_eigvec_relation(profile: &VarianceProfile, beta: f64, e: f64, opts: &SolverOptions) -> Result<EdgeRelation> {
    let m_beta: Vec<f64> = qve::boundary_value(profile, beta, opts)?.iter().map(|v| v.norm()).collect();
    let (_, v) = perron_symmetric(profile, &m_beta, &m_beta)?;
    let phi = profile.weights();
    let sv: Vec<f64> = v.iter().zip(&phi).map(|(v, p)| v / p.sqrt()).collect();
    let avg = |f: &dyn Fn(usize) -> f64| (0..sv.len()).map(|a| phi[a] * f(a)).sum::<f64>();
    let q = (avg(&|a| sv[a].powi(3)) / avg(&|a| m_beta[a] * sv[a])).sqrt();
    let lhs: Vec<f64> = if e == 0.0 {
        vec![0.0; sv.len()]
    } else {
        qve::boundary_value(profile, beta - e, opts)?.iter().map(|v| v.im).collect()
    };
    let msc = qve::m_sc(C::new(2.0 - e, 0.0)).im;
    let rhs: Vec<f64> = (0..sv.len()).map(|a| m_beta[a] * sv[a] / q * msc).collect();
    let relative = lhs
        .iter()
        .zip(&rhs)
        .map(|(l, r)| if *r == 0.0 { (l - r).abs() } else { (l - r).abs() / r.abs() })
        .collect();
    Ok(EdgeRelation { e, lhs, rhs, relative, q })
}

/// `Re[f^T (m'/m) f]` and `Im[...]` for the Perron vector of `F(E + i0, E + i0)`.
pub fn perron_log_derivative(profile: &VarianceProfile, e: f64, opts: &SolverOptions) -> Result<C> {
    let m = qve::boundary_value(profile, e, opts)?;
    let op = stability_from_m(profile, C::new(e, 0.0), &m, C::new(e, 0.0), &m)?;
    let dm = m_prime(profile, &m)?;
    let c: Vec<C> = dm.iter().zip(&m).map(|(d, m)| d / m).collect();
    Ok(op.quadratic_form(&c))
}
