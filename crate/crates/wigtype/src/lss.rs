//! Linear spectral statistics: the variance functional `V^(f)`, the `H^{1/2}`-type
//! quadratic form, expectation corrections, the Helffer–Sjöstrand reconstruction
//! and the Gaussian variance of mesoscopic Dyson Brownian motion.
//!
//! The production variance path sends the Helffer–Sjöstrand cutoff to zero and
//! works with boundary values on the real axis. Writing the kernel of `V^` as
//! `d_z d_w L(z, w)` with
//!
//! `L = -2 log det(1 - S m(z) m(w)) - sum_i S_ii m_i(z) m_i(w) + (1/2N^2) sum s4_ij m_i m_j(z) m_i m_j(w)`,
//!
//! Green's theorem turns the double area integral into
//! `V^ = -(1/2 pi^2) int int f'(x) f'(y) Re[L(x+i0, y+i0) - L(x+i0, y-i0)] dx dy`.
//! The bracket equals `2 log|x - y|` plus a continuous remainder, so the
//! logarithm is integrated with singularity subtraction and the remainder by a
//! tensor Gauss rule. The truncated area integral over `Omega_a` is kept as an
//! oracle ([`variance_hs`]).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;
use crate::quad::{self, Rule, Sum};
use crate::qve::{self, SolverOptions};
use crate::spectrum::SpectralData;
use crate::stability;
use crate::testfn::TestFunction;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

/// `sum_i S_ii x_i y_i`.
pub fn diagonal_form(p: &VarianceProfile, x: &[C], y: &[C]) -> C {
    let phi = p.weights();
    (0..p.blocks())
        .map(|a| x[a] * y[a] * (phi[a] * (p.k()[(a, a)] + p.delta()[a])))
        .sum()
}

/// `(1/N^2) sum_ij s4_ij F(i, j)` over block pairs; zero without a fourth cumulant.
fn s4_sum<F: Fn(usize, usize) -> C>(p: &VarianceProfile, f: F) -> C {
    let s4 = p.s4();
    if s4.iter().all(|v| *v == 0.0) {
        return ZERO;
    }
    let phi = p.weights();
    let b = p.blocks();
    let mut acc = ZERO;
    for a in 0..b {
        for c in 0..b {
            if s4[(a, c)] != 0.0 {
                acc += f(a, c) * (s4[(a, c)] * phi[a] * phi[c]);
            }
        }
    }
    acc
}

fn one_minus_sd(p: &VarianceProfile, d: &[C]) -> DMatrix<C> {
    let mm = p.reduced_matrix();
    let b = p.blocks();
    DMatrix::from_fn(b, b, |i, j| if i == j { ONE } else { ZERO } - d[j] * mm[(i, j)])
}

/// `log |det(1 - S diag(d))|` over all `N` coordinates.
pub fn log_abs_det(p: &VarianceProfile, d: &[C]) -> f64 {
    let det = one_minus_sd(p, d).lu().determinant();
    let inv_n = 1.0 / p.n() as f64;
    let mut s = Sum::default();
    s.add(det.norm().ln());
    for (a, &mult) in p.complement_multiplicity().iter().enumerate() {
        if mult > 0.0 && p.delta()[a] != 0.0 {
            s.add(mult * (ONE - d[a] * (p.delta()[a] * inv_n)).norm().ln());
        }
    }
    s.value()
}

/// `log det(1 - S diag(d))` as the sum of principal logarithms of the eigenvalues.
pub fn log_det(p: &VarianceProfile, d: &[C]) -> Result<C> {
    let a = one_minus_sd(p, d);
    let ev = if a.nrows() == 1 {
        vec![a[(0, 0)]]
    } else {
        a.eigenvalues()
            .ok_or_else(|| Error::EigenFailure("Schur iteration failed on 1 - S m m".into()))?.iter().copied().collect()
    };
    let inv_n = 1.0 / p.n() as f64;
    let mut acc: C = ev.iter().map(|e| e.ln()).sum();
    for (i, &mult) in p.complement_multiplicity().iter().enumerate() {
        if mult > 0.0 && p.delta()[i] != 0.0 {
            acc += (ONE - d[i] * (p.delta()[i] * inv_n)).ln() * mult;
        }
    }
    Ok(acc)
}

/// `Re L(z, w)` from `m(z)`, `m(w)`.
pub fn log_kernel_re(p: &VarianceProfile, mz: &[C], mw: &[C]) -> f64 {
    let d: Vec<C> = mz.iter().zip(mw).map(|(a, b)| a * b).collect();
    let s4 = s4_sum(p, |a, c| d[a] * d[c]);
    -2.0 * log_abs_det(p, &d) - diagonal_form(p, mz, mw).re + 0.5 * s4.re
}

/// The simplified kernel `2 g(z, w) - tr(m'(z) S m'(w)) + (1/2N^2) sum s4 d_z d_w (m_a m_j)(z) (m_a m_j)(w)`.
pub fn variance_kernel(p: &VarianceProfile, z: C, mz: &[C], w: C, mw: &[C]) -> Result<C> {
    let k = stability::kernels_from_m(p, z, mz, w, mw)?;
    let dz = stability::m_prime(p, mz)?;
    let dw = stability::m_prime(p, mw)?;
    let s4 = s4_sum(p, |a, c| (dz[a] * mz[c] + mz[a] * dz[c]) * (dw[a] * mw[c] + mw[a] * dw[c]));
    Ok(k.g * 2.0 - diagonal_form(p, &dz, &dw) + s4 * 0.5)
}

/// The bracket of the unsimplified variance kernel, evaluated densely (small `N` oracle):
/// `2 sum_ij A_ij d_w[m(z)(1 - S m(z)m(w))^{-1} S m(z)m(w)]_jj - sum_ij A_ij [S m'(w) m(z)^2]_jj
///  + (1/N^2) sum_ija s4_ja A_ij m_a(z) m_j(z)^2 d_w(m_a(w) m_j(w))` with `A = (1 - m(z)^2 S)^{-1}`.
pub fn variance_kernel_raw(p: &VarianceProfile, mz: &[C], mw: &[C]) -> Result<C> {
    let n = p.n();
    if n > 2048 {
        return Err(Error::InvalidArgument("raw kernel oracle is limited to N <= 2048".into()));
    }
    let s = p.expand();
    let mz = p.expand_vector(mz);
    let mw = p.expand_vector(mw);
    let dense = p.to_dense();
    let dw = stability::m_prime(&dense, &mw)?;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { ONE } else { ZERO } - mz[i] * mz[i] * s[(i, j)])
        .try_inverse()
        .ok_or(Error::NearSingular(0.0))?;
    let e: Vec<C> = (0..n).map(|j| (0..n).map(|i| a[(i, j)]).sum()).collect();
    let r = DMatrix::from_fn(n, n, |i, j| if i == j { ONE } else { ZERO } - s[(i, j)] * mz[j] * mw[j])
        .try_inverse()
        .ok_or(Error::NearSingular(0.0))?;
    // d_w [D_z (R - 1)] = D_z R S D_z D'_w R.
    let mid = DMatrix::from_fn(n, n, |i, j| s[(i, j)] * mz[j] * dw[j]);
    let t = &r * mid * &r;
    let s4 = dense.s4();
    let inv_n2 = 1.0 / (n as f64 * n as f64);
    let mut acc = ZERO;
    for j in 0..n {
        acc += e[j] * mz[j] * t[(j, j)] * 2.0;
        acc -= e[j] * s[(j, j)] * dw[j] * mz[j] * mz[j];
        for q in 0..n {
            let c = s4[(j, q)];
            if c != 0.0 {
                acc += e[j] * mz[q] * mz[j] * mz[j] * (dw[q] * mw[j] + mw[q] * dw[j]) * (c * inv_n2);
            }
        }
    }
    Ok(acc)
}

/// Quadrature controls for [`variance_hat`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceOptions {
    /// Gauss–Legendre order per panel.
    pub order: usize,
    /// Panels near a feature of scale `s` have width `s / refine`.
    pub refine: f64,
    /// Truncation exponent `a` of `Omega_a`; `None` takes the full-plane limit.
    pub a_exponent: Option<f64>,
    /// Grid for the truncated area integral.
    pub hs: HsGrid,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions { order: 16, refine: 4.0, a_exponent: None, hs: HsGrid::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub value: f64,
    /// `-(1/pi^2) int int f' f' log|x - y|`.
    pub log_part: f64,
    /// Contribution of the continuous remainder of the kernel.
    pub regular_part: f64,
    /// `|V(refine) - V(refine / 2)|`.
    pub error_estimate: f64,
    pub nodes: usize,
}

/// `V^(f)` for the profile behind `spectral`.
pub fn variance_hat(f: &TestFunction, spectral: &SpectralData, opts: &VarianceOptions) -> Result<VarianceReport> {
    let p = spectral.profile()?;
    if let Some(a) = opts.a_exponent {
        let y0 = (p.n() as f64).powf(a - 1.0);
        let value = variance_hs(f, spectral, y0, &opts.hs)?;
        let coarse = variance_hs(f, spectral, y0, &opts.hs.coarsened())?;
        return Ok(VarianceReport {
            value,
            log_part: f64::NAN,
            regular_part: f64::NAN,
            error_estimate: (value - coarse).abs(),
            nodes: opts.hs.x_nodes * opts.hs.y_nodes,
        });
    }
    let fine = variance_boundary(f, spectral, opts.order, opts.refine)?;
    let coarse = variance_boundary(f, spectral, opts.order, opts.refine / 2.0)?;
    Ok(VarianceReport { error_estimate: (fine.value - coarse.value).abs(), ..fine })
}

/// Breakpoints of `supp f'` clipped to the open support `(alpha, beta)`.
fn clipped_breaks(f: &TestFunction, alpha: f64, beta: f64, refine: f64) -> Vec<Vec<f64>> {
    f.breakpoints(refine)
        .into_iter()
        .filter_map(|b| {
            let mut v: Vec<f64> = b.into_iter().map(|x| x.clamp(alpha, beta)).collect();
            v.dedup();
            (v.len() >= 2 && v.last().unwrap() > &v[0]).then_some(v)
        })
        .collect()
}

fn variance_boundary(f: &TestFunction, spectral: &SpectralData, order: usize, refine: f64) -> Result<VarianceReport> {
    let p = spectral.profile()?;
    let (alpha, beta) = (spectral.alpha, spectral.beta);
    let lists = clipped_breaks(f, alpha, beta, refine);
    if lists.is_empty() {
        return Ok(VarianceReport { value: 0.0, log_part: 0.0, regular_part: 0.0, error_estimate: 0.0, nodes: 0 });
    }
    let rule = Rule::new(order);
    let u = |x: f64| if x > alpha && x < beta { f.d1(x) } else { 0.0 };
    let breaks = quad::merge_breaks(&lists);
    let i_log = quad::log_double_integral(u, &breaks, &rule);

    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for l in &lists {
        let (x, w) = rule.composite(l);
        xs.extend(x);
        ws.extend(w);
    }
    let uw: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| u(x) * w).collect();
    let opts = spectral.config.solver;
    let m: Vec<Vec<C>> = qve::boundary_values_at(p, &xs, &opts)?;
    // Diagonal pairs use the average of the remainder at x +- delta.
    let delta: Vec<f64> = xs.iter().map(|x| 1e-7 * x.abs().max(1.0)).collect();
    let shifted: Vec<(Vec<C>, Vec<C>)> = xs
        .par_iter()
        .zip(&delta)
        .map(|(&x, &d)| Ok((qve::boundary_value(p, x - d, &opts)?, qve::boundary_value(p, x + d, &opts)?)))
        .collect::<Result<_>>()?;
    let rows: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let mut s = Sum::default();
            if uw[i] == 0.0 {
                return 0.0;
            }
            for j in 0..xs.len() {
                if uw[j] == 0.0 {
                    continue;
                }
                let r = if xs[i] == xs[j] {
                    let (lo, hi) = &shifted[j];
                    0.5 * (remainder(p, &m[i], lo, xs[i] - (xs[j] - delta[j]))
                        + remainder(p, &m[i], hi, xs[i] - (xs[j] + delta[j])))
                } else {
                    remainder(p, &m[i], &m[j], xs[i] - xs[j])
                };
                s.add(uw[j] * r);
            }
            uw[i] * s.value()
        })
        .collect();
    let regular = quad::ksum(rows);
    let log_part = -i_log / (PI * PI);
    let regular_part = -regular / (2.0 * PI * PI);
    Ok(VarianceReport {
        value: log_part + regular_part,
        log_part,
        regular_part,
        error_estimate: 0.0,
        nodes: xs.len(),
    })
}

/// `Re[L(x+i0, y+i0) - L(x+i0, y-i0)] - 2 log|x - y|` with `mx = m(x + i0)`, `my = m(y + i0)`.
fn remainder(p: &VarianceProfile, mx: &[C], my: &[C], diff: f64) -> f64 {
    let my_below: Vec<C> = my.iter().map(|v| v.conj()).collect();
    log_kernel_re(p, mx, my) - log_kernel_re(p, mx, &my_below) - 2.0 * diff.abs().ln()
}

/// Tensor grid of the truncated area integral over `Omega_a x Omega_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsGrid {
    /// Gauss nodes in `x` over `supp f`.
    pub x_nodes: usize,
    /// Gauss nodes in `y` over `[y0, 2 L_* + 1]`, geometrically graded toward `y0`.
    pub y_nodes: usize,
}

impl Default for HsGrid {
    fn default() -> Self {
        HsGrid { x_nodes: 96, y_nodes: 64 }
    }
}

impl HsGrid {
    fn coarsened(&self) -> Self {
        HsGrid { x_nodes: self.x_nodes * 3 / 4, y_nodes: self.y_nodes * 3 / 4 }
    }
}

/// Nodes `(x, y, weight)` covering `{y0 < y < 2 L_* + 1} x supp f` in the upper half-plane.
fn hs_nodes(f: &TestFunction, y0: f64, grid: &HsGrid) -> Vec<(f64, f64, f64)> {
    let Some((lo, hi)) = f.support() else {
        return vec![];
    };
    let order = 8;
    let xpanels = (grid.x_nodes / order).max(1);
    let feats: Vec<(f64, f64)> = f.features();
    let mut xb = quad::feature_mesh(lo, hi, &feats, xpanels);
    if xb.len() < 2 {
        xb = vec![lo, hi];
    }
    let rule = Rule::new(order);
    let (xs, xw) = rule.composite(&xb);
    let top = 2.0 * f.l_star() + 1.0;
    let ypanels = (grid.y_nodes / order).max(2);
    // Geometric below 2 L_*, plus the cutoff layer.
    let ratio = (2.0 * f.l_star() / y0).powf(1.0 / (ypanels - 1) as f64);
    let mut yb: Vec<f64> = (0..ypanels).map(|k| y0 * ratio.powi(k as i32)).collect();
    yb.push(top);
    let (ys, yw) = rule.composite(&yb);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (&x, &wx) in xs.iter().zip(&xw) {
        for (&y, &wy) in ys.iter().zip(&yw) {
            out.push((x, y, wx * wy));
        }
    }
    out
}

/// `(1/pi^2) int int_{Omega_a x Omega_a} dbar f~(w) dbar f~(z) K(z, w)` with `|Im z|, |Im w| > y0`.
pub fn variance_hs(f: &TestFunction, spectral: &SpectralData, y0: f64, grid: &HsGrid) -> Result<f64> {
    let p = spectral.profile()?;
    if !(y0 > 0.0) {
        return Err(Error::InvalidArgument("the area integral needs a positive cutoff".into()));
    }
    let nodes: Vec<(f64, f64, f64)> = hs_nodes(f, y0, grid)
        .into_iter()
        .filter(|&(x, y, _)| f.dbar(x, y) != ZERO)
        .collect();
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let opts = spectral.config.solver;
    let pts: Vec<(C, C, Vec<C>)> = nodes
        .par_iter()
        .map(|&(x, y, w)| {
            let z = C::new(x, y);
            Ok((z, f.dbar(x, y) * w, qve::solve_continued(p, z, &opts)?.m))
        })
        .collect::<Result<_>>()?;
    // z in the upper half-plane; w in both, with dbar f~(conj w) = conj(dbar f~(w)).
    let rows: Vec<Result<C>> = pts
        .par_iter()
        .map(|(z, az, mz)| {
            let mut acc = ZERO;
            for (w, aw, mw) in &pts {
                let mwc: Vec<C> = mw.iter().map(|v| v.conj()).collect();
                acc += aw * variance_kernel(p, *z, mz, *w, mw)?;
                acc += aw.conj() * variance_kernel(p, *z, mz, w.conj(), &mwc)?;
            }
            Ok(az * acc)
        })
        .collect();
    let mut re = Sum::default();
    for r in rows {
        re.add(r?.re);
    }
    Ok(2.0 * re.value() / (PI * PI))
}

/// Closed-form variance for the semicircle law: `(1/2 pi^2) int int ((g(x)-g(y))/(x-y))^2 (4-xy)/(sqrt(4-x^2) sqrt(4-y^2))`
/// plus `(s4 / 2 pi^2) sigma(g)^2` with `sigma(g) = int g(x) (2 - x^2)/sqrt(4 - x^2)`.
pub fn wigner_variance(g: &TestFunction, s4: f64, nodes: usize) -> f64 {
    // x = 2 cos(theta) absorbs the inverse square roots.
    let rule = Rule::new(16);
    let panels = (nodes / 16).max(1);
    let mut br: Vec<f64> = (0..=panels).map(|k| PI * k as f64 / panels as f64).collect();
    for (e, _) in g.features() {
        if e.abs() < 2.0 {
            br.push((0.5 * e).acos());
        }
    }
    let br = quad::merge_breaks(&[br]);
    let (th, tw) = rule.composite(&br);
    let xs: Vec<f64> = th.iter().map(|t| 2.0 * t.cos()).collect();
    let gv: Vec<(f64, f64)> = xs.iter().map(|&x| (g.eval(x), g.d1(x))).collect();
    let mut s = Sum::default();
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            let d = xs[i] - xs[j];
            let q = if d.abs() < 1e-12 { gv[i].1 } else { (gv[i].0 - gv[j].0) / d };
            s.add(tw[i] * tw[j] * q * q * (4.0 - xs[i] * xs[j]));
        }
    }
    let sigma = quad::ksum((0..xs.len()).map(|i| tw[i] * gv[i].0 * (2.0 - xs[i] * xs[i])));
    s.value() / (2.0 * PI * PI) + s4 / (2.0 * PI * PI) * sigma * sigma
}

/// `int int_{[c-r, c+r]^2} ((phi(x) - phi(y)) / (x - y))^2 dx dy` around the ramp centre `c = E0`.
pub fn h12_form(phi: &TestFunction, r: f64) -> Result<f64> {
    let s = phi.spec();
    let c = s.e0;
    if !(r > 0.0) || phi.ramp_half_width() > 0.5 * r {
        return Err(Error::InvalidArgument(format!("need tM <= r/2, got tM = {}, r = {r}", phi.ramp_half_width())));
    }
    if phi.eval(c - r) != 0.0 || (phi.eval(c + r) - 1.0).abs() > 1e-12 {
        return Err(Error::DataContractViolation("phi(c - r) = 0 and phi(c + r) = 1 required".into()));
    }
    let a = h12_at(phi, c, r, 4.0);
    let b = h12_at(phi, c, r, 8.0);
    if (a - b).abs() > 1e-6 * b.abs().max(1.0) {
        return Err(Error::QuadratureNonConvergence(format!("h12 form: {a} vs {b} under refinement")));
    }
    Ok(b)
}

fn h12_at(phi: &TestFunction, c: f64, r: f64, refine: f64) -> f64 {
    let rule = Rule::new(16);
    let feats: Vec<(f64, f64)> = phi
        .features()
        .into_iter()
        .filter(|(x, _)| (x - c).abs() < r)
        .map(|(x, s)| (x, s / refine))
        .collect();
    let mesh = quad::feature_mesh(c - r, c + r, &feats, 8);
    let (xs, ws) = rule.composite(&mesh);
    let v: Vec<(f64, f64)> = xs.iter().map(|&x| (phi.eval(x), phi.d1(x))).collect();
    let rows: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let mut s = Sum::default();
            for j in 0..xs.len() {
                let d = xs[i] - xs[j];
                let q = if d.abs() <= 1e-9 * phi.t() {
                    0.5 * (v[i].1 + v[j].1)
                } else {
                    (v[i].0 - v[j].0) / d
                };
                s.add(ws[j] * q * q);
            }
            ws[i] * s.value()
        })
        .collect();
    quad::ksum(rows)
}

/// Imaginary parts of the three expectation integrands at `E + i0`:
/// `(Im tr S m^2, Im (1/N^2) sum s4_ij (m_i m_j)^2, Im log det(1 - S m^2))`.
pub fn expectation_integrands(p: &VarianceProfile, m: &[C]) -> Result<(f64, f64, f64)> {
    let m2: Vec<C> = m.iter().map(|v| v * v).collect();
    let ones = vec![ONE; m.len()];
    let tr = diagonal_form(p, &m2, &ones).im;
    let q = s4_sum(p, |a, c| m2[a] * m2[c]).im;
    let ld = log_det(p, &m2)?.im;
    Ok((tr, q, ld))
}

/// `tr((1 - S m^2)^{-1} S m' m)` over all `N` coordinates.
pub fn resolvent_trace(p: &VarianceProfile, m: &[C]) -> Result<C> {
    let dm = stability::m_prime(p, m)?;
    let m2: Vec<C> = m.iter().map(|v| v * v).collect();
    let r = one_minus_sd(p, &m2).try_inverse().ok_or(Error::NearSingular(0.0))?;
    let mm = p.reduced_matrix();
    let b = p.blocks();
    let inv_n = 1.0 / p.n() as f64;
    let mut acc = ZERO;
    for a in 0..b {
        for c in 0..b {
            acc += r[(a, c)] * mm[(c, a)] * dm[a] * m[a];
        }
        let mult = p.complement_multiplicity()[a];
        let del = p.delta()[a] * inv_n;
        if mult > 0.0 && del != 0.0 {
            acc += dm[a] * m[a] * del / (ONE - m2[a] * del) * mult;
        }
    }
    Ok(acc)
}

/// Finite-difference check of `-1/2 d/dE log det(1 - S m^2(E)) = tr((1 - S m^2)^{-1} S m' m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogDetCheck {
    pub e: f64,
    pub finite_difference: C,
    pub trace: C,
    pub relative: f64,
}

pub fn logdet_derivative_check(p: &VarianceProfile, e: f64, h: f64, opts: &SolverOptions) -> Result<LogDetCheck> {
    let ld = |x: f64| -> Result<C> {
        let m = qve::boundary_value(p, x, opts)?;
        let m2: Vec<C> = m.iter().map(|v| v * v).collect();
        log_det(p, &m2)
    };
    // Fourth-order central difference.
    let fd = (ld(e - 2.0 * h)? - ld(e - h)? * 8.0 + ld(e + h)? * 8.0 - ld(e + 2.0 * h)?) / (12.0 * h) * -0.5;
    let tr = resolvent_trace(p, &qve::boundary_value(p, e, opts)?)?;
    Ok(LogDetCheck { e, finite_difference: fd, trace: tr, relative: (fd - tr).norm() / tr.norm().max(1e-300) })
}

/// Expectation correction `E[tr f(W)] - N int f rho` split into its pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    /// `-(1/pi) int f (1/2) d_x Im tr S m^2`.
    pub trace_term: f64,
    /// `(1/pi) int f (1/4) d_x Im (1/N^2) sum s4 (m_i m_j)^2`.
    pub cumulant_term: f64,
    /// `(1/pi) int f Im tr((1 - S m^2)^{-1} S m' m)`.
    pub resolvent_term: f64,
    /// `f(alpha)/4 + f(beta)/4`.
    pub edge_term: f64,
    pub total: f64,
}

/// Expectation correction for a test function.
///
/// The three bulk integrals are integrated by parts (the integrands vanish at the
/// edges except `Im log det`, which tends to `-pi/2` at `alpha` and `pi/2` at `beta`),
/// leaving integrals of `f'` against bounded functions.
///
/// The trace term enters as `-tr(S m m')`, the sign that comes out of the cumulant
/// expansion. With the opposite sign the constant Gaussian profile is off by
/// `(1/pi) int f' Im m^2` (about 0.4 for a smooth step) against sampled means.
/// An extra diagonal enters `Im log det` through the complement eigenvalues and
/// the trace with opposite signs, so the correction does not depend on it.
pub fn expectation_correction(f: &TestFunction, spectral: &SpectralData, order: usize, refine: f64) -> Result<ExpectationReport> {
    let p = spectral.profile()?;
    let (alpha, beta) = (spectral.alpha, spectral.beta);
    let edge_term = 0.25 * (f.eval(alpha) + f.eval(beta));
    let lists = clipped_breaks(f, alpha, beta, refine);
    let rule = Rule::new(order);
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for l in &lists {
        let (x, w) = rule.composite(l);
        xs.extend(x);
        ws.extend(w);
    }
    let opts = spectral.config.solver;
    let vals: Vec<(f64, f64, f64)> = xs
        .par_iter()
        .map(|&x| expectation_integrands(p, &qve::boundary_value(p, x, &opts)?))
        .collect::<Result<_>>()?;
    let mut tr = Sum::default();
    let mut q = Sum::default();
    let mut ld = Sum::default();
    for ((&x, &w), v) in xs.iter().zip(&ws).zip(&vals) {
        let d = f.d1(x) * w;
        tr.add(d * v.0);
        q.add(d * v.1);
        ld.add(d * v.2);
    }
    let trace_term = tr.value() / (2.0 * PI);
    let cumulant_term = -q.value() / (4.0 * PI);
    let resolvent_term = ld.value() / (2.0 * PI) - edge_term;
    Ok(ExpectationReport {
        trace_term,
        cumulant_term,
        resolvent_term,
        edge_term,
        total: trace_term + cumulant_term + resolvent_term + edge_term,
    })
}

/// Prediction for `2 pi N E[rho(gamma) (lambda_i0 - gamma)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SevExpectation {
    pub i0: usize,
    pub gamma: f64,
    pub log_det: f64,
    pub trace: f64,
    /// `(1/N^2) sum s4_ij Im (m_i m_j)^2`, entering with weight `-1/2`.
    pub cumulant: f64,
    pub value: f64,
}

pub fn sev_expectation(spectral: &SpectralData, i0: usize) -> Result<SevExpectation> {
    let p = spectral.profile()?;
    let n = p.n();
    if i0 == 0 || i0 > n {
        return Err(Error::InvalidArgument(format!("index {i0} outside 1..={n}")));
    }
    let gamma = spectral.quantile(i0 as f64 / n as f64);
    let m = spectral.m_at(gamma)?;
    let (trace, cumulant, log_det) = expectation_integrands(p, &m)?;
    Ok(SevExpectation { i0, gamma, log_det, trace, cumulant, value: log_det + trace - 0.5 * cumulant - PI })
}

/// `(1/pi^2) |log(t0 / eta_*)|`.
pub fn dbm_gaussian_variance(t0: f64, eta_star: f64) -> f64 {
    (t0 / eta_star).ln().abs() / (PI * PI)
}

/// `(1/(2 pi^2 rho0)) int int f'(x1) f'(x2) rho(x1) log(1 + (2 pi t0 rho0)^2 / (x1 - x2)^2)`.
pub fn dbm_kernel_integral<R: Fn(f64) -> f64 + Sync>(f: &TestFunction, t0: f64, rho: R, rho0: f64, refine: f64) -> f64 {
    let lists = f.breakpoints(refine);
    if lists.is_empty() {
        return 0.0;
    }
    let a2 = (2.0 * PI * t0 * rho0).powi(2);
    let rule = Rule::new(16);
    let breaks = quad::merge_breaks(&lists);
    let u = |x: f64| f.d1(x) * rho(x);
    let v = |x: f64| f.d1(x);
    // log(1 + a^2/d^2) = log(d^2 + a^2) - 2 log|d|.
    let sing = quad::log_double_integral2(u, v, &breaks, &rule);
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for l in &lists {
        let (x, w) = rule.composite(l);
        xs.extend(x);
        ws.extend(w);
    }
    let uw: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| u(x) * w).collect();
    let vw: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| v(x) * w).collect();
    let rows: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| uw[i] * quad::ksum((0..xs.len()).map(|j| vw[j] * ((xs[i] - xs[j]).powi(2) + a2).ln())))
        .collect();
    (quad::ksum(rows) - 2.0 * sing) / (2.0 * PI * PI * rho0)
}

/// `g(E) = (1/pi) int f(x) Im 1/(E - x - t0 m_t0(x + i0)) dx` and its derivative on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatedFunction {
    pub t0: f64,
    pub energies: Vec<f64>,
    pub g: Vec<f64>,
    pub g_prime: Vec<f64>,
    /// `E0 + t0 Re m_t0(E0)`.
    pub e0_hat: f64,
}

impl PropagatedFunction {
    /// `max |g'(x)| ((x - E0^)^2 + t0^2) / t0` over grid energies at least `exclude` away from `e1`.
    pub fn envelope_ratio(&self, e1: f64, exclude: f64) -> f64 {
        self.energies
            .iter()
            .zip(&self.g_prime)
            .filter(|(e, _)| (**e - e1).abs() >= exclude)
            .map(|(e, d)| d.abs() * ((e - self.e0_hat).powi(2) + self.t0 * self.t0) / self.t0)
            .fold(0.0, f64::max)
    }
}

/// Propagates `f` backwards along the free-convolution characteristics; `spectral_t0`
/// describes the profile at time `t0` (for example `S + t0 J/N`).
pub fn propagate_test_function(f: &TestFunction, t0: f64, spectral_t0: &SpectralData, energies: &[f64]) -> Result<PropagatedFunction> {
    let p = spectral_t0.profile()?;
    let opts = spectral_t0.config.solver;
    let (alpha, beta) = (spectral_t0.alpha, spectral_t0.beta);
    let e0 = f.spec().e0;
    let e0_hat = if f.kind() == crate::testfn::Kind::Zero {
        e0
    } else {
        e0 + t0 * p.mean(&qve::boundary_value(p, e0, &opts)?).re
    };
    let Some((lo, hi)) = f.support() else {
        return Ok(PropagatedFunction {
            t0,
            energies: energies.to_vec(),
            g: vec![0.0; energies.len()],
            g_prime: vec![0.0; energies.len()],
            e0_hat,
        });
    };
    let (lo, hi) = (lo.max(alpha), hi.min(beta));
    // Panels no wider than t0/4 so the Poisson kernel of width ~t0 is resolved everywhere.
    let panels = (((hi - lo) / (0.25 * t0)).ceil() as usize).max(4);
    let mut lists = vec![(0..=panels).map(|k| lo + (hi - lo) * k as f64 / panels as f64).collect::<Vec<_>>()];
    lists.extend(f.breakpoints(4.0));
    let breaks: Vec<f64> = quad::merge_breaks(&lists).into_iter().filter(|&x| x >= lo && x <= hi).collect();
    let rule = Rule::new(8);
    let (xs, ws) = rule.composite(&breaks);
    let ms: Vec<C> = xs
        .par_iter()
        .map(|&x| Ok(p.mean(&qve::boundary_value(p, x, &opts)?)))
        .collect::<Result<_>>()?;
    let fx: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
    let vals: Vec<(f64, f64)> = energies
        .par_iter()
        .map(|&e| {
            let mut g = Sum::default();
            let mut dg = Sum::default();
            for k in 0..xs.len() {
                let den = C::new(e - xs[k], 0.0) - ms[k] * t0;
                let inv = den.inv();
                g.add(ws[k] * fx[k] * inv.im);
                dg.add(-ws[k] * fx[k] * (inv * inv).im);
            }
            (g.value() / PI, dg.value() / PI)
        })
        .collect();
    Ok(PropagatedFunction {
        t0,
        energies: energies.to_vec(),
        g: vals.iter().map(|v| v.0).collect(),
        g_prime: vals.iter().map(|v| v.1).collect(),
        e0_hat,
    })
}

/// Helffer–Sjöstrand reconstruction `f(x0) = (1/pi) int dbar f~(z) / (x0 - z) dx dy`.
pub fn hs_reconstruct(f: &TestFunction, x0: f64) -> f64 {
    let Some((lo, hi)) = f.support() else {
        return 0.0;
    };
    let rule = Rule::new(16);
    let top = 2.0 * f.l_star() + 1.0;
    let scale = f.features().iter().map(|q| q.1).fold(hi - lo, f64::min);
    // Conjugate symmetry folds the lower half-plane onto the upper one.
    let mut yb = quad::graded_breaks(0.0, 2.0 * f.l_star(), 0.0, 0.5, 60);
    yb.push(top);
    let yb = quad::merge_breaks(&[yb]);
    let feats: Vec<(f64, f64)> = f.features().into_iter().map(|(p, s)| (p, s / 4.0)).collect();
    let inner = |y: f64| -> f64 {
        let mut fe = feats.clone();
        fe.push((x0, y.min(scale) / 4.0));
        let xb = quad::feature_mesh(lo, hi, &fe, 8);
        rule.integrate_composite(&xb, |x| (f.dbar(x, y) / C::new(x0 - x, -y)).re)
    };
    let v = rule.integrate_composite(&yb, inner);
    2.0 * v / PI
}
