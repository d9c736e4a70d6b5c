//! Density of states, support and one-cut certificate, quantiles and edge exponents.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;
use crate::qve::{self, QveSolution, SolverOptions};

/// Support membership threshold on `rho`.
pub const SUPPORT_THRESHOLD: f64 = 1e-4;
/// An interior minimum below this fraction of the maximum is treated as a cusp.
pub const CUSP_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    /// Number of energies on the coarse scan.
    pub grid_points: usize,
    /// Angular samples for the density series on `[alpha, beta]`.
    pub series_terms: usize,
    pub threshold: f64,
    /// Edge-fit window, as distances from the edge.
    pub fit_window: (f64, f64),
    pub fit_points: usize,
    pub solver: SolverOptions,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            grid_points: 801,
            series_terms: 512,
            threshold: SUPPORT_THRESHOLD,
            fit_window: (1e-4, 1e-2),
            fit_points: 16,
            solver: SolverOptions::default(),
        }
    }
}

/// Spectral summary of one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub alpha: f64,
    pub beta: f64,
    /// Scan energies and the density on them.
    pub energies: Vec<f64>,
    pub density: Vec<f64>,
    pub mass: f64,
    /// Fitted local exponents of `rho` at `alpha` and `beta`.
    pub edge_exponents: Option<(f64, f64)>,
    /// Bulk margin used for one-cut certificates.
    pub kappa: f64,
    /// Smallest density on `[alpha + kappa, beta - kappa]` among scan energies.
    pub bulk_min: f64,
    /// Cosine coefficients of `g(theta) = rho(E(theta)) (beta - alpha)/2 sin(theta)`,
    /// `E(theta) = (alpha + beta)/2 - (beta - alpha)/2 cos(theta)`.
    pub series: Vec<f64>,
    pub grid_step: f64,
    pub config: SpectrumConfig,
    #[serde(skip)]
    pub profile: Option<VarianceProfile>,
}

/// `rho(E) = (1/(pi N)) sum_i Im m_i(E + i0)` on every energy of a solved grid.
pub fn density_of_states(sol: &QveSolution) -> Result<Vec<f64>> {
    let p = sol
        .profile
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("solution detached from its profile".into()))?;
    let vals: Vec<Result<f64>> = sol
        .energies
        .par_iter()
        .map(|&e| Ok((p.mean(&sol.boundary_values(e)?).im / PI).max(0.0)))
        .collect();
    let rho: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    if let (Some(&first), Some(&last)) = (rho.first(), rho.last()) {
        if first > SUPPORT_THRESHOLD || last > SUPPORT_THRESHOLD {
            return Err(Error::InsufficientGrid);
        }
    }
    Ok(rho)
}

/// The single component where `density > threshold`.
///
/// Fails with `MultiCut` for more than one component and with `CuspSuspect`
/// when an interior local minimum falls below [`CUSP_RATIO`] times the maximum.
pub fn detect_support(energies: &[f64], density: &[f64], threshold: f64) -> Result<(f64, f64)> {
    let inside: Vec<bool> = density.iter().map(|&r| r > threshold).collect();
    let mut comps = Vec::new();
    let mut start = None;
    for (i, &b) in inside.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                comps.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        comps.push((s, inside.len() - 1));
    }
    match comps.len() {
        0 => return Err(Error::InsufficientGrid),
        1 => {}
        k => return Err(Error::MultiCut { components: k }),
    }
    let (lo, hi) = comps[0];
    if lo == 0 || hi == energies.len() - 1 {
        return Err(Error::InsufficientGrid);
    }
    let max = density[lo..=hi].iter().copied().fold(0.0, f64::max);
    let span = energies[hi] - energies[lo];
    let kappa = span / 20.0;
    for i in lo + 1..hi {
        let e = energies[i];
        if e < energies[lo] + kappa || e > energies[hi] - kappa {
            continue;
        }
        if density[i] <= density[i - 1] && density[i] <= density[i + 1] && density[i] < CUSP_RATIO * max {
            return Err(Error::CuspSuspect { energy: e, value: density[i] });
        }
    }
    // Linear interpolation of the threshold crossing.
    let cross = |i: usize, j: usize| {
        let (e0, e1, r0, r1) = (energies[i], energies[j], density[i], density[j]);
        e0 + (threshold - r0) * (e1 - e0) / (r1 - r0)
    };
    Ok((cross(lo - 1, lo), cross(hi, hi + 1)))
}

/// Refines an edge by bisection on the existence of a stable real solution.
///
/// `inside` must lie in the support and `outside` beyond the edge; the real
/// solution of the QVE exists (with `lambda_1(|m| S |m|) < 1`) exactly outside.
pub fn refine_edge(profile: &VarianceProfile, inside: f64, outside: f64) -> Result<f64> {
    let dir = (outside - inside).signum();
    // March in from far away so Newton starts near the physical branch.
    let far = outside + dir * 10.0;
    let mut m: Vec<f64> = vec![-1.0 / far; profile.blocks()];
    let mut hi = far;
    let steps = 40;
    for k in 1..=steps {
        let e = far + (outside - far) * k as f64 / steps as f64;
        match qve::solve_real(profile, e, &m) {
            Some(v) => {
                m = v;
                hi = e;
            }
            None => break,
        }
    }
    let mut lo = inside;
    if (hi - outside).abs() > 1e-12 {
        // The outer bracket is not yet outside: fall back to what was reached.
        lo = outside;
    }
    for _ in 0..200 {
        if (hi - lo).abs() < 1e-13 * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (hi + lo);
        match qve::solve_real(profile, mid, &m) {
            Some(v) => {
                m = v;
                hi = mid;
            }
            None => lo = mid,
        }
    }
    Ok(0.5 * (hi + lo))
}

/// A symmetric energy window that contains the support: `2 sqrt(max row sum)` plus margin.
pub fn default_window(profile: &VarianceProfile) -> (f64, f64) {
    let ones = vec![1.0; profile.blocks()];
    let rows = profile.apply(&ones);
    let r = 2.0 * rows.iter().copied().fold(0.0, f64::max).sqrt();
    (-(1.05 * r + 0.2), 1.05 * r + 0.2)
}

impl SpectralData {
    /// Full pipeline from a profile: scan, support, edge refinement, density series.
    pub fn from_profile(profile: &VarianceProfile, config: &SpectrumConfig) -> Result<Self> {
        let (a, b) = default_window(profile);
        let n = config.grid_points.max(3);
        let energies: Vec<f64> = (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect();
        let sol = qve::solve_grid(profile, &energies, &qve::default_eta_schedule(config.solver.eta_floor), &config.solver)?;
        Self::from_solution(&sol, config)
    }

    /// Spectral data from a solved energy grid.
    pub fn from_solution(sol: &QveSolution, config: &SpectrumConfig) -> Result<Self> {
        let profile = sol
            .profile
            .clone()
            .ok_or_else(|| Error::InvalidArgument("solution detached from its profile".into()))?;
        let energies = sol.energies.clone();
        let density = density_of_states(sol)?;
        let (ra, rb) = detect_support(&energies, &density, config.threshold)?;
        let step = energies.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        let inner_a = energies.iter().copied().filter(|&e| e > ra).fold(f64::INFINITY, f64::min);
        let inner_b = energies.iter().copied().filter(|&e| e < rb).fold(f64::NEG_INFINITY, f64::max);
        let alpha = refine_edge(&profile, inner_a, inner_a - 2.0 * step)?;
        let beta = refine_edge(&profile, inner_b, inner_b + 2.0 * step)?;
        let kappa = (beta - alpha) / 20.0;
        let bulk_min = energies
            .iter()
            .zip(&density)
            .filter(|(e, _)| **e >= alpha + kappa && **e <= beta - kappa)
            .map(|(_, r)| *r)
            .fold(f64::INFINITY, f64::min);

        let mut data = SpectralData {
            alpha,
            beta,
            energies,
            density,
            mass: 0.0,
            edge_exponents: None,
            kappa,
            bulk_min,
            series: Vec::new(),
            grid_step: step,
            config: *config,
            profile: Some(profile),
        };
        data.series = data.density_series()?;
        data.mass = data.series[0] * PI / 2.0;
        Ok(data)
    }

    /// The profile the data was computed from.
    pub fn profile(&self) -> Result<&VarianceProfile> {
        self.profile
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("spectral data detached from its profile".into()))
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.beta - self.alpha)
    }

    fn center(&self) -> f64 {
        0.5 * (self.beta + self.alpha)
    }

    /// `E(theta)`.
    pub fn energy_of(&self, theta: f64) -> f64 {
        self.center() - self.half_width() * theta.cos()
    }

    fn theta_of(&self, e: f64) -> f64 {
        ((self.center() - e) / self.half_width()).clamp(-1.0, 1.0).acos()
    }

    fn density_series(&self) -> Result<Vec<f64>> {
        let k = self.config.series_terms.max(8);
        let h = self.half_width();
        let thetas: Vec<f64> = (0..k).map(|j| PI * (j as f64 + 0.5) / k as f64).collect();
        let g: Vec<f64> = thetas
            .par_iter()
            .map(|&t| Ok(self.density_at(self.energy_of(t))? * h * t.sin()))
            .collect::<Result<_>>()?;
        let coeffs = (0..k)
            .map(|j| {
                let s: f64 = crate::quad::ksum(g.iter().zip(&thetas).map(|(gv, t)| gv * (j as f64 * t).cos()));
                2.0 * s / k as f64
            })
            .collect();
        Ok(coeffs)
    }

    /// `rho(E)` from a direct boundary-value solve.
    pub fn density_at(&self, e: f64) -> Result<f64> {
        if e <= self.alpha || e >= self.beta {
            return Ok(0.0);
        }
        let p = self.profile()?;
        let m = qve::boundary_value(p, e, &self.config.solver)?;
        Ok((p.mean(&m).im / PI).max(0.0))
    }

    /// Boundary values `m(E + i0)` through the stored profile.
    pub fn m_at(&self, e: f64) -> Result<Vec<Complex64>> {
        qve::boundary_value(self.profile()?, e, &self.config.solver)
    }

    /// Unnormalized `int_alpha^E rho`.
    pub fn raw_cdf(&self, e: f64) -> f64 {
        if e <= self.alpha {
            return 0.0;
        }
        if e >= self.beta {
            return self.mass;
        }
        self.cdf_theta(self.theta_of(e))
    }

    fn cdf_theta(&self, t: f64) -> f64 {
        let mut s = crate::quad::Sum::default();
        s.add(0.5 * self.series[0] * t);
        for (j, a) in self.series.iter().enumerate().skip(1) {
            s.add(a * (j as f64 * t).sin() / j as f64);
        }
        s.value()
    }

    /// `g(theta) = a_0/2 + sum_j a_j cos(j theta)`, the density series in the angle variable.
    fn series_value(&self, t: f64) -> f64 {
        let mut s = crate::quad::Sum::default();
        s.add(0.5 * self.series[0]);
        for (j, a) in self.series.iter().enumerate().skip(1) {
            s.add(a * (j as f64 * t).cos());
        }
        s.value()
    }

    /// `int f rho` normalized by the computed mass, by Gauss quadrature in the angle
    /// variable with panels refined at the images of `breaks`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, breaks: &[f64]) -> f64 {
        let mut th: Vec<f64> = (0..=64).map(|k| PI * k as f64 / 64.0).collect();
        th.extend(
            breaks
                .iter()
                .filter(|&&e| e > self.alpha && e < self.beta)
                .map(|&e| self.theta_of(e)),
        );
        let th = crate::quad::merge_breaks(&[th]);
        let rule = crate::quad::Rule::new(16);
        rule.integrate_composite(&th, |t| f(self.energy_of(t)) * self.series_value(t)) / self.mass
    }

    /// `int_alpha^E rho` normalized by the computed mass.
    pub fn cdf(&self, e: f64) -> f64 {
        self.raw_cdf(e) / self.mass
    }

    /// Classical locations `gamma_1 < ... < gamma_n` with `int_alpha^{gamma_i} rho = i/n`.
    pub fn quantiles(&self, n: usize) -> Vec<f64> {
        (1..=n).into_par_iter().map(|i| self.quantile(i as f64 / n as f64)).collect()
    }

    /// Energy with normalized mass `p` to its left.
    pub fn quantile(&self, p: f64) -> f64 {
        if p >= 1.0 {
            return self.beta;
        }
        if p <= 0.0 {
            return self.alpha;
        }
        let target = p * self.mass;
        let (mut lo, mut hi) = (0.0, PI);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_theta(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        self.energy_of(0.5 * (lo + hi))
    }

    /// Fits local exponents of `rho` near both edges over the configured window.
    pub fn edge_fit(&self) -> Result<(f64, f64)> {
        let (d0, d1) = self.config.fit_window;
        let k = self.config.fit_points;
        if !(d0 > 0.0 && d1 > 2.0 * d0) || k < 3 || d1 > 0.5 * (self.beta - self.alpha) {
            return Err(Error::WindowTooNarrow(format!("[{d0}, {d1}] with {k} points")));
        }
        let ds: Vec<f64> = (0..k).map(|j| d0 * (d1 / d0).powf(j as f64 / (k - 1) as f64)).collect();
        let left: Vec<f64> = ds.iter().map(|d| self.density_at(self.alpha + d)).collect::<Result<_>>()?;
        let right: Vec<f64> = ds.iter().map(|d| self.density_at(self.beta - d)).collect::<Result<_>>()?;
        Ok((fit_exponent(&ds, &left)?, fit_exponent(&ds, &right)?))
    }

    /// Runs [`edge_fit`](Self::edge_fit) and stores the result.
    pub fn with_edge_fit(mut self) -> Result<Self> {
        self.edge_exponents = Some(self.edge_fit()?);
        Ok(self)
    }
}

/// Least-squares slope of `log value` against `log distance`.
pub fn fit_exponent(distances: &[f64], values: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = distances
        .iter()
        .zip(values)
        .filter(|(d, v)| **d > 0.0 && **v > 0.0)
        .map(|(d, v)| (d.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::WindowTooNarrow(format!("only {} usable samples", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::WindowTooNarrow("degenerate distances".into()));
    }
    Ok(sxy / sxx)
}
