//! Sampling of Wigner-type ensembles, spectral statistics, Dyson Brownian
//! motion and the seeded Monte Carlo harness.
//!
//! Every sample `k` of a run with master seed `s` draws from its own ChaCha8
//! stream (`seed_from_u64(s)` with stream `k`), so results do not depend on
//! the number of worker threads or on scheduling.

use std::f64::consts::PI;

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::profile::VarianceProfile;
use crate::qve::{self, SolverOptions};
use crate::quad;
use crate::spectrum::{SpectralData, SpectrumConfig};
use crate::testfn::TestFunction;

type C = Complex64;

/// Smallest admissible `i0 / N` (and `1 - i0 / N`) for bulk statistics.
pub const BULK_FRACTION: f64 = 0.05;

/// Law of the standardized entries `xi` in `W_ij = sqrt(S_ij) xi_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum EntryLaw {
    Gaussian,
    /// `xi = +-1` with equal probability.
    RademacherScaled,
    /// `xi = (B - p) / sqrt(p (1 - p))` with `B ~ Bernoulli(p)`.
    BernoulliShifted { p: f64 },
    /// `W_ij = z_ij + sqrt(t0 / N) g_ij` with `z_ij` of law `base` and variance `S_ij - t0 / N`.
    GaussianDivisible { base: Box<EntryLaw>, t0: f64 },
}

impl EntryLaw {
    fn check(&self, min_ns: f64) -> Result<()> {
        match self {
            EntryLaw::Gaussian | EntryLaw::RademacherScaled => Ok(()),
            EntryLaw::BernoulliShifted { p } => {
                if *p > 0.0 && *p < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("Bernoulli parameter must lie in (0, 1), got {p}")))
                }
            }
            EntryLaw::GaussianDivisible { base, t0 } => {
                if !(*t0 > 0.0) || *t0 >= min_ns {
                    return Err(Error::InvalidArgument(format!(
                        "Gaussian component t0 = {t0} must lie in (0, min N S_ij = {min_ns})"
                    )));
                }
                base.check(min_ns - t0)
            }
        }
    }

    /// `(N^{3/2} kappa_3(W_ij), N^2 kappa_4(W_ij))` for an entry with `N S_ij = v`.
    pub fn scaled_cumulants(&self, v: f64) -> (f64, f64) {
        match self {
            EntryLaw::Gaussian => (0.0, 0.0),
            EntryLaw::RademacherScaled => (0.0, -2.0 * v * v),
            EntryLaw::BernoulliShifted { p } => {
                let q = p * (1.0 - p);
                (v.powf(1.5) * (1.0 - 2.0 * p) / q.sqrt(), v * v * (1.0 - 6.0 * q) / q)
            }
            EntryLaw::GaussianDivisible { base, t0 } => base.scaled_cumulants(v - t0),
        }
    }

    /// One entry with variance `var`, in a matrix of dimension `n`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, var: f64, n: usize) -> f64 {
        match self {
            EntryLaw::Gaussian => {
                let g: f64 = rng.sample(StandardNormal);
                var.sqrt() * g
            }
            EntryLaw::RademacherScaled => {
                if rng.random::<bool>() {
                    var.sqrt()
                } else {
                    -var.sqrt()
                }
            }
            EntryLaw::BernoulliShifted { p } => {
                let b = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                var.sqrt() * (b - p) / (p * (1.0 - p)).sqrt()
            }
            EntryLaw::GaussianDivisible { base, t0 } => {
                let inc = t0 / n as f64;
                let z = base.sample(rng, var - inc, n);
                let g: f64 = rng.sample(StandardNormal);
                z + inc.sqrt() * g
            }
        }
    }
}

/// A Wigner-type ensemble: variance profile plus entry law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub profile: VarianceProfile,
    pub entry_law: EntryLaw,
    #[serde(default)]
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(profile: VarianceProfile, entry_law: EntryLaw) -> Result<Self> {
        let s = EnsembleSpec { profile, entry_law, seed: 0 };
        s.validate()?;
        Ok(s)
    }

    pub fn gaussian(profile: VarianceProfile) -> Self {
        EnsembleSpec { profile, entry_law: EntryLaw::Gaussian, seed: 0 }
    }

    /// GOE normalization: off-diagonal variance `1/N`, diagonal `2/N`.
    pub fn goe(n: usize) -> Result<Self> {
        Ok(Self::gaussian(VarianceProfile::constant_with_diagonal(n, 1.0)?))
    }

    pub fn n(&self) -> usize {
        self.profile.n()
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let (lo, _) = self.profile.primitivity_bounds();
        let diag_min = (0..self.profile.blocks())
            .map(|a| self.profile.k()[(a, a)] + self.profile.delta()[a])
            .fold(f64::INFINITY, f64::min);
        self.entry_law.check(lo.min(diag_min))
    }

    /// Block matrices `s3_ab`, `s4_ab` of the law's scaled cumulants (off-diagonal entries).
    pub fn declared_cumulants(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.profile.k();
        let b = k.nrows();
        let mut s3 = DMatrix::zeros(b, b);
        let mut s4 = DMatrix::zeros(b, b);
        for a in 0..b {
            for c in 0..b {
                let (k3, k4) = self.entry_law.scaled_cumulants(k[(a, c)]);
                s3[(a, c)] = k3;
                s4[(a, c)] = k4;
            }
        }
        (s3, s4)
    }

    /// The profile carrying the law's cumulants, as used by the expectation and variance functionals.
    pub fn profile_with_cumulants(&self) -> Result<VarianceProfile> {
        let (s3, s4) = self.declared_cumulants();
        self.profile.clone().with_cumulants(s3, s4)
    }
}

/// The RNG of sample `index` under master seed `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one symmetric matrix. Entries are generated column by column over the upper triangle.
pub fn sample_matrix<R: Rng + ?Sized>(spec: &EnsembleSpec, rng: &mut R) -> DMatrix<f64> {
    let p = &spec.profile;
    let n = p.n();
    let idx = p.block_index();
    let inv = 1.0 / n as f64;
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let mut v = p.k()[(idx[i], idx[j])];
            if i == j {
                v += p.delta()[idx[i]];
            }
            let x = spec.entry_law.sample(rng, v * inv, n);
            w[(i, j)] = x;
            w[(j, i)] = x;
        }
    }
    w
}

/// Sample `index` of the stream family with master seed `seed`.
pub fn sample_matrix_seeded(spec: &EnsembleSpec, seed: u64, index: u64) -> DMatrix<f64> {
    sample_matrix(spec, &mut sample_rng(seed, index))
}

/// GOE matrix scaled by `sqrt(t)`: off-diagonal variance `t/N`, diagonal `2t/N`.
pub fn goe_increment<R: Rng + ?Sized>(n: usize, t: f64, rng: &mut R) -> DMatrix<f64> {
    let s = (t / n as f64).sqrt();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let x: f64 = rng.sample(StandardNormal);
            let v = if i == j { s * std::f64::consts::SQRT_2 * x } else { s * x };
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

fn to_faer(w: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)])
}

fn check_square(w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != w.ncols() {
        return Err(Error::InvalidArgument(format!("matrix is {} x {}", w.nrows(), w.ncols())));
    }
    Ok(())
}

/// Ascending eigenvalues of a symmetric matrix (lower triangle is read).
pub fn eigen_spectrum(w: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_square(w)?;
    let mut ev = to_faer(w).selfadjoint_eigenvalues(Side::Lower);
    if ev.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalue".into()));
    }
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Ascending eigenvalues and the matching orthonormal eigenvectors (as columns).
pub fn eigen_decomposition(w: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_square(w)?;
    let n = w.nrows();
    let dec = to_faer(w).selfadjoint_eigendecomposition(Side::Lower);
    let s = dec.s().column_vector();
    let u = dec.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.read(a).total_cmp(&s.read(b)));
    let vals: Vec<f64> = order.iter().map(|&k| s.read(k)).collect();
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalue".into()));
    }
    let vecs = DMatrix::from_fn(n, n, |i, k| u.read(i, order[k]));
    Ok((vals, vecs))
}

fn check_bulk_index(i0: usize, n: usize) -> Result<()> {
    let lo = (BULK_FRACTION * n as f64).ceil() as usize;
    if i0 < lo.max(1) || i0 > n - lo {
        return Err(Error::InvalidArgument(format!(
            "index {i0} outside the bulk range [{lo}, {}] for N = {n}",
            n - lo
        )));
    }
    Ok(())
}

/// Classical location and density at a bulk index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BulkPoint {
    pub i0: usize,
    pub gamma: f64,
    pub rho: f64,
}

impl BulkPoint {
    pub fn new(spectral: &SpectralData, n: usize, i0: usize) -> Result<Self> {
        check_bulk_index(i0, n)?;
        let gamma = spectral.quantile(i0 as f64 / n as f64);
        let rho = spectral.density_at(gamma)? / spectral.mass;
        Ok(BulkPoint { i0, gamma, rho })
    }

    /// `N rho(gamma) (lambda_{i0} - gamma) / sqrt(log N)`, with 1-based `i0`.
    pub fn statistic(&self, eigs: &[f64]) -> f64 {
        let n = eigs.len() as f64;
        n * self.rho * (eigs[self.i0 - 1] - self.gamma) / n.ln().sqrt()
    }
}

/// `N rho(gamma_{i0}) (lambda_{i0} - gamma_{i0}) / sqrt(log N)`; `i0` is 1-based.
pub fn sev_statistic(eigs: &[f64], spectral: &SpectralData, i0: usize) -> Result<f64> {
    Ok(BulkPoint::new(spectral, eigs.len(), i0)?.statistic(eigs))
}

fn check_counting_energy(spectral: &SpectralData, e: f64) -> Result<()> {
    if e <= spectral.alpha + spectral.kappa || e >= spectral.beta - spectral.kappa {
        return Err(Error::InvalidArgument(format!(
            "energy {e} outside the bulk ({}, {})",
            spectral.alpha + spectral.kappa,
            spectral.beta - spectral.kappa
        )));
    }
    Ok(())
}

fn counting_from_cdf(eigs: &[f64], e: f64, cdf: f64) -> f64 {
    let n = eigs.len() as f64;
    let count = eigs.partition_point(|&x| x <= e) as f64;
    PI * (count - n * cdf) / n.ln().sqrt()
}

/// `(#{lambda_i <= E} - N int_{-inf}^E rho) / (sqrt(log N) / pi)`.
pub fn counting_statistic(eigs: &[f64], spectral: &SpectralData, e: f64) -> Result<f64> {
    check_counting_energy(spectral, e)?;
    Ok(counting_from_cdf(eigs, e, spectral.cdf(e)))
}

/// `int f rho` with quadrature panels following the features of `f`.
pub fn mean_against_density(f: &TestFunction, spectral: &SpectralData) -> f64 {
    let breaks = quad::merge_breaks(&f.breakpoints(4.0));
    spectral.integrate(|x| f.eval(x), &breaks)
}

fn lss_from_mean(eigs: &[f64], f: &TestFunction, mean: f64) -> f64 {
    let s = quad::ksum(eigs.iter().map(|&x| f.eval(x)));
    s - eigs.len() as f64 * mean
}

/// `tr f(W) - N int f rho`.
pub fn lss_statistic(eigs: &[f64], f: &TestFunction, spectral: &SpectralData) -> f64 {
    lss_from_mean(eigs, f, mean_against_density(f, spectral))
}

/// Mean, variance (unbiased) and skewness of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
}

impl Summary {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Summary { count: 0, mean: f64::NAN, variance: f64::NAN, skewness: f64::NAN };
        }
        let mean = quad::ksum(x.iter().copied()) / n as f64;
        let m2 = quad::ksum(x.iter().map(|v| (v - mean).powi(2))) / n as f64;
        let m3 = quad::ksum(x.iter().map(|v| (v - mean).powi(3))) / n as f64;
        let variance = if n > 1 { m2 * n as f64 / (n - 1) as f64 } else { f64::NAN };
        let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { f64::NAN };
        Summary { count: n, mean, variance, skewness }
    }
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Kolmogorov-Smirnov distance between the empirical law of `x` and a continuous CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(x: &[f64], cdf: F) -> f64 {
    let v = sorted(x);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &s)| {
            let c = cdf(s);
            (c - i as f64 / n).max((i + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max)
}

pub fn ks_to_std_normal(x: &[f64]) -> f64 {
    let g = Normal::standard();
    ks_distance(x, |s| g.cdf(s))
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub error: String,
}

/// A batch of one statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub statistic_name: String,
    pub samples: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub summary: Summary,
    pub ks_to_std_normal: f64,
    /// Filled in by [`McResult::compare`].
    pub ks_two_sample: Option<f64>,
    pub failures: Vec<SampleFailure>,
}

impl McResult {
    pub fn new(name: impl Into<String>, samples: Vec<f64>, n_samples: usize, seed: u64, failures: Vec<SampleFailure>) -> Self {
        McResult {
            statistic_name: name.into(),
            summary: Summary::of(&samples),
            ks_to_std_normal: if samples.is_empty() { f64::NAN } else { ks_to_std_normal(&samples) },
            samples,
            n_samples,
            seed,
            ks_two_sample: None,
            failures,
        }
    }

    /// Records and returns the two-sample KS distance against a reference batch.
    pub fn compare(&mut self, reference: &McResult) -> f64 {
        let d = ks_two_sample(&self.samples, &reference.samples);
        self.ks_two_sample = Some(d);
        d
    }

    /// KS distance of the z-scored batch to the standard normal.
    pub fn ks_standardized(&self) -> f64 {
        let s = self.summary;
        let sd = s.variance.sqrt();
        let z: Vec<f64> = self.samples.iter().map(|x| (x - s.mean) / sd).collect();
        ks_to_std_normal(&z)
    }

    /// Histogram over `bins` equal bins spanning the sample range: `(edges, counts)`.
    pub fn histogram(&self, bins: usize) -> (Vec<f64>, Vec<usize>) {
        if self.samples.is_empty() || bins == 0 {
            return (Vec::new(), Vec::new());
        }
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &x in &self.samples {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        (edges, counts)
    }
}

/// A function given by samples on an increasing grid, linearly interpolated and zero
/// outside the grid. Used for propagated test functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
}

impl Tabulated {
    pub fn new(energies: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if energies.len() != values.len() || energies.len() < 2 || energies.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument("tabulated function needs an increasing grid of matching length".into()));
        }
        Ok(Tabulated { energies, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let e = &self.energies;
        if x < e[0] || x > e[e.len() - 1] {
            return 0.0;
        }
        let k = e.partition_point(|&v| v <= x).clamp(1, e.len() - 1);
        let u = (x - e[k - 1]) / (e[k] - e[k - 1]);
        self.values[k - 1] * (1.0 - u) + self.values[k] * u
    }

    /// `int f rho` over the grid panels.
    pub fn mean_against_density(&self, spectral: &SpectralData) -> f64 {
        spectral.integrate(|x| self.eval(x), &self.energies)
    }
}

/// Statistics the harness can evaluate on each sampled spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum StatisticSpec {
    /// Normalized single eigenvalue deviation; `i0` defaults to `N/2`.
    Sev {
        #[serde(default)]
        i0: Option<usize>,
    },
    Counting { energy: f64 },
    Lss { testfn: TestFunction },
    /// Linear statistic of a tabulated function.
    LssTable { table: Tabulated },
    /// `lambda_{i+1} - lambda_i`; `index` defaults to `N/2`.
    Gap {
        #[serde(default)]
        index: Option<usize>,
    },
}

impl StatisticSpec {
    pub fn name(&self) -> String {
        match self {
            StatisticSpec::Sev { .. } => "sev".into(),
            StatisticSpec::Counting { .. } => "counting".into(),
            StatisticSpec::Lss { testfn } => format!("lss_{}", serde_json::to_value(testfn.kind()).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
            StatisticSpec::LssTable { .. } => "lss_table".into(),
            StatisticSpec::Gap { .. } => "gap".into(),
        }
    }
}

/// Statistic with its deterministic ingredients evaluated once.
#[derive(Debug, Clone)]
enum Prepared {
    Sev(BulkPoint),
    Counting { energy: f64, cdf: f64 },
    Lss { f: TestFunction, mean: f64 },
    Table { f: Tabulated, mean: f64 },
    Gap(usize),
}

impl Prepared {
    fn new(s: &StatisticSpec, spectral: &SpectralData, n: usize) -> Result<Self> {
        Ok(match s {
            StatisticSpec::Sev { i0 } => Prepared::Sev(BulkPoint::new(spectral, n, i0.unwrap_or(n / 2))?),
            StatisticSpec::Counting { energy } => {
                check_counting_energy(spectral, *energy)?;
                Prepared::Counting { energy: *energy, cdf: spectral.cdf(*energy) }
            }
            StatisticSpec::Lss { testfn } => Prepared::Lss { f: testfn.clone(), mean: mean_against_density(testfn, spectral) },
            StatisticSpec::LssTable { table } => Prepared::Table { f: table.clone(), mean: table.mean_against_density(spectral) },
            StatisticSpec::Gap { index } => {
                let i = index.unwrap_or(n / 2);
                if i == 0 || i >= n {
                    return Err(Error::InvalidArgument(format!("gap index {i} out of range for N = {n}")));
                }
                Prepared::Gap(i)
            }
        })
    }

    fn eval(&self, eigs: &[f64]) -> f64 {
        match self {
            Prepared::Sev(b) => b.statistic(eigs),
            Prepared::Counting { energy, cdf } => counting_from_cdf(eigs, *energy, *cdf),
            Prepared::Lss { f, mean } => lss_from_mean(eigs, f, *mean),
            Prepared::Table { f, mean } => quad::ksum(eigs.iter().map(|&x| f.eval(x))) - eigs.len() as f64 * mean,
            Prepared::Gap(i) => eigs[*i] - eigs[*i - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DbmMode {
    /// Add independent GOE increments and re-diagonalize.
    MatrixFlow,
    /// Euler-Maruyama on the particle SDE.
    SdeEuler,
}

/// Optional Dyson Brownian motion applied to every sample before the statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub t: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_mode")]
    pub mode: DbmMode,
}

fn default_steps() -> usize {
    1
}

fn default_mode() -> DbmMode {
    DbmMode::MatrixFlow
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct McParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowParams>,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<StatisticSpec>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Many {
        One(StatisticSpec),
        Many(Vec<StatisticSpec>),
    }
    Ok(match Many::deserialize(d)? {
        Many::One(s) => vec![s],
        Many::Many(v) => v,
    })
}

/// A Monte Carlo experiment. Several statistics may share one batch of spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(deserialize_with = "one_or_many")]
    pub statistic: Vec<StatisticSpec>,
    pub ensemble: EnsembleSpec,
    /// Must agree with the profile dimension when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: McParams,
}

impl Manifest {
    pub fn new(ensemble: EnsembleSpec, statistic: Vec<StatisticSpec>, samples: usize, seed: u64) -> Self {
        Manifest { statistic, n: Some(ensemble.n()), ensemble, samples, seed, params: McParams::default() }
    }

    pub fn with_flow(mut self, flow: FlowParams) -> Self {
        self.params.flow = Some(flow);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        if let Some(n) = self.n {
            if n != self.ensemble.n() {
                return Err(Error::InvalidArgument(format!("manifest n = {n} but the profile has N = {}", self.ensemble.n())));
            }
        }
        if self.statistic.is_empty() {
            return Err(Error::InvalidArgument("manifest names no statistic".into()));
        }
        if let Some(f) = &self.params.flow {
            if !(f.t >= 0.0) || f.steps == 0 {
                return Err(Error::InvalidArgument("flow needs t >= 0 and at least one step".into()));
            }
        }
        Ok(())
    }

    /// Profile whose density of states describes the sampled spectra.
    pub fn effective_profile(&self) -> Result<VarianceProfile> {
        match &self.params.flow {
            Some(f) if f.t > 0.0 => self.ensemble.profile.augmented(f.t, true),
            _ => Ok(self.ensemble.profile.clone()),
        }
    }
}

/// Runs `job(k)` for `k < count` on a pool of `workers` threads (all cores when `None`),
/// returning results in index order.
pub fn run_indexed<T, F>(count: usize, workers: Option<usize>, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    let pool = b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(&job).collect()))
}

/// Spectrum of sample `k`: draw `W`, apply the optional flow, diagonalize.
pub fn sample_spectrum(manifest: &Manifest, k: usize) -> Result<Vec<f64>> {
    let mut rng = sample_rng(manifest.seed, k as u64);
    let w = sample_matrix(&manifest.ensemble, &mut rng);
    match &manifest.params.flow {
        Some(f) if f.t > 0.0 => {
            let opts = DbmOptions { t_end: f.t, dt: f.t / f.steps as f64, mode: f.mode, record_every: usize::MAX, coupling: None };
            let traj = match f.mode {
                DbmMode::MatrixFlow => matrix_flow(w, &opts, &mut rng)?,
                DbmMode::SdeEuler => dbm_run(&eigen_spectrum(&w)?, &opts, &mut rng)?,
            };
            Ok(traj.into_iter().last().map(|s| s.particles).unwrap_or_default())
        }
        _ => eigen_spectrum(&w),
    }
}

/// Evaluates every statistic of the manifest on `samples` seeded spectra.
///
/// Setup errors (invalid manifest, spectral data) abort; failures of single
/// samples are collected per statistic and the batch continues.
pub fn mc_harness(manifest: &Manifest, workers: Option<usize>) -> Result<Vec<McResult>> {
    manifest.validate()?;
    let n = manifest.ensemble.n();
    let names: Vec<String> = manifest.statistic.iter().map(|s| s.name()).collect();
    if manifest.samples == 0 {
        return Ok(names.into_iter().map(|nm| McResult::new(nm, Vec::new(), 0, manifest.seed, Vec::new())).collect());
    }
    let spectral = SpectralData::from_profile(&manifest.effective_profile()?, &SpectrumConfig::default())?;
    let prepared = manifest
        .statistic
        .iter()
        .map(|s| Prepared::new(s, &spectral, n))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_indexed(manifest.samples, workers, |k| -> std::result::Result<Vec<f64>, String> {
        let eigs = sample_spectrum(manifest, k).map_err(|e| e.to_string())?;
        Ok(prepared.iter().map(|p| p.eval(&eigs)).collect())
    })?;
    let mut values = vec![Vec::with_capacity(manifest.samples); prepared.len()];
    let mut failures = Vec::new();
    for (k, row) in rows.into_iter().enumerate() {
        match row {
            Ok(v) => {
                for (j, x) in v.into_iter().enumerate() {
                    if x.is_finite() {
                        values[j].push(x);
                    }
                }
            }
            Err(e) => failures.push(SampleFailure { index: k, error: e }),
        }
    }
    Ok(names
        .into_iter()
        .zip(values)
        .map(|(nm, v)| McResult::new(nm, v, manifest.samples, manifest.seed, failures.clone()))
        .collect())
}

/// Particle configuration at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbmState {
    pub t: f64,
    pub particles: Vec<f64>,
    /// The coupled GOE-initialized process, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companion: Option<Vec<f64>>,
}

/// Shared-noise link `B_i <-> B'_{i - (i0 - N/2)}` to a GOE-initialized companion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i0: usize,
    /// Initial companion particles; a fresh GOE spectrum is drawn when absent.
    #[serde(default)]
    pub companion: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbmOptions {
    pub t_end: f64,
    pub dt: f64,
    pub mode: DbmMode,
    /// Record every this many steps (the final state is always recorded).
    #[serde(default = "default_steps")]
    pub record_every: usize,
    #[serde(default)]
    pub coupling: Option<Coupling>,
}

fn step_count(opts: &DbmOptions) -> Result<usize> {
    if !(opts.t_end >= 0.0) || !(opts.dt > 0.0) {
        return Err(Error::InvalidArgument(format!("need t_end >= 0 and dt > 0, got {} and {}", opts.t_end, opts.dt)));
    }
    Ok((opts.t_end / opts.dt - 1e-9).ceil().max(0.0) as usize)
}

fn record(traj: &mut Vec<DbmState>, step: usize, steps: usize, every: usize, state: impl FnOnce() -> DbmState) {
    if step == steps || (every > 0 && every != usize::MAX && step.is_multiple_of(every)) {
        traj.push(state());
    }
}

/// Matrix-flow DBM started from a full matrix.
fn matrix_flow<R: Rng + ?Sized>(mut w: DMatrix<f64>, opts: &DbmOptions, rng: &mut R) -> Result<Vec<DbmState>> {
    let steps = step_count(opts)?;
    let n = w.nrows();
    let mut traj = Vec::new();
    if steps == 0 {
        traj.push(DbmState { t: 0.0, particles: eigen_spectrum(&w)?, companion: None });
        return Ok(traj);
    }
    let mut t = 0.0;
    for step in 1..=steps {
        let h = (opts.t_end - t).min(opts.dt);
        w += goe_increment(n, h, rng);
        t += h;
        if step == steps || (opts.record_every != usize::MAX && step % opts.record_every.max(1) == 0) {
            traj.push(DbmState { t, particles: eigen_spectrum(&w)?, companion: None });
        }
    }
    Ok(traj)
}

/// Dyson Brownian motion `d lambda_i = sqrt(2/N) dB_i + (1/N) sum_{j != i} dt / (lambda_i - lambda_j)`.
///
/// `initial` must be sorted. In matrix-flow mode the flow starts from `diag(initial)`,
/// which has the same eigenvalue law as any matrix with that spectrum since the GOE
/// increments are orthogonally invariant. Coupling is supported in sde-euler mode only.
pub fn dbm_run<R: Rng + ?Sized>(initial: &[f64], opts: &DbmOptions, rng: &mut R) -> Result<Vec<DbmState>> {
    if initial.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidArgument("initial particles must be sorted".into()));
    }
    let steps = step_count(opts)?;
    let n = initial.len();
    if opts.mode == DbmMode::MatrixFlow {
        if opts.coupling.is_some() {
            return Err(Error::InvalidArgument("coupled runs need the sde-euler mode".into()));
        }
        if steps == 0 {
            return Ok(vec![DbmState { t: 0.0, particles: initial.to_vec(), companion: None }]);
        }
        return matrix_flow(DMatrix::from_diagonal(&DVector::from_column_slice(initial)), opts, rng);
    }
    let mut x = initial.to_vec();
    let mut y = match &opts.coupling {
        Some(c) => Some(match &c.companion {
            Some(v) if v.len() == n => v.clone(),
            Some(_) => return Err(Error::InvalidArgument("companion must have N particles".into())),
            None => eigen_spectrum(&sample_matrix(&EnsembleSpec::goe(n)?, rng))?,
        }),
        None => None,
    };
    // Indices into one common Brownian vector: particle i of the main process uses
    // entry i; companion particle j shares entry j + offset when that is a valid
    // index and otherwise owns a private entry past N.
    let mut maps = vec![(0..n).collect::<Vec<_>>()];
    let mut width = n;
    if let Some(c) = &opts.coupling {
        let offset = c.i0 as i64 - (n / 2) as i64;
        let map = (0..n)
            .map(|j| {
                let i = j as i64 + offset;
                if i >= 0 && (i as usize) < n {
                    i as usize
                } else {
                    width += 1;
                    width - 1
                }
            })
            .collect();
        maps.push(map);
    }
    let mut traj = vec![DbmState { t: 0.0, particles: x.clone(), companion: y.clone() }];
    let mut t = 0.0;
    for step in 1..=steps {
        let h = (opts.t_end - t).min(opts.dt);
        let db: Vec<f64> = (0..width).map(|_| h.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut states: Vec<&mut Vec<f64>> = vec![&mut x];
        if let Some(y) = y.as_mut() {
            states.push(y);
        }
        if !advance(&mut states, &maps, &db, h, MAX_BISECTIONS, rng) {
            return Err(Error::ParticleCollision(t + h));
        }
        t += h;
        record(&mut traj, step, steps, opts.record_every, || DbmState { t, particles: x.clone(), companion: y.clone() });
    }
    Ok(traj)
}

/// Depth of the Brownian-bridge refinement tried before a step is declared a collision.
const MAX_BISECTIONS: usize = 30;

/// One Euler step of length `h` driven by the Brownian increments `db`. When a step
/// would reorder particles it is split in two halves whose increments are drawn
/// from the Brownian bridge, so the path law is unchanged.
fn advance<R: Rng + ?Sized>(states: &mut [&mut Vec<f64>], maps: &[Vec<usize>], db: &[f64], h: f64, depth: usize, rng: &mut R) -> bool {
    let trials: Vec<Vec<f64>> = states.iter().zip(maps).map(|(x, map)| euler_trial(x, map, db, h)).collect();
    if trials.iter().all(|v| v.windows(2).all(|p| p[0] < p[1])) {
        for (x, v) in states.iter_mut().zip(trials) {
            **x = v;
        }
        return true;
    }
    if depth == 0 {
        return false;
    }
    let half: Vec<f64> = db.iter().map(|d| 0.5 * d + 0.5 * h.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let rest: Vec<f64> = db.iter().zip(&half).map(|(d, a)| d - a).collect();
    advance(states, maps, &half, 0.5 * h, depth - 1, rng) && advance(states, maps, &rest, 0.5 * h, depth - 1, rng)
}

fn euler_trial(x: &[f64], map: &[usize], db: &[f64], h: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let amp = (2.0 / n).sqrt();
    (0..x.len())
        .map(|i| {
            let s: f64 = (0..x.len()).filter(|&j| j != i).map(|j| 1.0 / (x[i] - x[j])).sum();
            x[i] + amp * db[map[i]] + h * s / n
        })
        .collect()
}

/// Empirical block averages of `T_xy(z, w) = sum_i S_xi G_iy(z) G_yi(w)` against the
/// deterministic term `[(1 - S m(z) m(w))^{-1} S m(z) m(w)]_xy`.
///
/// Entries are averaged over `x` in block `a` and `y` in block `b`; within a block
/// the pairs are exchangeable, so the averages estimate the same mean with far
/// less noise than a single pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxyReport {
    pub n: usize,
    pub z: C,
    pub w: C,
    pub samples: usize,
    /// `B x B` block averages, row-major.
    pub empirical: Vec<C>,
    pub leading: Vec<C>,
    /// `max_ab |empirical - leading|`.
    pub gap: f64,
    /// `gap / max_ab |leading|`.
    pub relative_gap: f64,
    /// `5 / (N^{3/2} eta^{5/2})` with `eta = min(|Im z|, |Im w|)`.
    pub bound: f64,
}

/// `m(z)` in either half-plane.
pub fn m_off_axis(p: &VarianceProfile, z: C, opts: &SolverOptions) -> Result<Vec<C>> {
    if z.im < 0.0 {
        Ok(qve::m_at(p, z.conj(), opts)?.into_iter().map(|v| v.conj()).collect())
    } else {
        qve::m_at(p, z, opts)
    }
}

/// Block averages of the deterministic term: `((1 - R)^{-1} R)_ab / n_b` with
/// `R_ac = (K_ac phi_c + delta_a / N [a = c]) m_c(z) m_c(w)`.
pub fn txy_leading(p: &VarianceProfile, mz: &[C], mw: &[C]) -> Result<DMatrix<C>> {
    let b = p.blocks();
    let n = p.n() as f64;
    let phi = p.weights();
    let r = DMatrix::from_fn(b, b, |a, c| {
        let mut v = p.k()[(a, c)] * phi[c];
        if a == c {
            v += p.delta()[a] / n;
        }
        mz[c] * mw[c] * v
    });
    let lu = (DMatrix::<C>::identity(b, b) - &r).lu();
    let mut out = lu
        .solve(&r)
        .ok_or(Error::NearSingular(0.0))?;
    for c in 0..b {
        let nb = p.sizes()[c] as f64;
        for a in 0..b {
            out[(a, c)] /= nb;
        }
    }
    Ok(out)
}

fn resolvent_parts(vals: &[f64], u: &Mat<f64>, z: C) -> (Mat<f64>, Mat<f64>) {
    let n = vals.len();
    let d: Vec<C> = vals.iter().map(|&l| (C::new(l, 0.0) - z).inv()).collect();
    let ur = Mat::from_fn(n, n, |i, k| u.read(i, k) * d[k].re);
    let ui = Mat::from_fn(n, n, |i, k| u.read(i, k) * d[k].im);
    let ut = u.transpose();
    (&ur * ut, &ui * ut)
}

/// Block sums `C_cb = sum_{i in c, y in b} G_iy(z) G_iy(w)` for one matrix.
fn txy_block_sums(w: &DMatrix<f64>, p: &VarianceProfile, z: C, wz: C) -> Result<DMatrix<C>> {
    let (vals, vecs) = eigen_decomposition(w)?;
    let n = vals.len();
    let u = Mat::from_fn(n, n, |i, k| vecs[(i, k)]);
    let (gzr, gzi) = resolvent_parts(&vals, &u, z);
    let (gwr, gwi) = resolvent_parts(&vals, &u, wz);
    let idx = p.block_index();
    let b = p.blocks();
    let mut sums = DMatrix::from_element(b, b, C::new(0.0, 0.0));
    for y in 0..n {
        for i in 0..n {
            let gz = C::new(gzr.read(i, y), gzi.read(i, y));
            let gw = C::new(gwr.read(i, y), gwi.read(i, y));
            sums[(idx[i], idx[y])] += gz * gw;
        }
    }
    Ok(sums)
}

pub fn txy_diagnostic(spec: &EnsembleSpec, z: C, w: C, n_samples: usize, seed: u64, workers: Option<usize>) -> Result<TxyReport> {
    spec.validate()?;
    let p = &spec.profile;
    let n = p.n();
    let eta = z.im.abs().min(w.im.abs());
    if eta < (n as f64).powf(-0.99) {
        return Err(Error::InvalidArgument(format!("spectral parameters too close to the real axis: eta = {eta}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let opts = SolverOptions::default();
    let mz = m_off_axis(p, z, &opts)?;
    let mw = m_off_axis(p, w, &opts)?;
    let lead = txy_leading(p, &mz, &mw)?;
    let rows = run_indexed(n_samples, workers, |k| {
        let m = sample_matrix_seeded(spec, seed, k as u64);
        txy_block_sums(&m, p, z, w)
    })?;
    let b = p.blocks();
    let mut acc = vec![Vec::with_capacity(n_samples); b * b];
    for r in rows {
        let r = r?;
        for c in 0..b {
            for bb in 0..b {
                acc[c * b + bb].push(r[(c, bb)]);
            }
        }
    }
    // Mean of the block sums, then contract with S: sum_x in a, y in b of T_xy.
    let mean = |v: &Vec<C>| {
        let re = quad::ksum(v.iter().map(|c| c.re));
        let im = quad::ksum(v.iter().map(|c| c.im));
        C::new(re, im) / v.len() as f64
    };
    let csum = DMatrix::from_fn(b, b, |c, bb| mean(&acc[c * b + bb]));
    let nf = n as f64;
    let sizes = p.sizes();
    let emp = DMatrix::from_fn(b, b, |a, bb| {
        let na = sizes[a] as f64;
        let mut s = C::new(0.0, 0.0);
        for c in 0..b {
            s += csum[(c, bb)] * (na * p.k()[(a, c)] / nf);
        }
        s += csum[(a, bb)] * (p.delta()[a] / nf);
        s / (na * sizes[bb] as f64)
    });
    let mut gap: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut empirical = Vec::with_capacity(b * b);
    let mut leading = Vec::with_capacity(b * b);
    for a in 0..b {
        for bb in 0..b {
            gap = gap.max((emp[(a, bb)] - lead[(a, bb)]).norm());
            scale = scale.max(lead[(a, bb)].norm());
            empirical.push(emp[(a, bb)]);
            leading.push(lead[(a, bb)]);
        }
    }
    Ok(TxyReport {
        n,
        z,
        w,
        samples: n_samples,
        empirical,
        leading,
        gap,
        relative_gap: gap / scale,
        bound: 5.0 / (nf.powf(1.5) * eta.powf(2.5)),
    })
}

/// `max_i |lambda_i - gamma_i| N^{2/3} min(i, N + 1 - i)^{1/3}`.
pub fn rigidity_ratio(eigs: &[f64], quantiles: &[f64]) -> f64 {
    let n = eigs.len();
    let nf = n as f64;
    eigs.iter()
        .zip(quantiles)
        .enumerate()
        .map(|(k, (l, g))| {
            let i = (k + 1).min(n - k) as f64;
            (l - g).abs() * nf.powf(2.0 / 3.0) * i.powf(1.0 / 3.0)
        })
        .fold(0.0, f64::max)
}

/// `max_z |m_N(z) - mbar(z)| N Im z` with `m_N(z) = (1/N) sum_i 1/(lambda_i - z)`.
pub fn local_law_error(eigs: &[f64], p: &VarianceProfile, zs: &[C], opts: &SolverOptions) -> Result<f64> {
    let n = eigs.len() as f64;
    let mut worst: f64 = 0.0;
    for &z in zs {
        let mn: C = eigs.iter().map(|&l| (C::new(l, 0.0) - z).inv()).sum::<C>() / n;
        let m = p.mean(&qve::m_at(p, z, opts)?);
        worst = worst.max((mn - m).norm() * n * z.im);
    }
    Ok(worst)
}

/// KS distance between the empirical spectral CDF and `int rho`.
pub fn esd_ks(eigs: &[f64], spectral: &SpectralData) -> f64 {
    ks_distance(eigs, |x| spectral.cdf(x))
}
