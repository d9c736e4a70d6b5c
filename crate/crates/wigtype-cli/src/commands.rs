use std::path::Path;

use anyhow::Context as _;
use num_complex::Complex64 as C;
use serde::Serialize;

use wigtype::ensemble::{self, DbmMode, DbmOptions, EnsembleSpec, Manifest, Summary};
use wigtype::lss::{self, VarianceOptions};
use wigtype::{freeconv, qve, stability, SpectralData, TestFunction};

use crate::bundle::Context;
use crate::{Mode, Sized};

#[derive(Serialize)]
struct SpectrumSummary {
    n: usize,
    alpha: f64,
    beta: f64,
    mass: f64,
    grid_step: f64,
    kappa: f64,
    bulk_min: f64,
    edge_exponents: Option<(f64, f64)>,
}

impl SpectrumSummary {
    fn of(sd: &SpectralData, n: usize) -> Self {
        SpectrumSummary {
            n,
            alpha: sd.alpha,
            beta: sd.beta,
            mass: sd.mass,
            grid_step: sd.grid_step,
            kappa: sd.kappa,
            bulk_min: sd.bulk_min,
            edge_exponents: sd.edge_fit().ok(),
        }
    }
}

pub fn spectrum(ctx: &Context, args: &Sized) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let sd = SpectralData::from_profile(&p, &ctx.spectrum_config())?;
    let density = ctx.table("density", &["energy", "density"], sd.energies.iter().zip(&sd.density))?;
    let n = p.n();
    let quantiles = ctx.table(
        "quantiles",
        &["index", "quantile"],
        sd.quantiles(n).into_iter().enumerate().map(|(i, q)| (i + 1, q)),
    )?;
    ctx.sidecar("spectrum", vec![density, quantiles], &SpectrumSummary::of(&sd, n))
}

pub fn qve(ctx: &Context, args: &Sized, etas: &[f64]) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let mut schedule = etas.to_vec();
    schedule.sort_by(|a, b| b.total_cmp(a));
    schedule.dedup();
    let energies = ctx.energies(-3.0, 3.0, 201)?;
    let sol = qve::solve_grid(&p, &energies, &schedule, &ctx.solver())?;
    let mut rows = Vec::new();
    for (i, e) in sol.energies.iter().enumerate() {
        for (k, eta) in sol.etas.iter().enumerate() {
            for (a, m) in sol.m[i][k].iter().enumerate() {
                rows.push((*e, *eta, a, m.re, m.im, sol.residual[i][k]));
            }
        }
    }
    let file = ctx.table("qve", &["energy", "eta", "block", "re_m", "im_m", "residual"], rows)?;
    #[derive(Serialize)]
    struct Out {
        blocks: usize,
        sizes: Vec<usize>,
        energies: usize,
        etas: Vec<f64>,
        max_residual: f64,
    }
    let max_residual = sol.residual.iter().flatten().copied().fold(0.0, f64::max);
    ctx.sidecar("qve", vec![file], &Out { blocks: p.blocks(), sizes: p.sizes().to_vec(), energies: energies.len(), etas: sol.etas.clone(), max_residual })
}

pub fn freeconv(ctx: &Context, args: &Sized, t: f64, diagonal: bool) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let fc = freeconv::convolve(&p, t, diagonal, &ctx.spectrum_config())?;
    let file = ctx.table("density", &["energy", "density"], fc.spectral.energies.iter().zip(&fc.spectral.density))?;
    #[derive(Serialize)]
    struct Out {
        t: f64,
        diagonal: bool,
        subordination_residual: f64,
        spectrum: SpectrumSummary,
    }
    let out = Out { t, diagonal, subordination_residual: fc.subordination_residual, spectrum: SpectrumSummary::of(&fc.spectral, p.n()) };
    ctx.sidecar("freeconv", vec![file], &out)
}

pub fn stability_scan(ctx: &Context, args: &Sized, eta: f64) -> anyhow::Result<()> {
    if !(eta > 0.0) {
        return Err(wigtype::Error::InvalidArgument(format!("eta must be positive, got {eta}")).into());
    }
    let p = ctx.profile(args)?;
    let (lo, hi) = match (ctx.common.grid_emin, ctx.common.grid_emax) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let sd = SpectralData::from_profile(&p, &ctx.spectrum_config())?;
            (sd.alpha, sd.beta)
        }
    };
    let energies = ctx.energies(lo, hi, 101)?;
    let opts = ctx.solver();
    let rows = ensemble::run_indexed(energies.len(), ctx.common.workers, |i| -> wigtype::Result<_> {
        let z = C::new(energies[i], eta);
        // F depends on |m(z) m(w)| only, so w = z and w = conj(z) give the same operator.
        let op = stability::build_stability(&p, z, z.conj(), &opts)?;
        Ok((energies[i], op.lambda1, op.gap, 1.0 - op.lambda1))
    })?
    .into_iter()
    .collect::<wigtype::Result<Vec<_>>>()?;
    let file = ctx.table("stability", &["energy", "lambda1", "gap", "one_minus_lambda1"], &rows)?;
    #[derive(Serialize)]
    struct Out {
        eta: f64,
        points: usize,
        min_gap: f64,
        max_lambda1: f64,
    }
    let min_gap = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let max_lambda1 = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    ctx.sidecar("stability-scan", vec![file], &Out { eta, points: rows.len(), min_gap, max_lambda1 })
}

fn testfn(ctx: &Context, path: &Path) -> anyhow::Result<TestFunction> {
    let v = ctx.read_input("testfn", path)?;
    serde_json::from_value(v).map_err(wigtype::Error::from).with_context(|| format!("test function in {}", path.display()))
}

pub fn variance(ctx: &Context, args: &Sized, path: &Path, refine: f64, order: usize) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let f = testfn(ctx, path)?;
    let sd = SpectralData::from_profile(&p, &ctx.spectrum_config())?;
    let opts = VarianceOptions { order, refine, ..Default::default() };
    let r = lss::variance_hat(&f, &sd, &opts)?;
    let file = ctx.table(
        "variance",
        &["value", "log_part", "regular_part", "error_estimate", "nodes"],
        [(r.value, r.log_part, r.regular_part, r.error_estimate, r.nodes)],
    )?;
    ctx.sidecar("variance", vec![file], &r)
}

pub fn expectation(ctx: &Context, args: &Sized, path: &Path, refine: f64, order: usize) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let f = testfn(ctx, path)?;
    let sd = SpectralData::from_profile(&p, &ctx.spectrum_config())?;
    let r = lss::expectation_correction(&f, &sd, order, refine)?;
    let file = ctx.table(
        "expectation",
        &["trace_term", "cumulant_term", "resolvent_term", "edge_term", "total"],
        [(r.trace_term, r.cumulant_term, r.resolvent_term, r.edge_term, r.total)],
    )?;
    ctx.sidecar("expectation", vec![file], &r)
}

/// Per-statistic entry of the simulation sidecar; raw samples live in the CSV.
#[derive(Serialize)]
struct StatisticReport {
    name: String,
    n_samples: usize,
    accepted: usize,
    seed: u64,
    summary: Summary,
    ks_to_std_normal: f64,
    ks_standardized: f64,
    /// Mean and standard deviation of the normal curve to overlay on the histogram.
    normal_overlay: (f64, f64),
    failures: Vec<ensemble::SampleFailure>,
    samples_file: String,
    histogram_file: String,
}

pub fn simulate(ctx: &Context, path: &Path, bins: usize) -> anyhow::Result<()> {
    let mut manifest: Manifest = serde_json::from_value(ctx.read_input("manifest", path)?).map_err(wigtype::Error::from)?;
    if let Some(s) = ctx.common.seed {
        manifest.seed = s;
    }
    let results = ensemble::mc_harness(&manifest, ctx.common.workers)?;
    let mut files = Vec::new();
    let mut reports = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let stem = format!("{k}_{}", r.statistic_name);
        let samples_file = ctx.table(&format!("samples_{stem}"), &["sample"], r.samples.iter().map(|x| (x,)))?;
        let (edges, counts) = r.histogram(bins);
        let histogram_file = ctx.table(
            &format!("histogram_{stem}"),
            &["lower", "upper", "count"],
            counts.iter().enumerate().map(|(i, c)| (edges[i], edges[i + 1], c)),
        )?;
        files.push(samples_file.clone());
        files.push(histogram_file.clone());
        reports.push(StatisticReport {
            name: r.statistic_name.clone(),
            n_samples: r.n_samples,
            accepted: r.samples.len(),
            seed: r.seed,
            summary: r.summary,
            ks_to_std_normal: r.ks_to_std_normal,
            ks_standardized: if r.samples.len() > 1 { r.ks_standardized() } else { f64::NAN },
            normal_overlay: (r.summary.mean, r.summary.variance.sqrt()),
            failures: r.failures.clone(),
            samples_file,
            histogram_file,
        });
    }
    ctx.sidecar("simulate", files, &reports)
}

pub fn dbm(ctx: &Context, args: &Sized, t: f64, dt: f64, mode: Mode, record_every: usize) -> anyhow::Result<()> {
    let p = ctx.profile(args)?;
    let seed = ctx.common.seed.unwrap_or(0);
    let mut rng = ensemble::sample_rng(seed, 0);
    let w = ensemble::sample_matrix(&EnsembleSpec::gaussian(p), &mut rng);
    let init = ensemble::eigen_spectrum(&w)?;
    let mode = match mode {
        Mode::MatrixFlow => DbmMode::MatrixFlow,
        Mode::SdeEuler => DbmMode::SdeEuler,
    };
    let opts = DbmOptions { t_end: t, dt, mode, record_every: record_every.max(1), coupling: None };
    let traj = ensemble::dbm_run(&init, &opts, &mut rng)?;
    let rows = traj.iter().flat_map(|s| s.particles.iter().enumerate().map(move |(i, x)| (s.t, i, *x)));
    let file = ctx.table("dbm", &["t", "index", "particle"], rows)?;
    #[derive(Serialize)]
    struct Out {
        seed: u64,
        options: DbmOptions,
        snapshots: usize,
    }
    ctx.sidecar("dbm", vec![file], &Out { seed, options: opts, snapshots: traj.len() })
}
