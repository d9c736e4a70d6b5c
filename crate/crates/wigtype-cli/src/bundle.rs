use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::Serialize;
use serde_json::Value;

use wigtype::io::ProfileSpec;
use wigtype::spectrum::SpectrumConfig;
use wigtype::{SolverOptions, VarianceProfile};

use crate::{Common, Sized};

/// Reproducibility header written into every sidecar.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Parsed JSON inputs keyed by role, so the run can be repeated without the files.
    pub inputs: BTreeMap<String, Value>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Effective spectrum and solver settings after applying the overrides.
    pub spectrum: SpectrumConfig,
    pub version: String,
}

pub struct Context {
    pub common: Common,
    pub argv: Vec<String>,
    inputs: std::cell::RefCell<BTreeMap<String, Value>>,
}

impl Context {
    pub fn new(argv: Vec<String>, common: Common) -> anyhow::Result<Self> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Context { common, argv, inputs: Default::default() })
    }

    pub fn solver(&self) -> SolverOptions {
        let mut o = SolverOptions::default();
        if let Some(t) = self.common.tol_qve {
            o.tol = t;
        }
        if let Some(t) = self.common.tol_edge {
            o.edge_tol = t;
        }
        if let Some(e) = self.common.grid_eta_floor {
            o.eta_floor = e;
        }
        o
    }

    pub fn spectrum_config(&self) -> SpectrumConfig {
        let mut c = SpectrumConfig { solver: self.solver(), ..Default::default() };
        if let Some(k) = self.common.grid_points {
            c.grid_points = k;
        }
        c
    }

    /// Reads a JSON input and records it under `role`.
    pub fn read_input(&self, role: &str, path: &Path) -> anyhow::Result<Value> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(wigtype::Error::from).with_context(|| format!("parsing {}", path.display()))?;
        self.inputs.borrow_mut().insert(role.to_string(), value.clone());
        Ok(value)
    }

    pub fn profile(&self, args: &Sized) -> anyhow::Result<VarianceProfile> {
        let mut spec: ProfileSpec = match (&args.source.profile, &args.source.fixture) {
            (Some(path), _) => serde_json::from_value(self.read_input("profile", path)?).map_err(wigtype::Error::from)?,
            (None, Some(name)) => ProfileSpec::Fixture { name: name.clone(), n: args.n.unwrap_or(1000) },
            (None, None) => anyhow::bail!("either --profile or --fixture is required"),
        };
        if let Some(size) = args.n {
            match &mut spec {
                ProfileSpec::Constant { n, .. } | ProfileSpec::EqualBlocks { n, .. } | ProfileSpec::Fixture { n, .. } => *n = size,
                _ => return Err(wigtype::Error::InvalidArgument("--n only applies to constant, equal_blocks and fixture profiles".into()).into()),
            }
        }
        if let ProfileSpec::Fixture { .. } = spec {
            self.inputs.borrow_mut().insert("profile".into(), serde_json::to_value(&spec)?);
        }
        Ok(VarianceProfile::try_from(spec)?)
    }

    /// Energies from the grid flags, defaulting to `points` values on `[lo, hi]`.
    pub fn energies(&self, lo: f64, hi: f64, points: usize) -> anyhow::Result<Vec<f64>> {
        let a = self.common.grid_emin.unwrap_or(lo);
        let b = self.common.grid_emax.unwrap_or(hi);
        let k = self.common.grid_points.unwrap_or(points);
        if !(a < b) || k < 2 {
            return Err(wigtype::Error::InvalidArgument(format!("need grid.emin < grid.emax and at least 2 points, got [{a}, {b}] with {k}")).into());
        }
        Ok((0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect())
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            args: self.argv.clone(),
            inputs: self.inputs.borrow().clone(),
            out: self.common.out.clone(),
            seed: self.common.seed,
            workers: self.common.workers,
            spectrum: self.spectrum_config(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Writes a CSV table into the output directory.
    pub fn table<R, I>(&self, name: &str, header: &[&str], rows: I) -> anyhow::Result<String>
    where
        R: Serialize,
        I: IntoIterator<Item = R>,
    {
        let file = format!("{name}.csv");
        let path = self.common.out.join(&file);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(file)
    }

    /// Writes `{command}.json` with the manifest, the produced files and the result.
    pub fn sidecar<T: Serialize>(&self, command: &str, files: Vec<String>, result: &T) -> anyhow::Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a, T> {
            manifest: RunManifest,
            files: Vec<String>,
            result: &'a T,
        }
        let path = self.common.out.join(format!("{command}.json"));
        wigtype::io::write_json(&path, &Sidecar { manifest: self.manifest(command), files, result })?;
        Ok(())
    }
}
