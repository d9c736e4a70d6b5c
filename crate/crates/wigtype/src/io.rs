//! JSON input formats.
//!
//! Profiles are written as tagged objects, for example
//! `{"kind": "equal_blocks", "n": 1000, "values": [[2.0, 0.5], [0.5, 0.5]]}`.
//! All `values` arrays hold `N * S_ij`. Test functions and experiment
//! manifests deserialize directly from their own types.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{fixtures, matrix_from_rows, ProfileKind, VarianceProfile};

/// Optional third and fourth cumulant matrices `N^{3/2} E[W_ij^3]`, `N^2 kappa_4(W_ij)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CumulantSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s3: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s4: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    Constant {
        n: usize,
        /// Extra diagonal `N S_ii - 1`; `1.0` gives the GOE.
        #[serde(default)]
        delta: f64,
        #[serde(flatten)]
        cumulants: CumulantSpec,
    },
    Block {
        sizes: Vec<usize>,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<Vec<f64>>,
        #[serde(flatten)]
        cumulants: CumulantSpec,
    },
    EqualBlocks {
        n: usize,
        values: Vec<Vec<f64>>,
        #[serde(flatten)]
        cumulants: CumulantSpec,
    },
    Dense {
        values: Vec<Vec<f64>>,
        #[serde(flatten)]
        cumulants: CumulantSpec,
    },
    /// One of the named fixtures: `constant`, `goe`, `two_block`, `three_block`.
    Fixture { name: String, n: usize },
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn attach(p: VarianceProfile, c: CumulantSpec) -> Result<VarianceProfile> {
    if c.s3.is_none() && c.s4.is_none() {
        return Ok(p);
    }
    let b = p.blocks();
    let s3 = match &c.s3 {
        Some(r) => matrix_from_rows(r, b, "s3")?,
        None => DMatrix::zeros(b, b),
    };
    let s4 = match &c.s4 {
        Some(r) => matrix_from_rows(r, b, "s4")?,
        None => DMatrix::zeros(b, b),
    };
    p.with_cumulants(s3, s4)
}

impl TryFrom<ProfileSpec> for VarianceProfile {
    type Error = Error;

    fn try_from(spec: ProfileSpec) -> Result<Self> {
        match spec {
            ProfileSpec::Constant { n, delta, cumulants } => {
                attach(VarianceProfile::constant_with_diagonal(n, delta)?, cumulants)
            }
            ProfileSpec::Block { sizes, values, delta, cumulants } => {
                let p = match delta {
                    Some(d) => VarianceProfile::block_with_diagonal(sizes, values, d)?,
                    None => VarianceProfile::block(sizes, values)?,
                };
                attach(p, cumulants)
            }
            ProfileSpec::EqualBlocks { n, values, cumulants } => attach(VarianceProfile::equal_blocks(n, values)?, cumulants),
            ProfileSpec::Dense { values, cumulants } => {
                let n = values.len();
                let m = matrix_from_rows(&values, n, "values")?;
                attach(VarianceProfile::dense(m)?, cumulants)
            }
            ProfileSpec::Fixture { name, n } if n < if name == "three_block" { 4 } else { 2 } => {
                Err(Error::DegenerateInput(format!("N = {n} is too small for the {name} fixture")))
            }
            ProfileSpec::Fixture { name, n } => match name.as_str() {
                "constant" => VarianceProfile::constant(n),
                "goe" => VarianceProfile::constant_with_diagonal(n, 1.0),
                "two_block" => Ok(fixtures::two_block(n)),
                "three_block" => Ok(fixtures::three_block(n)),
                other => Err(Error::InvalidProfile(format!("unknown fixture '{other}'"))),
            },
        }
    }
}

impl From<VarianceProfile> for ProfileSpec {
    fn from(p: VarianceProfile) -> Self {
        let zero3 = p.s3().iter().all(|v| *v == 0.0);
        let zero4 = p.s4().iter().all(|v| *v == 0.0);
        let cumulants = CumulantSpec {
            s3: (!zero3).then(|| rows(p.s3())),
            s4: (!zero4).then(|| rows(p.s4())),
        };
        match p.kind() {
            ProfileKind::Constant if p.k()[(0, 0)] == 1.0 => ProfileSpec::Constant { n: p.n(), delta: p.delta()[0], cumulants },
            ProfileKind::Dense => {
                let mut m = p.k().clone();
                for i in 0..p.n() {
                    m[(i, i)] += p.delta()[i];
                }
                ProfileSpec::Dense { values: rows(&m), cumulants }
            }
            _ => {
                let delta = p.delta().to_vec();
                ProfileSpec::Block {
                    sizes: p.sizes().to_vec(),
                    values: rows(p.k()),
                    delta: delta.iter().any(|d| *d != 0.0).then_some(delta),
                    cumulants,
                }
            }
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_round_trip() {
        let p = fixtures::three_block(30).with_diagonal_shift(0.5).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let q: VarianceProfile = serde_json::from_str(&text).unwrap();
        assert_eq!(p, q);
        let g: VarianceProfile = serde_json::from_str(r#"{"kind": "fixture", "name": "goe", "n": 10}"#).unwrap();
        assert_eq!(g.delta(), &[1.0]);
    }

    #[test]
    fn rejects_unknown_kind() {
        assert!(serde_json::from_str::<VarianceProfile>(r#"{"kind": "banded", "n": 10}"#).is_err());
    }
}
