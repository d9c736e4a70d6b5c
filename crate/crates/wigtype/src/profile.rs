//! Variance profiles in reduced block form.
//!
//! A profile is stored as `B` index blocks of sizes `n_a`, a symmetric
//! `B x B` matrix `K` holding `N * S_ij` for `i` in block `a`, `j` in block `b`,
//! and a per-block extra diagonal `delta_a` so that `N * S_ii = K_aa + delta_a`.
//! A dense profile is the special case of `N` blocks of size one.
//!
//! On block-constant vectors `S` acts as the `B x B` matrix
//! `M_ab = K_ab * phi_b + delta_a / N * [a == b]` with `phi_b = n_b / N`; on the
//! mean-zero vectors inside block `a` it acts as the scalar `delta_a / N`.
//! Every trace the library needs splits along these two invariant subspaces.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Dense,
    Block,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "crate::io::ProfileSpec", into = "crate::io::ProfileSpec")]
pub struct VarianceProfile {
    kind: ProfileKind,
    n: usize,
    sizes: Vec<usize>,
    k: DMatrix<f64>,
    delta: Vec<f64>,
    s3: DMatrix<f64>,
    s4: DMatrix<f64>,
}

impl VarianceProfile {
    /// `S = J / N`.
    pub fn constant(n: usize) -> Result<Self> {
        Self::build(ProfileKind::Constant, n, vec![n], DMatrix::from_element(1, 1, 1.0), vec![0.0])
    }

    /// Constant off-diagonal variance `1/N` with diagonal variance `(1 + delta)/N`.
    /// `delta = 1` is the GOE normalization.
    pub fn constant_with_diagonal(n: usize, delta: f64) -> Result<Self> {
        Self::build(ProfileKind::Constant, n, vec![n], DMatrix::from_element(1, 1, 1.0), vec![delta])
    }

    /// Block-constant profile; `values[a][b]` is `N * S_ij` between blocks `a` and `b`.
    pub fn block(sizes: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        let b = sizes.len();
        let k = matrix_from_rows(&values, b, "values")?;
        let n = sizes.iter().sum();
        Self::build(ProfileKind::Block, n, sizes, k, vec![0.0; b])
    }

    /// Block profile with per-block extra diagonal `delta_a`, so that `N S_ii = K_aa + delta_a`.
    pub fn block_with_diagonal(sizes: Vec<usize>, values: Vec<Vec<f64>>, delta: Vec<f64>) -> Result<Self> {
        let b = sizes.len();
        let k = matrix_from_rows(&values, b, "values")?;
        let n = sizes.iter().sum();
        Self::build(ProfileKind::Block, n, sizes, k, delta)
    }

    /// Equal-size blocks.
    pub fn equal_blocks(n: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        let b = values.len();
        if b == 0 || n < b {
            return Err(Error::DegenerateInput(format!("cannot split N = {n} into {b} blocks")));
        }
        let sizes = (0..b).map(|a| (a + 1) * n / b - a * n / b).collect();
        Self::block(sizes, values)
    }

    /// Dense profile from the full `N x N` matrix of `N * S_ij`.
    pub fn dense(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidProfile("dense values must be square".into()));
        }
        Self::build(ProfileKind::Dense, n, vec![1; n], values, vec![0.0; n])
    }

    fn build(kind: ProfileKind, n: usize, sizes: Vec<usize>, k: DMatrix<f64>, delta: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::DegenerateInput(format!("matrix dimension N = {n} must be at least 2")));
        }
        let b = sizes.len();
        if sizes.contains(&0) {
            return Err(Error::InvalidProfile("empty block".into()));
        }
        if k.nrows() != b || k.ncols() != b || delta.len() != b {
            return Err(Error::InvalidProfile("block data has inconsistent dimensions".into()));
        }
        let p = VarianceProfile {
            kind,
            n,
            sizes,
            k,
            delta,
            s3: DMatrix::zeros(b, b),
            s4: DMatrix::zeros(b, b),
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks symmetry and uniform primitivity `c <= N S_ij <= C` for some `c > 0`.
    pub fn validate(&self) -> Result<()> {
        let b = self.blocks();
        for a in 0..b {
            for c in 0..b {
                let v = self.k[(a, c)];
                if !v.is_finite() {
                    return Err(Error::InvalidProfile(format!("non-finite value at ({a},{c})")));
                }
                if (v - self.k[(c, a)]).abs() > 1e-14 * v.abs().max(1.0) {
                    return Err(Error::InvalidProfile(format!("not symmetric at ({a},{c})")));
                }
                if v <= 0.0 && !(a == c && self.sizes[a] == 1) {
                    return Err(Error::InvalidProfile(format!("N*S must be positive, found {v} at ({a},{c})")));
                }
            }
            let d = self.k[(a, a)] + self.delta[a];
            if !(d > 0.0) || !self.delta[a].is_finite() {
                return Err(Error::InvalidProfile(format!("diagonal variance of block {a} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_cumulants(mut self, s3: DMatrix<f64>, s4: DMatrix<f64>) -> Result<Self> {
        let b = self.blocks();
        if s3.shape() != (b, b) || s4.shape() != (b, b) {
            return Err(Error::InvalidProfile("cumulant matrices must be B x B".into()));
        }
        self.s3 = s3;
        self.s4 = s4;
        Ok(self)
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn blocks(&self) -> usize {
        self.sizes.len()
    }
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }
    pub fn s3(&self) -> &DMatrix<f64> {
        &self.s3
    }
    pub fn s4(&self) -> &DMatrix<f64> {
        &self.s4
    }

    /// Block weights `phi_a = n_a / N`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sizes.iter().map(|&s| s as f64 / n).collect()
    }

    /// Block index of every row.
    pub fn block_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        for (a, &s) in self.sizes.iter().enumerate() {
            out.extend(std::iter::repeat_n(a, s));
        }
        out
    }

    /// `S_ij` for row indices.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let idx = self.block_of(i);
        let jdx = self.block_of(j);
        let mut v = self.k[(idx, jdx)];
        if i == j {
            v += self.delta[idx];
        }
        v / self.n as f64
    }

    fn block_of(&self, i: usize) -> usize {
        let mut acc = 0;
        for (a, &s) in self.sizes.iter().enumerate() {
            acc += s;
            if i < acc {
                return a;
            }
        }
        panic!("row index {i} out of range for N = {}", self.n)
    }

    /// The full `N x N` matrix `S`.
    pub fn expand(&self) -> DMatrix<f64> {
        let idx = self.block_index();
        let n = self.n;
        let inv = 1.0 / n as f64;
        DMatrix::from_fn(n, n, |i, j| {
            let mut v = self.k[(idx[i], idx[j])];
            if i == j {
                v += self.delta[idx[i]];
            }
            v * inv
        })
    }

    /// The same profile as a dense one (`B = N`), cumulants expanded too.
    pub fn to_dense(&self) -> Self {
        let idx = self.block_index();
        let n = self.n;
        let nf = n as f64;
        let s = self.expand() * nf;
        let s3 = DMatrix::from_fn(n, n, |i, j| self.s3[(idx[i], idx[j])]);
        let s4 = DMatrix::from_fn(n, n, |i, j| self.s4[(idx[i], idx[j])]);
        VarianceProfile {
            kind: ProfileKind::Dense,
            n,
            sizes: vec![1; n],
            k: s,
            delta: vec![0.0; n],
            s3,
            s4,
        }
    }

    /// Dense profile with rows and columns relabelled: new index `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let d = self.to_dense();
        let n = d.n;
        if perm.len() != n {
            return Err(Error::InvalidArgument("permutation length differs from N".into()));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            seen[p] = true;
        }
        let k = DMatrix::from_fn(n, n, |i, j| d.k[(perm[i], perm[j])]);
        let s3 = DMatrix::from_fn(n, n, |i, j| d.s3[(perm[i], perm[j])]);
        let s4 = DMatrix::from_fn(n, n, |i, j| d.s4[(perm[i], perm[j])]);
        Ok(VarianceProfile { k, s3, s4, ..d })
    }

    /// `S + t J / N`, plus `t / N` on the diagonal when `diagonal` is set.
    pub fn augmented(&self, t: f64, diagonal: bool) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
        }
        let mut p = self.clone();
        p.k.add_scalar_mut(t);
        if diagonal {
            for d in p.delta.iter_mut() {
                *d += t;
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// `c * S`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut p = self.clone();
        p.k *= c;
        for d in p.delta.iter_mut() {
            *d *= c;
        }
        p.validate()?;
        Ok(p)
    }

    /// Adds `eps / N` to every diagonal variance.
    pub fn with_diagonal_shift(&self, eps: f64) -> Result<Self> {
        let mut p = self.clone();
        for d in p.delta.iter_mut() {
            *d += eps;
        }
        p.validate()?;
        Ok(p)
    }

    /// Largest relative change `max_ij N |S_ij - T_ij|` against another profile of equal size.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::InvalidArgument("profiles differ in N".into()));
        }
        let a = self.expand();
        let b = other.expand();
        Ok((a - b).abs().max() * self.n as f64)
    }

    /// Bounds `(min, max)` of `N S_ij`.
    pub fn primitivity_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for a in 0..self.blocks() {
            for b in 0..self.blocks() {
                let v = self.k[(a, b)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi = hi.max(self.k[(a, a)] + self.delta[a]);
        }
        (lo, hi)
    }

    /// Is the profile mapped to itself by reversing the block order?
    pub fn is_mirror_symmetric(&self) -> bool {
        let b = self.blocks();
        (0..b).all(|a| {
            self.sizes[a] == self.sizes[b - 1 - a]
                && (self.delta[a] - self.delta[b - 1 - a]).abs() < 1e-14
                && (0..b).all(|c| (self.k[(a, c)] - self.k[(b - 1 - a, b - 1 - c)]).abs() < 1e-14)
        })
    }

    // ---- reduced-space arithmetic ------------------------------------------------

    /// `(S x)_a` for a block-constant vector `x`.
    pub fn apply<T>(&self, x: &[T]) -> Vec<T>
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
    {
        let b = self.blocks();
        let phi = self.weights();
        let inv = 1.0 / self.n as f64;
        (0..b)
            .map(|a| {
                let mut acc = x[a] * (self.delta[a] * inv);
                for c in 0..b {
                    acc = acc + x[c] * (self.k[(a, c)] * phi[c]);
                }
                acc
            })
            .collect()
    }

    /// The matrix `M` representing `S` on block-constant vectors.
    pub fn reduced_matrix(&self) -> DMatrix<f64> {
        let b = self.blocks();
        let phi = self.weights();
        let inv = 1.0 / self.n as f64;
        DMatrix::from_fn(b, b, |a, c| self.k[(a, c)] * phi[c] + if a == c { self.delta[a] * inv } else { 0.0 })
    }

    /// The scalar by which `S` acts on mean-zero vectors inside each block.
    pub fn complement_scalars(&self) -> Vec<f64> {
        let inv = 1.0 / self.n as f64;
        self.delta.iter().map(|d| d * inv).collect()
    }

    /// Multiplicity `n_a - 1` of the complement inside each block.
    pub fn complement_multiplicity(&self) -> Vec<f64> {
        self.sizes.iter().map(|&s| (s - 1) as f64).collect()
    }

    /// `x^T y` over all `N` coordinates for block-constant vectors.
    pub fn full_dot(&self, x: &[Complex64], y: &[Complex64]) -> Complex64 {
        self.sizes.iter().zip(x.iter().zip(y)).map(|(&s, (a, b))| a * b * s as f64).sum()
    }

    /// `(1/N) sum_i x_i`.
    pub fn mean(&self, x: &[Complex64]) -> Complex64 {
        let phi = self.weights();
        x.iter().zip(&phi).map(|(v, p)| v * p).sum()
    }

    /// Expands a block vector to all `N` rows.
    pub fn expand_vector<T: Copy>(&self, x: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n);
        for (v, &s) in x.iter().zip(&self.sizes) {
            out.extend(std::iter::repeat_n(*v, s));
        }
        out
    }

    /// `(1/N^2) sum_ij c_ij x_i y_j` for a block-pair matrix `c` (cumulant arrays).
    pub fn cumulant_form(&self, c: &DMatrix<f64>, x: &[Complex64], y: &[Complex64]) -> Complex64 {
        let phi = self.weights();
        let b = self.blocks();
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..b {
            for d in 0..b {
                acc += x[a] * y[d] * (c[(a, d)] * phi[a] * phi[d]);
            }
        }
        acc
    }

    /// Column of `S` restricted to a row: `S_{., j}` as block values plus the diagonal hit.
    pub fn row_block_values(&self, i: usize) -> (usize, DVector<f64>) {
        let a = self.block_of(i);
        let inv = 1.0 / self.n as f64;
        (a, DVector::from_fn(self.blocks(), |c, _| self.k[(a, c)] * inv))
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], b: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != b || rows.iter().any(|r| r.len() != b) {
        return Err(Error::InvalidProfile(format!("{what} must be a {b} x {b} array")));
    }
    Ok(DMatrix::from_fn(b, b, |i, j| rows[i][j]))
}

/// The profiles used throughout tests, examples and acceptance runs.
pub mod fixtures {
    use super::*;

    /// Two equal blocks with `N S` values in `{0.5, 2.0}`.
    pub fn two_block(n: usize) -> VarianceProfile {
        VarianceProfile::equal_blocks(n, vec![vec![2.0, 0.5], vec![0.5, 0.5]]).expect("valid fixture")
    }

    /// Three blocks of unequal size.
    pub fn three_block(n: usize) -> VarianceProfile {
        let a = n / 4;
        let b = n / 2;
        let c = n - a - b;
        VarianceProfile::block(
            vec![a, b, c],
            vec![vec![1.5, 0.8, 0.4], vec![0.8, 1.0, 0.7], vec![0.4, 0.7, 1.8]],
        )
        .expect("valid fixture")
    }
}
