//! Dense parameter vectors, the Phase I update buffer, and the principal
//! subspace used to score Phase II updates.

use std::ops::Deref;

use nalgebra::{DMatrix, DVectorView, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality tolerance for [`SubspaceBasis`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Eigenvalues of the Gram matrix below this fraction of the largest are
/// treated as numerical zeros when determining the rank.
const RANK_RTOL: f64 = 1e-12;

/// A model parameter vector or parameter update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidUpdate("empty parameter vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidUpdate(format!("non-finite entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vectors are nonempty");
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// `self - other`, checking dimensions.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The Phase I update matrix, stored column by column.
#[derive(Debug, Clone)]
pub struct UpdateBuffer {
    dim: usize,
    capacity: usize,
    columns: Vec<ParamVector>,
}

impl UpdateBuffer {
    /// A buffer for `rounds * clients` updates of length `dim`.
    pub fn new(dim: usize, rounds: usize, clients: usize) -> Self {
        let capacity = rounds * clients;
        Self { dim, capacity, columns: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, column: ParamVector) -> Result<()> {
        check_dim(self.dim, column.len())?;
        if self.is_full() {
            return Err(Error::InvalidUpdate(format!(
                "update buffer already holds its capacity of {} columns",
                self.capacity
            )));
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.columns.len() == self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[ParamVector] {
        &self.columns
    }

    /// Whether any stored update is nonzero.
    pub fn has_signal(&self) -> bool {
        self.columns.iter().any(|c| c.iter().any(|v| *v != 0.0))
    }
}

/// Leading left singular vectors of an (uncentered) update matrix.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl SubspaceBasis {
    /// Builds a basis from explicit orthonormal columns.
    pub fn from_columns(columns: &[Vec<f64>], singular_values: Vec<f64>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::InvalidUpdate("basis needs at least one column".into()));
        };
        let p = first.len();
        for c in columns {
            check_dim(p, c.len())?;
        }
        check_dim(columns.len(), singular_values.len())?;
        let basis = DMatrix::from_fn(p, columns.len(), |i, j| columns[j][i]);
        let b = Self { basis, singular_values };
        if b.orthonormality_error() > ORTHONORMAL_TOL {
            return Err(Error::InvalidUpdate("basis columns are not orthonormal".into()));
        }
        Ok(b)
    }

    /// Number of rows `p`.
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Number of components `q`.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let p = self.dim();
        &self.basis.as_slice()[j * p..(j + 1) * p]
    }

    /// Max-abs entry of `BᵀB - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let q = self.rank();
        let mut worst = 0.0f64;
        for i in 0..q {
            for j in i..q {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.column(i), self.column(j)) - target).abs());
            }
        }
        worst
    }
}

/// Eigen-decomposition of the column space, largest component first.
struct Spectrum {
    /// Squared singular values, nonincreasing, truncated at numerical rank.
    energies: Vec<f64>,
    /// Sum of all squared singular values.
    total: f64,
    /// Left singular vectors matching `energies`, when requested.
    vectors: Option<DMatrix<f64>>,
}

fn validate(columns: &[ParamVector]) -> Result<usize> {
    let Some(first) = columns.first() else {
        return Err(Error::NoPhaseOneData);
    };
    let p = first.len();
    for c in columns {
        check_dim(p, c.len())?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidUpdate("non-finite entry in update".into()));
        }
    }
    Ok(p)
}

/// Columns as a p × n matrix.
fn stack(columns: &[ParamVector], p: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(p, columns.len(), columns.iter().flat_map(|c| c.iter().copied()))
}

/// Energies of the columns' singular values and, when `vectors_for` names a
/// variance target, the left singular vectors needed to reach it.
fn spectrum(columns: &[ParamVector], vectors_for: Option<f64>) -> Result<Spectrum> {
    let p = validate(columns)?;
    let n = columns.len();
    let w = stack(columns, p);

    // Work in whichever of the n×n Gram matrix or the p×p scatter matrix is smaller.
    let use_gram = n <= p;
    let small = if use_gram { w.tr_mul(&w) } else { &w * w.transpose() };

    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let clamped: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateTraining);
    }
    let cutoff = clamped[0] * RANK_RTOL;
    let rank = clamped.iter().take_while(|&&e| e > cutoff).count().max(1);
    let energies = clamped[..rank].to_vec();

    let vectors = vectors_for.map(|target| {
        let q = components_for(&fractions(&energies, total), target);
        let mut u = if use_gram {
            // U = W V Σ⁻¹
            let v = DMatrix::from_fn(n, q, |i, j| eig.eigenvectors[(i, order[j])] / energies[j].sqrt());
            &w * v
        } else {
            DMatrix::from_fn(p, q, |i, j| eig.eigenvectors[(i, order[j])])
        };
        reorthonormalize(&mut u);
        u
    });

    Ok(Spectrum { energies, total, vectors })
}

/// Restores orthonormality lost when forming singular vectors through the
/// Gram matrix: two rounds of Cholesky QR, with modified Gram-Schmidt as the
/// fallback when `UᵀU` is too ill-conditioned to factor.
fn reorthonormalize(u: &mut DMatrix<f64>) {
    for _ in 0..2 {
        let g = u.tr_mul(u);
        let err =
            g.iter().enumerate().map(|(k, v)| (v - f64::from(k % (u.ncols() + 1) == 0)).abs()).fold(0.0, f64::max);
        if err < 1e-13 {
            return;
        }
        let Some(chol) = g.cholesky() else {
            return gram_schmidt(u);
        };
        let Some(l_inv) = chol.l().try_inverse() else {
            return gram_schmidt(u);
        };
        *u = &*u * l_inv.transpose();
    }
}

/// Two passes of modified Gram-Schmidt.
fn gram_schmidt(u: &mut DMatrix<f64>) {
    let (p, q) = u.shape();
    let data = u.as_mut_slice();
    for _ in 0..2 {
        for j in 0..q {
            let (done, rest) = data.split_at_mut(j * p);
            let col = &mut rest[..p];
            for i in 0..j {
                let prev = &done[i * p..(i + 1) * p];
                let proj = dot(prev, col);
                for (c, b) in col.iter_mut().zip(prev) {
                    *c -= proj * b;
                }
            }
            let norm = dot(col, col).sqrt();
            if norm > 0.0 {
                col.iter_mut().for_each(|c| *c /= norm);
            }
        }
    }
}

fn fractions(energies: &[f64], total: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = energies
        .iter()
        .map(|e| {
            acc += e;
            acc / total
        })
        .collect();
    // The components dropped below the rank cutoff carry ≤ 1e-12 of the mass.
    if let Some(last) = out.last_mut() {
        *last = last.min(1.0);
    }
    out
}

fn cumulative_fractions(s: &Spectrum) -> Vec<f64> {
    fractions(&s.energies, s.total)
}

/// Smallest component count whose cumulative variance fraction reaches `target`.
pub fn components_for(profile: &[f64], target: f64) -> usize {
    profile.iter().position(|&f| f >= target - 1e-12).map_or(profile.len(), |i| i + 1)
}

/// Leading principal components of the uncentered update columns, keeping
/// just enough to explain `variance_target` of the total squared mass.
pub fn truncated_pca(columns: &[ParamVector], variance_target: f64) -> Result<SubspaceBasis> {
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::config(format!("variance target {variance_target} outside (0, 1]")));
    }
    let s = spectrum(columns, Some(variance_target))?;
    let basis = s.vectors.expect("vectors requested");
    let q = basis.ncols();
    let singular_values = s.energies[..q].iter().map(|e| e.sqrt()).collect();
    Ok(SubspaceBasis { basis, singular_values })
}

/// Cumulative explained-variance fraction for 1, 2, … components, up to the
/// numerical rank of the columns.
pub fn explained_variance_profile(columns: &[ParamVector]) -> Result<Vec<f64>> {
    let s = spectrum(columns, None)?;
    Ok(cumulative_fractions(&s))
}

/// Explained-variance profiles of the nested prefixes of `columns` with
/// `step`, `2·step`, … columns. The Gram matrix is formed once.
pub fn nested_variance_profiles(columns: &[ParamVector], step: usize) -> Result<Vec<Vec<f64>>> {
    let p = validate(columns)?;
    if step == 0 {
        return Err(Error::config("prefix step must be positive"));
    }
    let n = columns.len();
    let w = stack(columns, p);
    let gram = w.tr_mul(&w);
    (1..=n / step)
        .map(|t| {
            let m = t * step;
            let eig = SymmetricEigen::new(gram.view((0, 0), (m, m)).into_owned());
            let mut e: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
            e.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = e.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateTraining);
            }
            let cutoff = e[0] * RANK_RTOL;
            let rank = e.iter().take_while(|&&v| v > cutoff).count().max(1);
            e.truncate(rank);
            Ok(cumulative_fractions(&Spectrum { energies: e, total, vectors: None }))
        })
        .collect()
}

/// `‖δ − B(Bᵀδ)‖₂`, evaluated in O(pq) without forming the projector.
pub fn project_residual(delta: &[f64], basis: &SubspaceBasis) -> Result<f64> {
    check_dim(basis.dim(), delta.len())?;
    let d = DVectorView::from_slice(delta, delta.len());
    let coeffs = basis.basis.tr_mul(&d);
    let mut residual = d.into_owned();
    residual.gemv(-1.0, &basis.basis, &coeffs, 1.0);
    Ok(residual.norm())
}
