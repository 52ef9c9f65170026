//! Centering, length normalization and LDA projection applied ahead of PLDA.

use nalgebra::{DMatrix, DVector};

use crate::corpus::LabeledVectorSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Ridge added to the within-class scatter, relative to its mean eigenvalue.
pub const LDA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Scatter {
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    /// Unweighted mean of the class means.
    pub mean: DVector<f64>,
    pub class_means: Vec<DVector<f64>>,
}

/// Within- and between-class scatter, unweighted by class size.
pub fn compute_scatter(set: &LabeledVectorSet) -> Result<Scatter> {
    if set.n_speakers() < 2 {
        return Err(Error::InvalidData(format!(
            "between-class scatter needs at least 2 speakers, got {}",
            set.n_speakers()
        )));
    }
    let d = set.dim();
    let class_means: Vec<DVector<f64>> = set.speakers().iter().map(|g| g.mean()).collect();
    let mut mean = DVector::zeros(d);
    for m in &class_means {
        mean += m;
    }
    mean /= class_means.len() as f64;

    let mut within = DMatrix::zeros(d, d);
    for (g, m) in set.speakers().iter().zip(&class_means) {
        for v in &g.vectors {
            let r = v - m;
            within.ger(1.0, &r, &r, 1.0);
        }
    }
    let mut between = DMatrix::zeros(d, d);
    for m in &class_means {
        let r = m - &mean;
        between.ger(1.0, &r, &r, 1.0);
    }
    Ok(Scatter {
        within: linalg::symmetrize(&within),
        between: linalg::symmetrize(&between),
        mean,
        class_means,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    pub mean: DVector<f64>,
    /// `out_dim x in_dim`; each row is one discriminant direction.
    pub projection: DMatrix<f64>,
}

impl LdaTransform {
    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                actual: x.len(),
            });
        }
        Ok(&self.projection * (x - &self.mean))
    }
}

/// The within-class scatter plus the ridge `LDA_RIDGE * trace / dim * I`.
pub fn regularized_within(within: &DMatrix<f64>) -> DMatrix<f64> {
    let d = within.nrows();
    let mut scale = within.trace() / d as f64;
    if scale <= 0.0 {
        // all classes are single points; any ridge gives the same directions
        scale = 1.0;
    }
    within + DMatrix::identity(d, d) * (LDA_RIDGE * scale)
}

/// Flips `v` so that its first clearly nonzero coordinate is positive.
pub(crate) fn canonical_sign(v: &mut DVector<f64>) {
    let tol = v.amax() * 1e-12;
    if let Some(first) = v.iter().copied().find(|x| x.abs() > tol) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Fits LDA: the top `out_dim` generalized eigenvectors of the pencil
/// `(Sb, Sw + ridge)`, normalized to unit length in the regularized `Sw` metric.
pub fn fit_lda(set: &LabeledVectorSet, out_dim: usize) -> Result<LdaTransform> {
    let d = set.dim();
    let max_dim = d.min(set.n_speakers().saturating_sub(1));
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::InvalidConfig(format!(
            "LDA output dimension {out_dim} must be in 1..={max_dim} (min of input dim {d} and speakers - 1)"
        )));
    }
    let scatter = compute_scatter(set)?;
    let sw = regularized_within(&scatter.within);
    let chol = linalg::cholesky(&sw, "regularized within-class scatter")?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical("within-class Cholesky factor is singular".into()))?;
    let whitened = &l_inv * &scatter.between * l_inv.transpose();
    let (_, vecs) = linalg::sorted_eigen(&whitened);
    let back = l_inv.transpose();
    let mut projection = DMatrix::zeros(out_dim, d);
    for k in 0..out_dim {
        let mut v: DVector<f64> = &back * vecs.column(k);
        canonical_sign(&mut v);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("LDA direction is not finite".into()));
        }
        projection.set_row(k, &v.transpose());
    }
    Ok(LdaTransform {
        mean: scatter.mean,
        projection,
    })
}

pub fn length_normalize(x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidData("cannot length-normalize a zero-norm vector".into()));
    }
    Ok(x / n)
}

pub fn length_normalize_set(set: &LabeledVectorSet) -> Result<LabeledVectorSet> {
    set.try_map_vectors(length_normalize)
}

/// Maps every vector to `projection * (x - mean)`, optionally length-normalizing
/// the result.
pub fn apply_transform(t: &LdaTransform, set: &LabeledVectorSet, renormalize: bool) -> Result<LabeledVectorSet> {
    if set.dim() != t.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: t.in_dim(),
            actual: set.dim(),
        });
    }
    set.try_map_vectors(|x| {
        let y = t.apply(x)?;
        if renormalize {
            length_normalize(&y)
        } else {
            Ok(y)
        }
    })
}

/// Training-side front end: length-normalize, optionally fit and apply LDA,
/// then length-normalize again.
pub fn prepare_training(
    set: &LabeledVectorSet,
    lda_dim: Option<usize>,
) -> Result<(LabeledVectorSet, Option<LdaTransform>)> {
    let normed = length_normalize_set(set)?;
    match lda_dim {
        None => Ok((normed, None)),
        Some(k) => {
            let lda = fit_lda(&normed, k)?;
            let projected = apply_transform(&lda, &normed, true)?;
            Ok((projected, Some(lda)))
        }
    }
}

/// Applies the same front end as [`prepare_training`] with an already fitted LDA.
pub fn prepare_vectors(set: &LabeledVectorSet, lda: Option<&LdaTransform>) -> Result<LabeledVectorSet> {
    let normed = length_normalize_set(set)?;
    match lda {
        None => Ok(normed),
        Some(t) => apply_transform(t, &normed, true),
    }
}
