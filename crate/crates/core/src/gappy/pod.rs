use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::DenseDataset;
use crate::error::{Error, Result};

/// How many POD modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    /// Smallest rank whose modes capture this fraction of the snapshot energy.
    Energy(f64),
    Explicit(usize),
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::Energy(0.999)
    }
}

/// Mean-centred POD basis of a snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    mean: DVector<f64>,
    modes: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn num_points(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Truncated left singular vectors, one column per mode.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// All `min(N, n)` singular values of the centred matrix, non-increasing.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Row `i` of the mode matrix: the coordinates of grid point `i` in mode space.
    pub fn mode_row(&self, i: usize) -> Vec<f64> {
        self.modes.row(i).iter().copied().collect()
    }

    /// Orthogonal projection of a field onto the basis, in mode coordinates.
    pub fn coefficients(&self, field: &[f64]) -> Result<DVector<f64>> {
        if field.len() != self.num_points() {
            return Err(Error::LengthMismatch {
                expected: self.num_points(),
                actual: field.len(),
            });
        }
        let centred = DVector::from_column_slice(field) - &self.mean;
        Ok(self.modes.tr_mul(&centred))
    }

    /// `mean + U_r coefficients`.
    pub fn expand(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.modes * coefficients
    }

    /// Best approximation of `field` within the affine POD space.
    pub fn reconstruct(&self, field: &[f64]) -> Result<DVector<f64>> {
        Ok(self.expand(&self.coefficients(field)?))
    }
}

pub fn build_pod(dense: &DenseDataset, rule: RankRule) -> Result<PodBasis> {
    let n = dense.num_conditions();
    let mut y = DMatrix::zeros(dense.num_points(), n);
    for k in 0..n {
        y.column_mut(k).copy_from_slice(dense.snapshot(k));
    }
    build_pod_from_matrix(&y, rule)
}

/// POD of an (N x n) snapshot matrix via the eigen decomposition of the
/// smaller Gram matrix.
pub fn build_pod_from_matrix(snapshots: &DMatrix<f64>, rule: RankRule) -> Result<PodBasis> {
    let (rows, cols) = snapshots.shape();
    if cols < 2 {
        return Err(Error::InvalidInput(
            "POD needs at least two snapshots".into(),
        ));
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let max_rank = rows.min(cols);
    if let RankRule::Explicit(r) = rule {
        if r > max_rank {
            return Err(Error::RankTooLarge {
                requested: r,
                max: max_rank,
            });
        }
    }
    if let RankRule::Energy(f) = rule {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidInput(format!(
                "energy fraction {f} outside [0, 1]"
            )));
        }
    }

    let mean = snapshots.column_mean();
    let mut centred = snapshots.clone();
    for mut c in centred.column_iter_mut() {
        c -= &mean;
    }

    let (values, mut modes) = if rows >= cols {
        let gram = centred.tr_mul(&centred);
        let (values, vectors) = sorted_eigen(gram);
        let sigma: Vec<f64> = values.iter().map(|v| v.max(0.0).sqrt()).collect();
        let mut modes = &centred * vectors;
        for (k, mut c) in modes.column_iter_mut().enumerate() {
            if sigma[k] > 0.0 {
                c /= sigma[k];
            }
        }
        (sigma, modes)
    } else {
        let gram = &centred * centred.transpose();
        let (values, vectors) = sorted_eigen(gram);
        (values.iter().map(|v| v.max(0.0).sqrt()).collect(), vectors)
    };
    let singular_values: Vec<f64> = values.into_iter().take(max_rank).collect();

    // Relative to the raw data scale too, so rounding left over from centring
    // identical snapshots does not count as a mode.
    let top = singular_values.first().copied().unwrap_or(0.0);
    let tol = max_rank as f64 * f64::EPSILON * top.max(snapshots.norm()) * 16.0;
    let numerical_rank = singular_values.iter().take_while(|&&s| s > tol).count();
    let rank = match rule {
        RankRule::Explicit(r) => {
            if r > numerical_rank {
                log::debug!("requested rank {r} truncated to numerical rank {numerical_rank}");
            }
            r.min(numerical_rank)
        }
        RankRule::Energy(fraction) => {
            let energy: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
            let total: f64 = energy.iter().sum();
            let mut acc = 0.0;
            let mut r = 0;
            if total > 0.0 {
                for e in &energy {
                    if acc >= fraction * total {
                        break;
                    }
                    acc += e;
                    r += 1;
                }
            }
            r.min(numerical_rank)
        }
    };

    let mut kept = modes.columns(0, rank).into_owned();
    orthonormalize(&mut kept);
    orthonormalize(&mut kept);
    modes = kept;
    Ok(PodBasis {
        mean,
        modes,
        singular_values,
    })
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(order.iter());
    (values, vectors)
}

/// Modified Gram–Schmidt on the columns, in place.
fn orthonormalize(m: &mut DMatrix<f64>) {
    for k in 0..m.ncols() {
        for j in 0..k {
            let proj = m.column(j).dot(&m.column(k));
            let qj = m.column(j).clone_owned();
            m.column_mut(k).axpy(-proj, &qj, 1.0);
        }
        let norm = m.column(k).norm();
        if norm > 0.0 {
            m.column_mut(k).unscale_mut(norm);
        }
    }
}
