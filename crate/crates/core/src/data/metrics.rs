use super::SurfacePoint;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// `sqrt(sum w_i (p_i - r_i)^2 / sum w_i)`.
pub fn area_weighted_rmse(predicted: &[f64], reference: &[f64], weights: &[f64]) -> Result<f64> {
    let mut pooled = PooledRmse::new();
    pooled.add(predicted, reference, weights)?;
    pooled.value()
}

/// Area-weighted RMSE pooled over several fields before the square root.
#[derive(Debug, Clone, Copy, Default)]
pub struct PooledRmse {
    weighted_sq: CompensatedSum,
    weight: CompensatedSum,
    count: usize,
}

impl PooledRmse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, predicted: &[f64], reference: &[f64], weights: &[f64]) -> Result<()> {
        if predicted.len() != reference.len() {
            return Err(Error::LengthMismatch {
                expected: reference.len(),
                actual: predicted.len(),
            });
        }
        if weights.len() != reference.len() {
            return Err(Error::LengthMismatch {
                expected: reference.len(),
                actual: weights.len(),
            });
        }
        for ((p, r), &w) in predicted.iter().zip(reference).zip(weights) {
            if !(w >= 0.0) {
                return Err(Error::InvalidInput(format!("negative area weight {w}")));
            }
            let d = p - r;
            self.weighted_sq.add(w * d * d);
            self.weight.add(w);
        }
        self.count += reference.len();
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        let total = self.weight.total();
        if self.count == 0 || !(total > 0.0) {
            return Err(Error::InvalidInput(
                "total area weight must be positive".into(),
            ));
        }
        Ok((self.weighted_sq.total() / total).sqrt())
    }
}

/// Points whose spanwise fraction lies within `tolerance` of `span_fraction`,
/// as `(x, cp)` pairs sorted by chordwise coordinate.
///
/// The spanwise fraction is `y` normalised by the extent of the grid in `y`.
pub fn section_cut(
    grid: &[SurfacePoint],
    values: &[f64],
    span_fraction: f64,
    tolerance: f64,
) -> Result<Vec<(f64, f64)>> {
    section_cut_by(grid, values, span_fraction, tolerance, |_| true)
}

/// [`section_cut`] restricted to points accepted by `keep` (e.g. one side of the surface).
pub fn section_cut_by(
    grid: &[SurfacePoint],
    values: &[f64],
    span_fraction: f64,
    tolerance: f64,
    keep: impl Fn(&SurfacePoint) -> bool,
) -> Result<Vec<(f64, f64)>> {
    if !(tolerance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "cut tolerance must be positive, got {tolerance}"
        )));
    }
    if grid.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: values.len(),
        });
    }
    let (ymin, ymax) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.position[1]), hi.max(p.position[1]))
        });
    let extent = ymax - ymin;
    let mut cut: Vec<(f64, f64)> = grid
        .iter()
        .zip(values)
        .filter(|(p, _)| {
            let frac = if extent > 0.0 {
                (p.position[1] - ymin) / extent
            } else {
                0.0
            };
            (frac - span_fraction).abs() <= tolerance && keep(p)
        })
        .map(|(p, &cp)| (p.position[0], cp))
        .collect();
    cut.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(cut)
}
