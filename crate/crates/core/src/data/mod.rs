//! Flow conditions, surface geometry and the dense/sparse datasets that every
//! other module consumes.

mod io;
mod metrics;
mod scaler;

pub use io::{read_dense_csv, read_sparse_csv, write_dense_csv, write_sparse_csv};
pub use io::{DENSE_HEADER, SPARSE_HEADER};
pub use metrics::{area_weighted_rmse, section_cut, section_cut_by, PooledRmse};
pub use scaler::MinMaxScaler;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of network input features: mach, alpha, x, y, z, nx, ny, nz.
pub const NUM_FEATURES: usize = 8;

/// One raw (unscaled) input feature vector.
pub type Features = [f64; NUM_FEATURES];

/// Freestream state: Mach number and angle of attack in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowCondition {
    pub mach: f64,
    pub alpha: f64,
}

impl FlowCondition {
    pub fn new(mach: f64, alpha: f64) -> Result<Self> {
        let c = Self { mach, alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mach.is_finite() && self.mach > 0.0) {
            return Err(Error::InvalidInput(format!(
                "mach must be positive and finite, got {}",
                self.mach
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A point on the wetted surface with its outward unit normal and the
/// surface area it represents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub area_weight: f64,
}

impl SurfacePoint {
    pub fn new(position: [f64; 3], normal: [f64; 3], area_weight: f64) -> Result<Self> {
        let p = Self {
            position,
            normal,
            area_weight,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .position
            .iter()
            .chain(&self.normal)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite surface point".into()));
        }
        let norm = self.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "surface normal must have unit length, got {norm}"
            )));
        }
        if !(self.area_weight >= 0.0 && self.area_weight.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "area weight must be non-negative, got {}",
                self.area_weight
            )));
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &SurfacePoint) -> f64 {
        self.position
            .iter()
            .zip(&other.position)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Network input features for a point at a condition.
pub fn features(condition: &FlowCondition, point: &SurfacePoint) -> Features {
    let [x, y, z] = point.position;
    let [nx, ny, nz] = point.normal;
    [condition.mach, condition.alpha, x, y, z, nx, ny, nz]
}

/// One training row: a surface point at a flow condition and its pressure coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub condition: FlowCondition,
    pub point: SurfacePoint,
    pub cp: f64,
}

impl FieldSample {
    pub fn features(&self) -> Features {
        features(&self.condition, &self.point)
    }
}

/// Fields on a fixed surface grid for a set of conditions. `values` is the
/// snapshot matrix (grid points x conditions), stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDataset {
    grid: Vec<SurfacePoint>,
    conditions: Vec<FlowCondition>,
    values: Vec<f64>,
}

impl DenseDataset {
    /// `snapshots[k]` holds the field for `conditions[k]`.
    pub fn new(
        grid: Vec<SurfacePoint>,
        conditions: Vec<FlowCondition>,
        snapshots: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if snapshots.len() != conditions.len() {
            return Err(Error::LengthMismatch {
                expected: conditions.len(),
                actual: snapshots.len(),
            });
        }
        for c in &conditions {
            c.validate()?;
        }
        let n = grid.len();
        let mut values = Vec::with_capacity(n * conditions.len());
        for s in snapshots {
            if s.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite cp value".into()));
            }
            values.extend(s);
        }
        Ok(Self {
            grid,
            conditions,
            values,
        })
    }

    pub fn grid(&self) -> &[SurfacePoint] {
        &self.grid
    }

    pub fn conditions(&self) -> &[FlowCondition] {
        &self.conditions
    }

    pub fn num_points(&self) -> usize {
        self.grid.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    /// Field at condition `k`.
    pub fn snapshot(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn condition_index(&self, condition: &FlowCondition) -> Option<usize> {
        self.conditions.iter().position(|c| c == condition)
    }

    /// Dataset restricted to the given condition indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let conditions = indices.iter().map(|&k| self.conditions[k]).collect();
        let mut values = Vec::with_capacity(indices.len() * self.grid.len());
        for &k in indices {
            values.extend_from_slice(self.snapshot(k));
        }
        Self {
            grid: self.grid.clone(),
            conditions,
            values,
        }
    }

    /// All rows, condition-major.
    pub fn samples(&self) -> impl Iterator<Item = FieldSample> + '_ {
        self.conditions.iter().enumerate().flat_map(move |(k, c)| {
            self.grid
                .iter()
                .zip(self.snapshot(k))
                .map(move |(p, &cp)| FieldSample {
                    condition: *c,
                    point: *p,
                    cp,
                })
        })
    }

    pub fn area_weights(&self) -> Vec<f64> {
        self.grid.iter().map(|p| p.area_weight).collect()
    }
}

/// Sparse sensor readings: one row per sensor, one column per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    sensors: Vec<SurfacePoint>,
    section_ids: Vec<u32>,
    conditions: Vec<FlowCondition>,
    values: Vec<f64>,
}

impl SparseDataset {
    /// `readings[k]` holds the sensor values for `conditions[k]`.
    pub fn new(
        sensors: Vec<SurfacePoint>,
        section_ids: Vec<u32>,
        conditions: Vec<FlowCondition>,
        readings: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if section_ids.len() != sensors.len() {
            return Err(Error::LengthMismatch {
                expected: sensors.len(),
                actual: section_ids.len(),
            });
        }
        let dense = DenseDataset::new(sensors, conditions, readings)?;
        Ok(Self {
            sensors: dense.grid,
            section_ids,
            conditions: dense.conditions,
            values: dense.values,
        })
    }

    pub fn sensors(&self) -> &[SurfacePoint] {
        &self.sensors
    }

    pub fn section_ids(&self) -> &[u32] {
        &self.section_ids
    }

    pub fn conditions(&self) -> &[FlowCondition] {
        &self.conditions
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty() || self.conditions.is_empty()
    }

    pub fn readings(&self, k: usize) -> &[f64] {
        let m = self.sensors.len();
        &self.values[k * m..(k + 1) * m]
    }

    pub fn condition_index(&self, condition: &FlowCondition) -> Option<usize> {
        self.conditions.iter().position(|c| c == condition)
    }

    /// Dataset restricted to the given condition indices, in that order.
    pub fn select_conditions(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.sensors.len());
        for &k in indices {
            values.extend_from_slice(self.readings(k));
        }
        Self {
            sensors: self.sensors.clone(),
            section_ids: self.section_ids.clone(),
            conditions: indices.iter().map(|&k| self.conditions[k]).collect(),
            values,
        }
    }

    /// Dataset restricted to sensors for which `keep(index, section_id)` holds.
    pub fn filter_sensors(&self, keep: impl Fn(usize, u32) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.sensors.len())
            .filter(|&i| keep(i, self.section_ids[i]))
            .collect();
        let mut values = Vec::with_capacity(rows.len() * self.conditions.len());
        for k in 0..self.conditions.len() {
            let col = self.readings(k);
            values.extend(rows.iter().map(|&i| col[i]));
        }
        Self {
            sensors: rows.iter().map(|&i| self.sensors[i]).collect(),
            section_ids: rows.iter().map(|&i| self.section_ids[i]).collect(),
            conditions: self.conditions.clone(),
            values,
        }
    }

    /// All rows, condition-major.
    pub fn samples(&self) -> impl Iterator<Item = FieldSample> + '_ {
        self.conditions.iter().enumerate().flat_map(move |(k, c)| {
            self.sensors
                .iter()
                .zip(self.readings(k))
                .map(move |(p, &cp)| FieldSample {
                    condition: *c,
                    point: *p,
                    cp,
                })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: f64) -> SurfacePoint {
        SurfacePoint::new([x, 0.0, 0.0], [0.0, 0.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn condition_validation() {
        assert!(FlowCondition::new(0.8, 2.0).is_ok());
        assert!(FlowCondition::new(0.0, 2.0).is_err());
        assert!(FlowCondition::new(0.8, f64::NAN).is_err());
    }

    #[test]
    fn surface_point_validation() {
        assert!(SurfacePoint::new([0.0; 3], [0.0, 0.6, 0.8], 0.0).is_ok());
        assert!(SurfacePoint::new([0.0; 3], [0.0, 0.0, 1.1], 1.0).is_err());
        assert!(SurfacePoint::new([0.0; 3], [0.0, 0.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn dense_dataset_shapes() {
        let c = vec![
            FlowCondition::new(0.7, 1.0).unwrap(),
            FlowCondition::new(0.8, 2.0).unwrap(),
        ];
        let d = DenseDataset::new(
            vec![point(0.0), point(1.0), point(2.0)],
            c.clone(),
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap();
        assert_eq!(d.snapshot(1), &[4.0, 5.0, 6.0]);
        assert_eq!(d.samples().count(), 6);
        assert_eq!(d.select(&[1]).snapshot(0), &[4.0, 5.0, 6.0]);
        assert!(DenseDataset::new(vec![point(0.0)], c, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn sparse_filter_keeps_column_layout() {
        let c = vec![
            FlowCondition::new(0.7, 1.0).unwrap(),
            FlowCondition::new(0.8, 2.0).unwrap(),
        ];
        let s = SparseDataset::new(
            vec![point(0.0), point(1.0), point(2.0)],
            vec![1, 2, 3],
            c,
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap();
        let f = s.filter_sensors(|_, id| id != 2);
        assert_eq!(f.readings(0), &[1.0, 3.0]);
        assert_eq!(f.readings(1), &[4.0, 6.0]);
        assert_eq!(f.section_ids(), &[1, 3]);
    }
}
