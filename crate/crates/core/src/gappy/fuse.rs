use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gpr::{GprModel, GprSettings, KernelParams};
use super::observation::{nearest_neighbor_map, ObservationMap};
use super::pod::{build_pod, PodBasis, RankRule};
use crate::data::{DenseDataset, SparseDataset, SurfacePoint};
use crate::error::{Error, Result};

/// Raw posterior variances below this indicate a conditioning problem.
pub const VARIANCE_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GappyConfig {
    pub rank_rule: RankRule,
    pub gpr: GprSettings,
}

/// Posterior mean and (clamped) variance on the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedField {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Smallest variance before clamping at zero.
    pub min_raw_variance: f64,
}

impl FusedField {
    pub fn conditioning_ok(&self) -> bool {
        self.min_raw_variance >= VARIANCE_FLOOR
    }
}

/// Regression inputs: the POD rows at the observed grid points.
pub fn observed_inputs(basis: &PodBasis, obs: &ObservationMap) -> DMatrix<f64> {
    let modes = basis.modes();
    DMatrix::from_fn(obs.len(), basis.rank(), |i, j| modes[(obs.indices[i], j)])
}

/// Fits the mode-space GPR to measurements `y` taken at `obs`.
pub fn fit_gpr(
    basis: &PodBasis,
    obs: &ObservationMap,
    y: &[f64],
    settings: &GprSettings,
) -> Result<GprModel> {
    let (inputs, targets) = regression_data(basis, obs, y)?;
    GprModel::fit(inputs, targets, settings)
}

/// Same as [`fit_gpr`] with fixed kernel parameters.
pub fn fit_gpr_with_params(
    basis: &PodBasis,
    obs: &ObservationMap,
    y: &[f64],
    params: KernelParams,
    noise: f64,
) -> Result<GprModel> {
    let (inputs, targets) = regression_data(basis, obs, y)?;
    GprModel::with_params(inputs, targets, params, noise)
}

fn regression_data(
    basis: &PodBasis,
    obs: &ObservationMap,
    y: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if y.is_empty() {
        return Err(Error::EmptyMeasurements);
    }
    if y.len() != obs.len() {
        return Err(Error::LengthMismatch {
            expected: obs.len(),
            actual: y.len(),
        });
    }
    if let Some(&bad) = obs.indices.iter().find(|&&i| i >= basis.num_points()) {
        return Err(Error::InvalidInput(format!(
            "observation index {bad} outside grid of {} points",
            basis.num_points()
        )));
    }
    let mean = basis.mean();
    let targets = DVector::from_iterator(
        y.len(),
        y.iter().zip(&obs.indices).map(|(v, &i)| v - mean[i]),
    );
    Ok((observed_inputs(basis, obs), targets))
}

/// Evaluates the posterior at every grid row of the basis.
pub fn predict_full_field(model: &GprModel, basis: &PodBasis) -> Result<FusedField> {
    let (centred, raw) = model.predict(basis.modes())?;
    let mean = centred
        .iter()
        .zip(basis.mean().iter())
        .map(|(c, m)| c + m)
        .collect();
    let min_raw_variance = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if min_raw_variance < VARIANCE_FLOOR {
        log::warn!("posterior variance reached {min_raw_variance:e} before clamping; kernel matrix is poorly conditioned");
    }
    let variance = raw.into_iter().map(|v| v.max(0.0)).collect();
    Ok(FusedField {
        mean,
        variance,
        min_raw_variance,
    })
}

/// Result of one gappy reconstruction.
#[derive(Debug, Clone)]
pub struct GappyResult {
    pub field: FusedField,
    pub model: GprModel,
    pub observation: ObservationMap,
}

/// A POD basis built once from dense data, reused for every fusion.
#[derive(Debug, Clone)]
pub struct GappyPod {
    basis: PodBasis,
    grid: Vec<SurfacePoint>,
    config: GappyConfig,
}

impl GappyPod {
    pub fn new(dense: &DenseDataset, config: GappyConfig) -> Result<Self> {
        Ok(Self {
            basis: build_pod(dense, config.rank_rule)?,
            grid: dense.grid().to_vec(),
            config,
        })
    }

    pub fn basis(&self) -> &PodBasis {
        &self.basis
    }

    pub fn grid(&self) -> &[SurfacePoint] {
        &self.grid
    }

    pub fn config(&self) -> &GappyConfig {
        &self.config
    }

    /// Reconstructs the full field from readings at arbitrary sensor points.
    pub fn fuse(&self, sensors: &[SurfacePoint], readings: &[f64]) -> Result<GappyResult> {
        if sensors.is_empty() || readings.is_empty() {
            return Err(Error::EmptyMeasurements);
        }
        let observation = nearest_neighbor_map(&self.grid, sensors)?;
        let model = fit_gpr(&self.basis, &observation, readings, &self.config.gpr)?;
        let field = predict_full_field(&model, &self.basis)?;
        Ok(GappyResult {
            field,
            model,
            observation,
        })
    }

    /// Fuses condition `k` of a sparse dataset.
    pub fn fuse_condition(&self, sparse: &SparseDataset, k: usize) -> Result<GappyResult> {
        if k >= sparse.num_conditions() {
            return Err(Error::InvalidInput(format!(
                "condition index {k} out of range for {} conditions",
                sparse.num_conditions()
            )));
        }
        self.fuse(sparse.sensors(), sparse.readings(k))
    }

    pub fn diagnostics(&self, result: &GappyResult) -> GappyDiagnostics {
        GappyDiagnostics {
            singular_values: self.basis.singular_values().to_vec(),
            rank: self.basis.rank(),
            kernel: result.model.params(),
            noise: result.model.noise(),
            jitter: result.model.jitter(),
            log_marginal_likelihood: result.model.log_likelihood(),
            sensor_distances: result.observation.distances.clone(),
            duplicate_sensors: result.observation.duplicates,
            min_raw_variance: result.field.min_raw_variance,
        }
    }
}

/// One-shot composition: basis, sensor map, regression, prediction.
pub fn gappy_fuse(
    dense: &DenseDataset,
    sparse: &SparseDataset,
    k: usize,
    config: &GappyConfig,
) -> Result<GappyResult> {
    GappyPod::new(dense, *config)?.fuse_condition(sparse, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GappyDiagnostics {
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub kernel: KernelParams,
    pub noise: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    pub sensor_distances: Vec<f64>,
    pub duplicate_sensors: usize,
    pub min_raw_variance: f64,
}

pub const FUSED_HEADER: &str = "x,y,z,cp_mean,cp_var";

pub fn write_fused_csv(grid: &[SurfacePoint], field: &FusedField, path: &Path) -> Result<()> {
    if grid.len() != field.mean.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: field.mean.len(),
        });
    }
    let mut out = String::with_capacity(grid.len() * 64);
    out.push_str(FUSED_HEADER);
    out.push('\n');
    for ((p, m), v) in grid.iter().zip(&field.mean).zip(&field.variance) {
        let [x, y, z] = p.position;
        out.push_str(&format!("{x},{y},{z},{m},{v}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn write_diagnostics_json(diagnostics: &GappyDiagnostics, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(diagnostics)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FlowCondition;
    use crate::gappy::build_pod_from_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_grid(n: usize) -> Vec<SurfacePoint> {
        (0..n)
            .map(|i| SurfacePoint::new([i as f64, 0.0, 0.0], [0.0, 0.0, 1.0], 1.0).unwrap())
            .collect()
    }

    fn random_dense(seed: u64, n_points: usize, n_snap: usize) -> DenseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conds: Vec<_> = (0..n_snap)
            .map(|k| FlowCondition::new(0.5 + 0.01 * k as f64, 1.0).unwrap())
            .collect();
        let snaps: Vec<Vec<f64>> = (0..n_snap)
            .map(|_| (0..n_points).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        DenseDataset::new(line_grid(n_points), conds, snaps).unwrap()
    }

    fn tight() -> GappyConfig {
        GappyConfig {
            rank_rule: RankRule::Energy(1.0),
            gpr: GprSettings {
                noise: 1e-10,
                ..GprSettings::default()
            },
        }
    }

    #[test]
    fn fully_observed_reproduces_measurements() {
        let dense = random_dense(1, 30, 6);
        let pod = GappyPod::new(&dense, tight()).unwrap();
        let target = dense.snapshot(2).to_vec();
        let r = pod.fuse(dense.grid(), &target).unwrap();
        for (a, b) in r.field.mean.iter().zip(&target) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn planted_solution_is_recovered() {
        let dense = random_dense(2, 150, 8);
        let pod = GappyPod::new(&dense, tight()).unwrap();
        let basis = pod.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coeffs = DVector::from_fn(basis.rank(), |_, _| rng.random_range(-2.0..2.0));
        let truth = basis.expand(&coeffs);
        let sensor_idx: Vec<usize> = (0..20).map(|i| i * 7 + 1).collect();
        let sensors: Vec<_> = sensor_idx
            .iter()
            .map(|&i| dense.grid()[i])
            .collect();
        let readings: Vec<f64> = sensor_idx.iter().map(|&i| truth[i]).collect();
        let r = pod.fuse(&sensors, &readings).unwrap();
        let mse: f64 = r
            .field
            .mean
            .iter()
            .zip(truth.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 150.0;
        assert!(mse.sqrt() < 1e-5, "rmse {}", mse.sqrt());
        for &i in &sensor_idx {
            assert!((r.field.mean[i] - truth[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_is_smaller_at_observed_points() {
        let dense = random_dense(3, 40, 6);
        let basis = build_pod(&dense, RankRule::Explicit(3)).unwrap();
        let obs = nearest_neighbor_map(dense.grid(), &dense.grid()[..5]).unwrap();
        let y: Vec<f64> = obs.indices.iter().map(|&i| dense.snapshot(0)[i]).collect();
        let params = KernelParams::new(1.0, 5.0, 0.1).unwrap();
        let model = fit_gpr_with_params(&basis, &obs, &y, params, 1e-8).unwrap();
        let field = predict_full_field(&model, &basis).unwrap();
        // farthest unobserved row in kernel distance to the observed set
        let far = (5..40)
            .max_by(|&a, &b| {
                let dist = |i: usize| {
                    (0..5)
                        .map(|j| {
                            (0..3)
                                .map(|c| (basis.modes()[(i, c)] - basis.modes()[(j, c)]).powi(2))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                };
                dist(a).total_cmp(&dist(b))
            })
            .unwrap();
        for i in 0..5 {
            assert!(field.variance[i] <= field.variance[far]);
        }
        assert!(field.conditioning_ok());
    }

    #[test]
    fn rank_zero_basis_returns_mean() {
        let snaps = DMatrix::from_fn(10, 3, |i, _| i as f64);
        let basis = build_pod_from_matrix(&snaps, RankRule::Energy(0.999)).unwrap();
        assert_eq!(basis.rank(), 0);
        let obs = nearest_neighbor_map(&line_grid(10), &line_grid(10)[..2]).unwrap();
        let model = fit_gpr(&basis, &obs, &[0.0, 1.0], &GprSettings::default()).unwrap();
        let field = predict_full_field(&model, &basis).unwrap();
        for (i, m) in field.mean.iter().enumerate() {
            assert!((m - i as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_measurements_rejected() {
        let dense = random_dense(4, 10, 3);
        let pod = GappyPod::new(&dense, GappyConfig::default()).unwrap();
        assert!(matches!(pod.fuse(&[], &[]), Err(Error::EmptyMeasurements)));
    }

    #[test]
    fn csv_and_json_outputs() {
        let dense = random_dense(5, 12, 4);
        let pod = GappyPod::new(&dense, GappyConfig::default()).unwrap();
        let r = pod
            .fuse(&dense.grid()[..4], &dense.snapshot(1)[..4])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("fused.csv");
        write_fused_csv(dense.grid(), &r.field, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("x,y,z,cp_mean,cp_var\n"));
        assert_eq!(text.lines().count(), 13);
        let json = dir.path().join("diag.json");
        write_diagnostics_json(&pod.diagnostics(&r), &json).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["rank"], pod.basis().rank());
        assert_eq!(v["sensor_distances"].as_array().unwrap().len(), 4);
    }
}
