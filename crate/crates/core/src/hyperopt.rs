//! Bayesian hyperparameter search: a Latin-hypercube start followed by
//! expected-improvement steps under a Gaussian-process surrogate.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::FieldSample;
use crate::error::{Error, Result};
use crate::gappy::{GprModel, GprSettings};
use crate::mlp::{train, MlpModel, TrainConfig};
use crate::optim::{nelder_mead, NelderMead};
use crate::transfer::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Linear { lower: f64, upper: f64 },
    Log10 { lower: f64, upper: f64 },
    Integer { lower: i64, upper: i64 },
    Choice { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl ParamSpec {
    fn validate(&self) -> Result<()> {
        let ok = match &self.kind {
            ParamKind::Linear { lower, upper } => {
                lower.is_finite() && upper.is_finite() && lower < upper
            }
            ParamKind::Log10 { lower, upper } => *lower > 0.0 && upper.is_finite() && lower < upper,
            ParamKind::Integer { lower, upper } => lower <= upper,
            ParamKind::Choice { values } => {
                !values.is_empty() && values.iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid bounds for parameter {:?}",
                self.name
            )))
        }
    }

    /// Maps a unit-interval coordinate to a parameter value (rounded for
    /// discrete kinds).
    pub fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match &self.kind {
            ParamKind::Linear { lower, upper } => lower + u * (upper - lower),
            ParamKind::Log10 { lower, upper } => {
                let (a, b) = (lower.log10(), upper.log10());
                10f64.powf(a + u * (b - a)).clamp(*lower, *upper)
            }
            ParamKind::Integer { lower, upper } => {
                let span = (upper - lower + 1) as f64;
                (*lower + ((u * span).floor() as i64).min(upper - lower)) as f64
            }
            ParamKind::Choice { values } => {
                let k = ((u * values.len() as f64).floor() as usize).min(values.len() - 1);
                values[k]
            }
        }
    }

    /// Inverse of [`ParamSpec::from_unit`]; discrete values map to the
    /// centre of their cell.
    pub fn to_unit(&self, v: f64) -> f64 {
        match &self.kind {
            ParamKind::Linear { lower, upper } => (v - lower) / (upper - lower),
            ParamKind::Log10 { lower, upper } => {
                (v.log10() - lower.log10()) / (upper.log10() - lower.log10())
            }
            ParamKind::Integer { lower, upper } => {
                ((v - *lower as f64) + 0.5) / ((upper - lower + 1) as f64)
            }
            ParamKind::Choice { values } => {
                let k = values.iter().position(|&c| c == v).unwrap_or(0);
                (k as f64 + 0.5) / values.len() as f64
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match &self.kind {
            ParamKind::Linear { lower, upper } | ParamKind::Log10 { lower, upper } => {
                (*lower..=*upper).contains(&v)
            }
            ParamKind::Integer { lower, upper } => {
                v.fract() == 0.0 && (*lower as f64..=*upper as f64).contains(&v)
            }
            ParamKind::Choice { values } => values.contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    /// Learning rate, hidden width, depth and decay for pre-training.
    pub fn pretraining() -> Self {
        Self {
            params: vec![
                spec(
                    "initial_lr",
                    ParamKind::Log10 {
                        lower: 1e-5,
                        upper: 1e-2,
                    },
                ),
                spec(
                    "hidden_dim",
                    ParamKind::Choice {
                        values: vec![16.0, 32.0, 64.0, 128.0],
                    },
                ),
                spec(
                    "num_hidden_layers",
                    ParamKind::Integer {
                        lower: 2,
                        upper: 12,
                    },
                ),
                spec(
                    "decay_factor",
                    ParamKind::Linear {
                        lower: 0.98,
                        upper: 1.0,
                    },
                ),
            ],
        }
    }

    /// Learning rate, decay, frozen layer count and batch size for
    /// fine-tuning a network with `num_layers` weight layers.
    pub fn finetuning(num_layers: usize) -> Self {
        Self {
            params: vec![
                spec(
                    "initial_lr",
                    ParamKind::Log10 {
                        lower: 1e-5,
                        upper: 1e-2,
                    },
                ),
                spec(
                    "decay_factor",
                    ParamKind::Linear {
                        lower: 0.98,
                        upper: 1.0,
                    },
                ),
                spec(
                    "frozen_prefix",
                    ParamKind::Integer {
                        lower: 0,
                        upper: num_layers as i64,
                    },
                ),
                spec(
                    "batch_size",
                    ParamKind::Choice {
                        values: vec![16.0, 32.0, 64.0, 128.0],
                    },
                ),
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::InvalidInput("search space has no parameters".into()));
        }
        self.params.iter().try_for_each(ParamSpec::validate)
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(u)
            .map(|(p, &x)| p.from_unit(x))
            .collect()
    }

    pub fn to_unit(&self, v: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(v)
            .map(|(p, &x)| p.to_unit(x))
            .collect()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim() && self.params.iter().zip(v).all(|(p, &x)| p.contains(x))
    }

    /// Value of the named parameter in `point`, if present.
    pub fn get(&self, point: &[f64], name: &str) -> Option<f64> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| point[i])
    }
}

fn spec(name: &str, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        kind,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub point: Vec<f64>,
    /// `+inf` for diverged trials (written as `null` in the log).
    #[serde(with = "infinite_as_null")]
    pub objective: f64,
    pub wall_time_s: f64,
    pub status: TrialStatus,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperoptConfig {
    pub n_initial: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// Random candidates scored per acquisition step.
    pub candidates: usize,
    /// Exploration margin of expected improvement.
    pub xi: f64,
    pub surrogate_starts: usize,
}

impl Default for HyperoptConfig {
    fn default() -> Self {
        Self {
            n_initial: 36,
            n_trials: 100,
            seed: 0,
            candidates: 1024,
            xi: 0.01,
            surrogate_starts: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperoptResult {
    pub best_point: Vec<f64>,
    pub best_objective: f64,
    pub trials: Vec<TrialRecord>,
}

impl HyperoptResult {
    /// Best objective seen after each trial.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trials
            .iter()
            .map(|t| {
                best = best.min(t.objective);
                best
            })
            .collect()
    }
}

/// Seeded Latin-hypercube sample of `n` points in the unit cube.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in points.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

/// Expected improvement (for minimisation) over `best` at predictive mean
/// `mu` and standard deviation `sigma`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    let gain = best - mu - xi;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let n = Normal::standard();
    gain * n.cdf(z) + sigma * n.pdf(z)
}

/// Minimises `objective` over `space`. Objective errors and non-finite
/// values are recorded as diverged trials with objective `+inf`.
pub fn optimize(
    space: &SearchSpace,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    config: &HyperoptConfig,
) -> Result<HyperoptResult> {
    space.validate()?;
    if config.n_initial == 0 || config.n_initial > config.n_trials {
        return Err(Error::InvalidInput(format!(
            "need 1 <= n_initial <= n_trials, got {} and {}",
            config.n_initial, config.n_trials
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = space.dim();
    let initial = latin_hypercube(config.n_initial, dim, &mut rng);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(config.n_trials);

    for index in 0..config.n_trials {
        let point = match initial.get(index) {
            Some(unit) => space.from_unit(unit),
            None => {
                let unit = propose(space, &trials, config, &mut rng)?;
                space.from_unit(&unit)
            }
        };
        let start = Instant::now();
        let value = objective(&point);
        let wall_time_s = start.elapsed().as_secs_f64();
        let (objective_value, status) = match value {
            Ok(v) if v.is_finite() => (v, TrialStatus::Ok),
            Ok(v) => {
                log::warn!("trial {index} returned {v}; marking diverged");
                (f64::INFINITY, TrialStatus::Diverged)
            }
            Err(e) => {
                log::warn!("trial {index} failed: {e}");
                (f64::INFINITY, TrialStatus::Diverged)
            }
        };
        log::info!("trial {index}: {point:?} -> {objective_value}");
        trials.push(TrialRecord {
            index,
            point,
            objective: objective_value,
            wall_time_s,
            status,
        });
    }

    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .min_by(|a, b| a.objective.total_cmp(&b.objective));
    let (best_point, best_objective) = match best {
        Some(t) => (t.point.clone(), t.objective),
        None => (trials[0].point.clone(), f64::INFINITY),
    };
    Ok(HyperoptResult {
        best_point,
        best_objective,
        trials,
    })
}

/// Next point in unit coordinates: argmax of expected improvement over
/// random candidates, polished by Nelder–Mead.
fn propose(
    space: &SearchSpace,
    trials: &[TrialRecord],
    config: &HyperoptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let dim = space.dim();
    let finite: Vec<f64> = trials
        .iter()
        .map(|t| t.objective)
        .filter(|v| v.is_finite())
        .collect();
    let candidates: Vec<Vec<f64>> = (0..config.candidates)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    if finite.len() < 2 {
        return Ok(candidates[0].clone());
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let sd = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len() as f64).sqrt();
    let worst = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fill = worst + 3.0 * sd;
    let scale = if sd > 0.0 { sd } else { 1.0 };
    let y = DVector::from_iterator(
        trials.len(),
        trials.iter().map(|t| {
            (if t.objective.is_finite() {
                t.objective
            } else {
                fill
            } - mean)
                / scale
        }),
    );
    let x = DMatrix::from_fn(trials.len(), dim, |i, j| {
        space.params[j].to_unit(trials[i].point[j])
    });
    let settings = GprSettings {
        noise: 1e-6,
        starts: config.surrogate_starts,
        rbf_only: true,
        max_evals: 200,
        ..GprSettings::default()
    };
    let gp = GprModel::fit(x, y.clone(), &settings)?;
    let best = y.min();
    let score = |points: &DMatrix<f64>| -> Result<Vec<f64>> {
        let (mu, var) = gp.predict(points)?;
        Ok(mu
            .iter()
            .zip(&var)
            .map(|(m, v)| expected_improvement(*m, v.max(0.0).sqrt(), best, config.xi))
            .collect())
    };
    let cand_matrix = DMatrix::from_fn(candidates.len(), dim, |i, j| candidates[i][j]);
    let ei = score(&cand_matrix)?;
    let top = (0..ei.len())
        .max_by(|&a, &b| ei[a].total_cmp(&ei[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let polish = nelder_mead(
        &NelderMead {
            max_evals: 100,
            f_tol: 1e-12,
            initial_step: 0.05,
        },
        |u| {
            score(&DMatrix::from_row_slice(1, dim, u))
                .map(|v| -v[0])
                .unwrap_or(f64::INFINITY)
        },
        &candidates[top],
        &vec![0.0; dim],
        &vec![1.0; dim],
    );
    Ok(polish.x)
}

/// Writes one JSON object per trial.
pub fn write_trial_log(trials: &[TrialRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Pre-training objective: best validation loss of a network built from
/// `point` (see [`SearchSpace::pretraining`]) on `samples`.
pub fn pretraining_objective(
    space: &SearchSpace,
    point: &[f64],
    samples: &[FieldSample],
    base: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let hidden = space.get(point, "hidden_dim").map_or(32, |v| v as usize);
    let layers = space
        .get(point, "num_hidden_layers")
        .map_or(4, |v| v as usize);
    let config = TrainConfig {
        initial_lr: space.get(point, "initial_lr").unwrap_or(base.initial_lr),
        decay_factor: space
            .get(point, "decay_factor")
            .unwrap_or(base.decay_factor),
        use_validation_in_final_fit: false,
        ..base.clone()
    };
    if config.validation_fraction == 0.0 {
        return Err(Error::InvalidInput(
            "hyperparameter search needs a validation split".into(),
        ));
    }
    let scaler = crate::data::MinMaxScaler::fit_samples(samples)?;
    let model = MlpModel::new(hidden, layers, scaler, seed)?;
    let (_, history) = train(&model, samples, &config)?;
    history
        .validation_loss
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        })
        .ok_or(Error::EmptyDataset)
}

/// Applies a fine-tuning search point on top of `base`.
pub fn finetune_config_at(
    space: &SearchSpace,
    point: &[f64],
    base: &FinetuneConfig,
) -> FinetuneConfig {
    FinetuneConfig {
        initial_lr: space.get(point, "initial_lr").unwrap_or(base.initial_lr),
        decay_factor: space
            .get(point, "decay_factor")
            .unwrap_or(base.decay_factor),
        frozen_prefix: space
            .get(point, "frozen_prefix")
            .map_or(base.frozen_prefix, |v| v as usize),
        batch_size: space
            .get(point, "batch_size")
            .map_or(base.batch_size, |v| v as usize),
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl_space() -> SearchSpace {
        SearchSpace {
            params: vec![
                spec(
                    "a",
                    ParamKind::Linear {
                        lower: 0.0,
                        upper: 1.0,
                    },
                ),
                spec(
                    "b",
                    ParamKind::Linear {
                        lower: 0.0,
                        upper: 1.0,
                    },
                ),
            ],
        }
    }

    fn bowl(p: &[f64]) -> Result<f64> {
        Ok((p[0] - 0.3).powi(2) + (p[1] - 0.7).powi(2))
    }

    #[test]
    fn unit_mapping_round_trips() {
        let space = SearchSpace::pretraining();
        for u in [0.0, 0.1, 0.5, 0.99, 1.0] {
            let v = space.from_unit(&[u; 4]);
            assert!(space.contains(&v), "{v:?}");
            assert_eq!(space.from_unit(&space.to_unit(&v)), v);
        }
        assert_eq!(space.from_unit(&[0.0; 4])[0], 1e-5);
        assert_eq!(space.from_unit(&[1.0; 4])[1], 128.0);
        assert_eq!(space.from_unit(&[1.0; 4])[2], 12.0);
    }

    #[test]
    fn lhs_has_one_point_per_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = latin_hypercube(10, 3, &mut rng);
        for d in 0..3 {
            let mut cells: Vec<usize> = pts.iter().map(|p| (p[d] * 10.0) as usize).collect();
            cells.sort();
            assert_eq!(cells, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn expected_improvement_limits() {
        assert_eq!(expected_improvement(0.0, 0.0, 1.0, 0.0), 1.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0, 0.0), 0.0);
        // at mu = best, EI = sigma * phi(0)
        let ei = expected_improvement(1.0, 2.0, 1.0, 0.0);
        assert!((ei - 2.0 * 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn random_search_only_when_no_guided_trials() {
        let cfg = HyperoptConfig {
            n_initial: 8,
            n_trials: 8,
            ..HyperoptConfig::default()
        };
        let r = optimize(&bowl_space(), bowl, &cfg).unwrap();
        let min = r
            .trials
            .iter()
            .map(|t| t.objective)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_objective, min);
    }

    #[test]
    fn bowl_is_located_and_trace_monotone() {
        let cfg = HyperoptConfig {
            n_initial: 36,
            n_trials: 60,
            ..HyperoptConfig::default()
        };
        let r = optimize(&bowl_space(), bowl, &cfg).unwrap();
        assert!(r.best_objective < 0.01, "{}", r.best_objective);
        let trace = r.incumbent_trace();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        let again = optimize(&bowl_space(), bowl, &cfg).unwrap();
        assert_eq!(
            r.trials.iter().map(|t| &t.point).collect::<Vec<_>>(),
            again.trials.iter().map(|t| &t.point).collect::<Vec<_>>()
        );
    }

    #[test]
    fn diverged_trials_are_recorded_not_chosen() {
        let cfg = HyperoptConfig {
            n_initial: 6,
            n_trials: 10,
            ..HyperoptConfig::default()
        };
        let f = |p: &[f64]| {
            if p[0] < 0.5 {
                Err(Error::Divergence {
                    epoch: 1,
                    loss: f64::NAN,
                })
            } else {
                bowl(p)
            }
        };
        let r = optimize(&bowl_space(), f, &cfg).unwrap();
        assert!(r.trials.iter().any(|t| t.status == TrialStatus::Diverged));
        assert!(r.best_point[0] >= 0.5);
        for t in &r.trials {
            assert!(bowl_space().contains(&t.point));
        }
    }

    #[test]
    fn trial_log_writes_null_for_infinity() {
        let t = TrialRecord {
            index: 0,
            point: vec![0.1],
            objective: f64::INFINITY,
            wall_time_s: 0.0,
            status: TrialStatus::Diverged,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        write_trial_log(
            &[
                t.clone(),
                TrialRecord {
                    objective: 0.5,
                    status: TrialStatus::Ok,
                    ..t
                },
            ],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: TrialRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(text.contains("\"objective\":null"));
        assert_eq!(first.objective, f64::INFINITY);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn search_space_json_round_trip() {
        let s = SearchSpace::finetuning(5);
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"log10\""));
        assert_eq!(serde_json::from_str::<SearchSpace>(&text).unwrap(), s);
    }
}
