//! End-to-end comparison on the synthetic wing: pre-train on rigid data,
//! fuse deformed sensor readings with each method, score against the
//! deformed truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    area_weighted_rmse, section_cut_by, write_dense_csv, DenseDataset, FieldSample, FlowCondition,
    MinMaxScaler, PooledRmse, SparseDataset, SurfacePoint,
};
use crate::error::{Error, Result};
use crate::gappy::{GappyConfig, GappyPod};
use crate::mlp::{load_checkpoint, save_checkpoint, train, MlpModel, TrainConfig};
use crate::numeric::total_variation;
use crate::synth::{CaseConfig, SyntheticCase};
use crate::transfer::{finetune, predict_field, FinetuneConfig, Strategy, PREDICTION_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pre-trained network, no fusion.
    Base,
    /// Single-point fine-tuning.
    Sp,
    /// Multi-point fine-tuning.
    Mp,
    GappyPod,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Sp, Method::Mp, Method::GappyPod];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Sp => "sp",
            Method::Mp => "mp",
            Method::GappyPod => "gappy_pod",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub train: TrainConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_hidden_layers: 4,
            train: TrainConfig {
                batch_size: 256,
                max_epochs: 300,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub case: CaseConfig,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneConfig,
    pub gappy: GappyConfig,
    /// Every `finetune_stride`-th DoE condition feeds multi-point
    /// fine-tuning; the rest are test conditions.
    pub finetune_stride: usize,
    /// Explicit DoE indices, overriding the stride split.
    pub finetune_indices: Option<Vec<usize>>,
    pub test_indices: Option<Vec<usize>>,
    pub methods: Vec<Method>,
    pub cut_spans: Vec<f64>,
    /// Mach number from which a test condition counts as transonic.
    pub transonic_mach: f64,
    /// Test conditions nearest to these (Mach, alpha) pairs get section cuts.
    pub illustration_conditions: Vec<(f64, f64)>,
    /// Reuse this pre-trained network instead of training one.
    pub base_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case: CaseConfig::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneConfig::default(),
            gappy: GappyConfig::default(),
            finetune_stride: 4,
            finetune_indices: None,
            test_indices: None,
            methods: Method::ALL.to_vec(),
            cut_spans: vec![0.35, 0.9],
            transonic_mach: 0.8,
            illustration_conditions: vec![(0.63, 2.7), (0.88, 6.0)],
            base_checkpoint: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Fine-tune and test DoE indices for `n` conditions.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.finetune_stride == 0 {
            return Err(Error::InvalidInput(
                "finetune_stride must be positive".into(),
            ));
        }
        let ft = match &self.finetune_indices {
            Some(v) => v.clone(),
            None => (0..n).step_by(self.finetune_stride).collect(),
        };
        let test = match &self.test_indices {
            Some(v) => v.clone(),
            None => (0..n).filter(|k| !ft.contains(k)).collect(),
        };
        if let Some(&bad) = ft.iter().chain(&test).find(|&&k| k >= n) {
            return Err(Error::InvalidInput(format!(
                "condition index {bad} out of range for {n} conditions"
            )));
        }
        if let Some(k) = ft.iter().find(|k| test.contains(k)) {
            return Err(Error::InvalidInput(format!(
                "condition {k} is both a fine-tuning and a test condition"
            )));
        }
        if test.is_empty() {
            return Err(Error::InvalidInput("no test conditions".into()));
        }
        Ok((ft, test))
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods selected".into()));
        }
        if self.methods.contains(&Method::Mp)
            && self.finetune_indices.as_ref().is_some_and(|v| v.is_empty())
        {
            return Err(Error::InvalidInput(
                "multi-point fine-tuning needs fine-tuning conditions".into(),
            ));
        }
        if self.cut_spans.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput("cut spans must lie in [0, 1]".into()));
        }
        if let Some(path) = &self.base_checkpoint {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "base checkpoint not found"),
                ));
            }
        }
        self.pretrain.train.validate()?;
        self.finetune.train_config(usize::MAX).validate()
    }
}

/// Per-condition scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub index: usize,
    pub condition: FlowCondition,
    pub transonic: bool,
    pub rmse: BTreeMap<Method, f64>,
}

/// Upper-surface chordwise cut of every method and the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionCutTable {
    pub condition: FlowCondition,
    pub span_fraction: f64,
    pub x: Vec<f64>,
    pub truth: Vec<f64>,
    pub methods: BTreeMap<Method, Vec<f64>>,
    pub truth_total_variation: f64,
    pub total_variation: BTreeMap<Method, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub methods: Vec<Method>,
    pub finetune_conditions: Vec<FlowCondition>,
    pub conditions: Vec<ConditionResult>,
    /// Pooled area-weighted RMSE over all test conditions.
    pub aggregate: BTreeMap<Method, f64>,
    /// Same, over transonic test conditions only.
    pub aggregate_transonic: BTreeMap<Method, f64>,
    pub cuts: Vec<SectionCutTable>,
}

/// Everything a run produces; the report is the deterministic part.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ComparisonReport,
    /// Dense predictions per method, one field per test condition.
    pub predictions: BTreeMap<Method, Vec<Vec<f64>>>,
    pub truth: DenseDataset,
    pub base_model: MlpModel,
    pub mp_model: Option<MlpModel>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

/// Splits a sparse dataset by section id into (kept, held out).
pub fn holdout_sections(
    sparse: &SparseDataset,
    held_out: &[u32],
) -> Result<(SparseDataset, SparseDataset)> {
    if let Some(&bad) = held_out
        .iter()
        .find(|id| !sparse.section_ids().contains(id))
    {
        return Err(Error::UnknownSection(bad));
    }
    let kept = sparse.filter_sensors(|_, id| !held_out.contains(&id));
    let out = sparse.filter_sensors(|_, id| held_out.contains(&id));
    Ok((kept, out))
}

/// Pre-trains a network on dense samples.
pub fn pretrain(
    samples: &[FieldSample],
    settings: &PretrainSettings,
    seed: u64,
) -> Result<MlpModel> {
    let scaler = MinMaxScaler::fit_samples(samples)?;
    let model = MlpModel::new(
        settings.hidden_dim,
        settings.num_hidden_layers,
        scaler,
        seed,
    )?;
    let config = TrainConfig {
        rng_seed: seed,
        ..settings.train.clone()
    };
    let (model, history) = train(&model, samples, &config)?;
    log::info!(
        "pre-training finished after {} epochs (best {})",
        history.train_loss.len(),
        history.best_epoch
    );
    Ok(model)
}

/// Runs the full comparison on the synthetic case described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut timings = BTreeMap::new();
    let clock = Instant::now();
    let case = SyntheticCase::generate(&config.case)?;
    let (ft_idx, test_idx) = config.split(case.conditions.len())?;
    timings.insert("generate".to_string(), clock.elapsed().as_secs_f64());

    let grid = case.deformed.grid().to_vec();
    let weights = case.deformed.area_weights();
    let wants = |m: Method| config.methods.contains(&m);
    let needs_net = wants(Method::Base) || wants(Method::Sp) || wants(Method::Mp);

    let clock = Instant::now();
    let base_model = match (&config.base_checkpoint, needs_net) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, true) => {
            let samples: Vec<FieldSample> = case.rigid.samples().collect();
            pretrain(&samples, &config.pretrain, config.seed)?
        }
        (None, false) => MlpModel::new(1, 1, MinMaxScaler::unit(), config.seed)?,
    };
    timings.insert("pretrain".to_string(), clock.elapsed().as_secs_f64());

    let ft_config = FinetuneConfig {
        rng_seed: config.seed,
        ..config.finetune.clone()
    };
    let test_conditions: Vec<FlowCondition> =
        test_idx.iter().map(|&k| case.conditions[k]).collect();
    let mut predictions: BTreeMap<Method, Vec<Vec<f64>>> = BTreeMap::new();

    if wants(Method::Base) {
        let clock = Instant::now();
        let fields = test_conditions
            .iter()
            .map(|c| predict_field(&base_model, c, &grid))
            .collect();
        predictions.insert(Method::Base, fields);
        timings.insert("base".to_string(), clock.elapsed().as_secs_f64());
    }

    let mut mp_model = None;
    if wants(Method::Mp) {
        let clock = Instant::now();
        let measurements = case.sensors.select_conditions(&ft_idx);
        let cfg = FinetuneConfig {
            strategy: Strategy::MultiPoint,
            ..ft_config.clone()
        };
        let (model, _) = finetune(&base_model, &measurements, &cfg)?;
        let fields = test_conditions
            .iter()
            .map(|c| predict_field(&model, c, &grid))
            .collect();
        predictions.insert(Method::Mp, fields);
        mp_model = Some(model);
        timings.insert("mp".to_string(), clock.elapsed().as_secs_f64());
    }

    if wants(Method::Sp) {
        let clock = Instant::now();
        let cfg = FinetuneConfig {
            strategy: Strategy::SinglePoint,
            ..ft_config.clone()
        };
        let fields = test_idx
            .iter()
            .zip(&test_conditions)
            .map(|(&k, c)| {
                let (model, _) =
                    finetune(&base_model, &case.sensors.select_conditions(&[k]), &cfg)?;
                Ok(predict_field(&model, c, &grid))
            })
            .collect::<Result<Vec<_>>>()?;
        predictions.insert(Method::Sp, fields);
        timings.insert("sp".to_string(), clock.elapsed().as_secs_f64());
    }

    if wants(Method::GappyPod) {
        let clock = Instant::now();
        let pod = GappyPod::new(&case.rigid, config.gappy)?;
        let fields = test_idx
            .iter()
            .map(|&k| Ok(pod.fuse_condition(&case.sensors, k)?.field.mean))
            .collect::<Result<Vec<_>>>()?;
        predictions.insert(Method::GappyPod, fields);
        timings.insert("gappy_pod".to_string(), clock.elapsed().as_secs_f64());
    }

    let methods: Vec<Method> = predictions.keys().copied().collect();
    let mut conditions = Vec::with_capacity(test_idx.len());
    let mut pooled: BTreeMap<Method, (PooledRmse, PooledRmse)> = BTreeMap::new();
    for (t, (&k, c)) in test_idx.iter().zip(&test_conditions).enumerate() {
        let truth = case.deformed.snapshot(k);
        let transonic = c.mach >= config.transonic_mach;
        let mut rmse = BTreeMap::new();
        for (&m, fields) in &predictions {
            rmse.insert(m, area_weighted_rmse(&fields[t], truth, &weights)?);
            let (all, trans) = pooled.entry(m).or_default();
            all.add(&fields[t], truth, &weights)?;
            if transonic {
                trans.add(&fields[t], truth, &weights)?;
            }
        }
        conditions.push(ConditionResult {
            index: k,
            condition: *c,
            transonic,
            rmse,
        });
    }
    let mut aggregate = BTreeMap::new();
    let mut aggregate_transonic = BTreeMap::new();
    for (m, (all, trans)) in pooled {
        aggregate.insert(m, all.value()?);
        if let Ok(v) = trans.value() {
            aggregate_transonic.insert(m, v);
        }
    }

    let tolerance = 0.5 / (config.case.n_span.max(2) - 1) as f64;
    let mut cuts = Vec::new();
    for t in illustration_positions(&test_conditions, &config.illustration_conditions) {
        let truth = case.deformed.snapshot(test_idx[t]);
        for &span in &config.cut_spans {
            let upper = |p: &SurfacePoint| p.normal[2] > 0.0;
            let truth_cut = section_cut_by(&grid, truth, span, tolerance, upper)?;
            let mut by_method = BTreeMap::new();
            let mut tv = BTreeMap::new();
            for (&m, fields) in &predictions {
                let values: Vec<f64> = section_cut_by(&grid, &fields[t], span, tolerance, upper)?
                    .into_iter()
                    .map(|(_, v)| v)
                    .collect();
                tv.insert(m, total_variation(&values));
                by_method.insert(m, values);
            }
            let truth_values: Vec<f64> = truth_cut.iter().map(|&(_, v)| v).collect();
            cuts.push(SectionCutTable {
                condition: test_conditions[t],
                span_fraction: span,
                x: truth_cut.iter().map(|&(x, _)| x).collect(),
                truth_total_variation: total_variation(&truth_values),
                truth: truth_values,
                methods: by_method,
                total_variation: tv,
            });
        }
    }

    Ok(ExperimentOutcome {
        report: ComparisonReport {
            methods,
            finetune_conditions: ft_idx.iter().map(|&k| case.conditions[k]).collect(),
            conditions,
            aggregate,
            aggregate_transonic,
            cuts,
        },
        predictions,
        truth: case.deformed.select(&test_idx),
        base_model,
        mp_model,
        timings,
    })
}

/// Position in `conditions` nearest to each target (Mach, alpha), without
/// repeats, in target order.
fn illustration_positions(conditions: &[FlowCondition], targets: &[(f64, f64)]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &(m, a) in targets {
        let nearest = (0..conditions.len()).min_by(|&i, &j| {
            let d = |k: usize| {
                let c = &conditions[k];
                ((c.mach - m) / 0.4).powi(2) + ((c.alpha - a) / 10.0).powi(2)
            };
            d(i).total_cmp(&d(j))
        });
        if let Some(k) = nearest {
            if !out.contains(&k) {
                out.push(k);
            }
        }
    }
    out
}

/// Fixed-width table of per-method RMSE.
pub fn summary_table(report: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<26}", "test set");
    for m in &report.methods {
        let _ = write!(s, "{:>12}", m.name());
    }
    s.push('\n');
    let rows = [
        ("all test conditions", &report.aggregate),
        ("transonic", &report.aggregate_transonic),
    ];
    for (label, values) in rows {
        let _ = write!(s, "{label:<26}");
        for m in &report.methods {
            match values.get(m) {
                Some(v) => {
                    let _ = write!(s, "{v:>12.4e}");
                }
                None => {
                    let _ = write!(s, "{:>12}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `timings.json`, `truth.csv`, one prediction CSV
/// per method, one CSV per section cut, and the base checkpoint.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put(
        "report.json",
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )?;
    put(
        "timings.json",
        serde_json::to_string_pretty(&outcome.timings)? + "\n",
    )?;

    let grid = outcome.truth.grid();
    for (m, fields) in &outcome.predictions {
        let mut text = String::with_capacity(fields.len() * grid.len() * 80);
        text.push_str(PREDICTION_HEADER);
        text.push('\n');
        for (c, field) in outcome.truth.conditions().iter().zip(fields) {
            for (p, cp) in grid.iter().zip(field) {
                let [x, y, z] = p.position;
                let _ = writeln!(text, "{},{},{x},{y},{z},{cp}", c.mach, c.alpha);
            }
        }
        put(&format!("predictions_{}.csv", m.name()), text)?;
    }
    for (i, cut) in outcome.report.cuts.iter().enumerate() {
        let mut text = String::from("x,truth");
        for m in cut.methods.keys() {
            let _ = write!(text, ",{}", m.name());
        }
        text.push('\n');
        for (j, x) in cut.x.iter().enumerate() {
            let _ = write!(text, "{x},{}", cut.truth[j]);
            for v in cut.methods.values() {
                let _ = write!(text, ",{}", v[j]);
            }
            text.push('\n');
        }
        put(&format!("cut_{i}.csv"), text)?;
    }

    let truth = dir.join("truth.csv");
    write_dense_csv(&outcome.truth, &truth)?;
    written.push(truth);
    let checkpoint = dir.join("base_checkpoint.json");
    save_checkpoint(&outcome.base_model, &checkpoint)?;
    written.push(checkpoint);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{DoeConfig, SensorLayout};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            case: CaseConfig {
                n_chord: 8,
                n_span: 5,
                doe: DoeConfig {
                    num_samples: 8,
                    ..DoeConfig::default()
                },
                sensors: SensorLayout {
                    n_sections: 3,
                    n_chord_per_section: 4,
                    ..SensorLayout::default()
                },
                ..CaseConfig::default()
            },
            pretrain: PretrainSettings {
                hidden_dim: 8,
                num_hidden_layers: 2,
                train: TrainConfig {
                    max_epochs: 5,
                    batch_size: 64,
                    ..TrainConfig::default()
                },
            },
            finetune: FinetuneConfig {
                fixed_epochs: 5,
                max_epochs: 5,
                ..FinetuneConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn base_only_has_no_fine_tuned_columns() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Base],
            ..tiny()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.report.methods, vec![Method::Base]);
        assert!(out.report.conditions.iter().all(|c| c.rmse.len() == 1));
        assert!(out.mp_model.is_none());
    }

    #[test]
    fn aggregate_is_pooled() {
        let out = run_experiment(&tiny()).unwrap();
        let w = out.truth.area_weights();
        for (m, fields) in &out.predictions {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, f) in fields.iter().enumerate() {
                for ((p, t), wi) in f.iter().zip(out.truth.snapshot(k)).zip(&w) {
                    num += wi * (p - t).powi(2);
                    den += wi;
                }
            }
            assert!(((num / den).sqrt() - out.report.aggregate[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_validated() {
        let cfg = ExperimentConfig {
            finetune_indices: Some(vec![0, 1]),
            test_indices: Some(vec![1, 2]),
            ..tiny()
        };
        assert!(cfg.split(8).is_err());
        assert!(run_experiment(&cfg).is_err());
        let (ft, test) = tiny().split(8).unwrap();
        assert_eq!(ft, vec![0, 4]);
        assert_eq!(test, vec![1, 2, 3, 5, 6, 7]);
    }

    #[test]
    fn missing_checkpoint_fails_fast() {
        let cfg = ExperimentConfig {
            base_checkpoint: Some(PathBuf::from("/nonexistent/base.json")),
            ..tiny()
        };
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/base.json"), "{err}");
    }

    #[test]
    fn holdout_partitions_by_section() {
        let case = SyntheticCase::generate(&CaseConfig::default()).unwrap();
        let (kept, out) = holdout_sections(&case.sensors, &[3, 9]).unwrap();
        assert_eq!(out.num_sensors(), 2 * 28);
        assert!(out.section_ids().iter().all(|&id| id == 3 || id == 9));
        assert_eq!(kept.num_sensors() + out.num_sensors(), 252);
        let (all, none) = holdout_sections(&case.sensors, &[]).unwrap();
        assert_eq!(all, case.sensors);
        assert!(none.is_empty());
        assert!(matches!(
            holdout_sections(&case.sensors, &[10]),
            Err(Error::UnknownSection(10))
        ));
        let (empty, _) = holdout_sections(&case.sensors, &(1..=9).collect::<Vec<_>>()).unwrap();
        assert!(matches!(
            finetune(
                &MlpModel::new(4, 1, MinMaxScaler::unit(), 0).unwrap(),
                &empty,
                &FinetuneConfig::default()
            ),
            Err(Error::EmptyMeasurements)
        ));
    }

    #[test]
    fn outputs_reproduce_report() {
        let out = run_experiment(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outcome(&out, dir.path()).unwrap();
        assert!(files.iter().any(|p| p.ends_with("predictions_mp.csv")));
        let text = std::fs::read_to_string(dir.path().join("predictions_gappy_pod.csv")).unwrap();
        let cp: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let n = out.truth.num_points();
        let truth = crate::data::read_dense_csv(&dir.path().join("truth.csv")).unwrap();
        for (t, c) in out.report.conditions.iter().enumerate() {
            let r = area_weighted_rmse(
                &cp[t * n..(t + 1) * n],
                truth.snapshot(t),
                &truth.area_weights(),
            )
            .unwrap();
            assert!((r - c.rmse[&Method::GappyPod]).abs() < 1e-12);
        }
        assert!(summary_table(&out.report).contains("gappy_pod"));
    }
}
