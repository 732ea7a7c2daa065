//! `aerofuse` command-line front-end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Every successful
//! run appends a provenance line to `<out>/runs.jsonl`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aerofuse::data::{
    read_dense_csv, read_sparse_csv, write_dense_csv, write_sparse_csv, FieldSample,
};
use aerofuse::gappy::{write_diagnostics_json, write_fused_csv, GappyConfig, GappyPod, RankRule};
use aerofuse::harness::{
    holdout_sections, pretrain, run_experiment, summary_table, write_outcome, ExperimentConfig,
    PretrainSettings,
};
use aerofuse::hyperopt::{
    finetune_config_at, optimize, pretraining_objective, write_trial_log, HyperoptConfig,
    SearchSpace,
};
use aerofuse::mlp::{load_checkpoint, save_checkpoint, TrainConfig};
use aerofuse::synth::{formula_constants, CaseConfig, SyntheticCase};
use aerofuse::transfer::{
    finetune, predict_field, write_prediction_csv, ConditionPrediction, FinetuneConfig, Strategy,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DEFAULT_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(
    name = "aerofuse",
    version,
    about = "Fuse dense simulation fields with sparse sensor data"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic wing case (rigid, deformed and sensor CSVs).
    GenCase {
        #[command(flatten)]
        common: Common,
        /// Gaussian noise standard deviation added to sensor readings.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Pre-train a network on a dense CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a checkpoint on a sparse CSV.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mp")]
        strategy: StrategyArg,
        /// Section ids held out from fine-tuning and scored afterwards.
        #[arg(long, value_delimiter = ',')]
        sections: Vec<u32>,
    },
    /// Predict dense fields at the grid and conditions of a dense CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Gappy POD reconstruction of every condition in a sparse CSV.
    Gpod {
        #[command(flatten)]
        common: Common,
        /// Dense snapshot CSV for the POD basis.
        #[arg(long)]
        dense: PathBuf,
        /// Sparse sensor CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "energy")]
        rank: Option<usize>,
        #[arg(long)]
        energy: Option<f64>,
        /// Noise variance of the mode-space regression.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Bayesian hyperparameter search.
    Hyperopt {
        #[command(flatten)]
        common: Common,
        /// Search-space JSON; defaults to the stage's built-in space.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pretrain")]
        stage: Stage,
        /// Dense CSV (pretrain) or sparse CSV (finetune).
        #[arg(long)]
        data: PathBuf,
        /// Base network for the finetune stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        initial: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the full method comparison on the synthetic case.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Reuse a pre-trained base network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StrategyArg {
    Sp,
    Mp,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum Stage {
    Pretrain,
    Finetune,
}

/// Hyperopt job file: search settings plus the training settings each
/// trial starts from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct HyperoptJob {
    search: HyperoptConfig,
    train: TrainConfig,
    finetune: FinetuneConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input not found: {}", path.display());
    }
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Appends the resolved config, seed and output hashes to `runs.jsonl`.
fn record_run<T: Serialize>(
    out: &Path,
    command: &str,
    config: &T,
    seed: u64,
    outputs: &[PathBuf],
) -> Result<()> {
    let mut hashes = serde_json::Map::new();
    for path in outputs {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let name = path.strip_prefix(out).unwrap_or(path).display().to_string();
        hashes.insert(name, hex::encode(Sha256::digest(&bytes)).into());
    }
    let record = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config,
        "outputs": hashes,
    });
    use std::io::Write;
    let log = out.join("runs.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .with_context(|| format!("opening {}", log.display()))?;
    writeln!(f, "{}", serde_json::to_string(&record)?)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCase { common, noise } => {
            let mut config: CaseConfig = load_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.sensors.seed = seed;
            }
            if let Some(sd) = noise {
                config.sensors.noise_sd = sd;
            }
            let seed = config.sensors.seed;
            prepare_out(&common.out)?;
            let case = SyntheticCase::generate(&config)?;
            let files = [
                common.out.join("rigid.csv"),
                common.out.join("deformed.csv"),
                common.out.join("sensors.csv"),
                common.out.join("case_config.json"),
            ];
            write_dense_csv(&case.rigid, &files[0])?;
            write_dense_csv(&case.deformed, &files[1])?;
            write_sparse_csv(&case.sensors, &files[2])?;
            write_json(
                &serde_json::json!({ "config": config, "formula": formula_constants() }),
                &files[3],
            )?;
            record_run(&common.out, "gen-case", &config, seed, &files)
        }
        Command::Pretrain { common, data } => {
            require(&data)?;
            let mut settings: PretrainSettings = load_config(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(settings.train.rng_seed);
            settings.train.rng_seed = seed;
            prepare_out(&common.out)?;
            let dense = read_dense_csv(&data)?;
            let samples: Vec<FieldSample> = dense.samples().collect();
            let model = pretrain(&samples, &settings, seed)?;
            let path = common.out.join("checkpoint.json");
            save_checkpoint(&model, &path)?;
            log::info!(
                "{} parameters, {} trainable",
                model.num_parameters(),
                model.num_trainable_parameters()
            );
            record_run(&common.out, "pretrain", &settings, seed, &[path])
        }
        Command::Finetune {
            common,
            checkpoint,
            data,
            strategy,
            sections,
        } => {
            require(&checkpoint)?;
            require(&data)?;
            let mut config: FinetuneConfig = load_config(common.config.as_deref())?;
            config.strategy = match strategy {
                StrategyArg::Sp => Strategy::SinglePoint,
                StrategyArg::Mp => Strategy::MultiPoint,
            };
            let seed = common.seed.unwrap_or(config.rng_seed);
            config.rng_seed = seed;
            prepare_out(&common.out)?;
            let base = load_checkpoint(&checkpoint)?;
            let sparse = read_sparse_csv(&data)?;
            let (train_set, held_out) = holdout_sections(&sparse, &sections)?;
            let (model, history) = finetune(&base, &train_set, &config)?;
            let path = common.out.join("finetuned.json");
            save_checkpoint(&model, &path)?;
            let mut outputs = vec![path];
            if !held_out.is_empty() {
                let mut sq = 0.0;
                let mut n = 0usize;
                for s in held_out.samples() {
                    sq += (model.predict(&s.features()) - s.cp).powi(2);
                    n += 1;
                }
                let path = common.out.join("holdout.json");
                write_json(
                    &serde_json::json!({ "sections": sections, "sensors": n, "rmse": (sq / n as f64).sqrt() }),
                    &path,
                )?;
                outputs.push(path);
            }
            let path = common.out.join("finetune_history.json");
            write_json(&history, &path)?;
            outputs.push(path);
            record_run(&common.out, "finetune", &config, seed, &outputs)
        }
        Command::Predict {
            common,
            checkpoint,
            data,
        } => {
            require(&checkpoint)?;
            require(&data)?;
            prepare_out(&common.out)?;
            let model = load_checkpoint(&checkpoint)?;
            let dense = read_dense_csv(&data)?;
            let mut outputs = Vec::new();
            for (k, c) in dense.conditions().iter().enumerate() {
                let prediction = ConditionPrediction {
                    condition: *c,
                    cp: predict_field(&model, c, dense.grid()),
                };
                let path = common.out.join(format!("prediction_{k:03}.csv"));
                write_prediction_csv(&prediction, dense.grid(), &path)?;
                outputs.push(path);
            }
            let config = serde_json::json!({ "checkpoint": checkpoint, "data": data });
            record_run(
                &common.out,
                "predict",
                &config,
                common.seed.unwrap_or(DEFAULT_SEED),
                &outputs,
            )
        }
        Command::Gpod {
            common,
            dense,
            data,
            rank,
            energy,
            noise,
        } => {
            require(&dense)?;
            require(&data)?;
            let mut config: GappyConfig = load_config(common.config.as_deref())?;
            if let Some(r) = rank {
                config.rank_rule = RankRule::Explicit(r);
            }
            if let Some(f) = energy {
                config.rank_rule = RankRule::Energy(f);
            }
            if let Some(v) = noise {
                config.gpr.noise = v;
            }
            prepare_out(&common.out)?;
            let snapshots = read_dense_csv(&dense)?;
            let sparse = read_sparse_csv(&data)?;
            let pod = GappyPod::new(&snapshots, config)?;
            let mut outputs = Vec::new();
            for k in 0..sparse.num_conditions() {
                let result = pod.fuse_condition(&sparse, k)?;
                let fused = common.out.join(format!("fused_{k:03}.csv"));
                write_fused_csv(pod.grid(), &result.field, &fused)?;
                let diag = common.out.join(format!("diagnostics_{k:03}.json"));
                write_diagnostics_json(&pod.diagnostics(&result), &diag)?;
                outputs.extend([fused, diag]);
            }
            record_run(
                &common.out,
                "gpod",
                &config,
                common.seed.unwrap_or(DEFAULT_SEED),
                &outputs,
            )
        }
        Command::Hyperopt {
            common,
            space,
            stage,
            data,
            checkpoint,
            initial,
            trials,
        } => {
            require(&data)?;
            if let Some(p) = &checkpoint {
                require(p)?;
            }
            let mut job: HyperoptJob = load_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                job.search.seed = seed;
            }
            if let Some(n) = initial {
                job.search.n_initial = n;
            }
            if let Some(n) = trials {
                job.search.n_trials = n;
            }
            let seed = job.search.seed;
            prepare_out(&common.out)?;
            let result = match stage {
                Stage::Pretrain => {
                    let space = match &space {
                        Some(p) => read_json(p)?,
                        None => SearchSpace::pretraining(),
                    };
                    let dense = read_dense_csv(&data)?;
                    let samples: Vec<FieldSample> = dense.samples().collect();
                    let train = TrainConfig {
                        rng_seed: seed,
                        ..job.train.clone()
                    };
                    optimize(
                        &space,
                        |p| pretraining_objective(&space, p, &samples, &train, seed),
                        &job.search,
                    )?
                }
                Stage::Finetune => {
                    let Some(ck) = &checkpoint else {
                        bail!("the finetune stage needs --checkpoint");
                    };
                    let base = load_checkpoint(ck)?;
                    let space = match &space {
                        Some(p) => read_json(p)?,
                        None => SearchSpace::finetuning(base.num_layers()),
                    };
                    let sparse = read_sparse_csv(&data)?;
                    let objective = |p: &[f64]| -> aerofuse::Result<f64> {
                        let cfg = FinetuneConfig {
                            rng_seed: seed,
                            ..finetune_config_at(&space, p, &job.finetune)
                        };
                        let (_, history) = finetune(&base, &sparse, &cfg)?;
                        history
                            .validation_loss
                            .iter()
                            .copied()
                            .reduce(f64::min)
                            .ok_or(aerofuse::Error::EmptyDataset)
                    };
                    optimize(&space, objective, &job.search)?
                }
            };
            let log_path = common.out.join("trials.jsonl");
            write_trial_log(&result.trials, &log_path)?;
            let best_path = common.out.join("best.json");
            write_json(
                &serde_json::json!({ "point": result.best_point, "objective": result.best_objective }),
                &best_path,
            )?;
            println!(
                "best objective {:.6e} at {:?}",
                result.best_objective, result.best_point
            );
            let config = serde_json::json!({ "stage": stage, "job": job });
            record_run(
                &common.out,
                "hyperopt",
                &config,
                seed,
                &[log_path, best_path],
            )
        }
        Command::Experiment { common, checkpoint } => {
            let mut config: ExperimentConfig = load_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            if checkpoint.is_some() {
                config.base_checkpoint = checkpoint;
            }
            if let Some(p) = &config.base_checkpoint {
                require(p)?;
            }
            prepare_out(&common.out)?;
            let outcome = run_experiment(&config)?;
            let outputs = write_outcome(&outcome, &common.out)?;
            print!("{}", summary_table(&outcome.report));
            let hashed: Vec<PathBuf> = outputs
                .into_iter()
                .filter(|p| !p.ends_with("timings.json"))
                .collect();
            record_run(&common.out, "experiment", &config, config.seed, &hashed)
        }
    }
}
