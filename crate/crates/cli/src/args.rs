use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dermfoundry_core::Task;
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(
    name = "derm-foundry",
    version,
    about = "Dermatology foundation-model pretraining and downstream pipelines",
    after_help = "Configuration layers, lowest first: --config file, DERMFOUNDRY_CFG_<KEY> environment \
                  variables, then --set and subcommand flags."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON object of hyperparameters; a `seed` key sets the seed.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: log::LevelFilter,
    /// Hyperparameter override; the value is read as JSON when it parses.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// `--data` accepts a file path or the word `synthetic`.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArg {
    #[arg(long, value_name = "PATH|synthetic")]
    pub data: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CheckpointArg {
    /// Checkpoint directory holding weights.bin and sidecar.json.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Masked latent alignment pretraining; writes the per-step loss CSV.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
    },
    /// Linear probe on frozen features.
    Probe {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// End-to-end fine-tuning of backbone and head.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Out-of-fold linear-probe predictions.
    Oof {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train the segmentation decoder.
    SegTrain {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict and score masks with a trained segmentation checkpoint.
    SegPredict {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Preprocess image pairs and write report.csv.
    Seqprep {
        /// Pair CSV (pair_id,t0_ref,t1_ref) or `synthetic`.
        #[arg(long, value_name = "PATH|synthetic")]
        pairs: Option<String>,
        /// Comma-separated subset of corner,hair,warp,mask.
        #[arg(long)]
        stages: Option<String>,
    },
    /// Train a siamese change detector.
    ChangeTrain {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Preprocessing arm: default, warp, mask or whole.
        #[arg(long)]
        preproc: Option<String>,
    },
    /// Train and score change detectors per preprocessing arm.
    ChangeEval {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated arms out of default,warp,mask,whole, or `all`.
        #[arg(long)]
        preproc: Option<String>,
    },
    /// Total-body lesion screening (risk, ugly duckling, metadata model).
    TbpScreen {
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated subset of risk,ud,ml.
        #[arg(long)]
        modules: Option<String>,
    },
    /// Cross-validated gated-attention MIL over slide bags.
    MilTrain {
        /// bags.csv index or `synthetic`.
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Kaplan-Meier, log-rank, Cox and time-dependent AUC.
    Survival {
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated horizons in months.
        #[arg(long)]
        horizons: Option<String>,
        /// Comma-separated covariates for the Cox model.
        #[arg(long)]
        covariates: Option<String>,
    },
    /// Merge prediction files and run outputs into comparison tables.
    Report {
        /// Run directories or prediction CSV files; the first is the reference.
        #[arg(long, num_args = 1.., value_name = "PATH")]
        runs: Vec<PathBuf>,
    },
}

fn push<T: Into<Value>>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.into()));
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl Command {
    pub fn task(&self) -> Task {
        match self {
            Command::Pretrain { .. } => Task::Pretrain,
            Command::Probe { .. } => Task::Probe,
            Command::Finetune { .. } => Task::Finetune,
            Command::Oof { .. } => Task::Oof,
            Command::SegTrain { .. } => Task::SegTrain,
            Command::SegPredict { .. } => Task::SegPredict,
            Command::Seqprep { .. } => Task::Seqprep,
            Command::ChangeTrain { .. } => Task::ChangeTrain,
            Command::ChangeEval { .. } => Task::ChangeEval,
            Command::TbpScreen { .. } => Task::TbpScreen,
            Command::MilTrain { .. } => Task::MilTrain,
            Command::Survival { .. } => Task::Survival,
            Command::Report { .. } => Task::Report,
        }
    }

    /// Subcommand flags as hyperparameter overrides (the top layer).
    pub fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = vec![];
        match self {
            Command::Pretrain { data } => push(&mut o, "data", data.data.clone()),
            Command::Probe { data, checkpoint } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "checkpoint", path_value(&checkpoint.checkpoint));
            }
            Command::Finetune {
                data,
                checkpoint,
                epochs,
            }
            | Command::SegTrain {
                data,
                checkpoint,
                epochs,
            } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "checkpoint", path_value(&checkpoint.checkpoint));
                push(&mut o, "epochs", *epochs);
            }
            Command::Oof { data, checkpoint, folds } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "checkpoint", path_value(&checkpoint.checkpoint));
                push(&mut o, "folds", *folds);
            }
            Command::SegPredict {
                data,
                checkpoint,
                threshold,
            } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "checkpoint", path_value(&checkpoint.checkpoint));
                push(&mut o, "threshold", *threshold);
            }
            Command::Seqprep { pairs, stages } => {
                push(&mut o, "pairs", pairs.clone());
                push(&mut o, "stages", stages.clone());
            }
            Command::ChangeTrain {
                data,
                checkpoint,
                epochs,
                preproc,
            }
            | Command::ChangeEval {
                data,
                checkpoint,
                epochs,
                preproc,
            } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "checkpoint", path_value(&checkpoint.checkpoint));
                push(&mut o, "epochs", *epochs);
                push(&mut o, "preproc", preproc.clone());
            }
            Command::TbpScreen { data, modules } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "modules", modules.clone());
            }
            Command::MilTrain { data, folds, epochs } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "folds", *folds);
                push(&mut o, "epochs", *epochs);
            }
            Command::Survival {
                data,
                horizons,
                covariates,
            } => {
                push(&mut o, "data", data.data.clone());
                push(&mut o, "horizons", horizons.clone());
                push(&mut o, "covariates", covariates.clone());
            }
            Command::Report { runs } => {
                if !runs.is_empty() {
                    let joined: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
                    push(&mut o, "data", Some(joined.join(",")));
                }
            }
        }
        o
    }
}
