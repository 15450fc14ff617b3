//! Subcommand bodies plus the plumbing they share. Hyperparameters are read
//! up front so bad values fail as configuration errors before any work.

mod adapt;
mod change;
mod mil;
mod pretrain;
mod report;
mod seg;
mod seqprep;
mod survival;
mod tbp;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dermfoundry_core::adapt::{Backbone, BackboneArch};
use dermfoundry_core::autograd::ParamStore;
use dermfoundry_core::evalstat::ClassificationMetrics;
use dermfoundry_core::{load_checkpoint, save_checkpoint, CheckpointSidecar, RunConfig, Task};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;
use crate::rundir::RunDir;

pub const SYNTHETIC: &str = "synthetic";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

pub fn dispatch(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    match cfg.task {
        Task::Pretrain => pretrain::run(cfg, rd),
        Task::Probe => adapt::probe(cfg, rd),
        Task::Finetune => adapt::finetune(cfg, rd),
        Task::Oof => adapt::oof(cfg, rd),
        Task::SegTrain => seg::train(cfg, rd),
        Task::SegPredict => seg::predict(cfg, rd),
        Task::Seqprep => seqprep::run(cfg, rd),
        Task::ChangeTrain => change::train(cfg, rd),
        Task::ChangeEval => change::eval(cfg, rd),
        Task::TbpScreen => tbp::run(cfg, rd),
        Task::MilTrain => mil::run(cfg, rd),
        Task::Survival => survival::run(cfg, rd),
        Task::Report => report::run(cfg, rd),
    }
}

/// Where a subcommand reads its data from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Synthetic,
    File(PathBuf),
}

impl Source {
    pub fn from_config(cfg: &RunConfig, key: &str) -> Self {
        match cfg.get_str(key) {
            None => Source::Synthetic,
            Some(s) if s == SYNTHETIC => Source::Synthetic,
            Some(s) => Source::File(PathBuf::from(s)),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, Source::Synthetic)
    }
}

pub fn synthetic_size(cfg: &RunConfig, default: usize) -> Result<usize, CliError> {
    let n = cfg.get_usize("synthetic_size")?.unwrap_or(default);
    if n == 0 {
        return Err(CliError::Invalid("`synthetic_size` must be positive".into()));
    }
    Ok(n)
}

/// Copies hyperparameters that name fields of `base` onto it, leaving out
/// `consumed` keys which the caller handles itself.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, cfg: &RunConfig, consumed: &[&str]) -> Result<T, CliError> {
    let Value::Object(mut fields) = serde_json::to_value(&base)? else {
        unreachable!("config structs serialise to objects");
    };
    for (k, v) in &cfg.hyperparameters {
        if consumed.contains(&k.as_str()) {
            continue;
        }
        if !fields.contains_key(k) {
            return Err(CliError::Invalid(format!(
                "hyperparameter `{k}` is not used by {}",
                cfg.task.name()
            )));
        }
        fields.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(fields))
        .map_err(|e| CliError::Invalid(format!("{} hyperparameters: {e}", cfg.task.name())))
}

/// Backbone from `checkpoint` when given, else a seeded random fixture
/// backbone.
pub fn backbone(cfg: &RunConfig) -> Result<Backbone, CliError> {
    match cfg.get_str("checkpoint") {
        Some(dir) => {
            let ck = load_checkpoint(&dir)?;
            let arch = BackboneArch::from_json(&ck.sidecar.architecture)?;
            log::info!("backbone from {dir} ({}px, dim {})", arch.image_side, arch.encoder.dim);
            Ok(Backbone::from_checkpoint(arch, &ck)?)
        }
        None => {
            log::warn!("no checkpoint given; using a randomly initialised fixture backbone");
            Ok(Backbone::new(BackboneArch::fixture(), cfg.seed))
        }
    }
}

pub fn save_model(
    dir: &Path,
    store: &ParamStore,
    cfg: &RunConfig,
    epoch: usize,
    arch: &BackboneArch,
    metrics: BTreeMap<String, f64>,
) -> Result<(), CliError> {
    let mut sidecar = CheckpointSidecar::new(cfg, epoch);
    sidecar.architecture = arch.to_json();
    sidecar.metrics = metrics;
    save_checkpoint(dir, store, &sidecar)?;
    log::info!("checkpoint written to {}", dir.display());
    Ok(())
}

/// Ordered `(metric, value)` rows; undefined values are left empty.
pub fn metric_rows(m: &ClassificationMetrics) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("w_f1", Some(m.w_f1)),
        ("auroc", m.auroc),
        ("aupr", m.aupr),
        ("bacc", Some(m.bacc)),
        ("sensitivity", Some(m.sensitivity)),
        ("specificity", Some(m.specificity)),
    ]
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `metrics.csv` (metric,value) and `metrics.json`.
pub fn write_metrics(rd: &RunDir, m: &ClassificationMetrics) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(rd.output(METRICS_CSV))?;
    w.write_record(["metric", "value"])?;
    for (name, v) in metric_rows(m) {
        w.write_record([name, &fmt_opt(v)])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output(METRICS_CSV), e))?;
    write_json(&rd.output(METRICS_JSON), m)?;
    if let Some(note) = &m.note {
        log::warn!("{note}");
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Comma-separated list with surrounding blanks trimmed.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect()
}

/// Accepts a JSON array or a comma-separated string.
pub fn list_value(cfg: &RunConfig, key: &str) -> Option<Vec<String>> {
    match cfg.hyperparameters.get(key)? {
        Value::Array(items) => Some(
            items
                .iter()
                .map(|v| v.as_str().map_or_else(|| v.to_string(), String::from))
                .collect(),
        ),
        _ => cfg.get_str(key).map(|s| split_list(&s)),
    }
}

/// Relative references resolve against the dataset root override when set,
/// else against the directory of the file that lists them.
pub fn resolve_ref(listing: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(dermfoundry_core::data::DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => listing.parent().unwrap_or(Path::new(".")).join(p),
    }
}

/// Keeps ids usable as file names.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
