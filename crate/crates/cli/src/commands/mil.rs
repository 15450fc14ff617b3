use dermfoundry_core::adapt::write_predictions_csv;
use dermfoundry_core::mil::{load_bags, train_mil_cv, MilTrainConfig, SlideBag};
use dermfoundry_core::synth::mil_bags;
use dermfoundry_core::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fmt_opt, synthetic_size, write_json, write_metrics, Source, PREDICTIONS_CSV};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const FOLDS_CSV: &str = "folds.csv";
const SYNTHETIC_DIM: usize = 128;
const SYNTHETIC_CLUSTERS: usize = 5;

fn train_config(cfg: &RunConfig) -> Result<MilTrainConfig, CliError> {
    let mut c = MilTrainConfig::default();
    if let Some(v) = cfg.get_usize("epochs")? {
        c.epochs = v;
    }
    if let Some(v) = cfg.get_f64("learning_rate")? {
        c.lr = v;
    }
    if let Some(v) = cfg.get_f64("weight_decay")? {
        c.weight_decay = v;
    }
    if let Some(v) = cfg.get_usize("patience")? {
        c.patience = v;
    }
    if let Some(v) = cfg.get_usize("folds")? {
        c.folds = v;
    }
    if let Some(v) = cfg.get_usize("hidden_dim")? {
        c.model.embed_dim = v;
    }
    if let Some(v) = cfg.get_usize("attention_dim")? {
        c.model.attention_dim = v;
    }
    if c.epochs == 0 || c.folds < 3 || c.model.embed_dim == 0 || c.model.attention_dim == 0 {
        return Err(CliError::Invalid(
            "MIL needs epochs ≥ 1, folds ≥ 3 and positive hidden/attention sizes".into(),
        ));
    }
    Ok(c)
}

#[derive(Serialize)]
struct Summary {
    bags: usize,
    folds: usize,
    mean_fold_auroc: Option<f64>,
}

pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let tc = train_config(cfg)?;
    let bags: Vec<SlideBag> = match Source::from_config(cfg, "data") {
        Source::Synthetic => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            mil_bags(synthetic_size(cfg, 20)?, SYNTHETIC_DIM, SYNTHETIC_CLUSTERS, &mut rng)
                .into_iter()
                .enumerate()
                .map(|(i, b)| SlideBag::new(format!("s{i}"), b.case_id, b.features, b.label))
                .collect::<Result<_, _>>()?
        }
        Source::File(index) => load_bags(&index)?,
    };
    log::info!("{} bags, {}-fold cross-validation", bags.len(), tc.folds);
    let cv = train_mil_cv(&bags, &tc, cfg.seed)?;

    let mut w = csv::Writer::from_path(rd.output(FOLDS_CSV))?;
    w.write_record(["fold", "auroc", "weighted_f1", "best_epoch"])?;
    for f in &cv.folds {
        w.write_record([
            f.fold.to_string(),
            fmt_opt(f.auroc),
            f.weighted_f1.to_string(),
            f.best_epoch.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output(FOLDS_CSV), e))?;

    let ids: Vec<String> = bags.iter().map(|b| b.slide_id.clone()).collect();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    write_predictions_csv(&rd.output(PREDICTIONS_CSV), &ids, &labels, &cv.oof.probs, Some(&cv.oof.folds))?;
    write_metrics(rd, &cv.pooled)?;
    let summary = Summary {
        bags: bags.len(),
        folds: tc.folds,
        mean_fold_auroc: cv.mean_auroc(),
    };
    log::info!("mean fold AUROC {}", fmt_opt(summary.mean_fold_auroc));
    write_json(&rd.output("summary.json"), &summary)
}
