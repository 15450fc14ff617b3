use std::collections::BTreeMap;

use dermfoundry_core::adapt::{
    assign_folds, extract_features, finetune as run_finetune, linear_probe_fit_with, linear_probe_predict, oof_probe,
    write_predictions_csv, Backbone, Classifier, FeatureMatrix, FinetuneConfig, LabeledImages, ProbeSettings,
};
use dermfoundry_core::evalstat::classification_metrics;
use dermfoundry_core::{load_manifest, synth, Group, ImageGrid, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{backbone, overlay, save_model, synthetic_size, write_json, write_metrics, Source, PREDICTIONS_CSV};
use crate::error::CliError;
use crate::rundir::RunDir;

/// Side of synthetic images; matches the fixture backbone input.
const SYNTHETIC_SIDE: usize = 64;

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub images: Vec<ImageGrid>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub patients: Vec<String>,
}

impl Split {
    fn push(&mut self, image: ImageGrid, label: usize, id: String, patient: String) {
        self.images.push(image);
        self.labels.push(label);
        self.ids.push(id);
        self.patients.push(patient);
    }

    fn extend(&mut self, other: Split) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.ids.extend(other.ids);
        self.patients.extend(other.patients);
    }

    fn labeled(&self) -> LabeledImages {
        LabeledImages {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }
}

pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub classes: usize,
}

/// Manifest groups, or a synthetic two-class set split 3:1:1 by index.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    match Source::from_config(cfg, "data") {
        Source::Synthetic => {
            let n = synthetic_size(cfg, 40)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut s = Splits {
                train: Split::default(),
                val: Split::default(),
                test: Split::default(),
                classes: 2,
            };
            for i in 0..n {
                let label = i % 2;
                let img = synth::two_class_image(SYNTHETIC_SIDE, label, &mut rng);
                let target = match (i / 2) % 5 {
                    0..=2 => &mut s.train,
                    3 => &mut s.val,
                    _ => &mut s.test,
                };
                target.push(img, label, format!("img_{i:04}"), format!("pt_{:04}", i / 2));
            }
            Ok(s)
        }
        Source::File(path) => {
            let manifest = load_manifest(&path)?;
            let mut s = Splits {
                train: Split::default(),
                val: Split::default(),
                test: Split::default(),
                classes: manifest.num_classes,
            };
            for row in &manifest.rows {
                let label = row
                    .label
                    .ok_or_else(|| CliError::Invalid(format!("image {} has no label", row.image_ref)))?;
                let img = ImageGrid::load(manifest.resolve(&row.image_ref))?;
                let patient = row.patient_id.clone().unwrap_or_else(|| row.image_ref.clone());
                let target = match row.group {
                    Group::Train => &mut s.train,
                    Group::Val => &mut s.val,
                    Group::Test => &mut s.test,
                };
                target.push(img, label, row.image_ref.clone(), patient);
            }
            if s.classes < 2 {
                return Err(CliError::Invalid("the manifest needs at least two classes".into()));
            }
            Ok(s)
        }
    }
}

fn require(split: &Split, name: &str) -> Result<(), CliError> {
    if split.images.is_empty() {
        return Err(CliError::Invalid(format!("the {name} split is empty")));
    }
    Ok(())
}

fn features(b: &Backbone, s: &Split) -> Result<FeatureMatrix, CliError> {
    Ok(extract_features(b, &s.images, &s.labels, &s.ids)?)
}

#[derive(Serialize)]
struct ProbeSummary {
    lambda: f64,
    iterations: usize,
    converged: bool,
    train_samples: usize,
    test_samples: usize,
    embedding_dim: usize,
}

fn probe_settings(cfg: &RunConfig) -> Result<ProbeSettings, CliError> {
    let d = ProbeSettings::default();
    Ok(ProbeSettings {
        lambda: cfg.get_f64("lambda")?,
        max_iterations: cfg.get_usize("max_iterations")?.unwrap_or(d.max_iterations),
        tolerance: cfg.get_f64("tolerance")?.unwrap_or(d.tolerance),
    })
}

/// Fits on train (plus val), scores test.
pub fn probe(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let settings = probe_settings(cfg)?;
    let bb = backbone(cfg)?;
    let mut s = load_splits(cfg)?;
    s.train.extend(std::mem::take(&mut s.val));
    require(&s.train, "train")?;
    require(&s.test, "test")?;
    let train = features(&bb, &s.train)?;
    let test = features(&bb, &s.test)?;
    let model = linear_probe_fit_with(&train, s.classes, &settings)?;
    if !model.converged {
        log::warn!("probe stopped after {} iterations without converging", model.iterations);
    }
    let probs = linear_probe_predict(&model, &test.features)?;
    write_predictions_csv(&rd.output(PREDICTIONS_CSV), &s.test.ids, &s.test.labels, &probs, None)?;
    write_metrics(rd, &classification_metrics(&s.test.labels, &probs)?)?;
    write_json(
        &rd.output("probe.json"),
        &ProbeSummary {
            lambda: model.lambda,
            iterations: model.iterations,
            converged: model.converged,
            train_samples: train.len(),
            test_samples: test.len(),
            embedding_dim: train.dim(),
        },
    )
}

pub fn finetune(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let source = Source::from_config(cfg, "data");
    let base = if source.is_synthetic() {
        FinetuneConfig::fixture()
    } else {
        FinetuneConfig::default()
    };
    let fc = overlay(base, cfg, &["data", "synthetic_size", "checkpoint"])?;
    let bb = backbone(cfg)?;
    let s = load_splits(cfg)?;
    for (split, name) in [(&s.train, "train"), (&s.val, "val"), (&s.test, "test")] {
        require(split, name)?;
    }
    let arch = bb.arch.clone();
    let model = Classifier::new(bb, s.classes, cfg.seed);
    let result = run_finetune(model, &s.train.labeled(), &s.val.labeled(), &fc, cfg.seed, |e| {
        log::info!(
            "epoch {}: train loss {:.4}, val selection {:.4}",
            e.epoch,
            e.train_loss,
            e.val_selection
        );
    })?;

    let mut w = csv::Writer::from_path(rd.output("epochs.csv"))?;
    w.write_record(["epoch", "train_loss", "val_auroc", "val_bacc", "val_w_f1", "val_selection"])?;
    for e in &result.history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            super::fmt_opt(e.val_auroc),
            e.val_bacc.to_string(),
            e.val_w_f1.to_string(),
            e.val_selection.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output("epochs.csv"), e))?;

    let probs = result.model.predict_proba(&s.test.images);
    write_predictions_csv(&rd.output(PREDICTIONS_CSV), &s.test.ids, &s.test.labels, &probs, None)?;
    write_metrics(rd, &classification_metrics(&s.test.labels, &probs)?)?;
    save_model(
        &rd.output_dir("checkpoint")?,
        result.model.store(),
        cfg,
        result.best_epoch,
        &arch,
        BTreeMap::from([("val_selection".to_string(), result.best_metric)]),
    )
}

/// Every image is predicted by the probe trained without its fold;
/// patients never span folds.
pub fn oof(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let k = cfg.get_usize("folds")?.unwrap_or(5);
    let stratify = cfg.get_str("stratify_by").unwrap_or_else(|| "label".into());
    if !matches!(stratify.as_str(), "label" | "none") {
        return Err(CliError::Invalid(format!("`stratify_by` must be label or none, got `{stratify}`")));
    }
    let bb = backbone(cfg)?;
    let s = load_splits(cfg)?;
    let mut all = s.train;
    all.extend(s.val);
    all.extend(s.test);
    let data = features(&bb, &all)?;
    let strata: Vec<String> = if stratify == "label" {
        all.labels.iter().map(usize::to_string).collect()
    } else {
        vec![String::new(); all.labels.len()]
    };
    let folds = assign_folds(&all.ids, &strata, Some(&all.patients), k, cfg.seed)?;
    let oof = oof_probe(&data, s.classes, &folds)?;
    write_predictions_csv(&rd.output(PREDICTIONS_CSV), &all.ids, &all.labels, &oof.probs, Some(&oof.folds))?;
    write_metrics(rd, &classification_metrics(&all.labels, &oof.probs)?)
}
