use std::collections::BTreeMap;

use dermfoundry_core::adapt::BackboneArch;
use dermfoundry_core::evalstat::SegMetrics;
use dermfoundry_core::seg::{
    evaluate_seg, predict_mask, synthetic_disks, train_seg, BinaryMask, SegConfig, SegModel, SegSample,
};
use dermfoundry_core::{load_checkpoint, load_manifest, Group, ImageGrid, RunConfig};

use super::{backbone, file_stem, overlay, save_model, synthetic_size, write_json, Source, METRICS_CSV, METRICS_JSON};
use crate::error::CliError;
use crate::rundir::RunDir;

/// Manifest extra column naming each image's mask PNG.
pub const MASK_COLUMN: &str = "mask_ref";
const SYNTHETIC_SIDE: usize = 64;

struct SegSplits {
    train: Vec<SegSample>,
    val: Vec<SegSample>,
    test: Vec<SegSample>,
    test_ids: Vec<String>,
}

fn load(cfg: &RunConfig) -> Result<SegSplits, CliError> {
    match Source::from_config(cfg, "data") {
        Source::Synthetic => {
            let n = synthetic_size(cfg, 30)?;
            let mut all = synthetic_disks(n, SYNTHETIC_SIDE, cfg.seed);
            let n_test = (n / 5).max(1);
            let n_val = (n / 5).max(1);
            if n < n_test + n_val + 1 {
                return Err(CliError::Invalid("`synthetic_size` must be at least 3".into()));
            }
            let test = all.split_off(n - n_test);
            let val = all.split_off(all.len() - n_val);
            let test_ids = (n - n_test..n).map(|i| format!("disk_{i:04}")).collect();
            Ok(SegSplits {
                train: all,
                val,
                test,
                test_ids,
            })
        }
        Source::File(path) => {
            let manifest = load_manifest(&path)?;
            let mut s = SegSplits {
                train: vec![],
                val: vec![],
                test: vec![],
                test_ids: vec![],
            };
            for row in &manifest.rows {
                let mask_ref = row.extras.get(MASK_COLUMN).filter(|m| !m.is_empty()).ok_or_else(|| {
                    CliError::Invalid(format!("image {} has no `{MASK_COLUMN}` entry", row.image_ref))
                })?;
                let sample = SegSample::new(
                    ImageGrid::load(manifest.resolve(&row.image_ref))?,
                    BinaryMask::load_png(manifest.resolve(mask_ref))?,
                )?;
                match row.group {
                    Group::Train => s.train.push(sample),
                    Group::Val => s.val.push(sample),
                    Group::Test => {
                        s.test.push(sample);
                        s.test_ids.push(row.image_ref.clone());
                    }
                }
            }
            Ok(s)
        }
    }
}

/// `seg_metrics.csv` (id,dsc,jac), the summary metric files and one mask
/// PNG per test image.
fn write_outputs(
    rd: &RunDir,
    model: &SegModel,
    test: &[SegSample],
    ids: &[String],
    threshold: f64,
) -> Result<SegMetrics, CliError> {
    let (mean, per) = evaluate_seg(model, test, threshold)?;
    let mut w = csv::Writer::from_path(rd.output("seg_metrics.csv"))?;
    w.write_record(["id", "dsc", "jac"])?;
    for (id, m) in ids.iter().zip(&per) {
        w.write_record([id.as_str(), &m.dsc.to_string(), &m.jac.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output("seg_metrics.csv"), e))?;

    let mut w = csv::Writer::from_path(rd.output(METRICS_CSV))?;
    w.write_record(["metric", "value"])?;
    w.write_record(["dsc", &mean.dsc.to_string()])?;
    w.write_record(["jac", &mean.jac.to_string()])?;
    w.flush().map_err(|e| CliError::io(rd.output(METRICS_CSV), e))?;
    write_json(&rd.output(METRICS_JSON), &mean)?;

    let masks = rd.output_dir("masks")?;
    for (id, s) in ids.iter().zip(test) {
        predict_mask(model, &s.image, threshold).save_png(masks.join(format!("{}.png", file_stem(id))))?;
    }
    log::info!("test DSC {:.4}, JAC {:.4} over {} images", mean.dsc, mean.jac, test.len());
    Ok(mean)
}

pub fn train(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let source = Source::from_config(cfg, "data");
    let base = if source.is_synthetic() {
        SegConfig::fixture()
    } else {
        SegConfig::default()
    };
    let sc = overlay(base, cfg, &["data", "synthetic_size", "checkpoint"])?;
    let bb = backbone(cfg)?;
    let arch = bb.arch.clone();
    let s = load(cfg)?;
    if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
        return Err(CliError::Invalid("segmentation needs non-empty train, val and test groups".into()));
    }
    let result = train_seg(SegModel::new(bb, cfg.seed), &s.train, &s.val, &sc, cfg.seed, |e| {
        log::info!("epoch {}: loss {:.4}, val DSC {:.4}", e.epoch, e.train_loss, e.val_dsc);
    })?;
    let mut w = csv::Writer::from_path(rd.output("epochs.csv"))?;
    w.write_record(["epoch", "train_loss", "val_dsc", "val_jac"])?;
    for e in &result.history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_dsc.to_string(),
            e.val_jac.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output("epochs.csv"), e))?;
    let mean = write_outputs(rd, &result.model, &s.test, &s.test_ids, sc.threshold)?;
    save_model(
        &rd.output_dir("checkpoint")?,
        result.model.store(),
        cfg,
        result.best_epoch,
        &arch,
        BTreeMap::from([("val_dsc".to_string(), result.best_dsc), ("test_dsc".to_string(), mean.dsc)]),
    )
}

pub fn predict(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let threshold = cfg.get_f64("threshold")?.unwrap_or(SegConfig::default().threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Invalid(format!("`threshold` must lie in [0, 1], got {threshold}")));
    }
    let dir = cfg
        .get_str("checkpoint")
        .ok_or_else(|| CliError::Invalid("seg-predict needs a `checkpoint` written by seg-train".into()))?;
    let ck = load_checkpoint(&dir)?;
    let arch = BackboneArch::from_json(&ck.sidecar.architecture)?;
    let model = SegModel::from_checkpoint(arch, &ck)?;
    let s = load(cfg)?;
    if s.test.is_empty() {
        return Err(CliError::Invalid("no test images to predict".into()));
    }
    write_outputs(rd, &model, &s.test, &s.test_ids, threshold)?;
    Ok(())
}
