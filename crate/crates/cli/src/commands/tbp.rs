use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dermfoundry_core::adapt::{assign_folds, finetune, Backbone, BackboneArch, Classifier, FinetuneConfig, LabeledImages};
use dermfoundry_core::autograd::Mat;
use dermfoundry_core::tbp::{
    combine, filter_lesions, load_lesions, screen_report, synthetic_lesions, ud_outliers, write_decisions_csv,
    ExtraTrees, ExtraTreesConfig, FeatureTable, LesionRecord, ModuleFlags, ScreenReport,
};
use dermfoundry_core::{synth, ImageGrid, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{list_value, resolve_ref, synthetic_size, write_json, Source};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const OOB_COLUMN: &str = "out_of_bounds_fraction";
pub const DECISIONS_CSV: &str = "decisions.csv";
pub const REPORT_JSON: &str = "report.json";
const MODULES: [&str; 3] = ["risk", "ud", "ml"];
const LESIONS_PER_PATIENT: usize = 8;
const SYNTHETIC_SIDE: usize = 64;
/// A module flags a lesion at probability ≥ this.
const POSITIVE_AT: f64 = 0.5;

/// Reads the out-of-bounds column beside the 32 measurements. A file
/// without it leaves that filter inactive.
fn out_of_bounds(path: &Path) -> Result<Option<BTreeMap<String, f64>>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let (Some(ci), Some(co)) = (
        headers.iter().position(|h| h == "lesion_id"),
        headers.iter().position(|h| h == OOB_COLUMN),
    ) else {
        return Ok(None);
    };
    let mut map = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let raw = rec.get(co).unwrap_or("").trim();
        if raw.is_empty() {
            continue;
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| CliError::Invalid(format!("`{OOB_COLUMN}` value `{raw}` is not numeric")))?;
        map.insert(rec.get(ci).unwrap_or("").to_string(), v);
    }
    Ok(Some(map))
}

struct Cohort {
    records: Vec<LesionRecord>,
    tiles: BTreeMap<String, ImageGrid>,
    oob: BTreeMap<String, f64>,
}

fn load(cfg: &RunConfig) -> Result<Cohort, CliError> {
    match Source::from_config(cfg, "data") {
        Source::Synthetic => {
            let patients = synthetic_size(cfg, 12)?;
            let records = synthetic_lesions(patients, LESIONS_PER_PATIENT, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7b9);
            let mut tiles = BTreeMap::new();
            let mut oob = BTreeMap::new();
            for r in &records {
                let class = usize::from(r.label_risk == Some(true));
                tiles.insert(r.lesion_id.clone(), synth::two_class_image(SYNTHETIC_SIDE, class, &mut rng));
                oob.insert(r.lesion_id.clone(), rng.random_range(0.0..0.3));
            }
            Ok(Cohort { records, tiles, oob })
        }
        Source::File(path) => {
            let records = load_lesions(&path)?;
            let oob = match out_of_bounds(&path)? {
                Some(m) => m,
                None => {
                    log::warn!("no `{OOB_COLUMN}` column; the field-of-view filter is skipped");
                    records.iter().map(|r| (r.lesion_id.clone(), 0.0)).collect()
                }
            };
            let mut tiles = BTreeMap::new();
            for r in &records {
                tiles.insert(r.lesion_id.clone(), ImageGrid::load(resolve_ref(&path, &r.tile_ref))?);
            }
            Ok(Cohort { records, tiles, oob })
        }
    }
}

#[derive(Serialize)]
struct Report {
    modules: Vec<String>,
    lesions_in: usize,
    lesions_after_filter: usize,
    train_patients: usize,
    test_patients: usize,
    test_lesions: usize,
    /// Keyed by arm: each single module, `image` (risk + ud) and `all`.
    arms: BTreeMap<String, ScreenReport>,
}

fn flags(ids: &[String], probs: impl IntoIterator<Item = f64>) -> ModuleFlags {
    ModuleFlags {
        ids: ids.to_vec(),
        positive: probs.into_iter().map(|p| p >= POSITIVE_AT).collect(),
    }
}

/// Models are fitted on half the patients and screening is reported on the
/// other half; patients never straddle the split.
pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let modules: Vec<String> = list_value(cfg, "modules").unwrap_or_else(|| MODULES.map(String::from).to_vec());
    if modules.is_empty() {
        return Err(CliError::Invalid("`modules` names no module".into()));
    }
    if let Some(bad) = modules.iter().find(|m| !MODULES.contains(&m.as_str())) {
        return Err(CliError::Invalid(format!("unknown screening module `{bad}` (risk, ud, ml)")));
    }
    let on = |m: &str| modules.iter().any(|x| x == m);
    let et_cfg = ExtraTreesConfig {
        n_trees: cfg.get_usize("n_trees")?.unwrap_or(ExtraTreesConfig::default().n_trees),
        seed: cfg.seed,
        ..ExtraTreesConfig::default()
    };
    let synthetic = Source::from_config(cfg, "data").is_synthetic();

    let cohort = load(cfg)?;
    let kept = filter_lesions(&cohort.records, &cohort.oob);
    log::info!("{} of {} lesions pass the quality filter", kept.len(), cohort.records.len());

    let patients: Vec<String> = kept.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if patients.len() < 2 {
        return Err(CliError::Invalid("screening needs lesions from at least two patients".into()));
    }
    let has_malignant: Vec<String> = patients
        .iter()
        .map(|p| kept.iter().any(|r| &r.patient_id == p && r.label_malignant == Some(true)).to_string())
        .collect();
    let folds = assign_folds(&patients, &has_malignant, None, 2, cfg.seed)?;
    let test_patients: BTreeSet<&String> = patients.iter().zip(&folds).filter(|(_, &f)| f == 0).map(|(p, _)| p).collect();
    let (test, train): (Vec<&LesionRecord>, Vec<&LesionRecord>) =
        kept.iter().partition(|r| test_patients.contains(&r.patient_id));
    let test_ids: Vec<String> = test.iter().map(|r| r.lesion_id.clone()).collect();
    let tile = |r: &LesionRecord| cohort.tiles[&r.lesion_id].clone();

    // Risk head: fine-tuned binary classifier; its backbone also feeds UD.
    let mut encoder = Backbone::new(BackboneArch::fixture(), cfg.seed);
    let mut risk = None;
    if on("risk") {
        let labelled: Vec<&&LesionRecord> = train.iter().filter(|r| r.label_risk.is_some()).collect();
        let data = LabeledImages {
            images: labelled.iter().map(|r| tile(r)).collect(),
            labels: labelled.iter().map(|r| usize::from(r.label_risk == Some(true))).collect(),
        };
        let fc = if synthetic {
            FinetuneConfig::fixture()
        } else {
            FinetuneConfig::default()
        };
        let model = Classifier::new(encoder.clone(), 2, cfg.seed);
        let result = finetune(model, &data, &data, &fc, cfg.seed, |e| {
            log::info!("risk head epoch {}: loss {:.4}", e.epoch, e.train_loss);
        })?;
        let tiles: Vec<ImageGrid> = test.iter().map(|r| tile(r)).collect();
        let probs = result.model.predict_proba(&tiles);
        risk = Some(flags(&test_ids, probs.column(1).iter().copied()));
        encoder = result.model.backbone;
    }
    let ud = if on("ud") {
        let rows: Vec<Vec<f64>> = test.iter().map(|r| encoder.features(&tile(r))).collect();
        let dim = rows.first().map_or(0, Vec::len);
        let feats = Mat::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]);
        let owners: Vec<String> = test.iter().map(|r| r.patient_id.clone()).collect();
        let res = ud_outliers(&feats, &owners)?;
        if !res.skipped_patients.is_empty() {
            log::info!("{} patients have too few lesions for the ugly-duckling rule", res.skipped_patients.len());
        }
        Some(ModuleFlags {
            ids: test_ids.clone(),
            positive: res.positive,
        })
    } else {
        None
    };
    let ml = if on("ml") {
        let labelled: Vec<LesionRecord> = train.iter().filter(|r| r.label_malignant.is_some()).map(|r| (*r).clone()).collect();
        let labels: Vec<bool> = labelled.iter().map(|r| r.label_malignant == Some(true)).collect();
        let forest = ExtraTrees::fit(&FeatureTable::from_records(&labelled), &labels, &et_cfg)?;
        let test_owned: Vec<LesionRecord> = test.iter().map(|r| (*r).clone()).collect();
        Some(flags(&test_ids, forest.predict_proba(&FeatureTable::from_records(&test_owned))?))
    } else {
        None
    };

    let truth: Vec<Option<bool>> = test.iter().map(|r| r.label_malignant).collect();
    let owners: Vec<String> = test.iter().map(|r| r.patient_id.clone()).collect();
    let mut arms = BTreeMap::new();
    let candidates: [(&str, [bool; 3]); 5] = [
        ("risk", [true, false, false]),
        ("ud", [false, true, false]),
        ("ml", [false, false, true]),
        ("image", [true, true, false]),
        ("all", [true, true, true]),
    ];
    for (name, [r, u, m]) in candidates {
        let pick = |want: bool, f: &Option<ModuleFlags>| if want { f.clone() } else { None };
        let (r, u, m) = (pick(r, &risk), pick(u, &ud), pick(m, &ml));
        if r.is_none() && u.is_none() && m.is_none() {
            continue;
        }
        let d = combine(r.as_ref(), u.as_ref(), m.as_ref())?;
        arms.insert(name.to_string(), screen_report(&d, &truth, &owners)?);
    }
    let decisions = combine(risk.as_ref(), ud.as_ref(), ml.as_ref())?;
    write_decisions_csv(&rd.output(DECISIONS_CSV), &decisions)?;
    let report = Report {
        modules,
        lesions_in: cohort.records.len(),
        lesions_after_filter: kept.len(),
        train_patients: patients.len() - test_patients.len(),
        test_patients: test_patients.len(),
        test_lesions: test.len(),
        arms,
    };
    if let Some(all) = report.arms.get("all") {
        log::info!(
            "flagged {} of {} test lesions; lesion sensitivity {:?}",
            all.flagged,
            all.lesions,
            all.lesion_sensitivity
        );
    }
    write_json(&rd.output(REPORT_JSON), &report)
}
