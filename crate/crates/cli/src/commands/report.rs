//! Comparison tables over prediction files plus re-rendered run plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dermfoundry_core::adapt::read_predictions_csv;
use dermfoundry_core::autograd::Mat;
use dermfoundry_core::evalstat::{bootstrap_ci, classification_metrics, permutation_test, stars, MetricReport};
use dermfoundry_core::survival::{km_plot_png, KmCurve, KmStep};
use dermfoundry_core::RunConfig;
use serde::Serialize;

use super::{list_value, write_json, PREDICTIONS_CSV};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const BARS_PNG: &str = "metric_bars.png";
pub const N_RESAMPLES: usize = 1000;
pub const N_PERMUTATIONS: usize = 1000;
pub const CI_LEVEL: f64 = 0.95;
/// Column order of the comparison table.
pub const METRICS: [&str; 4] = ["w_f1", "auroc", "bacc", "aupr"];
/// Files `report` looks for inside each run directory.
pub const EXPECTED: [&str; 4] = [
    "outputs/predictions.csv",
    "outputs/predictions_<arm>.csv",
    "outputs/km_curve.csv",
    "outputs/cox_forest.csv",
];

type Row = (usize, Vec<f64>);

struct Predictions {
    model: String,
    ids: Vec<String>,
    rows: Vec<Row>,
}

fn metric(name: &str, rows: &[Row]) -> f64 {
    let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let c = rows.first().map_or(0, |r| r.1.len());
    let probs = Mat::from_shape_fn((rows.len(), c), |(i, j)| rows[i].1[j]);
    let Ok(m) = classification_metrics(&labels, &probs) else {
        return f64::NAN;
    };
    match name {
        "w_f1" => m.w_f1,
        "auroc" => m.auroc.unwrap_or(f64::NAN),
        "bacc" => m.bacc,
        "aupr" => m.aupr.unwrap_or(f64::NAN),
        _ => unreachable!("metric names come from METRICS"),
    }
}

fn load_predictions(model: String, path: &Path) -> Result<Predictions, CliError> {
    let (ids, labels, probs) = read_predictions_csv(path)?;
    let rows = labels.into_iter().zip(probs.rows().into_iter().map(|r| r.to_vec())).collect();
    Ok(Predictions { model, ids, rows })
}

fn km_from_csv(path: &Path) -> Result<KmCurve, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut steps = vec![];
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Invalid(format!("malformed row in {}", path.display())))
        };
        steps.push(KmStep {
            time: num(0)?,
            survival: num(1)?,
            at_risk: num(2)? as usize,
            events: num(3)? as usize,
            censored: 0,
        });
    }
    Ok(KmCurve { steps })
}

#[derive(Default)]
struct Inputs {
    predictions: Vec<Predictions>,
    /// `(run name, run outputs dir)` holding survival files.
    survival: Vec<(String, PathBuf)>,
}

fn unique_name(taken: &BTreeMap<String, usize>, base: &str) -> String {
    match taken.get(base) {
        None => base.to_string(),
        Some(n) => format!("{base}_{}", n + 1),
    }
}

fn gather(paths: &[String]) -> Result<Inputs, CliError> {
    let mut inputs = Inputs::default();
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    let mut add_name = |base: &str| {
        let name = unique_name(&names, base);
        *names.entry(base.to_string()).or_insert(0) += 1;
        name
    };
    for raw in paths {
        let path = PathBuf::from(raw);
        let stem = path
            .file_stem()
            .map_or_else(|| raw.clone(), |s| s.to_string_lossy().into_owned());
        if path.is_file() {
            inputs.predictions.push(load_predictions(add_name(&stem), &path)?);
            continue;
        }
        let outputs = if path.join("outputs").is_dir() { path.join("outputs") } else { path.clone() };
        let single = outputs.join(PREDICTIONS_CSV);
        if single.is_file() {
            inputs.predictions.push(load_predictions(add_name(&stem), &single)?);
        }
        let mut arm_files: Vec<PathBuf> = std::fs::read_dir(&outputs)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        arm_files.retain(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("predictions_") && n.ends_with(".csv"))
        });
        arm_files.sort();
        for f in arm_files {
            let arm = f.file_stem().unwrap().to_string_lossy().trim_start_matches("predictions_").to_string();
            inputs.predictions.push(load_predictions(add_name(&format!("{stem}/{arm}")), &f)?);
        }
        if outputs.join("km_curve.csv").is_file() || outputs.join("cox_forest.csv").is_file() {
            inputs.survival.push((add_name(&stem), outputs));
        }
    }
    Ok(inputs)
}

#[derive(Serialize)]
struct ModelReport {
    model: String,
    n: usize,
    metrics: Vec<MetricReport>,
}

/// Rows of `b` aligned to the ids of `a`; ids missing from either side are
/// left out.
fn paired(a: &Predictions, b: &Predictions) -> (Vec<Row>, Vec<Row>) {
    let index: BTreeMap<&str, usize> = b.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    a.ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| index.get(id.as_str()).map(|&j| (a.rows[i].clone(), b.rows[j].clone())))
        .unzip()
}

fn model_reports(preds: &[Predictions], seed: u64) -> Result<Vec<ModelReport>, CliError> {
    let reference = &preds[0];
    let key = format!("vs {}", reference.model);
    let mut out = vec![];
    for (k, p) in preds.iter().enumerate() {
        let mut metrics = vec![];
        for name in METRICS {
            let ci = match bootstrap_ci(&p.rows, |d| metric(name, d), N_RESAMPLES, CI_LEVEL, seed) {
                Ok(ci) if ci.point.is_finite() => ci,
                _ => {
                    log::warn!("{}: {name} undefined on these predictions", p.model);
                    continue;
                }
            };
            let mut comparisons = BTreeMap::new();
            if k > 0 {
                let (a, b) = paired(p, reference);
                if a.len() >= 2 {
                    let pval = permutation_test(
                        &a,
                        &b,
                        |x, y| metric(name, x) - metric(name, y),
                        N_PERMUTATIONS,
                        seed,
                    )?;
                    comparisons.insert(key.clone(), pval);
                } else {
                    log::warn!("{} shares fewer than two ids with {}; no comparison", p.model, reference.model);
                }
            }
            metrics.push(MetricReport {
                metric: name.to_string(),
                point: ci.point,
                ci_low: ci.lo,
                ci_high: ci.hi,
                n_resamples: N_RESAMPLES,
                comparisons,
            });
        }
        out.push(ModelReport {
            model: p.model.clone(),
            n: p.rows.len(),
            metrics,
        });
    }
    Ok(out)
}

fn write_table(path: &Path, reports: &[ModelReport], reference: &str) -> Result<(), CliError> {
    let key = format!("vs {reference}");
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "metric", "point", "ci_low", "ci_high", &format!("p_vs_{reference}"), "stars"])?;
    for r in reports {
        for m in &r.metrics {
            let p = m.comparisons.get(&key);
            w.write_record([
                r.model.clone(),
                m.metric.clone(),
                m.point.to_string(),
                m.ci_low.to_string(),
                m.ci_high.to_string(),
                p.map_or(String::new(), f64::to_string),
                p.map_or(String::new(), |p| stars(*p).to_string()),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Grouped bars: one group per metric, one colour per model.
fn bars_png(path: &Path, reports: &[ModelReport]) -> Result<(), CliError> {
    const W: u32 = 640;
    const H: u32 = 480;
    const MARGIN: u32 = 40;
    const COLORS: [[u8; 3]; 6] = [
        [31, 119, 180],
        [214, 39, 40],
        [44, 160, 44],
        [148, 103, 189],
        [255, 127, 14],
        [140, 86, 75],
    ];
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let group_w = (W - 2 * MARGIN) / METRICS.len() as u32;
    let bar_w = (group_w * 4 / 5 / reports.len().max(1) as u32).max(1);
    let plot_h = f64::from(H - 2 * MARGIN);
    for (g, name) in METRICS.iter().enumerate() {
        for (k, r) in reports.iter().enumerate() {
            let Some(m) = r.metrics.iter().find(|m| m.metric == *name) else {
                continue;
            };
            let top = H - MARGIN - (m.point.clamp(0.0, 1.0) * plot_h).round() as u32;
            let x0 = MARGIN + g as u32 * group_w + group_w / 10 + k as u32 * bar_w;
            for x in x0..(x0 + bar_w).min(W) {
                for y in top..H - MARGIN {
                    img.put_pixel(x, y, image::Rgb(COLORS[k % COLORS.len()]));
                }
            }
        }
    }
    for x in MARGIN..=W - MARGIN {
        img.put_pixel(x, H - MARGIN, image::Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let paths = list_value(cfg, "data").unwrap_or_default();
    if paths.is_empty() {
        return Err(CliError::Invalid("report needs at least one run directory or prediction file (--runs)".into()));
    }
    let inputs = gather(&paths)?;
    if inputs.predictions.is_empty() && inputs.survival.is_empty() {
        return Err(CliError::Runtime(format!(
            "nothing to report in {}; expected at least one of: {}",
            paths.join(", "),
            EXPECTED.join(", ")
        )));
    }
    if !inputs.predictions.is_empty() {
        let reports = model_reports(&inputs.predictions, cfg.seed)?;
        write_table(&rd.output(REPORT_CSV), &reports, &inputs.predictions[0].model)?;
        write_json(&rd.output(REPORT_JSON), &reports)?;
        bars_png(&rd.output(BARS_PNG), &reports)?;
        log::info!("compared {} prediction sets", reports.len());
    }
    for (name, dir) in &inputs.survival {
        let stem = super::file_stem(name);
        let (low, high) = (dir.join("km_low.csv"), dir.join("km_high.csv"));
        if low.is_file() && high.is_file() {
            let (l, h) = (km_from_csv(&low)?, km_from_csv(&high)?);
            km_plot_png(&rd.output(&format!("{stem}_km.png")), &[("low", &l), ("high", &h)])?;
        } else if dir.join("km_curve.csv").is_file() {
            let all = km_from_csv(&dir.join("km_curve.csv"))?;
            km_plot_png(&rd.output(&format!("{stem}_km.png")), &[("all", &all)])?;
        }
        let forest = dir.join("cox_forest.csv");
        if forest.is_file() {
            let target = rd.output(&format!("{stem}_forest.csv"));
            std::fs::copy(&forest, &target).map_err(|e| CliError::io(&target, e))?;
        }
    }
    Ok(())
}
