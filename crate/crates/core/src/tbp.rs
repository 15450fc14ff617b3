//! Total-body-photography screening: lesion filtering, an ugly-duckling
//! outlier rule over per-patient feature distances, an extremely randomised
//! trees classifier on the tabular measurements, and the OR-combiner with
//! lesion- and patient-level evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::evalstat::quantile_sorted;

/// The per-lesion measurements, in the scanner's own column names.
pub const MEASUREMENTS: [&str; 32] = [
    "A",
    "Aext",
    "B",
    "Bext",
    "C",
    "Cext",
    "H",
    "Hext",
    "L",
    "Lext",
    "areaMM2",
    "area_perim_ratio",
    "color_std_mean",
    "deltaA",
    "deltaB",
    "deltaL",
    "deltaLB",
    "deltaLBnorm",
    "dnn_lesion_confidence",
    "eccentricity",
    "location_simple",
    "majorAxisMM",
    "minorAxisMM",
    "nevi_confidence",
    "norm_border",
    "norm_color",
    "perimeterMM",
    "radial_color_std_max",
    "stdL",
    "stdLExt",
    "symm_2axis",
    "symm_2axis_angle",
];

pub fn measurement_index(name: &str) -> Option<usize> {
    MEASUREMENTS.iter().position(|m| *m == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub patient_id: String,
    pub tile_ref: String,
    /// Indexed like [`MEASUREMENTS`]; `None` is an explicit null.
    pub measurements: Vec<Option<f64>>,
    pub label_risk: Option<bool>,
    pub label_malignant: Option<bool>,
}

impl LesionRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        measurement_index(name).and_then(|i| self.measurements[i])
    }

    pub fn set(&mut self, name: &str, value: Option<f64>) {
        let i = measurement_index(name).expect("known measurement");
        self.measurements[i] = value;
    }
}

fn parse_bool(s: &str, col: &str, row: usize) -> Result<Option<bool>> {
    match s.trim() {
        "" => Ok(None),
        "1" | "true" | "True" | "TRUE" => Ok(Some(true)),
        "0" | "false" | "False" | "FALSE" => Ok(Some(false)),
        other => Err(Error::Schema(format!("row {row}: `{other}` is not a boolean in {col}"))),
    }
}

/// Reads a lesion table. Every measurement column must exist; empty cells
/// become nulls. Lesion ids must be unique.
pub fn load_lesions(path: &Path) -> Result<Vec<LesionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lesions(&text)
}

pub fn parse_lesions(text: &str) -> Result<Vec<LesionRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Schema(format!("lesion table lacks column `{name}`")));
    let (ci, cp, ct) = (need("lesion_id")?, need("patient_id")?, need("tile_ref")?);
    let mcols: Vec<usize> = MEASUREMENTS.iter().map(|m| need(m)).collect::<Result<_>>()?;
    let (cr, cm) = (col("label_risk"), col("label_malignant"));
    let mut out = vec![];
    let mut seen = BTreeSet::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec[ci].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Validation(format!("duplicate lesion_id `{id}`")));
        }
        let measurements = mcols
            .iter()
            .zip(MEASUREMENTS)
            .map(|(&c, name)| {
                let s = rec[c].trim();
                if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("null") {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Schema(format!("row {row}: `{s}` is not numeric in {name}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LesionRecord {
            lesion_id: id,
            patient_id: rec[cp].to_string(),
            tile_ref: rec[ct].to_string(),
            measurements,
            label_risk: cr.map(|c| parse_bool(&rec[c], "label_risk", row)).transpose()?.flatten(),
            label_malignant: cm.map(|c| parse_bool(&rec[c], "label_malignant", row)).transpose()?.flatten(),
        });
    }
    Ok(out)
}

pub fn write_lesions(path: &Path, records: &[LesionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = vec!["lesion_id", "patient_id", "tile_ref"];
    header.extend(MEASUREMENTS);
    header.extend(["label_risk", "label_malignant"]);
    w.write_record(&header)?;
    let b = |v: Option<bool>| v.map_or(String::new(), |x| u8::from(x).to_string());
    for r in records {
        let mut row = vec![r.lesion_id.clone(), r.patient_id.clone(), r.tile_ref.clone()];
        row.extend(r.measurements.iter().map(|m| m.map_or(String::new(), |v| format!("{v}"))));
        row.push(b(r.label_risk));
        row.push(b(r.label_malignant));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Nevus selection: `majorAxisMM ≥ 2`, `deltaLBnorm ≥ 4.5`,
/// `out_of_bounds_fraction ≤ 0.25`, `dnn_lesion_confidence ≥ 50`,
/// `nevi_confidence > 80`. Rows with a null in any of these are dropped.
pub const FILTER_MAJOR_AXIS_MM: f64 = 2.0;
pub const FILTER_DELTA_LB_NORM: f64 = 4.5;
pub const FILTER_OUT_OF_BOUNDS: f64 = 0.25;
pub const FILTER_DNN_CONFIDENCE: f64 = 50.0;
pub const FILTER_NEVI_CONFIDENCE: f64 = 80.0;

/// `out_of_bounds_fraction` is not one of the model's 32 inputs, so it
/// travels separately, keyed by lesion id.
pub fn filter_lesions(records: &[LesionRecord], out_of_bounds: &BTreeMap<String, f64>) -> Vec<LesionRecord> {
    records
        .iter()
        .filter(|r| {
            let checks: [(&str, Option<f64>, fn(f64) -> bool); 5] = [
                ("majorAxisMM", r.get("majorAxisMM"), |v| v >= FILTER_MAJOR_AXIS_MM),
                ("deltaLBnorm", r.get("deltaLBnorm"), |v| v >= FILTER_DELTA_LB_NORM),
                ("out_of_bounds_fraction", out_of_bounds.get(&r.lesion_id).copied(), |v| v <= FILTER_OUT_OF_BOUNDS),
                ("dnn_lesion_confidence", r.get("dnn_lesion_confidence"), |v| v >= FILTER_DNN_CONFIDENCE),
                ("nevi_confidence", r.get("nevi_confidence"), |v| v > FILTER_NEVI_CONFIDENCE),
            ];
            for (name, v, ok) in checks {
                match v {
                    None => {
                        log::info!("lesion {} dropped: {name} is null", r.lesion_id);
                        return false;
                    }
                    Some(v) if !ok(v) => return false,
                    Some(_) => {}
                }
            }
            true
        })
        .cloned()
        .collect()
}

/// Tukey fence multiplier for the ugly-duckling rule.
pub const UD_IQR_MULTIPLIER: f64 = 1.5;
pub const UD_MIN_LESIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdResult {
    pub positive: Vec<bool>,
    /// Distance of each lesion to its patient's mean feature vector.
    pub distance: Vec<f64>,
    /// Patients with too few lesions for a fence; none of theirs is flagged.
    pub skipped_patients: Vec<String>,
}

/// Upper Tukey fence over per-patient distances to the patient mean, with
/// linearly interpolated quartiles.
pub fn ud_outliers(features: &Mat, patients: &[String]) -> Result<UdResult> {
    if features.nrows() != patients.len() {
        return Err(Error::Shape(format!("{} feature rows for {} lesions", features.nrows(), patients.len())));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        groups.entry(p.as_str()).or_default().push(i);
    }
    let n = patients.len();
    let mut positive = vec![false; n];
    let mut distance = vec![0.0; n];
    let mut skipped = vec![];
    for (pid, rows) in groups {
        let d = features.ncols();
        let mut mean = vec![0.0; d];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        for &i in &rows {
            distance[i] = features.row(i).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>().sqrt();
        }
        if rows.len() < UD_MIN_LESIONS {
            skipped.push(pid.to_string());
            continue;
        }
        let mut sorted: Vec<f64> = rows.iter().map(|&i| distance[i]).collect();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
        let fence = q3 + UD_IQR_MULTIPLIER * (q3 - q1);
        for &i in &rows {
            positive[i] = distance[i] > fence;
        }
    }
    Ok(UdResult {
        positive,
        distance,
        skipped_patients: skipped,
    })
}

/// Named feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    /// Rows are samples; `NaN` marks a missing value.
    pub values: Mat,
}

impl FeatureTable {
    pub fn from_records(records: &[LesionRecord]) -> Self {
        let values = Mat::from_shape_fn((records.len(), MEASUREMENTS.len()), |(i, j)| {
            records[i].measurements[j].unwrap_or(f64::NAN)
        });
        Self {
            names: MEASUREMENTS.iter().map(|s| s.to_string()).collect(),
            values,
        }
    }

    /// Columns reordered to `names`; every name must be present.
    pub fn select(&self, names: &[String]) -> Result<Mat> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::Schema(format!("feature `{n}` missing")))
            })
            .collect::<Result<_>>()?;
        Ok(self.values.select(ndarray::Axis(1), &idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtraTreesConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features tried per node; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    /// Random thresholds drawn per tried feature (1 is the classic rule).
    pub thresholds_per_feature: usize,
    pub seed: u64,
}

impl Default for ExtraTreesConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: None,
            min_samples_split: 2,
            max_features: None,
            thresholds_per_feature: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Missing values go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        positive_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { positive_fraction } => return *positive_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    at = if v.is_nan() || v <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Binary extremely randomised trees. Columns are held in sorted-name
/// order so the fit depends on names, not positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraTrees {
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    x: &'a Mat,
    y: &'a [bool],
    cfg: &'a ExtraTreesConfig,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let pos = rows.iter().filter(|&&i| self.y[i]).count();
        self.nodes.push(Node::Leaf {
            positive_fraction: pos as f64 / rows.len().max(1) as f64,
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = rows.iter().filter(|&&i| self.y[i]).count();
        let pure = pos == 0 || pos == rows.len();
        if pure || rows.len() < self.cfg.min_samples_split || self.cfg.max_depth.is_some_and(|m| depth >= m) {
            return self.leaf(&rows);
        }
        let d = self.x.ncols();
        let k = self.cfg.max_features.unwrap_or((d as f64).sqrt().ceil() as usize).clamp(1, d);
        let mut feats: Vec<usize> = (0..d).collect();
        feats.shuffle(rng);
        let parent = gini(pos, rows.len());
        let mut best: Option<(f64, usize, f64)> = None;
        // Like the classic algorithm, keep drawing features past `k` while
        // every one tried so far is constant on this node.
        let mut tried_useful = 0;
        for &f in &feats {
            if tried_useful >= k {
                break;
            }
            let (lo, hi) = rows.iter().map(|&i| self.x[[i, f]]).filter(|v| !v.is_nan()).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(v), hi.max(v)),
            );
            if !(hi > lo) {
                continue;
            }
            tried_useful += 1;
            for _ in 0..self.cfg.thresholds_per_feature.max(1) {
                let t = rng.random_range(lo..hi);
                let (mut ln, mut lp) = (0, 0);
                for &i in &rows {
                    let v = self.x[[i, f]];
                    if v.is_nan() || v <= t {
                        ln += 1;
                        lp += usize::from(self.y[i]);
                    }
                }
                let rn = rows.len() - ln;
                if ln == 0 || rn == 0 {
                    continue;
                }
                let child = (ln as f64 * gini(lp, ln) + rn as f64 * gini(pos - lp, rn)) / rows.len() as f64;
                let gain = parent - child;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, t));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(&rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| {
            let v = self.x[[i, feature]];
            v.is_nan() || v <= threshold
        });
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { positive_fraction: 0.0 });
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

impl ExtraTrees {
    pub fn fit(table: &FeatureTable, labels: &[bool], cfg: &ExtraTreesConfig) -> Result<Self> {
        if table.values.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} rows for {} labels", table.values.nrows(), labels.len())));
        }
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Validation("metadata training labels hold a single class".into()));
        }
        let mut names = table.names.clone();
        names.sort();
        let x = table.select(&names)?;
        let trees = (0..cfg.n_trees)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(t as u64));
                let mut g = Grower {
                    x: &x,
                    y: labels,
                    cfg,
                    nodes: vec![],
                };
                g.grow((0..labels.len()).collect(), 0, &mut rng);
                Tree { nodes: g.nodes }
            })
            .collect();
        Ok(Self {
            feature_names: names,
            trees,
        })
    }

    /// Mean positive-leaf fraction across trees.
    pub fn predict_proba(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let x = table.select(&self.feature_names)?;
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let row: Vec<f64> = row.to_vec();
                self.trees.iter().map(|t| t.predict(&row)).sum::<f64>() / self.trees.len() as f64
            })
            .collect())
    }
}

/// One module's positives, aligned to lesion ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub ids: Vec<String>,
    pub positive: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub lesion_id: String,
    pub risk_positive: bool,
    pub ud_positive: bool,
    pub ml_positive: bool,
    pub suspicious: bool,
}

/// Logical OR of the available modules. Absent modules count as negative;
/// present ones must list the same lesions in the same order.
pub fn combine(
    risk: Option<&ModuleFlags>,
    ud: Option<&ModuleFlags>,
    ml: Option<&ModuleFlags>,
) -> Result<Vec<ScreeningDecision>> {
    let present: Vec<&ModuleFlags> = [risk, ud, ml].into_iter().flatten().collect();
    let Some(first) = present.first() else {
        return Err(Error::Validation("no screening module enabled".into()));
    };
    for m in &present {
        if m.ids.len() != m.positive.len() {
            return Err(Error::Shape("module ids and flags differ in length".into()));
        }
        if m.ids != first.ids {
            return Err(Error::Validation("screening modules disagree on lesion ids".into()));
        }
    }
    let flag = |m: Option<&ModuleFlags>, i: usize| m.is_some_and(|m| m.positive[i]);
    Ok(first
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (r, u, l) = (flag(risk, i), flag(ud, i), flag(ml, i));
            ScreeningDecision {
                lesion_id: id.clone(),
                risk_positive: r,
                ud_positive: u,
                ml_positive: l,
                suspicious: r || u || l,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub lesions: usize,
    pub flagged: usize,
    pub malignant: usize,
    pub malignant_detected: usize,
    pub lesion_sensitivity: Option<f64>,
    pub lesion_precision: Option<f64>,
    pub lesion_specificity: Option<f64>,
    pub patients_with_malignancy: usize,
    pub patients_detected: usize,
    pub patient_sensitivity: Option<f64>,
}

/// Lesion- and patient-level screening yield. Lesions with unknown
/// pathology count toward the flagged total only.
pub fn screen_report(
    decisions: &[ScreeningDecision],
    malignant: &[Option<bool>],
    patients: &[String],
) -> Result<ScreenReport> {
    if decisions.len() != malignant.len() || decisions.len() != patients.len() {
        return Err(Error::Shape("decisions, labels and patients must align".into()));
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let (mut tp, mut fp, mut tn, mut pos) = (0, 0, 0, 0);
    let mut per_patient: BTreeMap<&str, bool> = BTreeMap::new();
    for ((d, m), p) in decisions.iter().zip(malignant).zip(patients) {
        match m {
            Some(true) => {
                pos += 1;
                tp += usize::from(d.suspicious);
                let caught = per_patient.entry(p.as_str()).or_insert(false);
                *caught |= d.suspicious;
            }
            Some(false) => {
                fp += usize::from(d.suspicious);
                tn += usize::from(!d.suspicious);
            }
            None => {}
        }
    }
    let flagged = decisions.iter().filter(|d| d.suspicious).count();
    let pd = per_patient.values().filter(|&&c| c).count();
    Ok(ScreenReport {
        lesions: decisions.len(),
        flagged,
        malignant: pos,
        malignant_detected: tp,
        lesion_sensitivity: ratio(tp, pos),
        lesion_precision: ratio(tp, tp + fp),
        lesion_specificity: ratio(tn, tn + fp),
        patients_with_malignancy: per_patient.len(),
        patients_detected: pd,
        patient_sensitivity: ratio(pd, per_patient.len()),
    })
}

pub fn write_decisions_csv(path: &Path, decisions: &[ScreeningDecision]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in decisions {
        w.serialize(d)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Synthetic lesions with plausible measurement ranges. Malignancy follows
/// `deltaLBnorm > 7`; a few lesions per patient are colour outliers.
pub fn synthetic_lesions(patients: usize, per_patient: usize, seed: u64) -> Vec<LesionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    for p in 0..patients {
        for l in 0..per_patient {
            let mut m: Vec<Option<f64>> = vec![None; MEASUREMENTS.len()];
            for (i, v) in m.iter_mut().enumerate() {
                *v = Some(rng.random_range(0.0..10.0) + i as f64);
            }
            let mut rec = LesionRecord {
                lesion_id: format!("p{p:03}_l{l:03}"),
                patient_id: format!("p{p:03}"),
                tile_ref: format!("tiles/p{p:03}_l{l:03}.png"),
                measurements: m,
                label_risk: None,
                label_malignant: None,
            };
            let dlb = rng.random_range(3.0..10.0);
            rec.set("deltaLBnorm", Some(dlb));
            rec.set("majorAxisMM", Some(rng.random_range(1.0..8.0)));
            rec.set("dnn_lesion_confidence", Some(rng.random_range(30.0..100.0)));
            rec.set("nevi_confidence", Some(rng.random_range(60.0..100.0)));
            rec.label_malignant = Some(dlb > 7.0);
            rec.label_risk = Some(dlb > 6.0);
            out.push(rec);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstat::binary_auroc;

    fn base_record(id: &str) -> LesionRecord {
        let mut r = synthetic_lesions(1, 1, 0).remove(0);
        r.lesion_id = id.into();
        r.set("majorAxisMM", Some(3.0));
        r.set("deltaLBnorm", Some(5.0));
        r.set("dnn_lesion_confidence", Some(60.0));
        r.set("nevi_confidence", Some(90.0));
        r
    }

    #[test]
    fn there_are_32_measurements() {
        assert_eq!(MEASUREMENTS.len(), 32);
        assert_eq!(MEASUREMENTS.iter().collect::<BTreeSet<_>>().len(), 32);
    }

    #[test]
    fn filter_bounds() {
        let oob: BTreeMap<String, f64> = ["a", "b", "c", "d"].iter().map(|s| (s.to_string(), 0.25)).collect();
        let mut a = base_record("a");
        a.set("majorAxisMM", Some(2.0));
        let mut b = base_record("b");
        b.set("nevi_confidence", Some(80.0));
        let mut c = base_record("c");
        c.set("deltaLBnorm", None);
        let d = base_record("d");
        let kept = filter_lesions(&[a, b, c, d.clone()], &oob);
        let ids: Vec<&str> = kept.iter().map(|r| r.lesion_id.as_str()).collect();
        assert_eq!(ids, ["a", "d"]);
        assert_eq!(filter_lesions(&kept, &oob), kept);
        assert!(filter_lesions(&[], &oob).is_empty());
        let no_oob = BTreeMap::new();
        assert!(filter_lesions(&[d], &no_oob).is_empty());
    }

    #[test]
    fn ud_hand_example() {
        let f = Mat::from_shape_vec((8, 1), vec![0.0; 8]).unwrap();
        let p = vec!["x".to_string(); 8];
        assert!(ud_outliers(&f, &p).unwrap().positive.iter().all(|&b| !b));
        // Distances to the mean of {0,...,0,8} are {1,...,1,7}.
        let mut v = vec![0.0; 8];
        v[7] = 8.0;
        let f = Mat::from_shape_vec((8, 1), v).unwrap();
        let r = ud_outliers(&f, &p).unwrap();
        assert_eq!(r.positive, [false, false, false, false, false, false, false, true]);
        let doubled = f.mapv(|x| 2.0 * x);
        assert_eq!(ud_outliers(&doubled, &p).unwrap().positive, r.positive);
        let few = ud_outliers(&f.slice(ndarray::s![..3, ..]).to_owned(), &p[..3]).unwrap();
        assert_eq!(few.skipped_patients, ["x"]);
        assert!(few.positive.iter().all(|&b| !b));
    }

    #[test]
    fn combiner_truth_table() {
        let ids: Vec<String> = (0..8).map(|i| i.to_string()).collect();
        let bits = |k: usize| ModuleFlags {
            ids: ids.clone(),
            positive: (0..8).map(|i| i >> k & 1 == 1).collect(),
        };
        let (r, u, m) = (bits(0), bits(1), bits(2));
        let d = combine(Some(&r), Some(&u), Some(&m)).unwrap();
        for (i, dec) in d.iter().enumerate() {
            assert_eq!(dec.suspicious, i != 0);
        }
        let img_only = combine(Some(&r), Some(&u), None).unwrap();
        for (i, dec) in img_only.iter().enumerate() {
            assert_eq!(dec.suspicious, r.positive[i] || u.positive[i]);
            assert!(!dec.ml_positive);
        }
        let mut other = bits(0);
        other.ids.reverse();
        assert!(matches!(combine(Some(&r), Some(&other), None), Err(Error::Validation(_))));
    }

    #[test]
    fn report_counts() {
        let mk = |id: &str, s: bool| ScreeningDecision {
            lesion_id: id.into(),
            risk_positive: s,
            ud_positive: false,
            ml_positive: false,
            suspicious: s,
        };
        let dec = vec![mk("a", true), mk("b", false), mk("c", true), mk("d", false), mk("e", true)];
        let mal = vec![Some(true), Some(true), Some(true), Some(false), None];
        let pat: Vec<String> = ["p1", "p2", "p3", "p3", "p3"].iter().map(|s| s.to_string()).collect();
        let r = screen_report(&dec, &mal, &pat).unwrap();
        assert_eq!((r.patients_detected, r.patients_with_malignancy), (2, 3));
        assert_eq!(r.flagged, 3);
        assert_eq!(r.lesion_sensitivity, Some(2.0 / 3.0));
        let all: Vec<_> = dec.iter().map(|d| mk(&d.lesion_id, true)).collect();
        let r = screen_report(&all, &mal, &pat).unwrap();
        assert_eq!((r.lesion_sensitivity, r.flagged), (Some(1.0), 5));
        let none: Vec<_> = dec.iter().map(|d| mk(&d.lesion_id, false)).collect();
        assert_eq!(screen_report(&none, &mal, &pat).unwrap().lesion_sensitivity, Some(0.0));
    }

    #[test]
    fn stump_recovers_step() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let y: Vec<bool> = xs.iter().map(|&x| x > 4.05).collect();
        let t = FeatureTable {
            names: vec!["x".into()],
            values: Mat::from_shape_vec((100, 1), xs).unwrap(),
        };
        let cfg = ExtraTreesConfig {
            n_trees: 1,
            max_depth: Some(1),
            thresholds_per_feature: 200,
            ..ExtraTreesConfig::default()
        };
        let m = ExtraTrees::fit(&t, &y, &cfg).unwrap();
        match m.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert!((4.0..4.1).contains(&threshold), "{threshold}"),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn metadata_rule_is_learned_and_name_keyed() {
        let recs = synthetic_lesions(50, 10, 3);
        let labels: Vec<bool> = recs.iter().map(|r| r.label_malignant.unwrap()).collect();
        let table = FeatureTable::from_records(&recs);
        let cfg = ExtraTreesConfig {
            n_trees: 100,
            ..ExtraTreesConfig::default()
        };
        let m = ExtraTrees::fit(
            &FeatureTable {
                names: table.names.clone(),
                values: table.values.slice(ndarray::s![..400, ..]).to_owned(),
            },
            &labels[..400],
            &cfg,
        )
        .unwrap();
        let test = FeatureTable {
            names: table.names.clone(),
            values: table.values.slice(ndarray::s![400.., ..]).to_owned(),
        };
        let p = m.predict_proba(&test).unwrap();
        assert!(binary_auroc(&labels[400..], &p).unwrap() >= 0.95);
        let mut perm: Vec<usize> = (0..32).collect();
        perm.reverse();
        let shuffled = FeatureTable {
            names: perm.iter().map(|&i| test.names[i].clone()).collect(),
            values: test.values.select(ndarray::Axis(1), &perm),
        };
        assert_eq!(m.predict_proba(&shuffled).unwrap(), p);
        assert!(ExtraTrees::fit(&test, &vec![true; 100], &cfg).is_err());
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let mut recs = synthetic_lesions(2, 3, 1);
        recs[1].set("stdL", None);
        write_lesions(&path, &recs).unwrap();
        assert_eq!(load_lesions(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap().replacen("symm_2axis_angle", "angle", 1);
        assert!(matches!(parse_lesions(&text), Err(Error::Schema(_))));
    }
}
