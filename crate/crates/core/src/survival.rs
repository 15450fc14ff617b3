//! Prognosis analytics: Kaplan-Meier curves, the log-rank test, median
//! risk stratification, Cox regression with Breslow ties and
//! cumulative/dynamic time-dependent AUC.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::evalstat::quantile;

pub const DEFAULT_HORIZONS: [f64; 3] = [36.0, 60.0, 84.0];
pub const COX_MAX_ITER: usize = 100;
pub const COX_GRAD_TOL: f64 = 1e-8;
/// A log hazard ratio this large means the likelihood has no finite
/// maximum; the gradient under separation only decays like `e^{−β}`.
pub const COX_SEPARATION_BOUND: f64 = 15.0;
const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Covariate {
    Numeric(f64),
    Categorical(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Months, strictly positive.
    pub time: f64,
    pub event: bool,
    pub score: f64,
    pub covariates: BTreeMap<String, Covariate>,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool, score: f64) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::Validation(format!("patient {patient_id}: time {time} must be positive")));
        }
        Ok(Self {
            patient_id,
            time,
            event,
            score,
            covariates: BTreeMap::new(),
        })
    }

    pub fn with(mut self, name: &str, value: Covariate) -> Self {
        self.covariates.insert(name.to_string(), value);
        self
    }
}

/// Reads `patient_id,time_months,event,score[,covariates...]`. A covariate
/// column holding any non-numeric value is categorical; empty cells are
/// missing.
pub fn load_survival_csv(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_survival_csv(&text)
}

pub fn parse_survival_csv(text: &str) -> Result<Vec<SurvivalRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("survival table lacks column `{name}`")))
    };
    let (cp, ct, ce, cs) = (col("patient_id")?, col("time_months")?, col("event")?, col("score")?);
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let extra: Vec<usize> = (0..headers.len()).filter(|c| ![cp, ct, ce, cs].contains(c)).collect();
    let categorical: Vec<bool> = extra
        .iter()
        .map(|&c| rows.iter().any(|r| !r[c].trim().is_empty() && r[c].trim().parse::<f64>().is_err()))
        .collect();
    let num = |s: &str, what: &str, row: usize| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Schema(format!("row {row}: `{s}` is not numeric in {what}")))
    };
    rows.iter()
        .enumerate()
        .map(|(i, rec)| {
            let event = match rec[ce].trim() {
                "1" | "true" | "True" => true,
                "0" | "false" | "False" => false,
                other => return Err(Error::Schema(format!("row {i}: bad event `{other}`"))),
            };
            let mut out = SurvivalRecord::new(&rec[cp], num(&rec[ct], "time_months", i)?, event, num(&rec[cs], "score", i)?)?;
            for (&c, &cat) in extra.iter().zip(&categorical) {
                let s = rec[c].trim();
                if s.is_empty() {
                    continue;
                }
                let v = if cat {
                    Covariate::Categorical(s.to_string())
                } else {
                    Covariate::Numeric(num(s, &headers[c], i)?)
                };
                out.covariates.insert(headers[c].clone(), v);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    /// Survival just after `time`.
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Right-continuous product-limit step function; `S = 1` before the first
/// step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    /// `S(t)`.
    pub fn at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|s| s.time <= t).last().map_or(1.0, |s| s.survival)
    }

    /// `S(t−)`.
    pub fn before(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|s| s.time < t).last().map_or(1.0, |s| s.survival)
    }
}

/// Product-limit estimate. Between censorings the product telescopes, so it
/// is evaluated as one ratio per run; without censoring `S(t)` is exactly
/// the surviving fraction.
pub fn km_raw(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Validation("Kaplan-Meier on no records".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Shape("times and events differ in length".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut steps = vec![];
    let mut at_risk = times.len();
    let (mut anchor_s, mut anchor_n) = (1.0, at_risk);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut c) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            if events[order[i]] {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        let survival = anchor_s * (at_risk - d) as f64 / anchor_n as f64;
        steps.push(KmStep {
            time: t,
            survival,
            at_risk,
            events: d,
            censored: c,
        });
        at_risk -= d + c;
        if c > 0 {
            anchor_s = survival;
            anchor_n = at_risk;
        }
    }
    Ok(KmCurve { steps })
}

pub fn km_estimate(records: &[SurvivalRecord]) -> Result<KmCurve> {
    let (t, e): (Vec<f64>, Vec<bool>) = records.iter().map(|r| (r.time, r.event)).unzip();
    km_raw(&t, &e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Two-group log-rank test; `in_a[i]` says which group record `i` is in.
pub fn logrank_raw(times: &[f64], events: &[bool], in_a: &[bool]) -> Result<LogRank> {
    let na = in_a.iter().filter(|&&a| a).count();
    if na == 0 || na == in_a.len() {
        return Err(Error::Validation("log-rank needs subjects in both groups".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut n, mut n_a) = (times.len() as f64, na as f64);
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while i < order.len() && times[order[i]] == t {
            let j = order[i];
            if events[j] {
                d += 1.0;
                if in_a[j] {
                    d_a += 1.0;
                }
            }
            leave += 1.0;
            if in_a[j] {
                leave_a += 1.0;
            }
            i += 1;
        }
        if d > 0.0 {
            observed += d_a;
            expected += d * n_a / n;
            if n > 1.0 {
                variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    let statistic = if variance > 0.0 {
        (observed - expected).powi(2) / variance
    } else {
        0.0
    };
    let chi = ChiSquared::new(1.0).expect("valid df");
    Ok(LogRank {
        statistic,
        p_value: 1.0 - chi.cdf(statistic),
        observed_a: observed,
        expected_a: expected,
    })
}

pub fn logrank_test(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("log-rank group has no subjects".into()));
    }
    let all: Vec<&SurvivalRecord> = a.iter().chain(b).collect();
    let t: Vec<f64> = all.iter().map(|r| r.time).collect();
    let e: Vec<bool> = all.iter().map(|r| r.event).collect();
    let g: Vec<bool> = (0..all.len()).map(|i| i < a.len()).collect();
    logrank_raw(&t, &e, &g)
}

/// Indices of the low and high groups split at the median score; ties at
/// the median go low.
pub fn stratify_median(scores: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if scores.len() < 2 {
        return Err(Error::Validation("median split needs at least two records".into()));
    }
    let m = quantile(scores, 0.5);
    Ok((0..scores.len()).partition(|&i| scores[i] <= m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxTerm {
    pub term: String,
    pub coef: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub lo: f64,
    pub hi: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub terms: Vec<CoxTerm>,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Coefficients ran off to infinity; estimates are not meaningful.
    pub separation: bool,
    pub n: usize,
    pub events: usize,
}

/// Breslow log partial likelihood with gradient and observed information.
pub fn cox_partial_likelihood(x: &Mat, times: &[f64], events: &[bool], beta: &[f64]) -> (f64, Vec<f64>, Mat) {
    let (n, p) = x.dim();
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; p], Mat::zeros((p, p)));
    let (mut ll, mut grad, mut info) = (0.0, vec![0.0; p], Mat::zeros((p, p)));
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let start = i;
        while i < n && times[order[i]] == t {
            let j = order[i];
            let w = (eta[j] - shift).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * x[[j, a]];
                for b in 0..p {
                    s2[[a, b]] += w * x[[j, a]] * x[[j, b]];
                }
            }
            i += 1;
        }
        for &j in &order[start..i] {
            if !events[j] {
                continue;
            }
            ll += eta[j] - shift - s0.ln();
            for a in 0..p {
                grad[a] += x[[j, a]] - s1[a] / s0;
                for b in 0..p {
                    info[[a, b]] += s2[[a, b]] / s0 - s1[a] * s1[b] / (s0 * s0);
                }
            }
        }
    }
    (ll, grad, info)
}

/// Inverse of a symmetric positive-definite matrix by Gauss-Jordan with
/// partial pivoting; `None` when singular.
fn invert(m: &Mat) -> Option<Mat> {
    let p = m.nrows();
    let mut a = m.clone();
    let mut inv = Mat::eye(p);
    for c in 0..p {
        let piv = (c..p).max_by(|&x, &y| a[[x, c]].abs().total_cmp(&a[[y, c]].abs()))?;
        if a[[piv, c]].abs() < 1e-12 {
            return None;
        }
        for k in 0..p {
            a.swap([c, k], [piv, k]);
            inv.swap([c, k], [piv, k]);
        }
        let d = a[[c, c]];
        for k in 0..p {
            a[[c, k]] /= d;
            inv[[c, k]] /= d;
        }
        for r in 0..p {
            if r != c {
                let f = a[[r, c]];
                for k in 0..p {
                    a[[r, k]] -= f * a[[c, k]];
                    inv[[r, k]] -= f * inv[[c, k]];
                }
            }
        }
    }
    Some(inv)
}

/// Newton-Raphson with step halving on the Breslow partial likelihood.
/// Constant columns are left out and reported with HR 1 and p 1.
pub fn cox_fit_matrix(x: &Mat, times: &[f64], events: &[bool], names: &[String]) -> Result<CoxFit> {
    let (n, p) = x.dim();
    if n != times.len() || n != events.len() || p != names.len() {
        return Err(Error::Shape("Cox design, outcomes and names must align".into()));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(Error::Validation("Cox regression needs at least one event".into()));
    }
    let active: Vec<usize> = (0..p)
        .filter(|&c| x.column(c).iter().any(|&v| v != x[[0, c]]))
        .collect();
    // Centering leaves the coefficients unchanged and keeps exp() tame.
    let mut xa = x.select(ndarray::Axis(1), &active);
    for mut col in xa.columns_mut() {
        let m = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - m);
    }
    let q = active.len();
    let mut beta = vec![0.0; q];
    let (mut ll, mut grad, mut info) = cox_partial_likelihood(&xa, times, events, &beta);
    let mut iterations = 0;
    let mut separation = false;
    loop {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if beta.iter().any(|b| b.abs() > COX_SEPARATION_BOUND) {
            separation = true;
            log::warn!("Cox fit: coefficients diverging, likely complete separation");
            break;
        }
        if gnorm < COX_GRAD_TOL {
            break;
        }
        if iterations == COX_MAX_ITER {
            return Err(Error::Convergence(format!(
                "Cox fit: gradient norm {gnorm:.3e} after {COX_MAX_ITER} iterations"
            )));
        }
        iterations += 1;
        let step: Vec<f64> = match invert(&info) {
            Some(inv) => (0..q).map(|a| (0..q).map(|b| inv[[a, b]] * grad[b]).sum()).collect(),
            None => grad.clone(),
        };
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (l2, g2, i2) = cox_partial_likelihood(&xa, times, events, &cand);
            if l2 >= ll - 1e-12 || scale < 1e-10 {
                beta = cand;
                (ll, grad, info) = (l2, g2, i2);
                break;
            }
            scale *= 0.5;
        }
    }
    let cov = invert(&info);
    let normal = Normal::standard();
    let mut terms: Vec<CoxTerm> = names
        .iter()
        .map(|name| CoxTerm {
            term: name.clone(),
            coef: 0.0,
            se: f64::INFINITY,
            hazard_ratio: 1.0,
            lo: 0.0,
            hi: f64::INFINITY,
            p_value: 1.0,
        })
        .collect();
    for (k, &c) in active.iter().enumerate() {
        let se = cov.as_ref().map_or(f64::INFINITY, |m| m[[k, k]].max(0.0).sqrt());
        let b = beta[k];
        let z = b / se;
        terms[c] = CoxTerm {
            term: names[c].clone(),
            coef: b,
            se,
            hazard_ratio: b.exp(),
            lo: (b - Z_975 * se).exp(),
            hi: (b + Z_975 * se).exp(),
            p_value: if se.is_finite() { 2.0 * (1.0 - normal.cdf(z.abs())) } else { 1.0 },
        };
    }
    Ok(CoxFit {
        terms,
        log_likelihood: ll,
        iterations,
        separation,
        n,
        events: n_events,
    })
}

/// Design matrix over the named covariates (`score` reads the record's
/// score). Categorical covariates are one-hot against their most frequent
/// level. Rows missing any requested covariate are dropped; the kept row
/// indices are returned.
pub fn design_matrix(records: &[SurvivalRecord], covariates: &[&str]) -> Result<(Mat, Vec<String>, Vec<usize>)> {
    let value = |r: &SurvivalRecord, name: &str| -> Option<Covariate> {
        if name == "score" {
            Some(Covariate::Numeric(r.score))
        } else {
            r.covariates.get(name).cloned()
        }
    };
    let kept: Vec<usize> = (0..records.len())
        .filter(|&i| covariates.iter().all(|c| value(&records[i], c).is_some()))
        .collect();
    if kept.len() < records.len() {
        log::info!("Cox: {} records dropped for missing covariates", records.len() - kept.len());
    }
    let mut names = vec![];
    let mut columns: Vec<Vec<f64>> = vec![];
    for &c in covariates {
        let vals: Vec<Covariate> = kept.iter().map(|&i| value(&records[i], c).unwrap()).collect();
        if vals.iter().all(|v| matches!(v, Covariate::Numeric(_))) {
            names.push(c.to_string());
            columns.push(vals.iter().map(|v| if let Covariate::Numeric(x) = v { *x } else { 0.0 }).collect());
            continue;
        }
        let level = |v: &Covariate| match v {
            Covariate::Categorical(s) => s.clone(),
            Covariate::Numeric(x) => format!("{x}"),
        };
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for v in &vals {
            *counts.entry(level(v)).or_default() += 1;
        }
        // Most frequent level is the reference; ties go to the first name.
        let reference = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .unwrap_or_default();
        for lv in counts.keys().filter(|k| **k != reference) {
            names.push(format!("{c}={lv}"));
            columns.push(vals.iter().map(|v| f64::from(u8::from(level(v) == *lv))).collect());
        }
    }
    let x = Mat::from_shape_fn((kept.len(), columns.len()), |(i, j)| columns[j][i]);
    Ok((x, names, kept))
}

pub fn cox_fit(records: &[SurvivalRecord], covariates: &[&str]) -> Result<CoxFit> {
    let (x, names, kept) = design_matrix(records, covariates)?;
    let t: Vec<f64> = kept.iter().map(|&i| records[i].time).collect();
    let e: Vec<bool> = kept.iter().map(|&i| records[i].event).collect();
    cox_fit_matrix(&x, &t, &e, &names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonAuc {
    pub horizon: f64,
    pub auc: Option<f64>,
    pub cases: usize,
    pub controls: usize,
    pub reason: Option<String>,
}

/// Cumulative/dynamic AUC: cases had an event by the horizon, controls are
/// still event-free after it. With `ipcw`, each case is weighted by the
/// inverse of the censoring survivor `Ĝ(Tᵢ−)`; control weights are all
/// `1/Ĝ(τ)` and cancel. Score ties count one half.
pub fn time_dependent_auc(records: &[SurvivalRecord], horizons: &[f64], ipcw: bool) -> Result<Vec<HorizonAuc>> {
    if records.is_empty() {
        return Err(Error::Validation("time-dependent AUC on no records".into()));
    }
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let censored: Vec<bool> = records.iter().map(|r| !r.event).collect();
    let g = km_raw(&times, &censored)?;
    Ok(horizons
        .iter()
        .map(|&tau| {
            let cases: Vec<&SurvivalRecord> = records.iter().filter(|r| r.event && r.time <= tau).collect();
            let controls: Vec<&SurvivalRecord> = records.iter().filter(|r| r.time > tau).collect();
            let (nc, nk) = (cases.len(), controls.len());
            let reason = match (nc, nk) {
                (0, _) => Some(format!("no cases by {tau} months")),
                (_, 0) => Some(format!("no controls beyond {tau} months")),
                _ => None,
            };
            let auc = reason.is_none().then(|| {
                let (mut num, mut den) = (0.0, 0.0);
                for c in &cases {
                    let w = if ipcw { 1.0 / g.before(c.time) } else { 1.0 };
                    let conc: f64 = controls
                        .iter()
                        .map(|k| {
                            if c.score > k.score {
                                1.0
                            } else if c.score == k.score {
                                0.5
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    num += w * conc;
                    den += w * nk as f64;
                }
                num / den
            });
            HorizonAuc {
                horizon: tau,
                auc,
                cases: nc,
                controls: nk,
                reason,
            }
        })
        .collect())
}

pub fn write_km_csv(path: &Path, curve: &KmCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "S", "at_risk", "events"])?;
    for s in &curve.steps {
        w.write_record([s.time.to_string(), s.survival.to_string(), s.at_risk.to_string(), s.events.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_cox_csv(path: &Path, fit: &CoxFit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["term", "HR", "lo", "hi", "p"])?;
    for t in &fit.terms {
        w.write_record([t.term.clone(), t.hazard_ratio.to_string(), t.lo.to_string(), t.hi.to_string(), t.p_value.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_tauc_csv(path: &Path, rows: &[HorizonAuc]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "auc", "cases", "controls", "reason"])?;
    for r in rows {
        w.write_record([
            r.horizon.to_string(),
            r.auc.map_or(String::new(), |a| a.to_string()),
            r.cases.to_string(),
            r.controls.to_string(),
            r.reason.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Step plot of one or more curves on a shared time axis, 640×480.
pub fn km_plot_png(path: &Path, curves: &[(&str, &KmCurve)]) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 480;
    const MARGIN: u32 = 40;
    const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.steps.iter().map(|s| s.time))
        .fold(1e-9, f64::max);
    let px = |t: f64| MARGIN + ((t / t_max) * f64::from(W - 2 * MARGIN)).round() as u32;
    let py = |s: f64| H - MARGIN - (s.clamp(0.0, 1.0) * f64::from(H - 2 * MARGIN)).round() as u32;
    let black = image::Rgb([0, 0, 0]);
    for x in MARGIN..=W - MARGIN {
        img.put_pixel(x, H - MARGIN, black);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, black);
    }
    for (k, (_, curve)) in curves.iter().enumerate() {
        let color = image::Rgb(COLORS[k % COLORS.len()]);
        let (mut t0, mut s0) = (0.0, 1.0);
        for step in curve.steps.iter().chain(std::iter::once(&KmStep {
            time: t_max,
            survival: curve.steps.last().map_or(1.0, |s| s.survival),
            at_risk: 0,
            events: 0,
            censored: 0,
        })) {
            for x in px(t0)..=px(step.time) {
                img.put_pixel(x.min(W - 1), py(s0), color);
            }
            let (a, b) = (py(s0).min(py(step.survival)), py(s0).max(py(step.survival)));
            for y in a..=b {
                img.put_pixel(px(step.time).min(W - 1), y, color);
            }
            (t0, s0) = (step.time, step.survival);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::survival_cohort;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(data: &[(f64, bool, f64)]) -> Vec<SurvivalRecord> {
        data.iter()
            .enumerate()
            .map(|(i, &(t, e, s))| SurvivalRecord::new(format!("p{i}"), t, e, s).unwrap())
            .collect()
    }

    #[test]
    fn km_hand_examples() {
        let c = km_estimate(&recs(&[(1.0, true, 0.0), (2.0, true, 0.0), (3.0, false, 0.0)])).unwrap();
        assert_eq!(c.at(0.5), 1.0);
        assert_eq!(c.at(1.0), 2.0 / 3.0);
        assert_eq!(c.at(2.0), 1.0 / 3.0);
        assert_eq!(c.at(10.0), 1.0 / 3.0);
        let none = km_estimate(&recs(&[(1.0, false, 0.0), (4.0, false, 0.0)])).unwrap();
        assert!([0.0, 1.0, 5.0].iter().all(|&t| none.at(t) == 1.0));
        let one = km_estimate(&recs(&[(5.0, true, 0.0)])).unwrap();
        assert_eq!((one.at(4.999), one.at(5.0), one.at(9.0)), (1.0, 0.0, 0.0));
        assert!(km_estimate(&[]).is_err());
    }

    #[test]
    fn km_uncensored_is_empirical_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times: Vec<f64> = (0..57).map(|_| f64::from(rng.random_range(1..20u32))).collect();
        let c = km_raw(&times, &vec![true; 57]).unwrap();
        for t in 0..22 {
            let t = f64::from(t);
            let alive = times.iter().filter(|&&x| x > t).count();
            assert_eq!(c.at(t), alive as f64 / 57.0);
        }
    }

    #[test]
    fn logrank_examples() {
        let a = recs(&(1..=20).map(|i| (i as f64, true, 0.0)).collect::<Vec<_>>());
        let r = logrank_test(&a, &a.clone()).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let b = recs(&(1..=20).map(|i| (100.0 + i as f64, true, 0.0)).collect::<Vec<_>>());
        let ab = logrank_test(&a, &b).unwrap();
        assert!(ab.p_value < 1e-3);
        let ba = logrank_test(&b, &a).unwrap();
        assert!((ab.statistic - ba.statistic).abs() <= 1e-9 * ab.statistic);
        assert!(logrank_test(&a, &[]).is_err());
    }

    #[test]
    fn median_split_ties_low() {
        let (lo, hi) = stratify_median(&[0.1, 0.4, 0.6, 0.9]).unwrap();
        assert_eq!((lo, hi), (vec![0, 1], vec![2, 3]));
        let (lo, hi) = stratify_median(&[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!((lo, hi), (vec![0, 1, 2], vec![3]));
        let (lo, hi) = stratify_median(&[5.0; 4]).unwrap();
        assert_eq!((lo.len(), hi.len()), (4, 0));
        assert!(stratify_median(&[1.0]).is_err());
    }

    fn twelve() -> (Mat, Vec<f64>, Vec<bool>) {
        let t = vec![2.0, 3.0, 3.0, 5.0, 6.0, 7.0, 8.0, 9.0, 11.0, 12.0, 14.0, 15.0];
        let e = vec![true, true, false, true, true, false, true, true, false, true, true, false];
        let x = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        (Mat::from_shape_vec((12, 1), x.to_vec()).unwrap(), t, e)
    }

    /// Breslow partial likelihood by explicit risk-set loops.
    fn brute_ll(x: &[f64], t: &[f64], e: &[bool], b: f64) -> f64 {
        (0..t.len())
            .filter(|&i| e[i])
            .map(|i| {
                let denom: f64 = (0..t.len()).filter(|&j| t[j] >= t[i]).map(|j| (b * x[j]).exp()).sum();
                b * x[i] - denom.ln()
            })
            .sum()
    }

    #[test]
    fn cox_matches_grid_search() {
        let (x, t, e) = twelve();
        let fit = cox_fit_matrix(&x, &t, &e, &["x".into()]).unwrap();
        let xs: Vec<f64> = x.column(0).to_vec();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in -50_000..=50_000 {
            let b = f64::from(k) * 1e-4;
            let l = brute_ll(&xs, &t, &e, b);
            if l > best.0 {
                best = (l, b);
            }
        }
        assert!((fit.terms[0].coef - best.1).abs() < 1e-3, "{} vs {}", fit.terms[0].coef, best.1);
        let (lo, hi) = (fit.terms[0].lo, fit.terms[0].hi);
        assert!(lo < fit.terms[0].hazard_ratio && fit.terms[0].hazard_ratio < hi);
    }

    #[test]
    fn cox_degenerate_and_scaling() {
        let (x, t, e) = twelve();
        let zero = Mat::zeros((12, 1));
        let f0 = cox_fit_matrix(&zero, &t, &e, &["z".into()]).unwrap();
        assert_eq!((f0.terms[0].hazard_ratio, f0.terms[0].p_value), (1.0, 1.0));
        let base = cox_fit_matrix(&x, &t, &e, &["x".into()]).unwrap().terms[0].clone();
        for scale in [0.1, 3.0, 17.0] {
            let xs = x.mapv(|v| v * scale + 4.0);
            let c = cox_fit_matrix(&xs, &t, &e, &["x".into()]).unwrap().terms[0].coef;
            assert!((c * scale - base.coef).abs() < 1e-6);
        }
        let x2 = ndarray::concatenate![ndarray::Axis(0), x, x];
        let t2: Vec<f64> = t.iter().chain(&t).copied().collect();
        let e2: Vec<bool> = e.iter().chain(&e).copied().collect();
        let dup = cox_fit_matrix(&x2, &t2, &e2, &["x".into()]).unwrap().terms[0].clone();
        assert!((dup.hazard_ratio - base.hazard_ratio).abs() < 1e-9);
        assert!(dup.hi - dup.lo < base.hi - base.lo);
        assert!((base.se / dup.se - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn cox_flags_separation() {
        let t: Vec<f64> = (1..=10).map(f64::from).collect();
        let x = Mat::from_shape_fn((10, 1), |(i, _)| if i < 5 { 1.0 } else { 0.0 });
        let e = vec![true; 10];
        let fit = cox_fit_matrix(&x, &t, &e, &["x".into()]).unwrap();
        assert!(fit.separation);
    }

    #[test]
    fn cox_recovers_effect_and_encodes_categories() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = survival_cohort(400, 0.8, 0.01, &mut rng);
        let r: Vec<SurvivalRecord> = recs(&data)
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.with("site", Covariate::Categorical(["trunk", "trunk", "limb", "head"][i % 4].into())))
            .collect();
        let fit = cox_fit(&r, &["score", "site"]).unwrap();
        let names: Vec<&str> = fit.terms.iter().map(|t| t.term.as_str()).collect();
        assert_eq!(names, ["score", "site=head", "site=limb"]);
        assert!((fit.terms[0].coef - 0.8).abs() < 0.2);
        assert!(fit.terms[0].p_value < 1e-6);
    }

    #[test]
    fn tauc_examples() {
        // Perfect ordering: earlier events carry higher scores.
        let r = recs(&(1..=100).map(|i| (i as f64, true, -(i as f64))).collect::<Vec<_>>());
        for h in time_dependent_auc(&r, &[10.0, 50.0, 99.0], true).unwrap() {
            assert_eq!(h.auc, Some(1.0));
        }
        let none = time_dependent_auc(&r, &[0.5, 200.0], true).unwrap();
        assert!(none.iter().all(|h| h.auc.is_none() && h.reason.is_some()));
        let six = recs(&[(2.0, true, 0.9), (4.0, true, 0.3), (5.0, true, 0.5), (7.0, true, 0.4), (9.0, true, 0.8), (11.0, true, 0.1)]);
        for tau in [3.0, 6.0, 8.0, 10.0] {
            let (mut conc, mut pairs) = (0.0, 0.0);
            for c in six.iter().filter(|c| c.time <= tau) {
                for k in six.iter().filter(|k| k.time > tau) {
                    pairs += 1.0;
                    conc += if c.score > k.score { 1.0 } else if c.score == k.score { 0.5 } else { 0.0 };
                }
            }
            assert_eq!(time_dependent_auc(&six, &[tau], true).unwrap()[0].auc, Some(conc / pairs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let null = recs(&(0..200).map(|_| (rng.random_range(1.0..100.0), true, rng.random::<f64>())).collect::<Vec<_>>());
        let a = time_dependent_auc(&null, &[50.0], true).unwrap()[0].auc.unwrap();
        assert!((a - 0.5).abs() <= 0.08);
    }

    #[test]
    fn tauc_without_early_censoring_is_plain_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<(f64, bool, f64)> = (0..80)
            .map(|_| {
                let ev = rng.random_bool(0.4);
                let s: f64 = rng.random::<f64>() + if ev { 0.3 } else { 0.0 };
                (if ev { rng.random_range(1.0..50.0) } else { 120.0 }, ev, s)
            })
            .collect();
        let r = recs(&data);
        let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
        let sc: Vec<f64> = data.iter().map(|d| d.2).collect();
        let plain = crate::evalstat::binary_auroc(&pos, &sc).unwrap();
        let t = time_dependent_auc(&r, &[60.0], true).unwrap()[0].auc.unwrap();
        assert!((t - plain).abs() < 1e-12);
    }

    #[test]
    fn csv_and_plot_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let text = "patient_id,time_months,event,score,age,subtype\np1,10,1,0.5,60,nodular\np2,20,0,0.1,,superficial\n";
        let r = parse_survival_csv(text).unwrap();
        assert_eq!(r[0].covariates["age"], Covariate::Numeric(60.0));
        assert!(!r[1].covariates.contains_key("age"));
        assert_eq!(r[1].covariates["subtype"], Covariate::Categorical("superficial".into()));
        assert!(parse_survival_csv("patient_id,time_months,event,score\np,0,1,0\n").is_err());
        let c = km_estimate(&r).unwrap();
        write_km_csv(&dir.path().join("km.csv"), &c).unwrap();
        km_plot_png(&dir.path().join("km.png"), &[("all", &c)]).unwrap();
        assert!(dir.path().join("km.png").exists());
    }
}
