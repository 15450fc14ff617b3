//! Classification and segmentation metrics, bootstrap intervals,
//! permutation tests, t-tests and multiple-comparison correction.

use std::collections::BTreeMap;
use std::hash::Hash;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autograd::Mat;
use crate::data::Seeder;
use crate::error::{Error, Result};

/// Quantile of ascending-sorted data by linear interpolation between order
/// statistics (position `q·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(probs: &Mat) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Midranks (1-based) with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUROC with midranks; `None` when either class is absent.
pub fn binary_auroc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Average precision: Σ (Rₖ − Rₖ₋₁)·Pₖ over distinct score thresholds,
/// descending. `None` without positives.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Confusion matrix `[true][pred]`.
pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Array2<usize> {
    let mut m = Array2::zeros((classes, classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[[t, p]] += 1;
    }
    m
}

fn per_class_f1(cm: &Array2<usize>) -> Vec<f64> {
    let c = cm.nrows();
    (0..c)
        .map(|k| {
            let tp = cm[[k, k]] as f64;
            let pred: f64 = (0..c).map(|i| cm[[i, k]] as f64).sum();
            let actual: f64 = (0..c).map(|j| cm[[k, j]] as f64).sum();
            if pred + actual == 0.0 {
                0.0
            } else {
                2.0 * tp / (pred + actual)
            }
        })
        .collect()
}

/// Support-weighted F1.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let cm = confusion(y_true, y_pred, classes);
    let f1 = per_class_f1(&cm);
    let n = y_true.len() as f64;
    (0..classes)
        .map(|k| f1[k] * cm.row(k).sum() as f64 / n)
        .sum()
}

/// Unweighted mean of per-class F1 over classes present in either vector.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let cm = confusion(y_true, y_pred, classes);
    let f1 = per_class_f1(&cm);
    let present: Vec<usize> = (0..classes)
        .filter(|&k| cm.row(k).sum() + cm.column(k).sum() > 0)
        .collect();
    present.iter().map(|&k| f1[k]).sum::<f64>() / present.len().max(1) as f64
}

fn per_class_recall(cm: &Array2<usize>) -> Vec<Option<f64>> {
    (0..cm.nrows())
        .map(|k| {
            let s = cm.row(k).sum();
            (s > 0).then(|| cm[[k, k]] as f64 / s as f64)
        })
        .collect()
}

/// Mean per-class recall over classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let r: Vec<f64> = per_class_recall(&confusion(y_true, y_pred, classes))
        .into_iter()
        .flatten()
        .collect();
    mean(&r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub w_f1: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub bacc: f64,
    /// Recall of class 1 for binary tasks, macro recall otherwise.
    pub sensitivity: f64,
    /// Recall of class 0 for binary tasks, macro true-negative rate
    /// otherwise.
    pub specificity: f64,
    /// Why AUROC/AUPR are missing, when they are.
    pub note: Option<String>,
}

/// All classification metrics from labels and an `n × C` probability matrix.
/// Multiclass AUROC and AUPR are one-vs-rest macro averages over classes
/// that have both positives and negatives.
pub fn classification_metrics(y_true: &[usize], probs: &Mat) -> Result<ClassificationMetrics> {
    let (n, c) = probs.dim();
    if n != y_true.len() {
        return Err(Error::Shape(format!("{} labels for {n} probability rows", y_true.len())));
    }
    if n == 0 || c < 2 {
        return Err(Error::Argument("metrics need at least one row and two classes".into()));
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= c) {
        return Err(Error::Argument(format!("label {bad} outside {c} classes")));
    }
    let y_pred = argmax_rows(probs);
    let cm = confusion(y_true, &y_pred, c);
    let recall = per_class_recall(&cm);
    let (sensitivity, specificity) = if c == 2 {
        (recall[1].unwrap_or(0.0), recall[0].unwrap_or(0.0))
    } else {
        let tnr: Vec<f64> = (0..c)
            .filter_map(|k| {
                let neg: usize = (0..c).filter(|&i| i != k).map(|i| cm.row(i).sum()).sum();
                let fp: usize = (0..c).filter(|&i| i != k).map(|i| cm[[i, k]]).sum();
                (neg > 0).then(|| (neg - fp) as f64 / neg as f64)
            })
            .collect();
        (balanced_accuracy(y_true, &y_pred, c), mean(&tnr))
    };
    let classes_present = (0..c).filter(|&k| y_true.contains(&k)).count();
    let (auroc, aupr, note) = if classes_present < 2 {
        (None, None, Some("y_true holds a single class; AUROC undefined".to_string()))
    } else if c == 2 {
        let pos: Vec<bool> = y_true.iter().map(|&t| t == 1).collect();
        let s: Vec<f64> = probs.column(1).to_vec();
        (binary_auroc(&pos, &s), average_precision(&pos, &s), None)
    } else {
        let (mut aucs, mut aps) = (vec![], vec![]);
        for k in 0..c {
            let pos: Vec<bool> = y_true.iter().map(|&t| t == k).collect();
            let s: Vec<f64> = probs.column(k).to_vec();
            if let Some(a) = binary_auroc(&pos, &s) {
                aucs.push(a);
                aps.push(average_precision(&pos, &s).unwrap());
            }
        }
        (Some(mean(&aucs)), Some(mean(&aps)), None)
    };
    Ok(ClassificationMetrics {
        w_f1: weighted_f1(y_true, &y_pred, c),
        auroc,
        aupr,
        bacc: balanced_accuracy(y_true, &y_pred, c),
        sensitivity,
        specificity,
        note,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub jac: f64,
}

/// Dice and Jaccard; two empty masks agree perfectly (1.0).
pub fn seg_metrics(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<SegMetrics> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(SegMetrics { dsc: 1.0, jac: 1.0 });
    }
    Ok(SegMetrics {
        dsc: 2.0 * inter as f64 / (a + b) as f64,
        jac: inter as f64 / (a + b - inter) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap of `statistic` over `samples`.
pub fn bootstrap_ci<T: Clone>(
    samples: &[T],
    statistic: impl Fn(&[T]) -> f64,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    let groups: Vec<usize> = (0..samples.len()).collect();
    bootstrap_ci_grouped(samples, &groups, statistic, n_resamples, level, seed)
}

/// Percentile bootstrap resampling whole groups (e.g. patients) with
/// replacement. Replicate `r` draws from its own derived stream, so results
/// do not depend on evaluation order. Replicates whose statistic is not
/// finite (e.g. AUROC of a one-class resample) are discarded.
pub fn bootstrap_ci_grouped<T: Clone, G: Hash + Eq + Ord + Clone>(
    samples: &[T],
    groups: &[G],
    statistic: impl Fn(&[T]) -> f64,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    if samples.len() < 2 {
        return Err(Error::Argument("bootstrap needs at least two samples".into()));
    }
    if groups.len() != samples.len() {
        return Err(Error::Shape("one group key per sample required".into()));
    }
    if !(0.0 < level && level < 1.0) || n_resamples == 0 {
        return Err(Error::Argument("level must lie in (0, 1) and n_resamples > 0".into()));
    }
    let mut by_group: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.clone()).or_default().push(i);
    }
    let members: Vec<Vec<usize>> = by_group.into_values().collect();
    let seeder = Seeder::new(seed);
    let mut stats: Vec<f64> = (0..n_resamples)
        .map(|r| {
            let mut rng = seeder.stream("bootstrap", 0, r as u64);
            let mut draw = Vec::with_capacity(samples.len());
            for _ in 0..members.len() {
                let g = &members[rng.random_range(0..members.len())];
                draw.extend(g.iter().map(|&i| samples[i].clone()));
            }
            statistic(&draw)
        })
        .filter(|v| v.is_finite())
        .collect();
    if stats.is_empty() {
        return Err(Error::Numerical("statistic undefined on every bootstrap replicate".into()));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        point: statistic(samples),
        lo: quantile_sorted(&stats, alpha),
        hi: quantile_sorted(&stats, 1.0 - alpha),
    })
}

/// Whether `candidate` counts as at least as extreme as `observed`,
/// forgiving round-off from re-summing in another order.
pub fn at_least_as_extreme(candidate: f64, observed: f64) -> bool {
    candidate.abs() >= observed.abs() - 1e-12 * observed.abs().max(1.0)
}

/// Paired permutation test: each pair is swapped between arms with
/// probability ½. Two-sided `p = (1 + #{|s*| ≥ |s|}) / (n + 1)`.
pub fn permutation_test<T: Clone>(
    a: &[T],
    b: &[T],
    statistic: impl Fn(&[T], &[T]) -> f64,
    n_permutations: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired arms differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let observed = statistic(a, b);
    let seeder = Seeder::new(seed);
    let mut count = 0usize;
    let (mut pa, mut pb) = (a.to_vec(), b.to_vec());
    for r in 0..n_permutations {
        let mut rng = seeder.stream("permutation", 0, r as u64);
        for i in 0..a.len() {
            if rng.random::<bool>() {
                pa[i] = b[i].clone();
                pb[i] = a[i].clone();
            } else {
                pa[i] = a[i].clone();
                pb[i] = b[i].clone();
            }
        }
        if at_least_as_extreme(statistic(&pa, &pb), observed) {
            count += 1;
        }
    }
    Ok((1 + count) as f64 / (n_permutations + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Zero variance made the statistic undefined or infinite: `p = 1` when
    /// the means agree, `p = 0` otherwise.
    pub degenerate: bool,
}

fn t_result(diff: f64, se: f64, df: f64) -> TTest {
    if se == 0.0 || !se.is_finite() {
        let same = diff == 0.0;
        return TTest {
            t: if same { 0.0 } else { diff.signum() * f64::INFINITY },
            df,
            p: if same { 1.0 } else { 0.0 },
            degenerate: true,
        };
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    TTest {
        t,
        df,
        p: (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0),
        degenerate: false,
    }
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Two-sided Welch (unequal-variance) t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument("t-test needs at least two values per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_var(a) / na, sample_var(b) / nb);
    let se = (va + vb).sqrt();
    let df = if va + vb > 0.0 {
        (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(t_result(mean(a) - mean(b), se, df))
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape("paired t-test needs equal lengths".into()));
    }
    if a.len() < 2 {
        return Err(Error::Argument("t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    Ok(t_result(mean(&d), (sample_var(&d) / n).sqrt(), n - 1.0))
}

/// Bonferroni adjustment: `min(1, p·m)`.
pub fn bonferroni(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len() as f64;
    pvalues.iter().map(|p| (p * m).min(1.0)).collect()
}

/// Significance stars used in comparison tables.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One metric with its interval and comparison p-values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub comparisons: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 2, 1, 0, 2];
        let mut p = Mat::zeros((6, 3));
        for (i, &k) in y.iter().enumerate() {
            p[[i, k]] = 1.0;
        }
        let m = classification_metrics(&y, &p).unwrap();
        for v in [m.w_f1, m.auroc.unwrap(), m.aupr.unwrap(), m.bacc, m.sensitivity, m.specificity] {
            assert_relative_eq!(v, 1.0);
        }
    }

    #[test]
    fn binary_auroc_ordering() {
        assert_eq!(binary_auroc(&[false, true], &[0.1, 0.9]), Some(1.0));
        assert_eq!(binary_auroc(&[false, true], &[0.9, 0.1]), Some(0.0));
        assert_eq!(binary_auroc(&[true, false], &[0.5, 0.5]), Some(0.5));
        assert_eq!(binary_auroc(&[true, true], &[0.5, 0.2]), None);
    }

    #[test]
    fn three_class_weighted_f1_by_hand() {
        // true 0,0,0,1,1,2 ; pred 0,0,1,1,2,2
        let y = [0, 0, 0, 1, 1, 2];
        let pred = [0, 0, 1, 1, 2, 2];
        // F1: class0 2·2/(2+3)=0.8, class1 2·1/(2+2)=0.5, class2 2·1/(2+1)=2/3
        let expected = (3.0 * 0.8 + 2.0 * 0.5 + 1.0 * (2.0 / 3.0)) / 6.0;
        assert_relative_eq!(weighted_f1(&y, &pred, 3), expected, epsilon = 1e-12);
    }

    #[test]
    fn single_class_truth_has_no_auroc() {
        let p = array![[0.2, 0.8], [0.6, 0.4]];
        let m = classification_metrics(&[1, 1], &p).unwrap();
        assert!(m.auroc.is_none() && m.note.is_some());
    }

    #[test]
    fn seg_metric_set_arithmetic() {
        let a = Array2::from_shape_fn((2, 3), |(_, x)| x < 2);
        let b = Array2::from_shape_fn((2, 3), |(_, x)| x >= 1);
        let m = seg_metrics(&a, &b).unwrap();
        // |A| = |B| = 4, |A∩B| = 2.
        assert_relative_eq!(m.dsc, 0.5);
        assert_relative_eq!(m.jac, 1.0 / 3.0);
        assert_eq!(seg_metrics(&a, &a).unwrap(), SegMetrics { dsc: 1.0, jac: 1.0 });
        let c = a.mapv(|v| !v);
        let disjoint = Array2::from_shape_fn((2, 3), |(_, x)| x < 2);
        assert_eq!(seg_metrics(&disjoint, &c).unwrap(), SegMetrics { dsc: 0.0, jac: 0.0 });
        let e = Array2::from_elem((3, 3), false);
        assert_eq!(seg_metrics(&e, &e).unwrap(), SegMetrics { dsc: 1.0, jac: 1.0 });
        assert!(seg_metrics(&e, &Array2::from_elem((2, 3), false)).is_err());
    }

    #[test]
    fn two_thirds_overlap_equal_area() {
        // A = columns 0..4, B = columns 2..6 on a 1×6 strip: |A∩B| = 2.
        // A = 0..3, B = 1..4 → |A∩B| = 2, |A| = |B| = 3.
        let a = Array2::from_shape_fn((1, 4), |(_, x)| x < 3);
        let b = Array2::from_shape_fn((1, 4), |(_, x)| x >= 1);
        let m = seg_metrics(&a, &b).unwrap();
        assert_relative_eq!(m.dsc, 2.0 / 3.0);
        assert_relative_eq!(m.jac, 0.5);
    }

    #[test]
    fn constant_sample_bootstrap_collapses() {
        let ci = bootstrap_ci(&[5.0, 5.0, 5.0, 5.0], |s| mean(s), 1000, 0.95, 0).unwrap();
        assert_eq!(ci, Interval { point: 5.0, lo: 5.0, hi: 5.0 });
        assert!(bootstrap_ci(&[1.0], |s| mean(s), 10, 0.95, 0).is_err());
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let x: Vec<f64> = (0..30).map(|i| (i * 7 % 11) as f64).collect();
        let a = bootstrap_ci(&x, |s| mean(s), 200, 0.95, 3).unwrap();
        let b = bootstrap_ci(&x, |s| mean(s), 200, 0.95, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.point && a.point <= a.hi);
    }

    #[test]
    fn identical_arms_give_p_one() {
        let a = [0.3, 0.5, 0.9, 0.1];
        let p = permutation_test(&a, &a, |x, y| mean(x) - mean(y), 999, 0).unwrap();
        assert_eq!(p, 1.0);
        assert!(permutation_test(&a, &a[..3], |x, y| mean(x) - mean(y), 9, 0).is_err());
    }

    #[test]
    fn textbook_welch_and_paired() {
        // Frozen from scipy.stats.ttest_ind(equal_var=False) / ttest_rel.
        let a = [19.0, 22.0, 16.0, 29.0, 24.0];
        let b = [20.0, 11.0, 17.0, 12.0, 8.0];
        let w = welch_ttest(&a, &b).unwrap();
        assert_relative_eq!(w.t, 2.716754, epsilon = 1e-3);
        assert_relative_eq!(w.df, 7.994961, epsilon = 1e-3);
        assert_relative_eq!(w.p, 0.026396, epsilon = 1e-3);
        let p = paired_ttest(&a, &b).unwrap();
        assert_relative_eq!(p.t, 2.115929, epsilon = 1e-3);
        assert_relative_eq!(p.p, 0.101808, epsilon = 1e-3);
        let same = welch_ttest(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let shifted: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let d = paired_ttest(&shifted, &a).unwrap();
        assert!(d.degenerate && d.p == 0.0);
    }

    #[test]
    fn bonferroni_caps_at_one() {
        assert_eq!(bonferroni(&[0.01, 0.2, 0.6]), vec![0.03, 0.6000000000000001, 1.0]);
    }

    #[test]
    fn linear_quartiles() {
        let d = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0];
        assert_eq!(quantile(&d, 0.75), 1.0);
        assert_relative_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }

    #[test]
    fn bootstrap_drops_undefined_replicates() {
        // Positives are `true`; a resample without both classes has no AUROC.
        let data: Vec<(bool, f64)> = vec![(true, 0.9), (false, 0.1), (true, 0.8)];
        let auroc = |s: &[(bool, f64)]| {
            let (y, x): (Vec<bool>, Vec<f64>) = s.iter().copied().unzip();
            binary_auroc(&y, &x).unwrap_or(f64::NAN)
        };
        let ci = bootstrap_ci(&data, auroc, 200, 0.9, 1).unwrap();
        assert!(ci.lo.is_finite() && ci.hi.is_finite());
        assert_eq!(ci.point, 1.0);
        let never = bootstrap_ci(&data, |_| f64::NAN, 50, 0.9, 1).unwrap_err();
        assert!(matches!(never, Error::Numerical(_)));
    }
}
