//! Acceptance suite: one PASS/FAIL line per criterion. Every tolerance is a
//! named constant below; nothing is read from the environment.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dermfoundry_core::adapt::{
    default_lambda, linear_probe_fit, linear_probe_predict, Backbone, BackboneArch, FeatureMatrix,
};
use dermfoundry_core::autograd::{Graph, Mat};
use dermfoundry_core::change::{predict_pairs, preprocess_pairs, synthetic_pairs, train_change, ChangeConfig, HeadInput, SiameseModel};
use dermfoundry_core::evalstat::{binary_auroc, bootstrap_ci, permutation_test, seg_metrics};
use dermfoundry_core::mil::{train_mil_cv, Abmil, AbmilConfig, MilTrainConfig, SlideBag};
use dermfoundry_core::pretrain::{
    generate_block_mask, pretrain_run, PatchGridSpec, PretrainConfig, PretrainModel, PretrainTrainer,
};
use dermfoundry_core::seg::{evaluate_seg, synthetic_disks, train_seg, SegConfig, SegModel};
use dermfoundry_core::seqprep::{register_pair, warp, AkazeConfig, Ablation, EuclideanTransform2D, RansacConfig};
use dermfoundry_core::survival::{cox_fit_matrix, km_raw, logrank_raw, time_dependent_auc, SurvivalRecord};
use dermfoundry_core::synth;
use dermfoundry_core::tbp::{combine, filter_lesions, screen_report, ud_outliers, LesionRecord, ModuleFlags, MEASUREMENTS};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

// Criterion 1
const GRAD_PARAMS: usize = 20;
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// Criterion 2
const MASK_TRIALS: usize = 1000;
const FIREWALL_TRIALS: usize = 20;
// Criterion 3
const SMOKE_STEPS: usize = 50;
const SMOKE_WINDOW: usize = 5;
const SMOKE_MIN_DROP: f64 = 0.30;
const SMOKE_BUDGET: Duration = Duration::from_secs(300);
// Criterion 4
const PROBE_LAMBDA_1024_7: f64 = 71.68;
// Criterion 5
const REG_TRIALS: usize = 100;
const REG_MIN_OK: usize = 95;
const REG_MAX_SHIFT: f64 = 20.0;
const REG_MAX_ROT_DEG: f64 = 15.0;
const REG_TOL_PX: f64 = 0.5;
const REG_TOL_DEG: f64 = 0.5;
// Criterion 6
const CHANGE_MIN_AUROC: f64 = 0.9;
// Criterion 7
const UD_PATIENTS: usize = 1000;
// Criterion 8
const OR_TRIPLES: usize = 10_000;
// Criterion 9
const ATTN_TOL: f64 = 1e-9;
const MIL_MIN_AUROC: f64 = 0.9;
// Criterion 10
const COX_TOL: f64 = 1e-3;
const LOGRANK_RESAMPLES: usize = 500;
const LOGRANK_MAX_KS: f64 = 0.1;
// Criterion 11
const BOOT_TOL: f64 = 0.02;
const BOOT_RESAMPLES: usize = 20_000;
const PERM_TOL: f64 = 0.01;
const PERM_RESAMPLES: usize = 20_000;
const NULL_SIMS: usize = 500;
const NULL_PERMS: usize = 999;
const ALPHA: f64 = 0.05;
const FPR_RANGE: (f64, f64) = (0.03, 0.08);
// Criterion 12
const SEG_MIN_DSC: f64 = 0.95;
const DICE_JACCARD_TOL: f64 = 1e-12;
const MASK_PAIRS: usize = 100;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c01_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut model = PretrainModel::new(PretrainConfig::fixture(), 0).map_err(err)?;
    let images = synth::lesion_images(2, model.spec.image_side, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = images
        .iter()
        .map(|im| model.prepare(im, &mut rng, false))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let loss = |m: &PretrainModel| {
        let mut g = Graph::new(&m.store);
        let (total, _, _) = m.batch_loss(&mut g, &samples);
        g.scalar(total)
    };
    let grads = {
        let mut g = Graph::new(&model.store);
        let (total, _, _) = model.batch_loss(&mut g, &samples);
        g.backward(total)
    };
    // Uniform over scalar entries, not over tensors.
    let entries: Vec<(usize, usize, usize)> = model
        .store
        .ids()
        .flat_map(|id| {
            let (r, c) = model.store.get(id).dim();
            (0..r * c).map(move |k| (id.index(), k / c, k % c))
        })
        .collect();
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = 0.0f64;
    for _ in 0..GRAD_PARAMS {
        let (pi, r, c) = entries[rng.random_range(0..entries.len())];
        let id = ids[pi];
        let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
        let orig = model.store.get(id)[[r, c]];
        model.store.get_mut(id)[[r, c]] = orig + GRAD_STEP;
        let up = loss(&model);
        model.store.get_mut(id)[[r, c]] = orig - GRAD_STEP;
        let down = loss(&model);
        model.store.get_mut(id)[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * GRAD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        ensure(rel < GRAD_REL_TOL, || {
            format!(
                "{}[{r},{c}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})",
                model.store.name(id)
            )
        })?;
        worst = worst.max(rel);
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:.1?}"))?;
    Ok(format!("worst relative error {worst:.2e} over {GRAD_PARAMS} entries in {took:.1?}"))
}

fn c02_masks_and_firewall() -> Outcome {
    let spec = PatchGridSpec::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 0..MASK_TRIALS {
        let want = rng.random_range(0..=spec.num_patches());
        let m = generate_block_mask(&spec, want, &mut rng).map_err(err)?;
        ensure(m.count_masked() == want, || format!("trial {t}: asked {want}, got {}", m.count_masked()))?;
    }
    let model = PretrainModel::new(PretrainConfig::fixture(), 0).map_err(err)?;
    let (p, grid) = (model.spec.patch_side, model.spec.grid());
    for t in 0..FIREWALL_TRIALS {
        let img = synth::lesion_image(model.spec.image_side, &mut rng);
        let want = rng.random_range(1..model.spec.num_patches());
        let mask = generate_block_mask(&model.spec, want, &mut rng).map_err(err)?;
        let mut swapped = img.clone();
        for i in mask.masked_indices() {
            let (py, px) = (i / grid, i % grid);
            for c in 0..swapped.channels() {
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        swapped.pixels_mut()[[c, y, x]] = rng.random::<f32>();
                    }
                }
            }
        }
        let a = model.encode_visible(&img, &mask).map_err(err)?;
        let b = model.encode_visible(&swapped, &mask).map_err(err)?;
        ensure(a.positions == b.positions, || format!("firewall trial {t}: positions differ"))?;
        let differing = a.embeddings.iter().zip(&b.embeddings).filter(|(x, y)| x != y).count();
        ensure(differing == 0, || format!("firewall trial {t}: {differing} latent entries moved"))?;
    }
    Ok(format!("{MASK_TRIALS} masks exact; {FIREWALL_TRIALS} substitutions left latents bit-identical"))
}

fn c03_pretrain_smoke() -> Outcome {
    let start = Instant::now();
    let images = synth::lesion_images(64, 64, 7);
    let mut model = PretrainModel::new(PretrainConfig::fixture(), 0).map_err(err)?;
    let mut trainer = PretrainTrainer::new(&model.config, images.len(), 0);
    let hist = pretrain_run(&mut model, &mut trainer, &images, SMOKE_STEPS, |_, _| {}).map_err(err)?;
    let avg = |s: &[_]| s.iter().map(|l: &dermfoundry_core::pretrain::PretrainBatchLoss| l.masked_align).sum::<f64>() / s.len() as f64;
    let early = avg(&hist[..SMOKE_WINDOW]);
    let late = avg(&hist[SMOKE_STEPS - SMOKE_WINDOW..]);
    let drop = 1.0 - late / early;
    let took = start.elapsed();
    ensure(drop >= SMOKE_MIN_DROP, || format!("masked loss {early:.4} → {late:.4} ({:.1}% drop)", drop * 100.0))?;
    ensure(took < SMOKE_BUDGET, || format!("took {took:.1?}"))?;
    Ok(format!("masked loss {early:.4} → {late:.4}, {:.1}% drop in {took:.1?}", drop * 100.0))
}

fn c04_probe() -> Outcome {
    ensure(default_lambda(1024, 7) == PROBE_LAMBDA_1024_7, || format!("λ = {}", default_lambda(1024, 7)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gauss = |rng: &mut ChaCha8Rng| normal.inverse_cdf(rng.random_range(1e-12..1.0 - 1e-12));
    // λ applied to a 1024-dimensional, 7-class fit.
    let n = 70;
    let x = Mat::from_shape_fn((n, 1024), |_| gauss(&mut rng));
    let y: Vec<usize> = (0..n).map(|i| i % 7).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let wide = FeatureMatrix::new(x, y, ids).map_err(err)?;
    let fit = linear_probe_fit(&wide, 7, None).map_err(err)?;
    ensure(fit.lambda == PROBE_LAMBDA_1024_7, || format!("fit used λ = {}", fit.lambda))?;
    // Separable two-class features: the class shifts the first coordinate by ±4.
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Mat::from_shape_fn((n, 16), |(i, j)| {
            let noise = 0.3 * gauss(rng);
            if j == 0 {
                if y[i] == 1 { 4.0 + noise } else { -4.0 + noise }
            } else {
                gauss(rng)
            }
        });
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        FeatureMatrix::new(x, y, ids)
    };
    let train = make(100, &mut rng).map_err(err)?;
    let test = make(100, &mut rng).map_err(err)?;
    let model = linear_probe_fit(&train, 2, None).map_err(err)?;
    let probs = linear_probe_predict(&model, &test.features).map_err(err)?;
    let correct = (0..test.len())
        .filter(|&i| usize::from(probs[[i, 1]] > probs[[i, 0]]) == test.labels[i])
        .count();
    let acc = correct as f64 / test.len() as f64;
    ensure(acc == 1.0, || format!("separable accuracy {acc}"))?;
    Ok(format!("λ(1024, 7) = {}; separable held-out accuracy {acc}", default_lambda(1024, 7)))
}

fn c05_registration() -> Outcome {
    let side = 128;
    let c = (side as f64 - 1.0) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (akaze, ransac) = (AkazeConfig::default(), RansacConfig::default());
    let mut ok = 0;
    let mut misses = vec![];
    for t in 0..REG_TRIALS {
        let fixed = synth::registration_scene(side, &mut rng);
        let ang = rng.random_range(-REG_MAX_ROT_DEG..=REG_MAX_ROT_DEG);
        let dx = rng.random_range(-REG_MAX_SHIFT..=REG_MAX_SHIFT);
        let dy = rng.random_range(-REG_MAX_SHIFT..=REG_MAX_SHIFT);
        let truth = EuclideanTransform2D::new(0.0, dx, dy).compose(&EuclideanTransform2D::about(ang.to_radians(), c, c));
        let moving = warp(&fixed, &truth.inverse());
        let reg = register_pair(&fixed, &moving, &akaze, &ransac);
        let e = reg.transform;
        let drot = (e.rotation - truth.rotation).to_degrees().abs();
        if !reg.failed && drot <= REG_TOL_DEG && (e.dx - truth.dx).abs() <= REG_TOL_PX && (e.dy - truth.dy).abs() <= REG_TOL_PX {
            ok += 1;
        } else {
            misses.push(t);
        }
    }
    ensure(ok >= REG_MIN_OK, || format!("{ok}/{REG_TRIALS} recovered; misses {misses:?}"))?;
    Ok(format!("{ok}/{REG_TRIALS} trials within {REG_TOL_PX} px and {REG_TOL_DEG}°"))
}

fn c06_change() -> Outcome {
    let pairs = synthetic_pairs(240, 64, 21);
    let (train, rest) = pairs.split_at(160);
    let (val, test) = rest.split_at(40);
    let cfg = ChangeConfig::fixture();
    let labels: Vec<bool> = test.iter().map(|p| p.changed).collect();
    let mut lines = vec![];
    let mut default_auroc = None;
    for arm in Ablation::ALL {
        let prep = |p: &[_]| preprocess_pairs(p, arm);
        let (tr, va, te) = (prep(train).map_err(err)?, prep(val).map_err(err)?, prep(test).map_err(err)?);
        let model = SiameseModel::new(Backbone::new(BackboneArch::fixture(), 0), 64, HeadInput::Symmetric, 0);
        let res = train_change(model, &tr, &va, &cfg, 0, |_| {}).map_err(err)?;
        let probs = predict_pairs(&res.model, &te);
        ensure(probs.iter().all(|v| v.is_finite()), || format!("{}: non-finite scores", arm.name()))?;
        let scores: Vec<f64> = probs.column(1).to_vec();
        let auroc = binary_auroc(&labels, &scores).ok_or_else(|| "test split holds one class".to_string())?;
        if arm == Ablation::Default {
            default_auroc = Some(auroc);
        }
        lines.push(format!("{} {auroc:.3}", arm.name()));
    }
    let a = default_auroc.expect("default arm ran");
    ensure(a >= CHANGE_MIN_AUROC, || format!("default-arm AUROC {a:.4}; arms: {}", lines.join(", ")))?;
    Ok(format!("held-out AUROC per arm: {}", lines.join(", ")))
}

/// Quartile by linear interpolation between order statistics.
fn interp_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn c07_ud_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 3;
    let mut rows: Vec<Vec<f64>> = vec![];
    let mut owners: Vec<String> = vec![];
    for p in 0..UD_PATIENTS {
        let k = rng.random_range(1..=12);
        for _ in 0..k {
            let spread = if rng.random::<f64>() < 0.1 { 8.0 } else { 1.0 };
            rows.push((0..dim).map(|_| spread * rng.random_range(-1.0..1.0)).collect());
            owners.push(format!("p{p:04}"));
        }
    }
    // Shuffle so a patient's lesions are not contiguous.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let owners: Vec<String> = order.iter().map(|&i| owners[i].clone()).collect();
    let feats = Mat::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]);
    let got = ud_outliers(&feats, &owners).map_err(err)?;

    let mut expect = vec![false; rows.len()];
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, o) in owners.iter().enumerate() {
        members.entry(o).or_default().push(i);
    }
    for idx in members.values() {
        if idx.len() < 4 {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for j in 0..dim {
                mean[j] += rows[i][j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        let dist: Vec<f64> = idx
            .iter()
            .map(|&i| (0..dim).map(|j| (rows[i][j] - mean[j]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mut sorted = dist.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (interp_quantile(&sorted, 0.25), interp_quantile(&sorted, 0.75));
        let fence = q3 + 1.5 * (q3 - q1);
        for (&i, &d) in idx.iter().zip(&dist) {
            expect[i] = d > fence;
        }
    }
    let mismatches = expect.iter().zip(&got.positive).filter(|(a, b)| a != b).count();
    ensure(mismatches == 0, || format!("{mismatches} lesions disagree with the brute-force fence"))?;
    let flagged = expect.iter().filter(|&&b| b).count();
    ensure(flagged > 0, || "oracle flagged nothing; fixture too easy".into())?;
    Ok(format!("{} lesions, {flagged} flagged, exact match", rows.len()))
}

fn lesion(id: &str) -> LesionRecord {
    let mut r = LesionRecord {
        lesion_id: id.into(),
        patient_id: "p".into(),
        tile_ref: String::new(),
        measurements: vec![Some(1.0); MEASUREMENTS.len()],
        label_risk: None,
        label_malignant: None,
    };
    r.set("majorAxisMM", Some(3.0));
    r.set("deltaLBnorm", Some(6.0));
    r.set("dnn_lesion_confidence", Some(90.0));
    r.set("nevi_confidence", Some(95.0));
    r
}

fn c08_or_combiner() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = 100;
    let subsets: Vec<[bool; 3]> = (1..8u8).map(|b| [b & 1 != 0, b & 2 != 0, b & 4 != 0]).collect();
    for start in (0..OR_TRIPLES).step_by(batch) {
        let ids: Vec<String> = (start..start + batch).map(|i| format!("l{i}")).collect();
        let mut flags = || ModuleFlags {
            ids: ids.clone(),
            positive: (0..batch).map(|_| rng.random::<bool>()).collect(),
        };
        let mods = [flags(), flags(), flags()];
        let truth: Vec<Option<bool>> = (0..batch).map(|_| Some(rng.random::<bool>())).collect();
        let patients: Vec<String> = (0..batch).map(|i| format!("p{}", i / 5)).collect();
        let mut sens: BTreeMap<[bool; 3], (f64, f64)> = BTreeMap::new();
        for s in &subsets {
            let pick = |k: usize| s[k].then_some(&mods[k]);
            let d = combine(pick(0), pick(1), pick(2)).map_err(err)?;
            for (i, dec) in d.iter().enumerate() {
                let expect = (0..3).any(|k| s[k] && mods[k].positive[i]);
                ensure(dec.suspicious == expect, || format!("lesion {}: OR violated for {s:?}", dec.lesion_id))?;
            }
            let rep = screen_report(&d, &truth, &patients).map_err(err)?;
            sens.insert(*s, (rep.lesion_sensitivity.unwrap_or(0.0), rep.patient_sensitivity.unwrap_or(0.0)));
        }
        for a in &subsets {
            for b in &subsets {
                let contained = (0..3).all(|k| !a[k] || b[k]);
                if contained {
                    let (sa, sb) = (sens[a], sens[b]);
                    ensure(sa.0 <= sb.0 && sa.1 <= sb.1, || format!("sensitivity fell from {a:?} to {b:?}"))?;
                }
            }
        }
    }
    let oob = BTreeMap::from([("edge".to_string(), 0.0), ("nevi".to_string(), 0.0), ("base".to_string(), 0.0)]);
    let mut edge = lesion("edge");
    edge.set("majorAxisMM", Some(2.0));
    let mut nevi = lesion("nevi");
    nevi.set("nevi_confidence", Some(80.0));
    let kept: Vec<String> = filter_lesions(&[lesion("base"), edge, nevi], &oob)
        .into_iter()
        .map(|r| r.lesion_id)
        .collect();
    ensure(kept == ["base", "edge"], || format!("filter kept {kept:?}"))?;
    Ok(format!("{OR_TRIPLES} triples monotone; majorAxisMM=2 kept, nevi_confidence=80 dropped"))
}

fn c09_abmil() -> Outcome {
    let cfg = AbmilConfig {
        embed_dim: 32,
        attention_dim: 16,
        ..AbmilConfig::default()
    };
    let model = Abmil::new(12, cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..20 {
        let n = rng.random_range(2..30);
        let bag = Mat::from_shape_fn((n, 12), |_| rng.random_range(-2.0..2.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = bag.select(ndarray::Axis(0), &perm);
        let (p0, a0) = model.predict(&bag).map_err(err)?;
        let (p1, a1) = model.predict(&shuffled).map_err(err)?;
        ensure(p0 == p1, || format!("bag {t}: probabilities moved under permutation"))?;
        let moved = perm.iter().enumerate().any(|(k, &i)| a1[k] != a0[i]);
        ensure(!moved, || format!("bag {t}: attention did not follow the permutation"))?;
    }
    for n in [1, 2, 7, 50] {
        let row: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bag = Mat::from_shape_fn((n, 12), |(_, j)| row[j]);
        let (_, a) = model.predict(&bag).map_err(err)?;
        let dev = a.iter().map(|w| (w - 1.0 / n as f64).abs()).fold(0.0, f64::max);
        ensure(dev <= ATTN_TOL, || format!("{n} identical instances: attention off uniform by {dev:e}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bags = synth::mil_bags(20, 128, 5, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, b)| SlideBag::new(format!("s{i}"), b.case_id, b.features, b.label))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let cv = train_mil_cv(&bags, &MilTrainConfig::default(), 0).map_err(err)?;
    let mean = cv.mean_auroc().ok_or("no fold had both classes")?;
    ensure(cv.folds.len() == 5, || format!("{} folds", cv.folds.len()))?;
    ensure(mean >= MIL_MIN_AUROC, || format!("mean fold AUROC {mean:.4}"))?;
    Ok(format!("permutation exact, attention uniform within {ATTN_TOL:e}, mean 5-fold AUROC {mean:.3}"))
}

/// Breslow log partial likelihood for one covariate, written from scratch.
fn cox_loglik(x: &[f64], t: &[f64], e: &[bool], beta: f64) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.len() {
        if !e[i] {
            continue;
        }
        let risk: f64 = (0..x.len()).filter(|&j| t[j] >= t[i]).map(|j| (beta * x[j]).exp()).sum();
        ll += beta * x[i] - risk.ln();
    }
    ll
}

fn ks_uniform(p: &mut [f64]) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

fn c10_survival() -> Outcome {
    // Product-limit by hand: S(t) = Π (n_i − d_i)/n_i over event times ≤ t.
    let fixtures: [([f64; 3], [bool; 3], [f64; 3]); 2] = [
        ([1.0, 2.0, 3.0], [true, false, true], [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0 * (0.0 / 1.0)]),
        ([1.0, 2.0, 3.0], [false, true, true], [1.0, 1.0 * (1.0 / 2.0), 1.0 * (1.0 / 2.0) * (0.0 / 1.0)]),
    ];
    for (t, e, s) in fixtures {
        let km = km_raw(&t, &e).map_err(err)?;
        for (k, &ti) in t.iter().enumerate() {
            ensure(km.at(ti) == s[k], || format!("KM {e:?} at {ti}: {} vs {}", km.at(ti), s[k]))?;
        }
        ensure(km.at(0.5) == 1.0, || "KM before the first time is not 1".into())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cohort = synth::survival_cohort(60, 1.0, 0.3, &mut rng);
    let (t, e, x): (Vec<f64>, Vec<bool>, Vec<f64>) = cohort.iter().fold((vec![], vec![], vec![]), |mut acc, &(a, b, c)| {
        acc.0.push(a);
        acc.1.push(b);
        acc.2.push(c);
        acc
    });
    let fit = cox_fit_matrix(&Mat::from_shape_fn((x.len(), 1), |(i, _)| x[i]), &t, &e, &["score".into()]).map_err(err)?;
    let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
    for k in -5000..=5000 {
        let b = k as f64 * 1e-3;
        let ll = cox_loglik(&x, &t, &e, b);
        if ll > best_ll {
            (best, best_ll) = (b, ll);
        }
    }
    let coef = fit.terms[0].coef;
    ensure((coef - best).abs() <= COX_TOL, || format!("Cox β {coef:.5} vs grid {best:.5}"))?;

    let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let scores = [0.9, 0.4, 0.7, 0.7, 0.2, 0.5];
    let records: Vec<SurvivalRecord> = (0..6)
        .map(|i| SurvivalRecord::new(format!("r{i}"), times[i], true, scores[i]))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let horizons = [1.5, 2.5, 3.5, 4.5, 5.5];
    for ipcw in [false, true] {
        let got = time_dependent_auc(&records, &horizons, ipcw).map_err(err)?;
        for (h, row) in horizons.iter().zip(&got) {
            let (mut num, mut den) = (0.0, 0.0);
            for i in (0..6).filter(|&i| times[i] <= *h) {
                for j in (0..6).filter(|&j| times[j] > *h) {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            let expect = num / den;
            ensure(row.auc == Some(expect), || format!("tAUC at {h} (ipcw {ipcw}): {:?} vs {expect}", row.auc))?;
        }
    }

    let base = synth::survival_cohort(200, 0.0, 0.3, &mut rng);
    let (bt, be): (Vec<f64>, Vec<bool>) = base.iter().map(|&(a, b, _)| (a, b)).unzip();
    let mut pvals = Vec::with_capacity(LOGRANK_RESAMPLES);
    for _ in 0..LOGRANK_RESAMPLES {
        let mut g: Vec<bool> = (0..bt.len()).map(|i| i < bt.len() / 2).collect();
        g.shuffle(&mut rng);
        pvals.push(logrank_raw(&bt, &be, &g).map_err(err)?.p_value);
    }
    let ks = ks_uniform(&mut pvals);
    ensure(ks < LOGRANK_MAX_KS, || format!("log-rank null p KS distance {ks:.4}"))?;
    Ok(format!("KM exact, Cox β {coef:.4} vs grid {best:.3}, tAUC exact, log-rank KS {ks:.3}"))
}

/// Inverse CDF of an equally weighted discrete distribution.
fn discrete_quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn c11_statistics() -> Outcome {
    let data = [1.0, 2.0, 4.0];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut all = vec![];
    for a in data {
        for b in data {
            for c in data {
                all.push((a + b + c) / 3.0);
            }
        }
    }
    all.sort_by(f64::total_cmp);
    let mut worst_boot = 0.0f64;
    for level in [0.95, 0.6] {
        let ci = bootstrap_ci(&data, mean, BOOT_RESAMPLES, level, 11).map_err(err)?;
        let alpha = (1.0 - level) / 2.0;
        let (lo, hi) = (discrete_quantile(&all, alpha), discrete_quantile(&all, 1.0 - alpha));
        let d = (ci.lo - lo).abs().max((ci.hi - hi).abs());
        ensure(d <= BOOT_TOL, || format!("level {level}: [{}, {}] vs exhaustive [{lo}, {hi}]", ci.lo, ci.hi))?;
        worst_boot = worst_boot.max(d);
    }

    let a: [f64; 10] = [3.0, 5.0, 2.0, 7.0, 4.0, 6.0, 5.0, 3.0, 8.0, 4.0];
    let b: [f64; 10] = [2.0, 4.0, 3.0, 5.0, 4.0, 4.0, 3.0, 4.0, 6.0, 2.0];
    let diff: Vec<i64> = a.iter().zip(&b).map(|(x, y)| (x - y) as i64).collect();
    let observed: i64 = diff.iter().sum();
    let extreme = (0..1u32 << 10)
        .filter(|mask| {
            let s: i64 = diff.iter().enumerate().map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d }).sum();
            s.abs() >= observed.abs()
        })
        .count();
    let exact = extreme as f64 / 1024.0;
    let mean_diff = |x: &[f64], y: &[f64]| mean(x) - mean(y);
    let p = permutation_test(&a, &b, mean_diff, PERM_RESAMPLES, 12).map_err(err)?;
    ensure((p - exact).abs() <= PERM_TOL, || format!("permutation p {p:.4} vs exhaustive {exact:.4}"))?;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rejections = 0;
    for sim in 0..NULL_SIMS {
        let mut draw = || normal.inverse_cdf(rng.random_range(1e-12..1.0 - 1e-12));
        let x: Vec<f64> = (0..20).map(|_| draw()).collect();
        let y: Vec<f64> = (0..20).map(|_| draw()).collect();
        if permutation_test(&x, &y, mean_diff, NULL_PERMS, 1000 + sim as u64).map_err(err)? <= ALPHA {
            rejections += 1;
        }
    }
    let fpr = rejections as f64 / NULL_SIMS as f64;
    ensure((FPR_RANGE.0..=FPR_RANGE.1).contains(&fpr), || format!("false-positive rate {fpr:.3}"))?;
    Ok(format!(
        "bootstrap bounds within {worst_boot:.4}; permutation p {p:.4} vs exact {exact:.4}; null FPR {fpr:.3}"
    ))
}

fn c12_segmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..MASK_PAIRS {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let a = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() < pa);
        let b = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() < pb);
        let m = seg_metrics(&a, &b).map_err(err)?;
        worst = worst.max((m.dsc - 2.0 * m.jac / (1.0 + m.jac)).abs());
    }
    ensure(worst <= DICE_JACCARD_TOL, || format!("DSC vs 2J/(1+J) off by {worst:e}"))?;
    let disks = synthetic_disks(240, 64, 11);
    let (train, rest) = disks.split_at(160);
    let (val, test) = rest.split_at(40);
    let cfg = SegConfig::fixture();
    let model = SegModel::new(Backbone::new(BackboneArch::fixture(), 0), 0);
    let res = train_seg(model, train, val, &cfg, 0, |_| {}).map_err(err)?;
    let (mean, _) = evaluate_seg(&res.model, test, cfg.threshold).map_err(err)?;
    ensure(mean.dsc >= SEG_MIN_DSC, || format!("held-out DSC {:.4}", mean.dsc))?;
    Ok(format!("held-out DSC {:.4}; Dice/Jaccard identity within {worst:e}", mean.dsc))
}

fn metric_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn c13_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_derm-foundry");
    let tmp = tempfile::tempdir().map_err(err)?;
    let runs: [(&str, &[&str]); 11] = [
        ("pretrain", &["pretrain", "--set", "synthetic_size=4", "--set", "total_epochs=2"]),
        ("probe", &["probe"]),
        ("finetune", &["finetune", "--epochs", "1"]),
        ("oof", &["oof"]),
        ("seg", &["seg-train", "--epochs", "1", "--set", "synthetic_size=10"]),
        ("seqprep", &["seqprep", "--set", "synthetic_size=2"]),
        ("change", &["change-train", "--epochs", "1", "--set", "synthetic_size=10"]),
        ("tbp", &["tbp-screen"]),
        ("mil", &["mil-train", "--epochs", "2", "--folds", "3", "--set", "synthetic_size=12"]),
        ("survival", &["survival"]),
        ("report", &["report", "--runs"]),
    ];
    let mut compared = 0;
    for (name, args) in runs {
        let mut outputs = vec![];
        for rep in 0..2 {
            let out = tmp.path().join(format!("{name}_{rep}"));
            let mut cmd = Command::new(bin);
            cmd.arg("--seed").arg("5").arg("--out").arg(&out).args(args);
            if name == "report" {
                cmd.arg(tmp.path().join("probe_0")).arg(tmp.path().join("finetune_0"));
            }
            let status = cmd.output().map_err(err)?;
            ensure(status.status.success(), || {
                format!("{name} run {rep} failed: {}", String::from_utf8_lossy(&status.stderr))
            })?;
            outputs.push(metric_files(&out.join("outputs")));
        }
        ensure(!outputs[0].is_empty(), || format!("{name} wrote no metric files"))?;
        let keys0: Vec<_> = outputs[0].keys().collect();
        let keys1: Vec<_> = outputs[1].keys().collect();
        ensure(keys0 == keys1, || format!("{name}: file sets differ"))?;
        for (k, v) in &outputs[0] {
            ensure(outputs[1][k] == *v, || format!("{name}: {k} differs between reruns"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} metric files byte-identical across reruns of 11 subcommands"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    // `cargo test -- --list` and filters are not meaningful here; run all.
    let criteria: [Criterion; 13] = [
        ("C01 pretrain gradient check", c01_gradient_check),
        ("C02 mask exactness and visibility firewall", c02_masks_and_firewall),
        ("C03 pretrain smoke loss drop", c03_pretrain_smoke),
        ("C04 probe lambda and separable accuracy", c04_probe),
        ("C05 registration recovery", c05_registration),
        ("C06 change detector benchmark and ablation arms", c06_change),
        ("C07 ugly-duckling IQR oracle", c07_ud_oracle),
        ("C08 OR combiner monotonicity and filter boundaries", c08_or_combiner),
        ("C09 ABMIL invariances and benchmark", c09_abmil),
        ("C10 survival oracles", c10_survival),
        ("C11 bootstrap and permutation oracles", c11_statistics),
        ("C12 segmentation benchmark and Dice identity", c12_segmentation),
        ("C13 CLI determinism", c13_determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
