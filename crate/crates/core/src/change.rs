//! Short-term lesion change detection: one encoder applied to both images
//! of a pair, a two-layer softmax head, trained jointly with a contrastive
//! loss on the pair embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{Backbone, BackboneArch};
use crate::autograd::{softmax_rows, Graph, Mat, ParamStore, Var};
use crate::data::{Checkpoint, ImageGrid, Seeder};
use crate::error::{Error, Result};
use crate::evalstat::{self, ClassificationMetrics};
use crate::nn::{Init, Linear};
use crate::optim::{clip_grad_norm, AdamW, WarmupCosine};
use crate::seqprep::{self, Ablation, PipelineConfig};

/// A before/after pair of one lesion.
#[derive(Clone, Debug)]
pub struct PairExample {
    pub id: String,
    pub t0: ImageGrid,
    pub t1: ImageGrid,
    pub changed: bool,
    pub malignant_change: Option<bool>,
    /// False for raw captures; such pairs are scored but flagged.
    pub preprocessed: bool,
}

impl PairExample {
    pub fn new(
        id: impl Into<String>,
        t0: ImageGrid,
        t1: ImageGrid,
        changed: bool,
        malignant_change: Option<bool>,
    ) -> Result<Self> {
        let id = id.into();
        if (t0.height(), t0.width()) != (t1.height(), t1.width()) {
            return Err(Error::Validation(format!("pair {id}: images differ in size")));
        }
        if malignant_change == Some(true) && !changed {
            return Err(Error::Validation(format!("pair {id}: malignant change without change")));
        }
        Ok(Self {
            id,
            t0,
            t1,
            changed,
            malignant_change,
            preprocessed: false,
        })
    }
}

/// `d²` for matching pairs, `max(0, margin − d)²` otherwise, with `d` the
/// Euclidean distance.
pub fn contrastive_loss(a: &[f64], b: &[f64], same: bool, margin: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding sizes {} and {}", a.len(), b.len())));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(if same { d2 } else { (margin - d2.sqrt()).max(0.0).powi(2) })
}

/// How the two feature vectors enter the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// `[f0 + f1; |f0 − f1|]`, invariant to pair order.
    Symmetric,
    /// `[f0; f1]`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChangeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub contrastive_weight: f64,
    pub classification_weight: f64,
    pub head_hidden: usize,
    pub head_input: HeadInput,
}

impl Default for ChangeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            warmup_epochs: 5,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            margin: 1.0,
            contrastive_weight: 1.0,
            classification_weight: 1.0,
            head_hidden: 256,
            head_input: HeadInput::Symmetric,
        }
    }
}

impl ChangeConfig {
    pub fn fixture() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            warmup_epochs: 1,
            learning_rate: 1e-3,
            head_hidden: 64,
            ..Self::default()
        }
    }
}

/// Shared encoder plus head. Both images go through the same parameter
/// arrays; there is only one copy of the encoder.
#[derive(Clone, Debug)]
pub struct SiameseModel {
    pub backbone: Backbone,
    pub head_input: HeadInput,
    fc1: Linear,
    fc2: Linear,
}

/// Graph handles for one pair.
pub struct PairForward {
    pub f0: Var,
    pub f1: Var,
    pub head_in: Var,
    pub logits: Var,
}

impl SiameseModel {
    pub fn new(mut backbone: Backbone, hidden: usize, head_input: HeadInput, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a6);
        let d = backbone.arch.encoder.dim;
        let fc1 = Linear::new(&mut backbone.store, "change.fc1", 2 * d, hidden, Init::TruncNormal(0.02), &mut rng);
        let fc2 = Linear::new(&mut backbone.store, "change.fc2", hidden, 2, Init::TruncNormal(0.02), &mut rng);
        Self {
            backbone,
            head_input,
            fc1,
            fc2,
        }
    }

    pub fn from_checkpoint(arch: BackboneArch, hidden: usize, head_input: HeadInput, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(Backbone::new(arch, 0), hidden, head_input, 0);
        ck.load_into(&mut m.backbone.store)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore {
        &self.backbone.store
    }

    pub fn forward(&self, g: &mut Graph, t0: &ImageGrid, t1: &ImageGrid) -> PairForward {
        let enc = &self.backbone.encoder;
        let f0 = enc.pooled(g, t0);
        let f1 = enc.pooled(g, t1);
        let head_in = match self.head_input {
            HeadInput::Symmetric => {
                let s = g.add(f0, f1);
                let d = g.sub(f0, f1);
                let d = g.abs(d);
                g.concat_cols(&[s, d])
            }
            HeadInput::Concat => g.concat_cols(&[f0, f1]),
        };
        let h = self.fc1.forward(g, head_in);
        let h = g.relu(h);
        let logits = self.fc2.forward(g, h);
        PairForward { f0, f1, head_in, logits }
    }

    /// The head's input vector for a pair, for inspection.
    pub fn head_input_vector(&self, pair: &PairExample) -> Vec<f64> {
        let (a, b) = (self.backbone.prepare(&pair.t0), self.backbone.prepare(&pair.t1));
        let mut g = Graph::new(self.store());
        let fw = self.forward(&mut g, &a, &b);
        g.value(fw.head_in).iter().copied().collect()
    }
}

/// Change probability with a flag for pairs that skipped preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeScore {
    pub probability: f64,
    pub complement: f64,
    pub raw_input: bool,
}

pub fn detect_change(model: &SiameseModel, pair: &PairExample) -> ChangeScore {
    let (a, b) = (model.backbone.prepare(&pair.t0), model.backbone.prepare(&pair.t1));
    let mut g = Graph::new(model.store());
    let fw = model.forward(&mut g, &a, &b);
    let p = softmax_rows(g.value(fw.logits));
    ChangeScore {
        probability: p[[0, 1]],
        complement: p[[0, 0]],
        raw_input: !pair.preprocessed,
    }
}

/// `n × 2` class probabilities (unchanged, changed).
pub fn predict_pairs(model: &SiameseModel, pairs: &[PairExample]) -> Mat {
    let mut out = Mat::zeros((pairs.len(), 2));
    for (i, p) in pairs.iter().enumerate() {
        let s = detect_change(model, p);
        out[[i, 0]] = s.complement;
        out[[i, 1]] = s.probability;
    }
    out
}

pub fn evaluate_pairs(model: &SiameseModel, pairs: &[PairExample]) -> Result<ClassificationMetrics> {
    let labels: Vec<usize> = pairs.iter().map(|p| usize::from(p.changed)).collect();
    evalstat::classification_metrics(&labels, &predict_pairs(model, pairs))
}

/// Summed objective for a batch: classification cross-entropy plus the
/// contrastive term on ℓ2-normalised embeddings, both batch means.
fn batch_objective(g: &mut Graph, model: &SiameseModel, batch: &[(&ImageGrid, &ImageGrid, bool)], cfg: &ChangeConfig) -> Var {
    let mut logits = vec![];
    let mut contrast = vec![];
    let labels: Vec<usize> = batch.iter().map(|b| usize::from(b.2)).collect();
    for &(a, b, changed) in batch {
        let fw = model.forward(g, a, b);
        logits.push(fw.logits);
        let e0 = g.l2_normalize_rows(fw.f0);
        let e1 = g.l2_normalize_rows(fw.f1);
        let diff = g.sub(e0, e1);
        let sq = g.square(diff);
        let d2 = g.sum(sq);
        let term = if changed {
            let d = g.sqrt(d2, 1e-12);
            let neg = g.scale(d, -1.0);
            let m = g.constant(Mat::from_elem((1, 1), cfg.margin));
            let gap = g.add(m, neg);
            let hinge = g.relu(gap);
            g.square(hinge)
        } else {
            d2
        };
        contrast.push(term);
    }
    let z = g.concat_rows(&logits);
    let ce = g.cross_entropy(z, &labels);
    let c = g.concat_rows(&contrast);
    let c = g.mean(c);
    let ce = g.scale(ce, cfg.classification_weight);
    let c = g.scale(c, cfg.contrastive_weight);
    g.add(ce, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_bacc: f64,
}

#[derive(Clone, Debug)]
pub struct ChangeTrainResult {
    pub model: SiameseModel,
    pub history: Vec<ChangeEpoch>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Joint training; the epoch with the best validation AUROC (balanced
/// accuracy when AUROC is undefined) is kept.
pub fn train_change(
    mut model: SiameseModel,
    train: &[PairExample],
    val: &[PairExample],
    cfg: &ChangeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ChangeEpoch),
) -> Result<ChangeTrainResult> {
    let pos = train.iter().filter(|p| p.changed).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::Validation("change training set holds a single class".into()));
    }
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let prepped: Vec<(ImageGrid, ImageGrid, bool)> = train
        .iter()
        .map(|p| (model.backbone.prepare(&p.t0), model.backbone.prepare(&p.t1), p.changed))
        .collect();
    let batch = cfg.batch_size.max(1);
    let spe = train.len().div_ceil(batch);
    let schedule = WarmupCosine {
        base_lr: cfg.learning_rate,
        min_lr: 0.0,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: cfg.epochs * spe,
    };
    let seeder = Seeder::new(seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = vec![];
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seeder.stream("change", 0, epoch as u64);
        let mut order: Vec<usize> = (0..prepped.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<_> = chunk.iter().map(|&i| (&prepped[i].0, &prepped[i].1, prepped[i].2)).collect();
            let (mut grads, loss) = {
                let mut g = Graph::new(model.store());
                let l = batch_objective(&mut g, &model, &items, cfg);
                (g.backward(l), g.scalar(l))
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite change loss at epoch {epoch}")));
            }
            clip_grad_norm(&mut grads, 0.0);
            opt.step(&mut model.backbone.store, &grads, schedule.lr(step), |_| 1.0);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let m = evaluate_pairs(&model, val)?;
        let rec = ChangeEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc: m.auroc,
            val_bacc: m.bacc,
        };
        on_epoch(&rec);
        let sel = m.auroc.unwrap_or(m.bacc);
        if best.as_ref().is_none_or(|(b, _, _)| sel > *b) {
            best = Some((sel, epoch, model.store().clone()));
        }
        history.push(rec);
    }
    let (best_metric, best_epoch) = match best {
        Some((m, e, store)) => {
            model.backbone.store = store;
            (m, e)
        }
        None => {
            let m = evaluate_pairs(&model, val)?;
            (m.auroc.unwrap_or(m.bacc), 0)
        }
    };
    Ok(ChangeTrainResult {
        model,
        history,
        best_epoch,
        best_metric,
    })
}

/// Runs one ablation arm's preprocessing over every pair.
pub fn preprocess_pairs(pairs: &[PairExample], arm: Ablation) -> Result<Vec<PairExample>> {
    let cfg = PipelineConfig {
        stages: arm.stages(),
        ..PipelineConfig::default()
    };
    pairs
        .iter()
        .map(|p| {
            if arm == Ablation::Default {
                return Ok(PairExample {
                    preprocessed: false,
                    ..p.clone()
                });
            }
            let (a, b, _) = seqprep::preprocess_pair(&p.t0, &p.t1, &cfg)?;
            Ok(PairExample {
                t0: a,
                t1: b,
                preprocessed: true,
                ..p.clone()
            })
        })
        .collect()
}

/// Synthetic pairs, half of them changed, labels alternating.
pub fn synthetic_pairs(n: usize, side: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let changed = i % 2 == 1;
            let (a, b) = crate::synth::change_pair(side, changed, &mut rng);
            PairExample::new(format!("pair_{i:04}"), a, b, changed, Some(false)).unwrap()
        })
        .collect()
}

/// Metrics of one arm, as written to the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Ablation,
    pub auroc: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub bacc: f64,
}

impl ArmResult {
    pub fn from_metrics(arm: Ablation, m: &ClassificationMetrics) -> Self {
        Self {
            arm,
            auroc: m.auroc,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            bacc: m.bacc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model(head: HeadInput) -> SiameseModel {
        SiameseModel::new(Backbone::new(BackboneArch::fixture(), 3), 16, head, 4)
    }

    #[test]
    fn contrastive_boundaries() {
        let a = [0.3, -0.2, 0.9];
        assert_eq!(contrastive_loss(&a, &a, true, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[0.6, 0.8], false, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&a, &a, false, 1.0).unwrap(), 1.0);
        assert_relative_eq!(contrastive_loss(&[0.0], &[0.5], true, 1.0).unwrap(), 0.25);
        assert!(contrastive_loss(&[0.0], &[0.5, 1.0], true, 1.0).is_err());
    }

    #[test]
    fn graph_contrastive_matches_closed_form() {
        let m = model(HeadInput::Symmetric);
        let pairs = synthetic_pairs(2, 64, 1);
        let cfg = ChangeConfig {
            classification_weight: 0.0,
            ..ChangeConfig::fixture()
        };
        for p in &pairs {
            let (a, b) = (m.backbone.prepare(&p.t0), m.backbone.prepare(&p.t1));
            let mut g = Graph::new(m.store());
            let l = batch_objective(&mut g, &m, &[(&a, &b, p.changed)], &cfg);
            let norm = |v: Vec<f64>| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let e0 = norm(m.backbone.features(&p.t0));
            let e1 = norm(m.backbone.features(&p.t1));
            let want = contrastive_loss(&e0, &e1, !p.changed, 1.0).unwrap();
            assert_relative_eq!(g.scalar(l), want, epsilon = 1e-9);
        }
    }

    #[test]
    fn identical_pair_has_equal_halves() {
        let pairs = synthetic_pairs(1, 64, 2);
        let same = PairExample::new("x", pairs[0].t0.clone(), pairs[0].t0.clone(), false, None).unwrap();
        let v = model(HeadInput::Concat).head_input_vector(&same);
        let d = v.len() / 2;
        assert_eq!(v[..d], v[d..]);
        let v = model(HeadInput::Symmetric).head_input_vector(&same);
        assert!(v[d..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn probabilities_sum_to_one_and_swap_is_invariant() {
        let m = model(HeadInput::Symmetric);
        for p in synthetic_pairs(4, 64, 3) {
            let s = detect_change(&m, &p);
            assert!((s.probability + s.complement - 1.0).abs() <= 1e-9);
            assert!(s.raw_input);
            let swapped = PairExample {
                t0: p.t1.clone(),
                t1: p.t0.clone(),
                ..p.clone()
            };
            assert_eq!(detect_change(&m, &swapped).probability, s.probability);
        }
    }

    #[test]
    fn pair_validation() {
        let p = synthetic_pairs(1, 16, 0).remove(0);
        let small = crate::synth::flat_skin(8, 8, [0.5; 3]);
        assert!(PairExample::new("a", p.t0.clone(), small, false, None).is_err());
        assert!(PairExample::new("b", p.t0.clone(), p.t1.clone(), false, Some(true)).is_err());
        let one_class: Vec<_> = synthetic_pairs(4, 64, 0).into_iter().filter(|p| p.changed).collect();
        let r = train_change(model(HeadInput::Symmetric), &one_class, &one_class, &ChangeConfig::fixture(), 0, |_| {});
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_baseline() {
        let pairs = synthetic_pairs(12, 64, 5);
        let m = model(HeadInput::Symmetric);
        let before = evaluate_pairs(&m, &pairs[8..]).unwrap();
        let cfg = ChangeConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..ChangeConfig::fixture()
        };
        let r = train_change(m.clone(), &pairs[..8], &pairs[8..], &cfg, 0, |_| {}).unwrap();
        assert_eq!(r.history[0].val_auroc, before.auroc);
        for id in m.store().ids() {
            assert_eq!(m.store().get(id), r.model.store().get(id));
        }
    }
}
