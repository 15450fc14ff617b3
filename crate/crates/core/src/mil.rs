//! Weakly supervised slide classification: tissue tiling, the two-tier
//! gated attention aggregator and case-stratified cross-validated training.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{assign_folds, out_of_fold_predict, OofPredictions};
use crate::autograd::{softmax_rows, Graph, Mat, ParamStore, Var};
use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::evalstat::{classification_metrics, ClassificationMetrics};
use crate::imageops::{gray01, normalize, resize, Interp};
use crate::nn::{Init, Linear};
use crate::optim::{AdamW, WarmupCosine};

pub const TILE_SIDE: usize = 256;
pub const TILE_OUT_SIDE: usize = 224;
/// A pixel is tissue when its luminance is below this.
pub const TISSUE_LUMINANCE: f32 = 0.8;
/// A tile is kept when at least this fraction of it is tissue.
pub const TISSUE_FRACTION: f64 = 0.25;
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub top: usize,
    pub left: usize,
}

/// Non-overlapping `tile_side` tiles over tissue, row-major. The list
/// depends only on the raster, so every encoder sees the same coordinates.
pub fn tile_coords(slide: &ImageGrid, tile_side: usize) -> Result<Vec<TileCoord>> {
    if tile_side == 0 {
        return Err(Error::Argument("tile side must be positive".into()));
    }
    let gray = gray01(slide);
    let (h, w) = gray.dim();
    let mut out = vec![];
    for ty in 0..h / tile_side {
        for tx in 0..w / tile_side {
            let (top, left) = (ty * tile_side, tx * tile_side);
            let tile = gray.slice(ndarray::s![top..top + tile_side, left..left + tile_side]);
            let tissue = tile.iter().filter(|&&v| v < TISSUE_LUMINANCE).count();
            if tissue as f64 >= TISSUE_FRACTION * (tile_side * tile_side) as f64 {
                out.push(TileCoord { top, left });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("no tissue detected: empty bag".into()));
    }
    Ok(out)
}

/// Crops each tile, resizes it to `out_side` and applies ImageNet
/// normalisation.
pub fn extract_tiles(
    slide: &ImageGrid,
    coords: &[TileCoord],
    tile_side: usize,
    out_side: usize,
) -> Vec<ndarray::Array3<f32>> {
    coords
        .iter()
        .map(|c| {
            let tile = crate::imageops::crop(slide, c.top, c.left, tile_side, tile_side);
            let tile = resize(&tile, out_side, out_side, Interp::Bilinear);
            normalize(&tile, IMAGENET_MEAN, IMAGENET_STD)
        })
        .collect()
}

/// One slide: `n_tiles × D` instance features and a slide label.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub case_id: String,
    pub features: Mat,
    pub label: usize,
}

impl SlideBag {
    pub fn new(slide_id: impl Into<String>, case_id: impl Into<String>, features: Mat, label: usize) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.nrows() == 0 {
            return Err(Error::Validation(format!("slide {slide_id} has an empty bag")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("slide {slide_id} has non-finite features")));
        }
        Ok(Self {
            slide_id,
            case_id: case_id.into(),
            features,
            label,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Reads `bags.csv` (slide_id, case_id, label, feature_path); each feature
/// file is a headerless CSV matrix, one instance per row.
pub fn load_bags(index: &Path) -> Result<Vec<SlideBag>> {
    let root = index.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(index)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("bags index lacks column `{name}`")))
    };
    let (cs, cc, cl, cf) = (col("slide_id")?, col("case_id")?, col("label")?, col("feature_path")?);
    let mut out = vec![];
    for rec in r.records() {
        let rec = rec?;
        let label: usize = rec[cl]
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("bad label `{}`", &rec[cl])))?;
        let features = read_matrix(&root.join(&rec[cf]))?;
        out.push(SlideBag::new(&rec[cs], &rec[cc], features, label)?);
    }
    Ok(out)
}

pub fn save_bags(dir: &Path, bags: &[SlideBag]) -> Result<()> {
    std::fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("bags.csv"))?;
    w.write_record(["slide_id", "case_id", "label", "feature_path"])?;
    for b in bags {
        let rel = format!("features/{}.csv", b.slide_id);
        write_matrix(&dir.join(&rel), &b.features)?;
        w.write_record([b.slide_id.as_str(), &b.case_id, &b.label.to_string(), &rel])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<Mat> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut values = vec![];
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Schema(format!("ragged feature matrix {}", path.display())));
        }
        for v in rec.iter() {
            values.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("non-numeric feature in {}", path.display())))?,
            );
        }
        rows += 1;
    }
    Mat::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| Error::Shape(e.to_string()))
}

fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbmilConfig {
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub input_dropout: f64,
    pub attention_dropout: f64,
    pub classes: usize,
}

impl Default for AbmilConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            attention_dim: 384,
            input_dropout: 0.10,
            attention_dropout: 0.25,
            classes: 2,
        }
    }
}

/// Gated attention MIL: `h = ReLU(W x)`, score `wᵀ(tanh(V h) ⊙ σ(U h))`,
/// softmax over instances, attention-pooled `h` into a linear classifier.
#[derive(Clone, Debug)]
pub struct Abmil {
    pub cfg: AbmilConfig,
    pub store: ParamStore,
    fc: Linear,
    attn_v: Linear,
    attn_u: Linear,
    attn_w: Linear,
    classifier: Linear,
}

pub struct BagForward {
    pub logits: Var,
    /// `n × 1`, in the caller's instance order.
    pub attention: Var,
}

/// Instance order used for the forward pass: lexicographic on feature
/// values. Summing in a canonical order is what makes the pooled output
/// bit-identical under permutation.
fn canonical_order(features: &Mat) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..features.nrows()).collect();
    idx.sort_by(|&a, &b| {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

impl Abmil {
    pub fn new(in_dim: usize, cfg: AbmilConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let xavier = Init::Xavier;
        let fc = Linear::new(&mut store, "mil.fc", in_dim, cfg.embed_dim, xavier, &mut rng);
        let attn_v = Linear::new(&mut store, "mil.attn_v", cfg.embed_dim, cfg.attention_dim, xavier, &mut rng);
        let attn_u = Linear::new(&mut store, "mil.attn_u", cfg.embed_dim, cfg.attention_dim, xavier, &mut rng);
        let attn_w = Linear::new(&mut store, "mil.attn_w", cfg.attention_dim, 1, xavier, &mut rng);
        let classifier = Linear::new(&mut store, "mil.classifier", cfg.embed_dim, cfg.classes, xavier, &mut rng);
        Self {
            cfg,
            store,
            fc,
            attn_v,
            attn_u,
            attn_w,
            classifier,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc.in_dim
    }

    pub fn forward(&self, g: &mut Graph, features: &Mat) -> Result<BagForward> {
        if features.nrows() == 0 {
            return Err(Error::Validation("empty bag".into()));
        }
        if features.ncols() != self.in_dim() {
            return Err(Error::Shape(format!("bag dim {} != model dim {}", features.ncols(), self.in_dim())));
        }
        let order = canonical_order(features);
        let x = g.constant(features.select(ndarray::Axis(0), &order));
        let x = g.dropout(x, self.cfg.input_dropout);
        let h = self.fc.forward(g, x);
        let h = g.relu(h);
        let a = self.attn_v.forward(g, h);
        let a = g.tanh(a);
        let a = g.dropout(a, self.cfg.attention_dropout);
        let b = self.attn_u.forward(g, h);
        let b = g.sigmoid(b);
        let b = g.dropout(b, self.cfg.attention_dropout);
        let gated = g.mul(a, b);
        let scores = self.attn_w.forward(g, gated);
        let attn = g.softmax_cols(scores);
        let attn_t = g.transpose(attn);
        let pooled = g.matmul(attn_t, h);
        let logits = self.classifier.forward(g, pooled);
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let attention = g.gather_rows(attn, &inverse);
        Ok(BagForward { logits, attention })
    }

    /// Class probabilities and attention weights in evaluation mode.
    pub fn predict(&self, features: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, features)?;
        let p = softmax_rows(g.value(f.logits));
        Ok((p.row(0).to_vec(), g.value(f.attention).column(0).to_vec()))
    }

    pub fn predict_bags(&self, bags: &[&SlideBag]) -> Result<Mat> {
        let mut out = Mat::zeros((bags.len(), self.cfg.classes));
        for (i, b) in bags.iter().enumerate() {
            let (p, _) = self.predict(&b.features)?;
            out.row_mut(i).assign(&ndarray::Array1::from(p));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Epochs before validation loss is tracked at all.
    pub stopping_warmup: usize,
    pub folds: usize,
    pub model: AbmilConfig,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            weight_decay: 1e-5,
            patience: 5,
            stopping_warmup: 5,
            folds: 5,
            model: AbmilConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MilTrainResult {
    pub history: Vec<MilEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn mean_loss(model: &Abmil, bags: &[&SlideBag]) -> Result<f64> {
    let mut total = 0.0;
    for b in bags {
        let (p, _) = model.predict(&b.features)?;
        total -= p[b.label].max(1e-12).ln();
    }
    Ok(total / bags.len().max(1) as f64)
}

/// One bag per step, cross-entropy, AdamW with a cosine schedule. The
/// parameters of the epoch with the lowest validation loss (from
/// `stopping_warmup` on) are kept; training halts once `patience` epochs
/// pass without improvement.
pub fn train_mil(
    model: &mut Abmil,
    train: &[&SlideBag],
    val: &[&SlideBag],
    cfg: &MilTrainConfig,
    seed: u64,
) -> Result<MilTrainResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("MIL training needs train and validation bags".into()));
    }
    if let Some(b) = train.iter().chain(val).find(|b| b.label >= model.cfg.classes) {
        return Err(Error::Validation(format!("slide {} label {} out of range", b.slide_id, b.label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = WarmupCosine {
        base_lr: cfg.lr,
        min_lr: 0.0,
        warmup_steps: 0,
        total_steps: cfg.epochs * train.len(),
    };
    let mut history = vec![];
    let mut best = (f64::INFINITY, 0, model.store.clone());
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = train[i];
            let grads = {
                let mut g = Graph::training(&model.store, seed ^ (step as u64).wrapping_mul(0x2545_f491));
                let f = model.forward(&mut g, &bag.features)?;
                let loss = g.cross_entropy(f.logits, &[bag.label]);
                train_loss += g.scalar(loss);
                g.backward(loss)
            };
            if !grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite MIL gradient at epoch {epoch}")));
            }
            opt.step(&mut model.store, &grads, sched.lr(step), |_| 1.0);
            step += 1;
        }
        let val_loss = mean_loss(model, val)?;
        history.push(MilEpoch {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
        });
        log::debug!("mil epoch {epoch}: val loss {val_loss:.4}");
        if epoch < cfg.stopping_warmup && epoch + 1 < cfg.epochs {
            continue;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store = best.2;
    Ok(MilTrainResult {
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auroc: Option<f64>,
    pub weighted_f1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct MilCvResult {
    pub folds: Vec<FoldMetrics>,
    pub oof: OofPredictions,
    pub pooled: ClassificationMetrics,
}

impl MilCvResult {
    /// Mean per-fold AUROC over folds where it is defined.
    pub fn mean_auroc(&self) -> Option<f64> {
        let v: Vec<f64> = self.folds.iter().filter_map(|f| f.auroc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Fails when one case id appears in two folds.
pub fn check_case_folds(bags: &[SlideBag], folds: &[usize]) -> Result<()> {
    let mut seen = std::collections::BTreeMap::new();
    for (b, &f) in bags.iter().zip(folds) {
        if let Some(&prev) = seen.get(&b.case_id) {
            if prev != f {
                return Err(Error::Validation(format!("case {} spans folds {prev} and {f}", b.case_id)));
            }
        }
        seen.insert(b.case_id.clone(), f);
    }
    Ok(())
}

/// k-fold cross-validation stratified by case and label. For test fold `f`
/// the next fold serves as the early-stopping validation set.
pub fn train_mil_cv(bags: &[SlideBag], cfg: &MilTrainConfig, seed: u64) -> Result<MilCvResult> {
    let ids: Vec<String> = bags.iter().map(|b| b.slide_id.clone()).collect();
    let strata: Vec<String> = bags.iter().map(|b| b.label.to_string()).collect();
    let cases: Vec<String> = bags.iter().map(|b| b.case_id.clone()).collect();
    let folds = assign_folds(&ids, &strata, Some(&cases), cfg.folds, seed)?;
    check_case_folds(bags, &folds)?;
    let dim = bags.first().map_or(0, SlideBag::dim);
    let k = cfg.folds;
    let mut per_fold = vec![];
    let oof = out_of_fold_predict(&folds, cfg.model.classes, |train_rows, test_rows| {
        let f = folds[test_rows[0]];
        let val_fold = (f + 1) % k;
        let (val_rows, fit_rows): (Vec<usize>, Vec<usize>) = train_rows.iter().partition(|&&i| folds[i] == val_fold);
        let train: Vec<&SlideBag> = fit_rows.iter().map(|&i| &bags[i]).collect();
        let val: Vec<&SlideBag> = val_rows.iter().map(|&i| &bags[i]).collect();
        let mut model = Abmil::new(dim, cfg.model, seed.wrapping_add(f as u64));
        let r = train_mil(&mut model, &train, &val, cfg, seed.wrapping_add(1000 + f as u64))?;
        let test: Vec<&SlideBag> = test_rows.iter().map(|&i| &bags[i]).collect();
        let probs = model.predict_bags(&test)?;
        let labels: Vec<usize> = test.iter().map(|b| b.label).collect();
        let m = classification_metrics(&labels, &probs)?;
        per_fold.push(FoldMetrics {
            fold: f,
            auroc: m.auroc,
            weighted_f1: m.w_f1,
            best_epoch: r.best_epoch,
        });
        Ok(probs)
    })?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let pooled = classification_metrics(&labels, &oof.probs)?;
    Ok(MilCvResult {
        folds: per_fold,
        oof,
        pooled,
    })
}
