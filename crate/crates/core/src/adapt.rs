//! Downstream adaptation: frozen-feature linear probing, full fine-tuning
//! with layer-wise learning-rate decay, and out-of-fold prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{log_softmax_rows, softmax_rows, Graph, Mat, ParamStore};
use crate::data::{Checkpoint, ImageGrid, Seeder};
use crate::error::{Error, Result};
use crate::evalstat::{self, ClassificationMetrics};
use crate::imageops::{self, Interp};
use crate::nn::{Init, Linear};
use crate::optim::{clip_grad_norm, layer_decay_multipliers, lbfgs, AdamW, WarmupCosine};
use crate::pretrain::{to_rgb, EncoderConfig, PretrainConfig, PretrainModel, VisionEncoder};

/// Geometry and width of a ViT backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub image_side: usize,
    pub patch_side: usize,
    pub encoder: EncoderConfig,
}

impl BackboneArch {
    pub fn from_pretrain(cfg: &PretrainConfig) -> Self {
        Self {
            image_side: cfg.first_input_size,
            patch_side: cfg.patch_size,
            encoder: EncoderConfig {
                dim: cfg.encoder_embed_dimension,
                depth: cfg.encoder_depth,
                heads: cfg.encoder_number_of_heads,
                mlp_ratio: 4,
                layer_scale: cfg.layer_scale_init_value,
                drop_path: cfg.drop_path,
            },
        }
    }

    /// The desk-scale fixture encoder.
    pub fn fixture() -> Self {
        Self::from_pretrain(&PretrainConfig::fixture())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn to_json(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self).expect("serialisable") {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        }
    }

    pub fn from_json(map: &BTreeMap<String, serde_json::Value>) -> Result<Self> {
        let v = serde_json::Value::Object(map.clone().into_iter().collect());
        serde_json::from_value(v).map_err(|e| Error::Config(format!("checkpoint architecture: {e}")))
    }
}

/// A ViT encoder with its own parameter store (`encoder.*` names).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub arch: BackboneArch,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
}

pub const ENCODER_PREFIX: &str = "encoder";

impl Backbone {
    pub fn new(arch: BackboneArch, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisionEncoder::new(
            &mut store,
            ENCODER_PREFIX,
            3,
            arch.patch_side,
            arch.grid(),
            arch.encoder,
            &mut rng,
        );
        Self { arch, store, encoder }
    }

    /// The student encoder of a pretraining model.
    pub fn from_pretrain(model: &PretrainModel) -> Self {
        let mut b = Self::new(BackboneArch::from_pretrain(&model.config), 0);
        b.store
            .load_strict(&model.store)
            .expect("pretrain model holds every encoder parameter");
        b
    }

    /// Loads `encoder.*` weights; a missing or mis-shaped parameter is a
    /// shape error naming it.
    pub fn from_checkpoint(arch: BackboneArch, ck: &Checkpoint) -> Result<Self> {
        let mut b = Self::new(arch, 0);
        ck.load_into(&mut b.store)?;
        Ok(b)
    }

    /// RGB at the backbone's input size.
    pub fn prepare(&self, image: &ImageGrid) -> ImageGrid {
        let side = self.arch.image_side;
        let rgb = to_rgb(image);
        if rgb.height() == side && rgb.width() == side {
            rgb
        } else {
            imageops::resize(&rgb, side, side, Interp::Bilinear)
        }
    }

    /// Mean of the final patch tokens.
    pub fn features(&self, image: &ImageGrid) -> Vec<f64> {
        let img = self.prepare(image);
        let mut g = Graph::new(&self.store);
        let f = self.encoder.pooled(&mut g, &img);
        g.value(f).iter().copied().collect()
    }
}

/// Feature rows with labels and identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(features: Mat, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature matrix has non-finite entries".into()));
        }
        Ok(Self { features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// Mean-pooled features for each image, in input order.
pub fn extract_features(
    backbone: &Backbone,
    images: &[ImageGrid],
    labels: &[usize],
    ids: &[String],
) -> Result<FeatureMatrix> {
    let dim = backbone.arch.encoder.dim;
    let mut features = Mat::zeros((images.len(), dim));
    for (i, img) in images.iter().enumerate() {
        let f = backbone.features(img);
        features.row_mut(i).assign(&Array1::from(f));
    }
    FeatureMatrix::new(features, labels.to_vec(), ids.to_vec())
}

/// ℓ2 coefficient `M·C/100`.
pub fn default_lambda(embedding_dim: usize, classes: usize) -> f64 {
    (embedding_dim * classes) as f64 / 100.0
}

/// Multinomial logistic regression on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `C × M`.
    pub weights: Mat,
    pub bias: Array1<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProbeModel {
    pub fn zeros(classes: usize, dim: usize, lambda: f64) -> Self {
        Self {
            weights: Mat::zeros((classes, dim)),
            bias: Array1::zeros(classes),
            lambda,
            iterations: 0,
            converged: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    fn logits(&self, x: &Mat) -> Mat {
        x.dot(&self.weights.t()) + &self.bias
    }

    /// Summed cross-entropy plus `(λ/2)‖W‖²`; the bias is not penalised.
    pub fn objective(&self, data: &FeatureMatrix) -> f64 {
        let lsm = log_softmax_rows(&self.logits(&data.features));
        let nll: f64 = data.labels.iter().enumerate().map(|(i, &y)| -lsm[[i, y]]).sum();
        nll + 0.5 * self.lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

pub const PROBE_MAX_ITER: usize = 1000;
pub const PROBE_GRAD_TOL: f64 = 1e-5;

/// Solver settings for [`linear_probe_fit_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    /// `None` selects [`default_lambda`].
    pub lambda: Option<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            lambda: None,
            max_iterations: PROBE_MAX_ITER,
            tolerance: PROBE_GRAD_TOL,
        }
    }
}

/// Fits the probe with L-BFGS from zero weights. `lambda` defaults to
/// [`default_lambda`].
pub fn linear_probe_fit(train: &FeatureMatrix, classes: usize, lambda: Option<f64>) -> Result<ProbeModel> {
    linear_probe_fit_with(
        train,
        classes,
        &ProbeSettings {
            lambda,
            ..ProbeSettings::default()
        },
    )
}

pub fn linear_probe_fit_with(train: &FeatureMatrix, classes: usize, settings: &ProbeSettings) -> Result<ProbeModel> {
    let lambda = settings.lambda;
    if settings.max_iterations == 0 || !(settings.tolerance > 0.0) {
        return Err(Error::Argument("probe needs positive max_iterations and tolerance".into()));
    }
    if train.len() < classes {
        return Err(Error::Validation(format!(
            "{} samples cannot cover {classes} classes",
            train.len()
        )));
    }
    let present: BTreeSet<usize> = train.labels.iter().copied().collect();
    if let Some(missing) = (0..classes).find(|k| !present.contains(k)) {
        return Err(Error::Validation(format!("class {missing} absent from training data")));
    }
    if let Some(&bad) = train.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Validation(format!("label {bad} outside {classes} classes")));
    }
    let m = train.dim();
    let lambda = lambda.unwrap_or_else(|| default_lambda(m, classes));
    let x = &train.features;
    let n_w = classes * m;
    let unpack = |theta: &[f64]| -> (Mat, Array1<f64>) {
        (
            Mat::from_shape_vec((classes, m), theta[..n_w].to_vec()).unwrap(),
            Array1::from(theta[n_w..].to_vec()),
        )
    };
    let res = lbfgs(
        vec![0.0; n_w + classes],
        |theta, grad| {
            let (w, b) = unpack(theta);
            let logits = x.dot(&w.t()) + &b;
            let p = softmax_rows(&logits);
            let lsm = log_softmax_rows(&logits);
            let mut resid = p;
            let mut nll = 0.0;
            for (i, &y) in train.labels.iter().enumerate() {
                nll -= lsm[[i, y]];
                resid[[i, y]] -= 1.0;
            }
            let gw = resid.t().dot(x) + &(&w * lambda);
            let gb = resid.sum_axis(Axis(0));
            grad[..n_w].copy_from_slice(gw.as_slice().unwrap());
            grad[n_w..].copy_from_slice(gb.as_slice().unwrap());
            nll + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
        },
        settings.max_iterations,
        settings.tolerance,
        10,
    );
    let (weights, bias) = unpack(&res.x);
    Ok(ProbeModel {
        weights,
        bias,
        lambda,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Class probabilities, one row per sample.
pub fn linear_probe_predict(model: &ProbeModel, features: &Mat) -> Result<Mat> {
    if features.ncols() != model.weights.ncols() {
        return Err(Error::Shape(format!(
            "probe expects {} features, got {}",
            model.weights.ncols(),
            features.ncols()
        )));
    }
    Ok(softmax_rows(&model.logits(features)))
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    /// Random-erasing probability.
    pub reprob: f64,
    /// Beta concentration for mixup; 0 disables it.
    pub mixup: f64,
    /// Beta concentration for cutmix; 0 disables it.
    pub cutmix: f64,
    /// Chance of cutmix when both are enabled.
    pub switch_prob: f64,
    pub crop_min_size: f64,
    pub color_jitter: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            warmup_epochs: 10,
            learning_rate: 5e-4,
            layer_decay: 0.75,
            weight_decay: 0.05,
            drop_path: 0.2,
            reprob: 0.25,
            mixup: 0.8,
            cutmix: 1.0,
            switch_prob: 0.5,
            crop_min_size: 0.5,
            color_jitter: 0.2,
        }
    }
}

impl FinetuneConfig {
    pub fn fixture() -> Self {
        Self {
            batch_size: 16,
            epochs: 5,
            warmup_epochs: 1,
            ..Self::default()
        }
    }
}

/// Backbone plus a linear classification head on the pooled tokens.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Linear,
    pub classes: usize,
}

impl Classifier {
    pub fn new(mut backbone: Backbone, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        let head = Linear::new(
            &mut backbone.store,
            "head",
            backbone.arch.encoder.dim,
            classes,
            Init::TruncNormal(0.02),
            &mut rng,
        );
        Self {
            backbone,
            head,
            classes,
        }
    }

    /// Loads backbone and head from a checkpoint written by fine-tuning.
    pub fn from_checkpoint(arch: BackboneArch, classes: usize, ck: &Checkpoint) -> Result<Self> {
        let mut c = Self::new(Backbone::new(arch, 0), classes, 0);
        ck.load_into(&mut c.backbone.store)?;
        Ok(c)
    }

    pub fn store(&self) -> &ParamStore {
        &self.backbone.store
    }

    /// Logits for a batch of prepared images in an existing graph.
    pub fn logits_graph(&self, g: &mut Graph, images: &[ImageGrid]) -> crate::autograd::Var {
        let pooled: Vec<_> = images.iter().map(|img| self.backbone.encoder.pooled(g, img)).collect();
        let x = g.concat_rows(&pooled);
        self.head.forward(g, x)
    }

    pub fn predict_proba(&self, images: &[ImageGrid]) -> Mat {
        let mut out = Mat::zeros((images.len(), self.classes));
        for (i, img) in images.iter().enumerate() {
            let img = self.backbone.prepare(img);
            let mut g = Graph::new(self.store());
            let l = self.logits_graph(&mut g, std::slice::from_ref(&img));
            out.row_mut(i).assign(&softmax_rows(g.value(l)).row(0));
        }
        out
    }

    /// Learning-rate multiplier per parameter under layer decay: patch
    /// embedding shallowest, head deepest.
    pub fn lr_scale(&self, decay: f64) -> impl Fn(&str) -> f64 + '_ {
        let groups = self.backbone.arch.encoder.depth + 2;
        let mult = layer_decay_multipliers(groups, decay);
        move |name: &str| {
            let id = if name.starts_with("head") {
                groups - 1
            } else {
                self.backbone.encoder.layer_id(ENCODER_PREFIX, name).min(groups - 1)
            };
            mult[id]
        }
    }
}

/// Images with integer labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<ImageGrid>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Mixes a batch with its reversal. Returns mixed images and soft targets.
/// With both concentrations 0 the batch and one-hot targets pass through.
pub fn mix_batch(
    images: &[ImageGrid],
    labels: &[usize],
    classes: usize,
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> (Vec<ImageGrid>, Mat) {
    let n = images.len();
    let onehot = |y: usize| {
        let mut r = Array1::zeros(classes);
        r[y] = 1.0;
        r
    };
    let use_cutmix = match (cfg.mixup > 0.0, cfg.cutmix > 0.0) {
        (false, false) => None,
        (true, false) => Some(false),
        (false, true) => Some(true),
        (true, true) => Some(rng.random::<f64>() < cfg.switch_prob),
    };
    let mut targets = Mat::zeros((n, classes));
    let Some(cutmix) = use_cutmix else {
        for (i, &y) in labels.iter().enumerate() {
            targets.row_mut(i).assign(&onehot(y));
        }
        return (images.to_vec(), targets);
    };
    let alpha = if cutmix { cfg.cutmix } else { cfg.mixup };
    let mut lam: f64 = Beta::new(alpha, alpha).unwrap().sample(rng);
    let mut out = Vec::with_capacity(n);
    if cutmix {
        let (h, w) = (images[0].height(), images[0].width());
        let cut = (1.0 - lam).sqrt();
        let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch / 2).min(h));
        let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw / 2).min(w));
        lam = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
        for i in 0..n {
            let other = images[n - 1 - i].pixels();
            let mut p = images[i].pixels().clone();
            for c in 0..p.dim().0 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        p[[c, y, x]] = other[[c, y, x]];
                    }
                }
            }
            out.push(ImageGrid::new(p, images[i].source_path.clone()).unwrap());
        }
    } else {
        let l = lam as f32;
        for i in 0..n {
            let mixed = images[i].pixels() * l + &(images[n - 1 - i].pixels() * (1.0 - l));
            out.push(ImageGrid::new(mixed, images[i].source_path.clone()).unwrap());
        }
    }
    for i in 0..n {
        let t = onehot(labels[i]) * lam + &(onehot(labels[n - 1 - i]) * (1.0 - lam));
        targets.row_mut(i).assign(&t);
    }
    (out, targets)
}

/// One epoch of fine-tuning history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_bacc: f64,
    pub val_w_f1: f64,
    /// The quantity used for checkpoint selection.
    pub val_selection: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Validation metric used for selection: AUROC when defined, otherwise
/// balanced accuracy.
pub fn selection_metric(m: &ClassificationMetrics) -> f64 {
    m.auroc.unwrap_or(m.bacc)
}

/// Fine-tunes every parameter with AdamW, layer decay, warmup-cosine
/// schedule, mixup/cutmix and random erasing; keeps the epoch with the best
/// validation metric.
pub fn finetune(
    mut model: Classifier,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneResult> {
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let seeder = Seeder::new(seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let schedule = WarmupCosine {
        base_lr: cfg.learning_rate,
        min_lr: 1e-6_f64.min(cfg.learning_rate),
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    for b in &mut model.backbone.encoder.blocks {
        b.drop_path = cfg.drop_path;
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let train_prepped: Vec<ImageGrid> = train.images.iter().map(|i| model.backbone.prepare(i)).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = seeder.stream("finetune", 0, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let side = model.backbone.arch.image_side;
            let imgs: Vec<ImageGrid> = chunk
                .iter()
                .map(|&i| {
                    let v = imageops::random_resized_crop(&train_prepped[i], side, cfg.crop_min_size, 1.0, &mut rng);
                    let v = if rng.random::<bool>() { imageops::hflip(&v) } else { v };
                    let v = imageops::color_jitter(&v, cfg.color_jitter, &mut rng);
                    imageops::random_erase(&v, cfg.reprob, &mut rng)
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (mixed, targets) = mix_batch(&imgs, &labels, model.classes, cfg, &mut rng);
            let lr = schedule.lr(step);
            let drop_seed = seeder.derive_u64("finetune_drop", 0, step as u64);
            let (mut grads, loss) = {
                let mut g = Graph::training(model.store(), drop_seed);
                let logits = model.logits_graph(&mut g, &mixed);
                let l = g.soft_cross_entropy(logits, targets);
                (g.backward(l), g.scalar(l))
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            clip_grad_norm(&mut grads, 0.0);
            let scales: BTreeMap<String, f64> = {
                let scale = model.lr_scale(cfg.layer_decay);
                model
                    .store()
                    .ids()
                    .map(|id| (model.store().name(id).to_string(), scale(model.store().name(id))))
                    .collect()
            };
            opt.step(&mut model.backbone.store, &grads, lr, |n| scales[n]);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let probs = model.predict_proba(&val.images);
        let m = evalstat::classification_metrics(&val.labels, &probs)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc: m.auroc,
            val_bacc: m.bacc,
            val_w_f1: m.w_f1,
            val_selection: selection_metric(&m),
        };
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(b, _, _)| rec.val_selection > *b) {
            best = Some((rec.val_selection, epoch, model.store().clone()));
        }
        history.push(rec);
    }
    let (best_metric, best_epoch, store) = best.expect("at least one epoch");
    if cfg.epochs > 0 {
        model.backbone.store = store;
    }
    Ok(FinetuneResult {
        model,
        history,
        best_epoch,
        best_metric,
    })
}

fn id_hash(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Stratified group k-fold assignment.
///
/// Units are patients when `groups` is given (otherwise rows); each unit is
/// stratified by the smallest stratum key among its rows. Within a stratum,
/// units are ordered by a seeded hash of their id and dealt round-robin,
/// continuing the deal across strata, so the assignment of an id does not
/// depend on input order.
pub fn assign_folds(
    ids: &[String],
    strata: &[String],
    groups: Option<&[String]>,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if ids.len() != strata.len() || groups.is_some_and(|g| g.len() != ids.len()) {
        return Err(Error::Shape("ids, strata and groups must align".into()));
    }
    if k < 2 {
        return Err(Error::Validation("need at least two folds".into()));
    }
    let unit_of = |i: usize| groups.map_or_else(|| ids[i].clone(), |g| g[i].clone());
    let mut unit_stratum: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..ids.len() {
        let u = unit_of(i);
        let e = unit_stratum.entry(u).or_insert_with(|| strata[i].clone());
        if strata[i] < *e {
            *e = strata[i].clone();
        }
    }
    let mut by_stratum: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (u, s) in &unit_stratum {
        by_stratum.entry(s.clone()).or_default().push(u.clone());
    }
    if let Some((s, units)) = by_stratum.iter().find(|(_, u)| u.len() < k) {
        return Err(Error::Validation(format!(
            "{k} folds exceed the {} units of stratum `{s}`",
            units.len()
        )));
    }
    let mut fold_of_unit: BTreeMap<String, usize> = BTreeMap::new();
    let mut next = 0usize;
    for units in by_stratum.values_mut() {
        units.sort_by_key(|u| id_hash(seed, u));
        for u in units.iter() {
            fold_of_unit.insert(u.clone(), next % k);
            next += 1;
        }
    }
    Ok((0..ids.len()).map(|i| fold_of_unit[&unit_of(i)]).collect())
}

/// Out-of-fold probabilities plus the fold that produced each row.
#[derive(Clone, Debug, PartialEq)]
pub struct OofPredictions {
    pub probs: Mat,
    pub folds: Vec<usize>,
}

/// Trains one model per fold on the other folds and predicts the held-out
/// rows. `fit_predict(train_rows, test_rows)` returns one probability row
/// per test row.
pub fn out_of_fold_predict(
    folds: &[usize],
    classes: usize,
    mut fit_predict: impl FnMut(&[usize], &[usize]) -> Result<Mat>,
) -> Result<OofPredictions> {
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    let mut probs = Mat::from_elem((folds.len(), classes), f64::NAN);
    for f in 0..k {
        let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
        let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
        let p = fit_predict(&train, &test)?;
        if p.dim() != (test.len(), classes) {
            return Err(Error::Shape(format!(
                "fold {f} returned {:?}, expected ({}, {classes})",
                p.dim(),
                test.len()
            )));
        }
        for (r, &i) in test.iter().enumerate() {
            probs.row_mut(i).assign(&p.row(r));
        }
    }
    Ok(OofPredictions {
        probs,
        folds: folds.to_vec(),
    })
}

/// Out-of-fold linear probing on a feature matrix.
pub fn oof_probe(data: &FeatureMatrix, classes: usize, folds: &[usize]) -> Result<OofPredictions> {
    out_of_fold_predict(folds, classes, |train, test| {
        let model = linear_probe_fit(&data.select(train), classes, None)?;
        linear_probe_predict(&model, &data.select(test).features)
    })
}

/// Writes `id,true_label,prob_0..prob_{C-1}[,fold]`.
pub fn write_predictions_csv(
    path: &Path,
    ids: &[String],
    labels: &[usize],
    probs: &Mat,
    folds: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e))?;
    let mut header = vec!["id".to_string(), "true_label".to_string()];
    header.extend((0..probs.ncols()).map(|k| format!("prob_{k}")));
    if folds.is_some() {
        header.push("fold".into());
    }
    w.write_record(&header)?;
    for i in 0..ids.len() {
        let mut rec = vec![ids[i].clone(), labels[i].to_string()];
        rec.extend(probs.row(i).iter().map(|p| format!("{p:.10}")));
        if let Some(f) = folds {
            rec.push(f[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<(Vec<String>, Vec<usize>, Mat)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let prob_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("prob_"))
        .map(|(i, _)| i)
        .collect();
    let (mut ids, mut labels, mut flat) = (vec![], vec![], vec![]);
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        labels.push(
            rec[1]
                .parse()
                .map_err(|_| Error::Schema(format!("bad true_label `{}` in {}", &rec[1], path.display())))?,
        );
        for &c in &prob_cols {
            flat.push(
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("bad probability `{}`", &rec[c])))?,
            );
        }
    }
    let probs = Mat::from_shape_vec((ids.len(), prob_cols.len()), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((ids, labels, probs))
}
