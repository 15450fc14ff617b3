//! Lesion segmentation: a multi-depth fusion head over the ViT encoder,
//! trained per pixel with binary cross-entropy.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{Backbone, BackboneArch};
use crate::autograd::{sigmoid, Graph, Mat, ParamStore, Var};
use crate::data::{Checkpoint, ImageGrid, Seeder};
use crate::error::{Error, Result};
use crate::evalstat::{self, SegMetrics};
use crate::imageops::{self, Interp};
use crate::nn::{Init, Linear};
use crate::optim::{AdamW, WarmupCosine};

/// Foreground mask aligned with its image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn area(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn resize(&self, h: usize, w: usize) -> BinaryMask {
        if (h, w) == self.0.dim() {
            return self.clone();
        }
        let (sh, sw) = self.0.dim();
        BinaryMask(Array2::from_shape_fn((h, w), |(y, x)| {
            let sy = ((y as f64 + 0.5) * sh as f64 / h as f64) as usize;
            let sx = ((x as f64 + 0.5) * sw as f64 / w as f64) as usize;
            self.0[[sy.min(sh - 1), sx.min(sw - 1)]]
        }))
    }

    /// 1-bit grayscale PNG, foreground white.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.0.dim();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let stride = w.div_ceil(8);
        let mut data = vec![0u8; stride * h];
        for ((y, x), &m) in self.0.indexed_iter() {
            if m {
                data[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        Ok(())
    }

    /// Any grayscale or colour PNG; foreground is luminance above half.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(BinaryMask(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })))
    }
}

/// Segmentation training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub color_jitter: f64,
    pub threshold: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            color_jitter: 0.2,
            threshold: 0.5,
        }
    }
}

impl SegConfig {
    pub fn fixture() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-3,
            ..Self::default()
        }
    }
}

/// Encoder plus decoder. Four evenly spaced hidden states are projected,
/// summed and decoded to a `p × p` block of logits per patch; a per-pixel
/// colour MLP is added on top so boundaries can be resolved below patch
/// scale.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub backbone: Backbone,
    pub taps: Vec<usize>,
    taps_proj: Vec<Linear>,
    decode: Linear,
    pixel_hidden: Linear,
    pixel_out: Linear,
}

const PIXEL_HIDDEN: usize = 16;

/// Block indices read by the decoder: four evenly spaced depths ending at
/// the last block.
pub fn tap_depths(depth: usize) -> Vec<usize> {
    (1..=4).map(|i| ((i * depth).div_ceil(4)).max(1) - 1).collect()
}

impl SegModel {
    pub fn new(mut backbone: Backbone, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9);
        let dim = backbone.arch.encoder.dim;
        let p = backbone.arch.patch_side;
        let taps = tap_depths(backbone.arch.encoder.depth);
        let store = &mut backbone.store;
        let taps_proj = (0..taps.len())
            .map(|i| Linear::new(store, &format!("seg.tap{i}"), dim, dim, Init::TruncNormal(0.02), &mut rng))
            .collect();
        let decode = Linear::new(store, "seg.decode", dim, p * p, Init::TruncNormal(0.02), &mut rng);
        let pixel_hidden = Linear::new(store, "seg.pixel_hidden", 3, PIXEL_HIDDEN, Init::TruncNormal(0.5), &mut rng);
        let pixel_out = Linear::new(store, "seg.pixel_out", PIXEL_HIDDEN, 1, Init::TruncNormal(0.02), &mut rng);
        Self {
            backbone,
            taps,
            taps_proj,
            decode,
            pixel_hidden,
            pixel_out,
        }
    }

    pub fn from_checkpoint(arch: BackboneArch, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(Backbone::new(arch, 0), 0);
        ck.load_into(&mut m.backbone.store)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore {
        &self.backbone.store
    }

    pub fn side(&self) -> usize {
        self.backbone.arch.image_side
    }

    /// Logits for every pixel of a prepared image, `(H·W) × 1` in
    /// patch-major order.
    pub fn logits(&self, g: &mut Graph, image: &ImageGrid) -> Var {
        let p = self.backbone.arch.patch_side;
        let patches = imageops::patchify(image, p);
        let all: Vec<usize> = (0..patches.nrows()).collect();
        let layers = self.backbone.encoder.forward_layers(g, &patches, &all);
        let mut fused: Option<Var> = None;
        for (proj, &d) in self.taps_proj.iter().zip(&self.taps) {
            let h = g.layer_norm_rows(layers[d]);
            let h = proj.forward(g, h);
            fused = Some(match fused {
                Some(f) => g.add(f, h),
                None => h,
            });
        }
        let fused = g.gelu(fused.expect("four taps"));
        let coarse = self.decode.forward(g, fused);
        let coarse = g.reshape(coarse, patches.nrows() * p * p, 1);
        let colours = g.constant(patch_major_pixels(image, p));
        let h = self.pixel_hidden.forward(g, colours);
        let h = g.gelu(h);
        let fine = self.pixel_out.forward(g, h);
        g.add(coarse, fine)
    }

    /// Foreground probability at the model's input size.
    pub fn probability_map(&self, image: &ImageGrid) -> Array2<f64> {
        let img = self.backbone.prepare(image);
        let mut g = Graph::new(self.store());
        let z = self.logits(&mut g, &img);
        let flat: Vec<f64> = g.value(z).iter().map(|&v| sigmoid(v)).collect();
        from_patch_major(&flat, self.side(), self.backbone.arch.patch_side)
    }
}

/// Pixels as `(H·W) × C` rows ordered patch by patch, row-major inside
/// each patch.
pub fn patch_major_pixels(image: &ImageGrid, p: usize) -> Mat {
    let (c, h, w) = image.pixels().dim();
    let mut out = Mat::zeros((h * w, c));
    for (k, (y, x)) in patch_major_order(h, w, p).enumerate() {
        for ch in 0..c {
            out[[k, ch]] = image.get(ch, y, x) as f64;
        }
    }
    out
}

fn patch_major_order(h: usize, w: usize, p: usize) -> impl Iterator<Item = (usize, usize)> {
    let gw = w / p;
    (0..(h / p) * gw).flat_map(move |r| {
        let (gy, gx) = (r / gw, r % gw);
        (0..p * p).map(move |k| (gy * p + k / p, gx * p + k % p))
    })
}

fn from_patch_major(flat: &[f64], side: usize, p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((side, side));
    for (v, (y, x)) in flat.iter().zip(patch_major_order(side, side, p)) {
        out[[y, x]] = *v;
    }
    out
}

fn to_patch_major(mask: &Array2<bool>, p: usize) -> Mat {
    let (h, w) = mask.dim();
    let v: Vec<f64> = patch_major_order(h, w, p).map(|(y, x)| f64::from(u8::from(mask[[y, x]]))).collect();
    Mat::from_shape_vec((h * w, 1), v).unwrap()
}

/// Thresholds the foreground probability with a strict `>` and returns the
/// mask at the image's own size.
pub fn predict_mask(model: &SegModel, image: &ImageGrid, threshold: f64) -> BinaryMask {
    let prob = model.probability_map(image);
    let (h, w) = (image.height(), image.width());
    let prob = if (h, w) == prob.dim() {
        prob
    } else {
        let grid = ImageGrid::new(prob.mapv(|v| v as f32).insert_axis(ndarray::Axis(0)), "").unwrap();
        imageops::resize(&grid, h, w, Interp::Bilinear)
            .into_pixels()
            .index_axis_move(ndarray::Axis(0), 0)
            .mapv(f64::from)
    };
    BinaryMask(prob.mapv(|p| p > threshold))
}

/// One image with its target mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: ImageGrid,
    pub mask: BinaryMask,
}

impl SegSample {
    pub fn new(image: ImageGrid, mask: BinaryMask) -> Result<Self> {
        if (image.height(), image.width()) != mask.0.dim() {
            return Err(Error::Validation(format!(
                "{}: image is {}x{} but mask is {}x{}",
                image.source_path,
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { image, mask })
    }
}

/// Random flip, quarter-turn rotation and colour jitter; geometry is
/// applied to image and mask together, colour to the image only.
pub fn augment_pair(
    image: &ImageGrid,
    mask: &BinaryMask,
    jitter: f64,
    rng: &mut impl Rng,
) -> (ImageGrid, BinaryMask) {
    let (mut img, mut m) = (image.clone(), mask.0.clone());
    if rng.random::<bool>() {
        img = imageops::hflip(&img);
        m = imageops::hflip_mask(&m);
    }
    let k = rng.random_range(0..4);
    if img.height() == img.width() && k > 0 {
        img = imageops::rot90(&img, k);
        m = imageops::rot90_mask(&m, k);
    }
    (imageops::color_jitter(&img, jitter, rng), BinaryMask(m))
}

fn prepare_sample(model: &SegModel, s: &SegSample) -> SegSample {
    let side = model.side();
    SegSample {
        image: model.backbone.prepare(&s.image),
        mask: s.mask.resize(side, side),
    }
}

fn check_samples(samples: &[SegSample], what: &str) -> Result<()> {
    for s in samples {
        if (s.image.height(), s.image.width()) != s.mask.0.dim() {
            return Err(Error::Validation(format!("{what}: image/mask shape mismatch at {}", s.image.source_path)));
        }
    }
    Ok(())
}

/// Mean DSC and JAC over samples.
pub fn evaluate_seg(model: &SegModel, samples: &[SegSample], threshold: f64) -> Result<(SegMetrics, Vec<SegMetrics>)> {
    let per: Vec<SegMetrics> = samples
        .iter()
        .map(|s| evalstat::seg_metrics(&predict_mask(model, &s.image, threshold).0, &s.mask.0))
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    let mean = SegMetrics {
        dsc: per.iter().map(|m| m.dsc).sum::<f64>() / n,
        jac: per.iter().map(|m| m.jac).sum::<f64>() / n,
    };
    Ok((mean, per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub val_jac: f64,
}

#[derive(Clone, Debug)]
pub struct SegTrainResult {
    pub model: SegModel,
    pub history: Vec<SegEpoch>,
    pub best_epoch: usize,
    pub best_dsc: f64,
}

/// AdamW with cosine decay; the epoch with the best validation DSC is kept.
pub fn train_seg(
    mut model: SegModel,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SegConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&SegEpoch),
) -> Result<SegTrainResult> {
    check_samples(train, "train")?;
    check_samples(val, "val")?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("segmentation needs non-empty train and val splits".into()));
    }
    let fg: usize = train.iter().map(|s| s.mask.area()).sum();
    let total: usize = train.iter().map(|s| s.mask.0.len()).sum();
    if fg == 0 || fg == total {
        return Err(Error::Validation("training masks contain a single class".into()));
    }
    let train: Vec<SegSample> = train.iter().map(|s| prepare_sample(&model, s)).collect();
    let p = model.backbone.arch.patch_side;
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let schedule = WarmupCosine {
        base_lr: cfg.learning_rate,
        min_lr: 0.0,
        warmup_steps: 0,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let seeder = Seeder::new(seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = vec![];
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seeder.stream("seg", 0, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (grads, loss) = {
                let mut g = Graph::new(model.store());
                let mut logits = vec![];
                let mut targets = vec![];
                for &i in chunk {
                    let (img, m) = augment_pair(&train[i].image, &train[i].mask, cfg.color_jitter, &mut rng);
                    logits.push(model.logits(&mut g, &img));
                    targets.push(to_patch_major(&m.0, p));
                }
                let z = g.concat_rows(&logits);
                let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
                let t = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
                let l = g.bce_with_logits(z, t);
                (g.backward(l), g.scalar(l))
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite segmentation loss at epoch {epoch}")));
            }
            opt.step(&mut model.backbone.store, &grads, schedule.lr(step), |_| 1.0);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let (m, _) = evaluate_seg(&model, val, cfg.threshold)?;
        let rec = SegEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_dsc: m.dsc,
            val_jac: m.jac,
        };
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(b, _, _)| rec.val_dsc > *b) {
            best = Some((rec.val_dsc, epoch, model.store().clone()));
        }
        history.push(rec);
    }
    let (best_dsc, best_epoch) = match best {
        Some((d, e, store)) => {
            model.backbone.store = store;
            (d, e)
        }
        None => (evaluate_seg(&model, val, cfg.threshold)?.0.dsc, 0),
    };
    Ok(SegTrainResult {
        model,
        history,
        best_epoch,
        best_dsc,
    })
}

/// Synthetic disks on noisy skin at the given side.
pub fn synthetic_disks(n: usize, side: usize, seed: u64) -> Vec<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (img, m) = crate::synth::disk_on_noise(side, &mut rng);
            let img = ImageGrid::new(img.into_pixels(), format!("disk_{i:04}")).unwrap();
            SegSample::new(img, BinaryMask(m)).unwrap()
        })
        .collect()
}

/// Overlay of the mask on the image for quick inspection.
pub fn overlay(image: &ImageGrid, mask: &BinaryMask) -> ImageGrid {
    let rgb = crate::pretrain::to_rgb(image);
    let p: &Array3<f32> = rgb.pixels();
    let out = Array3::from_shape_fn(p.dim(), |(c, y, x)| {
        if mask.0[[y, x]] && c == 1 {
            (p[[c, y, x]] * 0.5 + 0.5).min(1.0)
        } else {
            p[[c, y, x]]
        }
    });
    ImageGrid::new(out, image.source_path.clone()).unwrap()
}
