//! Masked latent alignment pretraining.
//!
//! An image is split into a patch grid and a block mask hides part of it.
//! The student encoder sees only the visible patches; a cross-attention
//! regressor turns one learnable query per masked position into a predicted
//! latent, attending over the visible latents together with the previous
//! regressor layer's queries. A frozen teacher encodes the whole image at its
//! own input size into one target per patch. Two objectives compare the
//! student with the teacher after a learned projection into the teacher's
//! space:
//!
//! * masked alignment: regressor predictions vs. targets at masked patches;
//! * visible alignment: encoder outputs vs. targets at visible patches.
//!
//! Both use the mean over patches of the squared distance between the
//! ℓ2-normalised prediction and target rows.

use std::path::PathBuf;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Mat, ParamStore, Var};
use crate::data::{ImageGrid, Seeder};
use crate::error::{Error, Result};
use crate::imageops::{self, Interp};
use crate::nn::{sincos_pos_embed, Block, CrossBlock, Init, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, AdamW, WarmupCosine};

/// Student and teacher patch grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub teacher_image_side: usize,
}

impl PatchGridSpec {
    pub fn new(image_side: usize, patch_side: usize, teacher_image_side: usize) -> Result<Self> {
        if patch_side == 0 || image_side == 0 || image_side % patch_side != 0 {
            return Err(Error::Argument(format!(
                "image side {image_side} is not divisible by patch side {patch_side}"
            )));
        }
        let grid = image_side / patch_side;
        if teacher_image_side == 0 || teacher_image_side % grid != 0 {
            return Err(Error::Argument(format!(
                "teacher side {teacher_image_side} cannot hold a {grid}x{grid} patch grid"
            )));
        }
        Ok(Self {
            image_side,
            patch_side,
            teacher_image_side,
        })
    }

    /// 224-pixel student, 196-pixel teacher, 16-pixel patches.
    pub fn standard() -> Self {
        Self::new(224, 16, 196).unwrap()
    }

    /// 64-pixel student, 56-pixel teacher, 8-pixel patches (8×8 grid).
    pub fn fixture() -> Self {
        Self::new(64, 8, 56).unwrap()
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn teacher_patch_side(&self) -> usize {
        self.teacher_image_side / self.grid()
    }
}

/// Visible/masked assignment over the patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    masked: Vec<bool>,
    count_masked: usize,
}

impl PatchMask {
    pub fn from_bools(masked: Vec<bool>) -> Self {
        let count_masked = masked.iter().filter(|m| **m).count();
        Self {
            masked,
            count_masked,
        }
    }

    pub fn all_visible(num_patches: usize) -> Self {
        Self::from_bools(vec![false; num_patches])
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count_masked(&self) -> usize {
        self.count_masked
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.masked
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|i| !self.masked[*i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|i| self.masked[*i]).collect()
    }
}

/// Block mask sampler: rectangles with log-uniform aspect ratio are added
/// until the exact count is reached; the final rectangle is trimmed.
#[derive(Clone, Copy, Debug)]
pub struct BlockMasker {
    pub grid: usize,
    pub min_block_area: usize,
    pub min_aspect: f64,
}

impl BlockMasker {
    pub fn new(grid: usize) -> Self {
        Self {
            grid,
            min_block_area: 4,
            min_aspect: 0.3,
        }
    }

    pub fn generate(&self, target_count: usize, rng: &mut impl Rng) -> Result<PatchMask> {
        let n = self.grid * self.grid;
        if target_count > n {
            return Err(Error::Argument(format!(
                "mask count {target_count} exceeds the {n} grid positions"
            )));
        }
        let mut masked = vec![false; n];
        let mut count = 0;
        let (la, lb) = (self.min_aspect.ln(), (1.0 / self.min_aspect).ln());
        let mut stalls = 0;
        while count < target_count {
            let remaining = target_count - count;
            let hi = remaining.max(self.min_block_area) as f64;
            let area = rng.random_range(self.min_block_area as f64..=hi);
            let aspect = rng.random_range(la..=lb).exp();
            let mut h = ((area * aspect).sqrt().round() as usize).clamp(1, self.grid);
            let mut w = ((area / aspect).sqrt().round() as usize).clamp(1, self.grid);
            if stalls >= 20 {
                // Sampling keeps landing on covered cells: take any
                // rectangle that still has room.
                h = self.grid;
                w = self.grid;
            }
            let top = rng.random_range(0..=self.grid - h);
            let left = rng.random_range(0..=self.grid - w);
            let fresh: Vec<usize> = (top..top + h)
                .flat_map(|y| (left..left + w).map(move |x| y * self.grid + x))
                .filter(|&i| !masked[i])
                .collect();
            if fresh.is_empty() {
                stalls += 1;
                continue;
            }
            stalls = 0;
            for &i in fresh.iter().take(remaining) {
                masked[i] = true;
                count += 1;
            }
        }
        Ok(PatchMask::from_bools(masked))
    }
}

/// Block mask over the patch grid with minimum block area 4.
pub fn generate_block_mask(
    spec: &PatchGridSpec,
    target_count: usize,
    rng: &mut impl Rng,
) -> Result<PatchMask> {
    BlockMasker::new(spec.grid()).generate(target_count, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentOwner {
    Student,
    Regressor,
    Teacher,
}

/// Per-patch embeddings for a subset of grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub embeddings: Mat,
    pub positions: Vec<usize>,
    pub owner: LatentOwner,
}

impl LatentGrid {
    pub fn new(embeddings: Mat, positions: Vec<usize>, owner: LatentOwner) -> Result<Self> {
        if embeddings.nrows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} latent rows for {} positions",
                embeddings.nrows(),
                positions.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("latent grid has non-finite entries".into()));
        }
        Ok(Self {
            embeddings,
            positions,
            owner,
        })
    }

    pub fn rows(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Restricts to the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Result<LatentGrid> {
        let mut rows = Vec::with_capacity(positions.len());
        for p in positions {
            let r = self
                .positions
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::Shape(format!("position {p} not in latent grid")))?;
            rows.push(r);
        }
        LatentGrid::new(
            self.embeddings.select(Axis(0), &rows),
            positions.to_vec(),
            self.owner,
        )
    }

    /// Splits into (visible, masked) rows.
    pub fn partition(&self, mask: &PatchMask) -> Result<(LatentGrid, LatentGrid)> {
        Ok((
            self.select(&mask.visible_indices())?,
            self.select(&mask.masked_indices())?,
        ))
    }
}

/// Mean over rows of ‖p/‖p‖ − t/‖t‖‖².
pub fn alignment_loss(predicted: &Mat, target: &Mat) -> Result<f64> {
    if predicted.nrows() != target.nrows() {
        return Err(Error::Shape(format!(
            "alignment needs equal row counts, got {} and {}",
            predicted.nrows(),
            target.nrows()
        )));
    }
    if predicted.ncols() != target.ncols() {
        return Err(Error::Shape(format!(
            "alignment needs equal dims, got {} and {}",
            predicted.ncols(),
            target.ncols()
        )));
    }
    if predicted.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in predicted.rows().into_iter().zip(target.rows()) {
        let pn = p.dot(&p).sqrt().max(1e-12);
        let tn = t.dot(&t).sqrt().max(1e-12);
        total += p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a / pn - b / tn).powi(2))
            .sum::<f64>();
    }
    Ok(total / predicted.nrows() as f64)
}

/// Graph form of [`alignment_loss`]; the target is a constant.
pub fn alignment_loss_graph(g: &mut Graph, predicted: Var, target: &Mat) -> Var {
    let rows = g.shape(predicted).0.max(1);
    let p = g.l2_normalize_rows(predicted);
    let t = g.constant(target.clone());
    let t = g.l2_normalize_rows(t);
    let d = g.sub(p, t);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / rows as f64)
}

/// ViT encoder over an arbitrary subset of patch positions.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub pos: Mat,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub patch_side: usize,
    pub grid: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_scale: f64,
    pub drop_path: f64,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        patch_side: usize,
        grid: usize,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let in_dim = channels * patch_side * patch_side;
        let patch_embed = Linear::new(
            store,
            &format!("{prefix}.patch_embed"),
            in_dim,
            cfg.dim,
            Init::Xavier,
            rng,
        );
        // Stochastic depth grows linearly with depth.
        let blocks = (0..cfg.depth)
            .map(|i| {
                let dp = if cfg.depth > 1 {
                    cfg.drop_path * i as f64 / (cfg.depth - 1) as f64
                } else {
                    cfg.drop_path
                };
                Block::new(
                    store,
                    &format!("{prefix}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.layer_scale,
                    dp,
                    rng,
                )
            })
            .collect();
        Self {
            patch_embed,
            pos: sincos_pos_embed(grid, cfg.dim),
            blocks,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim),
            patch_side,
            grid,
            dim: cfg.dim,
        }
    }

    /// Embeds the selected rows of a patch matrix and adds their position
    /// encodings. Rows that are not selected never enter the graph.
    pub fn embed(&self, g: &mut Graph, patches: &Mat, positions: &[usize]) -> Var {
        let x = g.constant(patches.select(Axis(0), positions));
        let x = self.patch_embed.forward(g, x);
        let pos = g.constant(self.pos.select(Axis(0), positions));
        g.add(x, pos)
    }

    /// Hidden states after every block, then the final normalised output.
    pub fn forward_layers(&self, g: &mut Graph, patches: &Mat, positions: &[usize]) -> Vec<Var> {
        let mut x = self.embed(g, patches, positions);
        let mut outs = Vec::with_capacity(self.blocks.len() + 1);
        for b in &self.blocks {
            x = b.forward(g, x);
            outs.push(x);
        }
        outs.push(self.norm.forward(g, x));
        outs
    }

    pub fn forward(&self, g: &mut Graph, patches: &Mat, positions: &[usize]) -> Var {
        *self.forward_layers(g, patches, positions).last().unwrap()
    }

    /// Mean-pooled features of the full patch grid.
    pub fn pooled(&self, g: &mut Graph, image: &ImageGrid) -> Var {
        let patches = imageops::patchify(image, self.patch_side);
        let all: Vec<usize> = (0..patches.nrows()).collect();
        let x = self.forward(g, &patches, &all);
        g.mean_rows(x)
    }

    /// Layer-decay group of a parameter name: 0 for embeddings, `i + 1` for
    /// block `i`, `depth + 1` for everything after the blocks.
    pub fn layer_id(&self, prefix: &str, name: &str) -> usize {
        let Some(rest) = name.strip_prefix(prefix) else {
            return self.blocks.len() + 1;
        };
        if rest.starts_with(".patch_embed") {
            0
        } else if let Some(b) = rest.strip_prefix(".blocks.") {
            b.split('.').next().and_then(|s| s.parse::<usize>().ok()).map_or(0, |i| i + 1)
        } else {
            self.blocks.len() + 1
        }
    }
}

/// Cross-attention regressor predicting latents at masked positions.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub mask_token: crate::autograd::ParamId,
    pub pos: Mat,
    pub blocks: Vec<CrossBlock>,
    pub norm: LayerNorm,
}

impl Regressor {
    pub fn new(
        store: &mut ParamStore,
        grid: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        layer_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mask_token = store.add("regressor.mask_token", Init::TruncNormal(0.02).sample(1, dim, rng));
        let blocks = (0..depth)
            .map(|i| CrossBlock::new(store, &format!("regressor.blocks.{i}"), dim, heads, 4, layer_scale, rng))
            .collect();
        Self {
            mask_token,
            pos: sincos_pos_embed(grid, dim),
            blocks,
            norm: LayerNorm::new(store, "regressor.norm", dim),
        }
    }

    /// One row per masked position; `None` when nothing is masked.
    ///
    /// Each layer's keys/values are the visible latents concatenated with
    /// the queries produced by the immediately preceding layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        visible_latents: Var,
        visible_pos: &[usize],
        masked_pos: &[usize],
    ) -> Option<Var> {
        if masked_pos.is_empty() {
            return None;
        }
        let vpos = g.constant(self.pos.select(Axis(0), visible_pos));
        let context = g.add(visible_latents, vpos);
        let token = g.param(self.mask_token);
        let ones = g.constant(Mat::ones((masked_pos.len(), 1)));
        let tokens = g.matmul(ones, token);
        let mpos = g.constant(self.pos.select(Axis(0), masked_pos));
        let mut queries = g.add(tokens, mpos);
        for b in &self.blocks {
            let kv = g.concat_rows(&[context, queries]);
            queries = b.forward(g, queries, kv);
        }
        Some(self.norm.forward(g, queries))
    }
}

/// Where teacher weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TeacherSource {
    /// Randomly initialised, frozen patch encoder.
    RandomFrozen { seed: u64 },
    /// A checkpoint directory holding `teacher.*` parameters.
    Checkpoint(PathBuf),
}

impl TeacherSource {
    /// `random_frozen` (optionally `random_frozen:<seed>`) or a path.
    pub fn parse(s: &str) -> Self {
        match s.strip_prefix("random_frozen") {
            Some("") => TeacherSource::RandomFrozen { seed: 0 },
            Some(rest) => TeacherSource::RandomFrozen {
                seed: rest.trim_start_matches(':').parse().unwrap_or(0),
            },
            None => TeacherSource::Checkpoint(PathBuf::from(s)),
        }
    }
}

/// Frozen per-patch target encoder.
#[derive(Clone, Debug)]
pub struct Teacher {
    store: ParamStore,
    encoder: VisionEncoder,
    spec: PatchGridSpec,
}

impl Teacher {
    pub fn new(spec: PatchGridSpec, cfg: EncoderConfig, source: &TeacherSource) -> Result<Self> {
        let mut store = ParamStore::new();
        let seed = match source {
            TeacherSource::RandomFrozen { seed } => *seed,
            TeacherSource::Checkpoint(_) => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e12);
        let encoder = VisionEncoder::new(
            &mut store,
            "teacher",
            3,
            spec.teacher_patch_side(),
            spec.grid(),
            EncoderConfig {
                drop_path: 0.0,
                ..cfg
            },
            &mut rng,
        );
        if let TeacherSource::Checkpoint(dir) = source {
            if !dir.join(crate::data::WEIGHTS_FILE).exists() {
                return Err(Error::Config(format!(
                    "teacher weights not found in {}; set teacher_model to \"random_frozen\" \
                     to use the fixture random frozen teacher",
                    dir.display()
                )));
            }
            let ck = crate::data::load_checkpoint(dir)?;
            ck.load_into(&mut store)?;
        }
        Ok(Self {
            store,
            encoder,
            spec,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    /// Targets for every patch. The image is resized (bicubic) to the
    /// teacher's input side first.
    pub fn targets(&self, image: &ImageGrid) -> Result<LatentGrid> {
        let side = self.spec.teacher_image_side;
        let img = if image.height() == side && image.width() == side {
            image.clone()
        } else {
            imageops::resize(image, side, side, Interp::Bicubic)
        };
        let img = to_rgb(&img);
        let patches = imageops::patchify(&img, self.spec.teacher_patch_side());
        let all: Vec<usize> = (0..patches.nrows()).collect();
        let mut g = Graph::new(&self.store);
        let out = self.encoder.forward(&mut g, &patches, &all);
        LatentGrid::new(g.value(out).clone(), all, LatentOwner::Teacher)
    }
}

pub(crate) fn to_rgb(img: &ImageGrid) -> ImageGrid {
    if img.channels() == 3 {
        return img.clone();
    }
    let p = img.pixels();
    ImageGrid::from_fn(3, img.height(), img.width(), |(_, y, x)| p[[0, y, x]])
}

/// Hyperparameters; keys follow the pretraining hyperparameter table in
/// snake case, plus the architecture sizes the table leaves implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub teacher_model: String,
    pub first_input_size: usize,
    pub second_input_size: usize,
    pub second_interpolation: String,
    pub number_of_output_dimensions: usize,
    pub crop_min_size: f64,
    pub crop_max_size: f64,
    pub patch_size: usize,
    /// Listed in the table but unused by the architecture.
    pub vocabulary_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub gradient_clipping_max_norm: f64,
    pub layer_scale_init_value: f64,
    pub color_jitter: f64,
    pub drop_path: f64,
    pub mask_generator: String,
    pub number_of_mask_patches: usize,
    pub decoder_layer_scale_init_value: f64,
    pub regressor_depth: usize,
    pub decoder_depth: usize,
    pub decoder_embed_dimension: usize,
    pub decoder_number_of_heads: usize,
    /// Weight of the visible alignment term.
    pub align_loss_weight: f64,
    /// Weight of the masked alignment term.
    pub latent_alignment_loss_weight: f64,
    pub encoder_depth: usize,
    pub encoder_embed_dimension: usize,
    pub encoder_number_of_heads: usize,
    pub teacher_depth: usize,
    pub teacher_number_of_heads: usize,
    pub min_block_area: usize,
    pub weight_decay: f64,
    /// Optimizer steps per epoch; `0` derives it from the dataset size.
    pub steps_per_epoch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            teacher_model: "random_frozen".into(),
            first_input_size: 224,
            second_input_size: 196,
            second_interpolation: "bicubic".into(),
            number_of_output_dimensions: 768,
            crop_min_size: 0.4,
            crop_max_size: 1.0,
            patch_size: 16,
            vocabulary_size: 8000,
            batch_size: 480,
            learning_rate: 1.5e-3,
            warmup_epochs: 20,
            total_epochs: 500,
            gradient_clipping_max_norm: 3.0,
            layer_scale_init_value: 1e-5,
            color_jitter: 0.4,
            drop_path: 0.2,
            mask_generator: "block".into(),
            number_of_mask_patches: 118,
            decoder_layer_scale_init_value: 1e-5,
            regressor_depth: 4,
            decoder_depth: 0,
            decoder_embed_dimension: 1024,
            decoder_number_of_heads: 16,
            align_loss_weight: 0.0,
            latent_alignment_loss_weight: 1.0,
            encoder_depth: 24,
            encoder_embed_dimension: 1024,
            encoder_number_of_heads: 16,
            teacher_depth: 24,
            teacher_number_of_heads: 12,
            min_block_area: 4,
            weight_decay: 0.05,
            steps_per_epoch: 0,
        }
    }
}

impl PretrainConfig {
    /// Desk-scale model: 8×8 grid, width 64, two encoder blocks, one
    /// regressor block.
    pub fn fixture() -> Self {
        Self {
            first_input_size: 64,
            second_input_size: 56,
            patch_size: 8,
            number_of_output_dimensions: 48,
            batch_size: 8,
            warmup_epochs: 2,
            total_epochs: 50,
            steps_per_epoch: 1,
            layer_scale_init_value: 0.1,
            decoder_layer_scale_init_value: 0.1,
            drop_path: 0.0,
            // 118/196 of the 64-position grid.
            number_of_mask_patches: 38,
            regressor_depth: 1,
            decoder_embed_dimension: 64,
            decoder_number_of_heads: 4,
            encoder_depth: 2,
            encoder_embed_dimension: 64,
            encoder_number_of_heads: 4,
            teacher_depth: 1,
            teacher_number_of_heads: 4,
            ..Self::default()
        }
    }

    pub fn grid_spec(&self) -> Result<PatchGridSpec> {
        PatchGridSpec::new(self.first_input_size, self.patch_size, self.second_input_size)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.grid_spec()?;
        if self.mask_generator != "block" {
            return Err(Error::Config(format!(
                "mask_generator `{}` unsupported (only `block`)",
                self.mask_generator
            )));
        }
        if self.decoder_depth != 0 {
            return Err(Error::Config("the regressor architecture has no decoder; decoder_depth must be 0".into()));
        }
        if self.second_interpolation != "bicubic" {
            return Err(Error::Config("second_interpolation must be `bicubic`".into()));
        }
        if self.decoder_embed_dimension != self.encoder_embed_dimension {
            return Err(Error::Config(
                "decoder_embed_dimension must equal encoder_embed_dimension: regressor keys include encoder latents".into(),
            ));
        }
        if self.number_of_mask_patches >= spec.num_patches() {
            return Err(Error::Config(format!(
                "number_of_mask_patches {} leaves no visible patch on a {}-patch grid",
                self.number_of_mask_patches,
                spec.num_patches()
            )));
        }
        for (name, dim, heads) in [
            ("encoder", self.encoder_embed_dimension, self.encoder_number_of_heads),
            ("decoder", self.decoder_embed_dimension, self.decoder_number_of_heads),
            ("teacher", self.number_of_output_dimensions, self.teacher_number_of_heads),
        ] {
            if heads == 0 || dim % heads != 0 || dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name} width {dim} must be a multiple of 4 and of its {heads} heads"
                )));
            }
        }
        if !(0.0 < self.crop_min_size && self.crop_min_size <= self.crop_max_size && self.crop_max_size <= 1.0) {
            return Err(Error::Config("crop sizes must satisfy 0 < min <= max <= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.encoder_embed_dimension,
            depth: self.encoder_depth,
            heads: self.encoder_number_of_heads,
            mlp_ratio: 4,
            layer_scale: self.layer_scale_init_value,
            drop_path: self.drop_path,
        }
    }

    fn teacher_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.number_of_output_dimensions,
            depth: self.teacher_depth,
            heads: self.teacher_number_of_heads,
            mlp_ratio: 4,
            layer_scale: 1.0,
            drop_path: 0.0,
        }
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainBatchLoss {
    pub masked_align: f64,
    pub visible_align: f64,
    pub total: f64,
    pub lr: f64,
}

/// One image ready for a loss evaluation: student patches, its mask and
/// the teacher targets for every patch.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub patches: Mat,
    pub mask: PatchMask,
    pub targets: LatentGrid,
}

/// Student (encoder, regressor, projection) plus frozen teacher.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub config: PretrainConfig,
    pub spec: PatchGridSpec,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub regressor: Regressor,
    /// Student width → teacher width bridge applied before both losses.
    pub projection: Linear,
    pub teacher: Teacher,
}

impl PretrainModel {
    pub fn new(config: PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.grid_spec()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisionEncoder::new(
            &mut store,
            "encoder",
            3,
            spec.patch_side,
            spec.grid(),
            config.encoder_config(),
            &mut rng,
        );
        let regressor = Regressor::new(
            &mut store,
            spec.grid(),
            config.decoder_embed_dimension,
            config.regressor_depth,
            config.decoder_number_of_heads,
            config.decoder_layer_scale_init_value,
            &mut rng,
        );
        let projection = Linear::new(
            &mut store,
            "align_proj",
            config.encoder_embed_dimension,
            config.number_of_output_dimensions,
            Init::Xavier,
            &mut rng,
        );
        let teacher = Teacher::new(
            spec,
            config.teacher_config(),
            &TeacherSource::parse(&config.teacher_model),
        )?;
        Ok(Self {
            config,
            spec,
            store,
            encoder,
            regressor,
            projection,
            teacher,
        })
    }

    pub fn teacher_targets(&self, image: &ImageGrid) -> Result<LatentGrid> {
        self.teacher.targets(image)
    }

    fn check_image(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let side = self.spec.image_side;
        if image.height() != side || image.width() != side {
            return Err(Error::Shape(format!(
                "student expects {side}x{side} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(to_rgb(image))
    }

    /// Encoder latents for the visible patches only.
    pub fn encode_visible(&self, image: &ImageGrid, mask: &PatchMask) -> Result<LatentGrid> {
        let image = self.check_image(image)?;
        if mask.len() != self.spec.num_patches() {
            return Err(Error::Shape(format!(
                "mask covers {} positions, grid has {}",
                mask.len(),
                self.spec.num_patches()
            )));
        }
        let visible = mask.visible_indices();
        if visible.is_empty() {
            return Err(Error::Argument("every patch is masked; nothing to encode".into()));
        }
        let patches = imageops::patchify(&image, self.spec.patch_side);
        let mut g = Graph::new(&self.store);
        let out = self.encoder.forward(&mut g, &patches, &visible);
        LatentGrid::new(g.value(out).clone(), visible, LatentOwner::Student)
    }

    /// Regressor predictions (student width) for every masked position.
    pub fn regress_masked(&self, visible: &LatentGrid, mask: &PatchMask) -> Result<LatentGrid> {
        let masked = mask.masked_indices();
        if masked.is_empty() {
            return LatentGrid::new(
                Mat::zeros((0, self.config.decoder_embed_dimension)),
                vec![],
                LatentOwner::Regressor,
            );
        }
        let mut g = Graph::new(&self.store);
        let v = g.constant(visible.embeddings.clone());
        let out = self
            .regressor
            .forward(&mut g, v, &visible.positions, &masked)
            .expect("non-empty mask");
        LatentGrid::new(g.value(out).clone(), masked, LatentOwner::Regressor)
    }

    /// Projects student-width latents into the teacher's space.
    pub fn project(&self, latents: &LatentGrid) -> Result<LatentGrid> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(latents.embeddings.clone());
        let y = self.projection.forward(&mut g, x);
        LatentGrid::new(g.value(y).clone(), latents.positions.clone(), latents.owner)
    }

    /// Builds `(masked_align, visible_align)` for one sample in `g`. The
    /// masked term is `None` for an empty mask.
    pub fn sample_losses(&self, g: &mut Graph, sample: &PreparedSample) -> (Option<Var>, Var) {
        let visible = sample.mask.visible_indices();
        let masked = sample.mask.masked_indices();
        let latents = self.encoder.forward(g, &sample.patches, &visible);
        let vis_proj = self.projection.forward(g, latents);
        let vis_target = sample.targets.embeddings.select(Axis(0), &visible);
        let visible_loss = alignment_loss_graph(g, vis_proj, &vis_target);
        let masked_loss = self
            .regressor
            .forward(g, latents, &visible, &masked)
            .map(|pred| {
                let pred = self.projection.forward(g, pred);
                let target = sample.targets.embeddings.select(Axis(0), &masked);
                alignment_loss_graph(g, pred, &target)
            });
        (masked_loss, visible_loss)
    }

    /// Weighted batch objective. Returns the graph's total-loss node and the
    /// batch-mean values of both terms.
    pub fn batch_loss(&self, g: &mut Graph, samples: &[PreparedSample]) -> (Var, f64, f64) {
        let (wm, wv) = (
            self.config.latent_alignment_loss_weight,
            self.config.align_loss_weight,
        );
        let inv = 1.0 / samples.len().max(1) as f64;
        let mut total: Option<Var> = None;
        let (mut m_sum, mut v_sum) = (0.0, 0.0);
        for s in samples {
            let (m, v) = self.sample_losses(g, s);
            v_sum += g.scalar(v);
            let mut term = None;
            if let Some(m) = m {
                m_sum += g.scalar(m);
                term = Some(g.scale(m, wm));
            }
            if wv != 0.0 {
                let tv = g.scale(v, wv);
                term = Some(match term {
                    Some(t) => g.add(t, tv),
                    None => tv,
                });
            }
            let term = term.unwrap_or_else(|| g.constant(Mat::zeros((1, 1))));
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        let total = total.unwrap_or_else(|| g.constant(Mat::zeros((1, 1))));
        let total = g.scale(total, inv);
        (total, m_sum * inv, v_sum * inv)
    }

    /// Augments an image and computes its mask and targets.
    pub fn prepare(&self, image: &ImageGrid, rng: &mut impl Rng, augment: bool) -> Result<PreparedSample> {
        let side = self.spec.image_side;
        let image = to_rgb(image);
        let view = if augment {
            let v = imageops::random_resized_crop(
                &image,
                side,
                self.config.crop_min_size,
                self.config.crop_max_size,
                rng,
            );
            let v = if rng.random::<bool>() { imageops::hflip(&v) } else { v };
            imageops::color_jitter(&v, self.config.color_jitter, rng)
        } else if image.height() != side || image.width() != side {
            imageops::resize(&image, side, side, Interp::Bilinear)
        } else {
            image
        };
        let mask = BlockMasker {
            grid: self.spec.grid(),
            min_block_area: self.config.min_block_area,
            min_aspect: 0.3,
        }
        .generate(self.config.number_of_mask_patches, rng)?;
        let targets = self.teacher.targets(&view)?;
        Ok(PreparedSample {
            patches: imageops::patchify(&view, self.spec.patch_side),
            mask,
            targets,
        })
    }
}

/// Optimizer state and schedule for a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainTrainer {
    pub optimizer: AdamW,
    pub schedule: WarmupCosine,
    pub step: usize,
    pub seeder: Seeder,
}

/// Context attached to an aborted step.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticSnapshot {
    pub step: usize,
    pub lr: f64,
    pub masked_align: f64,
    pub visible_align: f64,
    pub grad_norm: f64,
}

impl PretrainTrainer {
    pub fn new(config: &PretrainConfig, dataset_len: usize, seed: u64) -> Self {
        let steps_per_epoch = if config.steps_per_epoch > 0 {
            config.steps_per_epoch
        } else {
            dataset_len.div_ceil(config.batch_size).max(1)
        };
        Self {
            optimizer: AdamW::new(config.weight_decay),
            schedule: WarmupCosine {
                base_lr: config.learning_rate,
                min_lr: 0.0,
                warmup_steps: config.warmup_epochs * steps_per_epoch,
                total_steps: config.total_epochs * steps_per_epoch,
            },
            step: 0,
            seeder: Seeder::new(seed),
        }
    }

    /// Samples a batch index list for the current step.
    pub fn sample_batch(&self, dataset_len: usize, batch_size: usize) -> Vec<usize> {
        let mut rng = self.seeder.stream("batch", 0, self.step as u64);
        let mut idx: Vec<usize> = (0..dataset_len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(batch_size.min(dataset_len));
        idx
    }
}

/// Augments the batch, evaluates both alignment losses and applies one
/// clipped AdamW update to the student. The teacher is never touched.
pub fn pretrain_step(
    model: &mut PretrainModel,
    trainer: &mut PretrainTrainer,
    batch: &[ImageGrid],
) -> Result<PretrainBatchLoss> {
    if batch.is_empty() {
        return Err(Error::Argument("empty pretraining batch".into()));
    }
    let mut rng = trainer.seeder.stream("augment", 0, trainer.step as u64);
    let samples = batch
        .iter()
        .map(|img| model.prepare(img, &mut rng, true))
        .collect::<Result<Vec<_>>>()?;
    let lr = trainer.schedule.lr(trainer.step);
    let drop_seed = trainer.seeder.derive_u64("drop_path", 0, trainer.step as u64);

    let (mut grads, total, masked, visible): (Grads, f64, f64, f64) = {
        let mut g = Graph::training(&model.store, drop_seed);
        let (loss, m, v) = model.batch_loss(&mut g, &samples);
        let total = g.scalar(loss);
        (g.backward(loss), total, m, v)
    };
    let grad_norm = clip_grad_norm(&mut grads, model.config.gradient_clipping_max_norm);
    if !total.is_finite() || !grads.is_finite() {
        let snap = DiagnosticSnapshot {
            step: trainer.step,
            lr,
            masked_align: masked,
            visible_align: visible,
            grad_norm,
        };
        return Err(Error::Numerical(format!(
            "non-finite pretraining loss: {}",
            serde_json::to_string(&snap).unwrap_or_default()
        )));
    }
    trainer.optimizer.step(&mut model.store, &grads, lr, |_| 1.0);
    trainer.step += 1;
    Ok(PretrainBatchLoss {
        masked_align: masked,
        visible_align: visible,
        total,
        lr,
    })
}

/// Runs `steps` steps over `images`, returning the per-step losses.
pub fn pretrain_run(
    model: &mut PretrainModel,
    trainer: &mut PretrainTrainer,
    images: &[ImageGrid],
    steps: usize,
    mut on_step: impl FnMut(usize, &PretrainBatchLoss),
) -> Result<Vec<PretrainBatchLoss>> {
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = trainer.sample_batch(images.len(), model.config.batch_size);
        let batch: Vec<ImageGrid> = idx.iter().map(|&i| images[i].clone()).collect();
        let step = trainer.step;
        let loss = pretrain_step(model, trainer, &batch)?;
        on_step(step, &loss);
        history.push(loss);
    }
    Ok(history)
}
