//! Shared domain types: decoded images, dataset manifests, run
//! configuration, checkpoints and deterministic seeding.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

/// Environment variable overriding the root that relative image references
/// resolve against.
pub const DATA_ROOT_ENV: &str = "DERMFOUNDRY_DATA";

/// A decoded raster, channels × height × width, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pixels: Array3<f32>,
    pub source_path: String,
}

impl ImageGrid {
    pub fn new(pixels: Array3<f32>, source_path: impl Into<String>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("image must be at least 1x1".into()));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        Ok(Self {
            pixels,
            source_path: source_path.into(),
        })
    }

    /// Builds an image from a per-pixel closure. Panics on an invalid shape;
    /// meant for synthesised data.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f32,
    ) -> Self {
        Self::new(Array3::from_shape_fn((channels, height, width), f), "")
            .expect("invalid synthetic image")
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[[c, y, x]]
    }

    /// Decodes any format the `image` crate reads, as RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(pixels, path.display().to_string())
    }

    /// Encodes as an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (c, h, w) = self.pixels.dim();
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if c == 1 {
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([q(self.pixels[[0, y as usize, x as usize]])])
            });
            img.save(path.as_ref())?;
        } else {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([
                    q(self.pixels[[0, y, x]]),
                    q(self.pixels[[1, y, x]]),
                    q(self.pixels[[2, y, x]]),
                ])
            });
            img.save(path.as_ref())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Train,
    Val,
    Test,
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Group::Train),
            "val" | "valid" | "validation" => Ok(Group::Val),
            "test" => Ok(Group::Test),
            other => Err(Error::Validation(format!("unknown group `{other}`"))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Train => "train",
            Group::Val => "val",
            Group::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image_ref: String,
    pub label: Option<usize>,
    pub patient_id: Option<String>,
    pub group: Group,
    pub extras: BTreeMap<String, String>,
}

/// Validated dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Number of distinct label ids (labels are `0..num_classes`).
    pub num_classes: usize,
    /// Directory relative image references resolve against.
    pub root: PathBuf,
}

pub const MANIFEST_COLUMNS: [&str; 4] = ["image_ref", "label", "patient_id", "group"];

/// Reads and validates a manifest CSV.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, root)
}

impl Manifest {
    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Schema("manifest is empty (no header row)".into()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut idx = [0usize; 4];
        for (k, name) in MANIFEST_COLUMNS.iter().enumerate() {
            idx[k] = col(name)
                .ok_or_else(|| Error::Schema(format!("manifest is missing column `{name}`")))?;
        }

        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |k: usize| record.get(idx[k]).unwrap_or("").to_string();
            let image_ref = field(0);
            if image_ref.is_empty() {
                return Err(Error::Validation(format!("row {}: empty image_ref", line + 1)));
            }
            if !seen.insert(image_ref.clone()) {
                return Err(Error::Validation(format!("duplicate image_ref `{image_ref}`")));
            }
            let label = match field(1).as_str() {
                "" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    Error::Validation(format!("row {}: label `{s}` is not a class id", line + 1))
                })?),
            };
            let patient_id = Some(field(2)).filter(|s| !s.is_empty());
            let group: Group = field(3).parse()?;
            let extras = headers
                .iter()
                .enumerate()
                .filter(|(i, _)| !idx.contains(i))
                .map(|(i, h)| (h.to_string(), record.get(i).unwrap_or("").to_string()))
                .collect();
            rows.push(ManifestRow {
                image_ref,
                label,
                patient_id,
                group,
                extras,
            });
        }

        let labels: std::collections::BTreeSet<usize> = rows.iter().filter_map(|r| r.label).collect();
        let num_classes = labels.len();
        if let Some(gap) = (0..num_classes).find(|l| !labels.contains(l)) {
            return Err(Error::Validation(format!(
                "label ids must be contiguous from 0; id {gap} is missing"
            )));
        }
        Ok(Self {
            rows,
            num_classes,
            root,
        })
    }

    /// Resolves an image reference, honouring [`DATA_ROOT_ENV`].
    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => self.root.join(p),
        }
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.group == group)
    }
}

/// Reads a label vocabulary CSV (`id,name`) mapping class ids to names.
pub fn load_label_vocabulary(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut pairs = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Schema("vocabulary id column must be an integer".into()))?;
        let name = rec.get(1).unwrap_or("").trim().to_string();
        pairs.push((id, name));
    }
    pairs.sort();
    for (k, (id, _)) in pairs.iter().enumerate() {
        if *id != k {
            return Err(Error::Validation(format!("vocabulary ids not contiguous at {k}")));
        }
    }
    Ok(pairs.into_iter().map(|(_, n)| n).collect())
}

/// Pipelines a run can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    Probe,
    Finetune,
    Oof,
    SegTrain,
    SegPredict,
    Seqprep,
    ChangeTrain,
    ChangeEval,
    TbpScreen,
    MilTrain,
    Survival,
    Report,
}

impl Task {
    pub const ALL: [Task; 13] = [
        Task::Pretrain,
        Task::Probe,
        Task::Finetune,
        Task::Oof,
        Task::SegTrain,
        Task::SegPredict,
        Task::Seqprep,
        Task::ChangeTrain,
        Task::ChangeEval,
        Task::TbpScreen,
        Task::MilTrain,
        Task::Survival,
        Task::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Probe => "probe",
            Task::Finetune => "finetune",
            Task::Oof => "oof",
            Task::SegTrain => "seg-train",
            Task::SegPredict => "seg-predict",
            Task::Seqprep => "seqprep",
            Task::ChangeTrain => "change-train",
            Task::ChangeEval => "change-eval",
            Task::TbpScreen => "tbp-screen",
            Task::MilTrain => "mil-train",
            Task::Survival => "survival",
            Task::Report => "report",
        }
    }

    /// Hyperparameter keys accepted for this task.
    pub fn schema(self) -> &'static [&'static str] {
        const DATA: &[&str] = &["data", "synthetic_size"];
        match self {
            Task::Pretrain => &[
                "data",
                "synthetic_size",
                "teacher_model",
                "first_input_size",
                "second_input_size",
                "second_interpolation",
                "number_of_output_dimensions",
                "crop_min_size",
                "crop_max_size",
                "patch_size",
                "vocabulary_size",
                "batch_size",
                "learning_rate",
                "warmup_epochs",
                "total_epochs",
                "gradient_clipping_max_norm",
                "layer_scale_init_value",
                "color_jitter",
                "drop_path",
                "mask_generator",
                "number_of_mask_patches",
                "decoder_layer_scale_init_value",
                "regressor_depth",
                "decoder_depth",
                "decoder_embed_dimension",
                "decoder_number_of_heads",
                "align_loss_weight",
                "latent_alignment_loss_weight",
                "encoder_depth",
                "encoder_embed_dimension",
                "encoder_number_of_heads",
                "teacher_depth",
                "min_block_area",
                "weight_decay",
                "steps_per_epoch",
            ],
            Task::Probe => &["data", "synthetic_size", "checkpoint", "max_iterations", "tolerance", "lambda"],
            Task::Finetune => &[
                "data",
                "synthetic_size",
                "checkpoint",
                "batch_size",
                "epochs",
                "learning_rate",
                "warmup_epochs",
                "layer_decay",
                "weight_decay",
                "drop_path",
                "reprob",
                "mixup",
                "cutmix",
            ],
            Task::Oof => &["data", "synthetic_size", "checkpoint", "folds", "stratify_by"],
            Task::SegTrain => &[
                "data",
                "synthetic_size",
                "checkpoint",
                "epochs",
                "learning_rate",
                "weight_decay",
                "batch_size",
            ],
            Task::SegPredict => &["data", "synthetic_size", "checkpoint", "threshold"],
            Task::Seqprep => &["pairs", "stages", "synthetic_size"],
            Task::ChangeTrain => &[
                "data",
                "synthetic_size",
                "checkpoint",
                "epochs",
                "learning_rate",
                "margin",
                "symmetric_head",
                "preproc",
            ],
            Task::ChangeEval => &["data", "synthetic_size", "checkpoint", "preproc", "epochs"],
            Task::TbpScreen => &["data", "synthetic_size", "modules", "n_trees"],
            Task::MilTrain => &[
                "data",
                "synthetic_size",
                "folds",
                "epochs",
                "learning_rate",
                "weight_decay",
                "patience",
                "hidden_dim",
                "attention_dim",
            ],
            Task::Survival => &["data", "synthetic_size", "horizons", "covariates", "ipcw"],
            Task::Report => DATA,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown task `{s}`")))
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(task: Task, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            task,
            hyperparameters: BTreeMap::new(),
            output_dir: output_dir.into(),
        }
    }

    /// Rejects hyperparameter keys outside the task schema, naming the
    /// first offender.
    pub fn validate(&self) -> Result<()> {
        let allowed = self.task.schema();
        if let Some(bad) = self.hyperparameters.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Validation(format!(
                "unknown hyperparameter `{bad}` for task {}",
                self.task.name()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (keys sorted) of seed, task and
    /// hyperparameters. The output location is not part of a run's identity.
    pub fn hash(&self) -> String {
        let identity = (self.seed, self.task, &self.hyperparameters);
        let json = serde_json::to_vec(&identity).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.hyperparameters.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
                .map(Some)
                .ok_or_else(|| Error::Validation(format!("hyperparameter `{key}` must be a number"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get_f64(key)? {
            None => Ok(None),
            Some(v) if v >= 0.0 && v.fract() == 0.0 => Ok(Some(v as usize)),
            Some(_) => Err(Error::Validation(format!(
                "hyperparameter `{key}` must be a non-negative integer"
            ))),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.hyperparameters.get(key).map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.hyperparameters.get(key) {
            None => Ok(None),
            Some(serde_json::Value::Bool(b)) => Ok(Some(*b)),
            Some(serde_json::Value::String(s)) if s == "true" || s == "false" => Ok(Some(s == "true")),
            Some(_) => Err(Error::Validation(format!("hyperparameter `{key}` must be a boolean"))),
        }
    }
}

/// Structured metadata stored beside a weight blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub config_hash: String,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// SHA-256 of `weights.bin`; filled in on save.
    #[serde(default)]
    pub weights_sha256: String,
    #[serde(default)]
    pub architecture: BTreeMap<String, serde_json::Value>,
}

impl CheckpointSidecar {
    pub fn new(config: &RunConfig, epoch: usize) -> Self {
        Self {
            config_hash: config.hash(),
            epoch,
            metrics: BTreeMap::new(),
            weights_sha256: String::new(),
            architecture: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: ParamStore,
    pub sidecar: CheckpointSidecar,
}

impl Checkpoint {
    /// Copies weights into `model`, failing on the first parameter whose
    /// name or shape disagrees.
    pub fn load_into(&self, model: &mut ParamStore) -> Result<()> {
        model.load_strict(&self.weights)
    }

    pub fn verify_config(&self, config: &RunConfig) -> Result<()> {
        let expected = config.hash();
        if self.sidecar.config_hash != expected {
            return Err(Error::Corruption(format!(
                "sidecar config hash {} does not match run config {}",
                self.sidecar.config_hash, expected
            )));
        }
        Ok(())
    }
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "sidecar.json";

/// Writes `dir/weights.bin` and `dir/sidecar.json`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    weights: &ParamStore,
    sidecar: &CheckpointSidecar,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = weights.to_bytes();
    let mut sidecar = sidecar.clone();
    sidecar.weights_sha256 = hex::encode(Sha256::digest(&blob));
    let wpath = dir.join(WEIGHTS_FILE);
    std::fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
    let spath = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&spath, text).map_err(|e| Error::io(&spath, e))?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let spath = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != sidecar.weights_sha256 {
        return Err(Error::Corruption(format!(
            "weights hash {actual} does not match sidecar {}",
            sidecar.weights_sha256
        )));
    }
    let weights = ParamStore::from_bytes(&blob)?;
    Ok(Checkpoint { weights, sidecar })
}

/// Derives independent, reproducible random streams from one seed.
///
/// A stream is identified by a purpose label, a worker index and an epoch,
/// so parallel workers draw from streams that do not depend on scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeder {
    seed: u64,
}

impl Seeder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: &str, worker: u64, epoch: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.derive(purpose, worker, epoch))
    }

    /// A 64-bit seed derived like [`Seeder::stream`].
    pub fn derive_u64(&self, purpose: &str, worker: u64, epoch: u64) -> u64 {
        let b = self.derive(purpose, worker, epoch);
        u64::from_le_bytes(b[..8].try_into().unwrap())
    }

    fn derive(&self, purpose: &str, worker: u64, epoch: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        h.update(worker.to_le_bytes());
        h.update(epoch.to_le_bytes());
        h.finalize().into()
    }
}

static GLOBAL_RNG: Mutex<Option<(Seeder, ChaCha8Rng)>> = Mutex::new(None);

/// Seeds the process-wide stream. Re-seeding restarts it.
pub fn seed_all(seed: u64) {
    let seeder = Seeder::new(seed);
    let rng = seeder.stream("global", 0, 0);
    *GLOBAL_RNG.lock().unwrap() = Some((seeder, rng));
}

/// Runs `f` with the process-wide stream. Panics if [`seed_all`] has not
/// been called: nothing stochastic may run unseeded.
pub fn with_global_rng<T>(f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
    let mut guard = GLOBAL_RNG.lock().unwrap();
    let (_, rng) = guard.as_mut().expect("seed_all must be called before drawing randomness");
    f(rng)
}

/// The seeder installed by [`seed_all`].
pub fn global_seeder() -> Option<Seeder> {
    GLOBAL_RNG.lock().unwrap().as_ref().map(|(s, _)| *s)
}
