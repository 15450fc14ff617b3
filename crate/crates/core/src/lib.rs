//! Self-supervised dermatology foundation model at desk scale.
//!
//! The crate is organised by pipeline:
//!
//! * [`pretrain`]: block masking, visible-patch encoder, cross-attention
//!   regressor, frozen teacher and the latent alignment objectives.
//! * [`adapt`]: linear probing, fine-tuning and out-of-fold prediction.
//! * [`seg`]: lesion segmentation head and training recipe.
//! * [`seqprep`] and [`change`]: sequential dermoscopy preprocessing and the
//!   Siamese change detector.
//! * [`tbp`]: total-body-photography screening ensemble.
//! * [`mil`]: gated attention multiple instance learning for slides.
//! * [`survival`] and [`evalstat`]: prognosis analytics and the evaluation
//!   statistics shared by every pipeline.
//!
//! Numerical building blocks (a small reverse-mode autodiff engine, layers,
//! optimizers and image operations) live in [`autograd`], [`nn`], [`optim`]
//! and [`imageops`].

pub mod adapt;
pub mod autograd;
pub mod change;
pub mod data;
pub mod error;
pub mod evalstat;
pub mod imageops;
pub mod mil;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod seg;
pub mod seqprep;
pub mod survival;
pub mod synth;
pub mod tbp;

pub use data::{
    load_checkpoint, load_manifest, save_checkpoint, seed_all, Checkpoint, CheckpointSidecar,
    Group, ImageGrid, Manifest, ManifestRow, RunConfig, Seeder, Task,
};
pub use error::{Error, Result};
