use std::collections::BTreeMap;

use dermfoundry_core::adapt::{Backbone, BackboneArch};
use dermfoundry_core::pretrain::{pretrain_run, PretrainConfig, PretrainModel, PretrainTrainer};
use dermfoundry_core::{load_manifest, synth, Group, ImageGrid, RunConfig};

use super::{overlay, save_model, synthetic_size, Source};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const LOSS_CSV: &str = "pretrain_loss.csv";

/// Synthetic runs start from the small fixture architecture; manifest runs
/// from the full-size defaults.
pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let source = Source::from_config(cfg, "data");
    let base = if source.is_synthetic() {
        PretrainConfig::fixture()
    } else {
        PretrainConfig::default()
    };
    let pc = overlay(base, cfg, &["data", "synthetic_size"])?;
    pc.validate()?;
    let images: Vec<ImageGrid> = match &source {
        Source::Synthetic => synth::lesion_images(synthetic_size(cfg, 16)?, pc.first_input_size, cfg.seed),
        Source::File(path) => {
            let manifest = load_manifest(path)?;
            manifest
                .group(Group::Train)
                .map(|row| ImageGrid::load(manifest.resolve(&row.image_ref)))
                .collect::<Result<_, _>>()?
        }
    };
    if images.is_empty() {
        return Err(CliError::Invalid("no training images".into()));
    }

    let mut model = PretrainModel::new(pc.clone(), cfg.seed)?;
    let mut trainer = PretrainTrainer::new(&pc, images.len(), cfg.seed);
    let steps = trainer.schedule.total_steps;
    log::info!("pretraining on {} images for {steps} steps", images.len());
    let history = pretrain_run(&mut model, &mut trainer, &images, steps, |step, l| {
        if step % 10 == 0 || step + 1 == steps {
            log::info!("step {step}: masked {:.4} visible {:.4} lr {:.2e}", l.masked_align, l.visible_align, l.lr);
        }
    })
    .map_err(|e| CliError::Runtime(format!("pretraining aborted: {e}")))?;

    let mut w = csv::Writer::from_path(rd.output(LOSS_CSV))?;
    w.write_record(["step", "masked_align", "visible_align", "total", "lr"])?;
    for (step, l) in history.iter().enumerate() {
        w.write_record([
            step.to_string(),
            l.masked_align.to_string(),
            l.visible_align.to_string(),
            l.total.to_string(),
            l.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output(LOSS_CSV), e))?;

    let backbone = Backbone::from_pretrain(&model);
    let last = history.last().map_or(BTreeMap::new(), |l| {
        BTreeMap::from([("masked_align".to_string(), l.masked_align), ("total".to_string(), l.total)])
    });
    save_model(
        &rd.output_dir("checkpoint")?,
        &backbone.store,
        cfg,
        pc.total_epochs,
        &BackboneArch::from_pretrain(&pc),
        last,
    )
}
