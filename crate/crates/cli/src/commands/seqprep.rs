use dermfoundry_core::seqprep::{
    preprocess_pair, report_row, warp, EuclideanTransform2D, PipelineConfig, Stages, REPORT_COLUMNS,
};
use dermfoundry_core::{synth, ImageGrid, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{file_stem, resolve_ref, synthetic_size, Source};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const REPORT_CSV: &str = "report.csv";
const SYNTHETIC_SIDE: usize = 128;

struct RawPair {
    id: String,
    t0: ImageGrid,
    t1: ImageGrid,
    /// Known t0→t1 motion for synthetic pairs.
    truth: Option<EuclideanTransform2D>,
}

/// t1 is t0 moved by a random rigid motion with hairs drawn over it.
fn synthetic(n: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (SYNTHETIC_SIDE as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let t0 = synth::registration_scene(SYNTHETIC_SIDE, &mut rng);
            let angle = rng.random_range(-10.0f64..10.0).to_radians();
            let shift = EuclideanTransform2D::new(0.0, rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let truth = shift.compose(&EuclideanTransform2D::about(angle, c, c));
            let moved = warp(&t0, &truth.inverse());
            let (t1, _) = synth::draw_hairs(&moved, 3, 1.5, 0.5, &mut rng);
            RawPair {
                id: format!("pair_{i:04}"),
                t0,
                t1,
                truth: Some(truth),
            }
        })
        .collect()
}

/// `pair_id,t0_ref,t1_ref` with references relative to the CSV.
fn from_csv(path: &std::path::Path) -> Result<Vec<RawPair>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Invalid(format!("{} is missing column `{name}`", path.display())))
    };
    let (ci, c0, c1) = (col("pair_id")?, col("t0_ref")?, col("t1_ref")?);
    let mut out = vec![];
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        out.push(RawPair {
            id: field(ci),
            t0: ImageGrid::load(resolve_ref(path, &field(c0)))?,
            t1: ImageGrid::load(resolve_ref(path, &field(c1)))?,
            truth: None,
        });
    }
    Ok(out)
}

pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let stages: Stages = match cfg.get_str("stages") {
        Some(s) => s.parse()?,
        None => Stages::ALL,
    };
    let pairs = match Source::from_config(cfg, "pairs") {
        Source::Synthetic => synthetic(synthetic_size(cfg, 4)?, cfg.seed),
        Source::File(p) => from_csv(&p)?,
    };
    if pairs.is_empty() {
        return Err(CliError::Invalid("no pairs to preprocess".into()));
    }
    let pipeline = PipelineConfig {
        stages,
        ..PipelineConfig::default()
    };
    let images = rd.output_dir("pairs")?;
    let mut w = csv::Writer::from_path(rd.output(REPORT_CSV))?;
    w.write_record(REPORT_COLUMNS)?;
    let mut truth_rows = vec![];
    for p in &pairs {
        let (a, b, report) = preprocess_pair(&p.t0, &p.t1, &pipeline)?;
        if report.registration_failed && stages.warp {
            log::warn!("{}: registration failed; t1 left unwarped", p.id);
        }
        w.write_record(report_row(&p.id, &report))?;
        let stem = file_stem(&p.id);
        a.save_png(images.join(format!("{stem}_t0.png")))?;
        b.save_png(images.join(format!("{stem}_t1.png")))?;
        if let Some(t) = p.truth {
            truth_rows.push([
                p.id.clone(),
                format!("{:.6}", t.rotation),
                format!("{:.4}", t.dx),
                format!("{:.4}", t.dy),
            ]);
        }
    }
    w.flush().map_err(|e| CliError::io(rd.output(REPORT_CSV), e))?;
    if !truth_rows.is_empty() {
        let mut t = csv::Writer::from_path(rd.output("synthetic_truth.csv"))?;
        t.write_record(["pair_id", "rotation", "dx", "dy"])?;
        for row in truth_rows {
            t.write_record(row)?;
        }
        t.flush().map_err(|e| CliError::io(rd.output("synthetic_truth.csv"), e))?;
    }
    log::info!("{} pairs preprocessed with stages {stages}", pairs.len());
    Ok(())
}
