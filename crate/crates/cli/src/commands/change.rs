use std::collections::BTreeMap;

use dermfoundry_core::adapt::write_predictions_csv;
use dermfoundry_core::change::{
    predict_pairs, preprocess_pairs, synthetic_pairs, train_change, ArmResult, ChangeConfig, ChangeTrainResult,
    HeadInput, PairExample, SiameseModel,
};
use dermfoundry_core::evalstat::classification_metrics;
use dermfoundry_core::seqprep::Ablation;
use dermfoundry_core::{Group, ImageGrid, RunConfig};

use super::{backbone, fmt_opt, list_value, overlay, resolve_ref, save_model, synthetic_size, write_json, write_metrics, Source, PREDICTIONS_CSV};
use crate::error::CliError;
use crate::rundir::RunDir;

const SYNTHETIC_SIDE: usize = 64;
pub const ARMS_CSV: &str = "arms.csv";

struct PairSplits {
    train: Vec<PairExample>,
    val: Vec<PairExample>,
    test: Vec<PairExample>,
}

/// Pair CSV columns: pair_id,t0_ref,t1_ref,changed,group and optionally
/// malignant_change.
fn from_csv(path: &std::path::Path) -> Result<PairSplits, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| CliError::Invalid(format!("{} is missing column `{name}`", path.display())))
    };
    let (ci, c0, c1, cc, cg) = (need("pair_id")?, need("t0_ref")?, need("t1_ref")?, need("changed")?, need("group")?);
    let cm = col("malignant_change");
    let flag = |s: &str, what: &str| match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(CliError::Invalid(format!("`{what}` must be 0/1, got `{other}`"))),
    };
    let mut s = PairSplits {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let malignant = match cm.map(field).filter(|v| !v.is_empty()) {
            Some(v) => Some(flag(&v, "malignant_change")?),
            None => None,
        };
        let pair = PairExample::new(
            field(ci),
            ImageGrid::load(resolve_ref(path, &field(c0)))?,
            ImageGrid::load(resolve_ref(path, &field(c1)))?,
            flag(&field(cc), "changed")?,
            malignant,
        )?;
        match field(cg).parse::<Group>()? {
            Group::Train => s.train.push(pair),
            Group::Val => s.val.push(pair),
            Group::Test => s.test.push(pair),
        }
    }
    Ok(s)
}

fn load(cfg: &RunConfig) -> Result<PairSplits, CliError> {
    let s = match Source::from_config(cfg, "data") {
        Source::Synthetic => {
            let mut s = PairSplits {
                train: vec![],
                val: vec![],
                test: vec![],
            };
            for (i, p) in synthetic_pairs(synthetic_size(cfg, 40)?, SYNTHETIC_SIDE, cfg.seed)
                .into_iter()
                .enumerate()
            {
                match i % 5 {
                    0..=2 => s.train.push(p),
                    3 => s.val.push(p),
                    _ => s.test.push(p),
                }
            }
            s
        }
        Source::File(p) => from_csv(&p)?,
    };
    if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
        return Err(CliError::Invalid("change detection needs non-empty train, val and test pairs".into()));
    }
    Ok(s)
}

fn change_config(cfg: &RunConfig, synthetic: bool) -> Result<ChangeConfig, CliError> {
    let base = if synthetic {
        ChangeConfig::fixture()
    } else {
        ChangeConfig::default()
    };
    let mut cc = overlay(
        base,
        cfg,
        &["data", "synthetic_size", "checkpoint", "preproc", "symmetric_head"],
    )?;
    if let Some(sym) = cfg.get_bool("symmetric_head")? {
        cc.head_input = if sym { HeadInput::Symmetric } else { HeadInput::Concat };
    }
    Ok(cc)
}

fn arms(cfg: &RunConfig, default: &[Ablation]) -> Result<Vec<Ablation>, CliError> {
    let Some(names) = list_value(cfg, "preproc") else {
        return Ok(default.to_vec());
    };
    if names.iter().any(|n| n == "all") {
        return Ok(Ablation::ALL.to_vec());
    }
    let mut out: Vec<Ablation> = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Invalid("`preproc` names no arm".into()));
    }
    Ok(out)
}

struct ArmRun {
    result: ChangeTrainResult,
    test: Vec<PairExample>,
}

fn train_arm(cfg: &RunConfig, cc: &ChangeConfig, s: &PairSplits, arm: Ablation) -> Result<ArmRun, CliError> {
    let prep = |pairs: &[PairExample]| preprocess_pairs(pairs, arm);
    let (train, val, test) = (prep(&s.train)?, prep(&s.val)?, prep(&s.test)?);
    let model = SiameseModel::new(backbone(cfg)?, cc.head_hidden, cc.head_input, cfg.seed);
    let result = train_change(model, &train, &val, cc, cfg.seed, |e| {
        log::info!(
            "{} epoch {}: loss {:.4}, val AUROC {}",
            arm.name(),
            e.epoch,
            e.train_loss,
            fmt_opt(e.val_auroc)
        );
    })?;
    Ok(ArmRun { result, test })
}

fn test_scores(run: &ArmRun) -> Result<(Vec<String>, Vec<usize>, dermfoundry_core::autograd::Mat), CliError> {
    let ids: Vec<String> = run.test.iter().map(|p| p.id.clone()).collect();
    let labels: Vec<usize> = run.test.iter().map(|p| usize::from(p.changed)).collect();
    Ok((ids, labels, predict_pairs(&run.result.model, &run.test)))
}

pub fn train(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let source = Source::from_config(cfg, "data");
    let cc = change_config(cfg, source.is_synthetic())?;
    let arm = match arms(cfg, &[Ablation::Default])?.as_slice() {
        [one] => *one,
        _ => return Err(CliError::Invalid("change-train takes exactly one `preproc` arm".into())),
    };
    let s = load(cfg)?;
    let run = train_arm(cfg, &cc, &s, arm)?;

    let mut w = csv::Writer::from_path(rd.output("epochs.csv"))?;
    w.write_record(["epoch", "train_loss", "val_auroc", "val_bacc"])?;
    for e in &run.result.history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            fmt_opt(e.val_auroc),
            e.val_bacc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output("epochs.csv"), e))?;

    let (ids, labels, probs) = test_scores(&run)?;
    write_predictions_csv(&rd.output(PREDICTIONS_CSV), &ids, &labels, &probs, None)?;
    write_metrics(rd, &classification_metrics(&labels, &probs)?)?;
    let arch = run.result.model.backbone.arch.clone();
    save_model(
        &rd.output_dir("checkpoint")?,
        run.result.model.store(),
        cfg,
        run.result.best_epoch,
        &arch,
        BTreeMap::from([("val_selection".to_string(), run.result.best_metric)]),
    )
}

/// One freshly trained detector per arm, all on the same split.
pub fn eval(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let source = Source::from_config(cfg, "data");
    let cc = change_config(cfg, source.is_synthetic())?;
    let arms = arms(cfg, &Ablation::ALL)?;
    let s = load(cfg)?;
    let mut rows = vec![];
    for arm in arms {
        let run = train_arm(cfg, &cc, &s, arm)?;
        let (ids, labels, probs) = test_scores(&run)?;
        write_predictions_csv(
            &rd.output(&format!("predictions_{}.csv", arm.name())),
            &ids,
            &labels,
            &probs,
            None,
        )?;
        let row = ArmResult::from_metrics(arm, &classification_metrics(&labels, &probs)?);
        log::info!("{}: test AUROC {}", arm.name(), fmt_opt(row.auroc));
        rows.push(row);
    }
    let mut w = csv::Writer::from_path(rd.output(ARMS_CSV))?;
    w.write_record(["arm", "auroc", "sensitivity", "specificity", "bacc"])?;
    for r in &rows {
        w.write_record([
            r.arm.name().to_string(),
            fmt_opt(r.auroc),
            r.sensitivity.to_string(),
            r.specificity.to_string(),
            r.bacc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(rd.output(ARMS_CSV), e))?;
    write_json(&rd.output("arms.json"), &rows)
}
