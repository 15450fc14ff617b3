use dermfoundry_core::survival::{
    cox_fit, km_estimate, km_plot_png, load_survival_csv, logrank_test, stratify_median, time_dependent_auc,
    write_cox_csv, write_km_csv, write_tauc_csv, Covariate, SurvivalRecord, DEFAULT_HORIZONS,
};
use dermfoundry_core::synth::survival_cohort;
use dermfoundry_core::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{list_value, synthetic_size, write_json, Source};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const KM_CSV: &str = "km_curve.csv";
pub const KM_PNG: &str = "km_plot.png";
pub const COX_CSV: &str = "cox_forest.csv";
pub const TAUC_CSV: &str = "tauc.csv";
const SITES: [&str; 3] = ["trunk", "limb", "head"];

/// Score-driven hazard with age and site covariates that carry no effect.
fn synthetic(n: usize, seed: u64) -> Result<Vec<SurvivalRecord>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cohort = survival_cohort(n, 1.0, 0.01, &mut rng);
    cohort
        .into_iter()
        .enumerate()
        .map(|(i, (t, e, s))| {
            let age = rng.random_range(30.0f64..85.0).round();
            let site = SITES[rng.random_range(0..SITES.len())];
            Ok(SurvivalRecord::new(format!("pt_{i:04}"), t, e, s)?
                .with("age", Covariate::Numeric(age))
                .with("site", Covariate::Categorical(site.into())))
        })
        .collect()
}

#[derive(Serialize)]
struct LogRankSummary {
    low_n: usize,
    high_n: usize,
    statistic: f64,
    p_value: f64,
}

pub fn run(cfg: &RunConfig, rd: &RunDir) -> Result<(), CliError> {
    let horizons: Vec<f64> = match list_value(cfg, "horizons") {
        Some(items) => items
            .iter()
            .map(|h| {
                h.parse::<f64>()
                    .ok()
                    .filter(|v| *v > 0.0)
                    .ok_or_else(|| CliError::Invalid(format!("horizon `{h}` is not a positive number")))
            })
            .collect::<Result<_, _>>()?,
        None => DEFAULT_HORIZONS.to_vec(),
    };
    let ipcw = cfg.get_bool("ipcw")?.unwrap_or(true);
    let records = match Source::from_config(cfg, "data") {
        Source::Synthetic => synthetic(synthetic_size(cfg, 200)?, cfg.seed)?,
        Source::File(p) => load_survival_csv(&p)?,
    };
    let covariates: Vec<String> = list_value(cfg, "covariates").unwrap_or_else(|| {
        let mut names = vec!["score".to_string()];
        if let Some(first) = records.first() {
            names.extend(first.covariates.keys().cloned());
        }
        names
    });
    log::info!("{} records, {} events", records.len(), records.iter().filter(|r| r.event).count());

    let overall = km_estimate(&records)?;
    write_km_csv(&rd.output(KM_CSV), &overall)?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let (low, high) = stratify_median(&scores)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let (low_r, high_r) = (pick(&low), pick(&high));
    let km_low = km_estimate(&low_r)?;
    let km_high = km_estimate(&high_r)?;
    write_km_csv(&rd.output("km_low.csv"), &km_low)?;
    write_km_csv(&rd.output("km_high.csv"), &km_high)?;
    km_plot_png(&rd.output(KM_PNG), &[("low", &km_low), ("high", &km_high)])?;
    let lr = logrank_test(&low_r, &high_r)?;
    write_json(
        &rd.output("logrank.json"),
        &LogRankSummary {
            low_n: low_r.len(),
            high_n: high_r.len(),
            statistic: lr.statistic,
            p_value: lr.p_value,
        },
    )?;
    log::info!("log-rank high vs low score: p = {:.3e}", lr.p_value);

    let names: Vec<&str> = covariates.iter().map(String::as_str).collect();
    let fit = cox_fit(&records, &names)?;
    if fit.separation {
        log::warn!("Cox fit hit the separation bound; hazard ratios are unreliable");
    }
    write_cox_csv(&rd.output(COX_CSV), &fit)?;
    write_json(&rd.output("cox.json"), &fit)?;

    let tauc = time_dependent_auc(&records, &horizons, ipcw)?;
    write_tauc_csv(&rd.output(TAUC_CSV), &tauc)?;
    Ok(())
}
