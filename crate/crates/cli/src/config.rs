//! Layered run configuration: file < environment < flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dermfoundry_core::{RunConfig, Task};
use serde_json::Value;

use crate::args::GlobalArgs;
use crate::error::CliError;

/// Environment variables `DERMFOUNDRY_CFG_<KEY>` set hyperparameter `key`.
/// The prefix keeps them apart from `DERMFOUNDRY_DATA`, the dataset root.
pub const ENV_PREFIX: &str = "DERMFOUNDRY_CFG_";
pub const SEED_KEY: &str = "seed";

/// JSON when it parses, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn seed_from(v: &Value, layer: &str) -> Result<u64, CliError> {
    v.as_u64()
        .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
        .ok_or_else(|| CliError::Invalid(format!("`seed` from {layer} must be a non-negative integer, got {v}")))
}

pub fn resolve(
    task: Task,
    global: &GlobalArgs,
    flag_overrides: &[(String, Value)],
    env: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut hp: BTreeMap<String, Value> = BTreeMap::new();
    let mut seed = 0u64;

    if let Some(path) = &global.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(CliError::Invalid(format!("{} must hold a JSON object", path.display())));
        };
        for (k, v) in map {
            if k == SEED_KEY {
                seed = seed_from(&v, "the config file")?;
            } else {
                hp.insert(k, v);
            }
        }
    }

    // Ambient variables only touch keys this task knows, so a variable meant
    // for another subcommand cannot break validation here.
    let schema = task.schema();
    let mut env_sorted: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env_sorted.sort();
    for (name, raw) in env_sorted {
        let key = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        if key == SEED_KEY {
            seed = seed_from(&Value::String(raw.clone()), name)?;
        } else if schema.contains(&key.as_str()) {
            hp.insert(key, parse_value(raw));
        } else {
            log::debug!("ignoring {name}: not a {} hyperparameter", task.name());
        }
    }

    for item in &global.set {
        let Some((k, v)) = item.split_once('=') else {
            return Err(CliError::Invalid(format!("--set expects KEY=VALUE, got `{item}`")));
        };
        let k = k.trim();
        if k == SEED_KEY {
            seed = seed_from(&parse_value(v), "--set")?;
        } else {
            hp.insert(k.to_string(), parse_value(v));
        }
    }
    for (k, v) in flag_overrides {
        hp.insert(k.clone(), v.clone());
    }
    if let Some(s) = global.seed {
        seed = s;
    }

    let out = global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(task.name()));
    let cfg = RunConfig {
        seed,
        task,
        hyperparameters: hp,
        output_dir: out,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global() -> GlobalArgs {
        GlobalArgs {
            config: None,
            seed: None,
            out: Some("o".into()),
            log_level: log::LevelFilter::Off,
            set: vec![],
        }
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"seed": 3, "epochs": 1, "folds": 4, "patience": 2}"#).unwrap();
        let mut g = global();
        g.config = Some(file);
        g.set = vec!["patience=9".into()];
        let env = vec![
            ("DERMFOUNDRY_CFG_EPOCHS".to_string(), "2".to_string()),
            ("DERMFOUNDRY_CFG_FOLDS".to_string(), "6".to_string()),
            ("DERMFOUNDRY_CFG_MARGIN".to_string(), "1".to_string()),
        ];
        let flags = vec![("folds".to_string(), Value::from(5))];
        let cfg = resolve(Task::MilTrain, &g, &flags, &env).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.get_usize("epochs").unwrap(), Some(2));
        assert_eq!(cfg.get_usize("folds").unwrap(), Some(5));
        assert_eq!(cfg.get_usize("patience").unwrap(), Some(9));
        // `margin` belongs to another task and is ignored from the environment.
        assert!(!cfg.hyperparameters.contains_key("margin"));
    }

    #[test]
    fn unknown_key_is_named() {
        let mut g = global();
        g.set = vec!["lerning_rate=0.1".into()];
        let err = resolve(Task::Probe, &g, &[], &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lerning_rate"));
    }

    #[test]
    fn seed_flag_wins() {
        let mut g = global();
        g.seed = Some(11);
        let env = vec![("DERMFOUNDRY_CFG_SEED".to_string(), "4".to_string())];
        assert_eq!(resolve(Task::Probe, &g, &[], &env).unwrap().seed, 11);
        g.seed = None;
        assert_eq!(resolve(Task::Probe, &g, &[], &env).unwrap().seed, 4);
    }
}
