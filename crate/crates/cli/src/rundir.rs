use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dermfoundry_core::RunConfig;

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const LOG_FILE: &str = "run.log";

/// `root/{config.resolved.json, logs/, outputs/}`; every file a run writes
/// lives below `root`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub logs: PathBuf,
    pub outputs: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        let rd = Self {
            root: root.to_path_buf(),
            logs: root.join("logs"),
            outputs: root.join("outputs"),
        };
        for d in [&rd.root, &rd.logs, &rd.outputs] {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        Ok(rd)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.outputs.join(name)
    }

    /// Creates `outputs/<name>/` and returns it.
    pub fn output_dir(&self, name: &str) -> Result<PathBuf, CliError> {
        let d = self.output(name);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        Ok(d)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let path = self.root.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(cfg)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Log lines go to stderr and to `logs/run.log`.
struct Tee {
    file: Mutex<File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.file.lock().expect("log file lock").flush()
    }
}

pub fn init_logging(rd: &RunDir, level: log::LevelFilter) -> Result<(), CliError> {
    let path = rd.logs.join(LOG_FILE);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Pipe(Box::new(Tee { file: Mutex::new(file) })))
        .try_init()
        .map_err(|e| CliError::Runtime(format!("logger already initialised: {e}")))
}
