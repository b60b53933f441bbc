//! Experiment harness behind the `dpm` binary: config resolution, CSV output
//! and the sweeps.

pub mod experiments;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use dpm_core::model::format_real;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error(transparent)]
    Core(#[from] dpm_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use dpm_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::NonConvergence(_) => 3,
            Self::Core(E::InvalidConfig(_) | E::NonPositiveTemperature(_) | E::BatchTooSmall(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Overlays the top-level keys of the JSON file at `path` onto `args`.
/// Keys in the file win over flags; unknown keys are rejected.
pub fn resolve<A: Serialize + DeserializeOwned>(args: A, path: Option<&Path>) -> CliResult<A> {
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let overlay: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(overlay) = overlay else {
        return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(&args).map_err(|e| CliError::Config(e.to_string()))?;
    let obj = merged.as_object_mut().expect("argument structs serialize to objects");
    for (k, v) in overlay {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// SHA-256 over the command name and its resolved configuration. The output
/// location is left out so identical runs into different directories match.
pub fn config_hash<A: Serialize>(command: &str, args: &A) -> String {
    let mut v = serde_json::to_value(args).unwrap_or(Value::Null);
    if let Some(obj) = v.as_object_mut() {
        obj.remove("output_dir");
    }
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(v.to_string().as_bytes());
    format!("{:x}", h.finalize())
}

pub fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// A CSV file with a leading `# config_hash=...` line.
pub fn write_csv<I>(path: &Path, hash: &str, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = create_file(path)?;
    writeln!(out, "# config_hash={hash}").map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut out = create_file(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Core(e.into()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> CliResult<D> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn real(v: f64) -> String {
    format_real(v)
}
