//! Where reports go and how rows become CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::OutputFormat;
use crate::CliError;

/// A row with the schema tag in front.
#[derive(Serialize)]
pub struct Tagged<'a, T: Serialize> {
    pub schema: &'static str,
    #[serde(flatten)]
    pub row: &'a T,
}

pub struct Sink {
    dir: Option<PathBuf>,
    output: Option<PathBuf>,
    format: OutputFormat,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("cannot write {}: {e}", path.display()))
}

fn cell(v: &Value) -> Result<String, CliError> {
    Ok(match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::Array(_) | Value::Object(_) => {
            serde_json::to_string(v).map_err(|e| CliError::Io(e.to_string()))?
        }
    })
}

/// CSV bytes for rows that serialize to flat objects; the header comes from
/// the first row's keys.
pub fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Option<Vec<String>> = None;
    for row in rows {
        let Value::Object(map) =
            serde_json::to_value(&row).map_err(|e| CliError::Io(e.to_string()))?
        else {
            return Err(CliError::Io("CSV rows must be objects".into()));
        };
        if header.is_none() {
            let keys: Vec<String> = map.keys().cloned().collect();
            w.write_record(&keys)
                .map_err(|e| CliError::Io(e.to_string()))?;
            header = Some(keys);
        }
        let record = map.values().map(cell).collect::<Result<Vec<_>, _>>()?;
        w.write_record(&record)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

impl Sink {
    pub fn new(dir: Option<PathBuf>, output: Option<PathBuf>, format: OutputFormat) -> Self {
        Sink {
            dir,
            output,
            format,
        }
    }

    pub fn format(&self) -> OutputFormat {
        self.format
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// `--output`, else `<out-dir>/<command>.<ext>`, else stdout.
    fn destination(&self, command: &str) -> Option<PathBuf> {
        match (&self.output, &self.dir) {
            (Some(p), _) => Some(self.resolve(p)),
            (None, Some(d)) => Some(d.join(format!("{command}.{}", self.format.extension()))),
            (None, None) => None,
        }
    }

    fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| io_err(path, e))
    }

    fn emit(&self, command: &str, bytes: &[u8]) -> Result<(), CliError> {
        match self.destination(command) {
            Some(path) => {
                Self::write_file(&path, bytes)?;
                eprintln!("wrote {}", path.display());
                Ok(())
            }
            None => std::io::stdout()
                .write_all(bytes)
                .map_err(|e| CliError::Io(format!("stdout: {e}"))),
        }
    }

    pub fn json<T: Serialize>(&self, command: &str, doc: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(doc).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.emit(command, &bytes)
    }

    pub fn csv<T: Serialize>(
        &self,
        command: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), CliError> {
        self.emit(command, &csv_bytes(rows)?)
    }

    /// CSV to an explicit path (resolved against the output directory).
    pub fn csv_to<T: Serialize>(
        &self,
        path: &Path,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<PathBuf, CliError> {
        let path = self.resolve(path);
        Self::write_file(&path, &csv_bytes(rows)?)?;
        Ok(path)
    }
}
