use std::fs;
use std::path::Path;

use accessperf_core::formats::write_csv;
use serde::Serialize;

use crate::error::{input, CliError};
use crate::manifest::{sha256_hex, OutputFile};
use crate::Format;

/// Datasets produced by one command, rendered in memory and written by a
/// single writer in a fixed order.
pub struct Outputs {
    format: Format,
    files: Vec<(String, Vec<u8>)>,
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::Simulation(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

impl Outputs {
    pub fn new(format: Format) -> Self {
        Self {
            format,
            files: Vec::new(),
        }
    }

    /// A table, as `<name>.csv` or `<name>.json` depending on the format.
    pub fn rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let (file, bytes) = match self.format {
            Format::Csv => {
                let mut buf = Vec::new();
                write_csv(&mut buf, rows).map_err(|e| CliError::Simulation(e.to_string()))?;
                (format!("{name}.csv"), buf)
            }
            Format::Json => (format!("{name}.json"), json_bytes(rows)?),
        };
        self.files.push((file, bytes));
        Ok(())
    }

    /// A nested document, always `<name>.json`.
    pub fn document<T: Serialize>(&mut self, name: &str, doc: &T) -> Result<(), CliError> {
        self.files.push((format!("{name}.json"), json_bytes(doc)?));
        Ok(())
    }

    pub fn write_all(&self, dir: &Path) -> Result<Vec<OutputFile>, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| input(format!("cannot create {}: {e}", dir.display())))?;
        self.files
            .iter()
            .map(|(name, bytes)| {
                let path = dir.join(name);
                fs::write(&path, bytes)
                    .map_err(|e| input(format!("cannot write {}: {e}", path.display())))?;
                Ok(OutputFile {
                    file: name.clone(),
                    sha256: sha256_hex(bytes),
                })
            })
            .collect()
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(path, json_bytes(value)?)
        .map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}
