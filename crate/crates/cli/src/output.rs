use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub(crate) struct OutputDir {
    dir: PathBuf,
}

fn unwritable(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

impl OutputDir {
    pub(crate) fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| unwritable(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub(crate) fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| unwritable(&path, e))
    }

    /// Writes a header and rows as CSV.
    pub(crate) fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| unwritable(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header).map_err(|e| unwritable(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| unwritable(&path, e))?;
        }
        w.flush().map_err(|e| unwritable(&path, e))
    }
}
