//! File access with errors that name the offending file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use hierpart::formats::{read_prediction, read_scene};
use hierpart::{LabelField, PartTaxonomy, VoxelScene};

/// Exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// Bad flags or malformed / inconsistent input content.
    Validation,
    /// A file could not be read or written.
    Io,
}

impl Failure {
    pub fn code(self) -> i32 {
        match self {
            Failure::Validation => 1,
            Failure::Io => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Failure::Validation,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: Failure::Io,
            message: format!("{}: {err}", path.display()),
        }
    }

    /// Core error raised while handling `path`.
    pub fn in_file(path: &Path, err: impl Into<hierpart::Error>) -> Self {
        let err = err.into();
        let kind = if err.is_validation() { Failure::Validation } else { Failure::Io };
        Self {
            kind,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<hierpart::Error> for CliError {
    fn from(err: hierpart::Error) -> Self {
        let kind = if err.is_validation() { Failure::Validation } else { Failure::Io };
        Self {
            kind,
            message: err.to_string(),
        }
    }
}

impl From<hierpart::TaxonomyError> for CliError {
    fn from(err: hierpart::TaxonomyError) -> Self {
        Self::validation(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&PathBuf>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses the file at `path` with `parse`, prefixing errors with the path.
pub fn load<T, E: Into<hierpart::Error>>(path: &Path, parse: impl FnOnce(&str) -> Result<T, E>) -> CliResult<T> {
    let text = read_text(path)?;
    parse(&text).map_err(|e| CliError::in_file(path, e))
}

pub fn load_taxonomy(path: &Path) -> CliResult<PartTaxonomy> {
    load(path, PartTaxonomy::from_json)
}

pub fn load_scene(path: &Path) -> CliResult<VoxelScene> {
    load(path, read_scene)
}

/// Labels at `level` from either a prediction file or a scene. Scene leaf
/// labels are projected; a prediction file must already be at `level`.
pub fn load_labels(path: &Path, tax: &PartTaxonomy, level: usize) -> CliResult<LabelField> {
    let text = read_text(path)?;
    if text.trim_start().starts_with("S2P") {
        let scene = read_scene(&text).map_err(|e| CliError::in_file(path, e))?;
        hierpart::voxelgrid::project_scene_labels(&scene, tax, level).map_err(|e| CliError::in_file(path, e))
    } else {
        let (file_level, labels) = read_prediction(&text).map_err(|e| CliError::in_file(path, e))?;
        if file_level != level {
            return Err(CliError::validation(format!(
                "{}: prediction is at level {file_level}, expected {level}",
                path.display()
            )));
        }
        Ok(labels)
    }
}

pub fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable value");
    s.push('\n');
    s
}
