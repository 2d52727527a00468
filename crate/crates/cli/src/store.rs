use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use spamtrail_core::ndjson;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {path}: run the `{stage}` stage first")]
    MissingStage { stage: &'static str, path: String },
    #[error("{path}: {reason}")]
    Input { path: String, reason: String },
    #[error("writing {path}: {reason}")]
    Output { path: String, reason: String },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn input(path: &Path, reason: impl ToString) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            reason: reason.to_string(),
        }
    }

    fn output(path: &Path, reason: impl ToString) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Records what one stage read and wrote, for its manifest.
#[derive(Debug, Default, Serialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, usize>,
}

/// The output directory of a run. Paths handed out are relative to it;
/// manifests name stage files as `out/<file>` so that runs into different
/// directories stay comparable.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    pub record: StageRecord,
}

impl Store {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            record: StageRecord::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn take_record(&mut self) -> StageRecord {
        std::mem::take(&mut self.record)
    }

    /// Note an external input file and its digest.
    pub fn note_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.record
            .inputs
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Read a data-directory file as text, recording its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<String> {
        let raw = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        self.record.inputs.insert(
            path.display().to_string(),
            format!("{:x}", Sha256::digest(raw.as_bytes())),
        );
        Ok(raw)
    }

    /// Read a data-directory NDJSON file.
    pub fn read_input_ndjson<T: DeserializeOwned>(&mut self, path: &Path) -> Result<Vec<T>> {
        let raw = self.read_input(path)?;
        parse_ndjson(path, raw.as_bytes())
    }

    /// Read a file produced by an earlier stage.
    pub fn read_stage<T: DeserializeOwned>(
        &mut self,
        name: &str,
        producer: &'static str,
    ) -> Result<Vec<T>> {
        let raw = self.read_stage_raw(name, producer)?;
        parse_ndjson(&self.path(name), raw.as_bytes())
    }

    pub fn read_stage_raw(&mut self, name: &str, producer: &'static str) -> Result<String> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::MissingStage {
                stage: producer,
                path: path.display().to_string(),
            });
        }
        let raw = fs::read_to_string(&path).map_err(|e| CliError::input(&path, e))?;
        self.record.inputs.insert(
            format!("out/{name}"),
            format!("{:x}", Sha256::digest(raw.as_bytes())),
        );
        Ok(raw)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, fs::File)> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::output(parent, e))?;
        }
        let file = fs::File::create(&path).map_err(|e| CliError::output(&path, e))?;
        Ok((path, file))
    }

    pub fn write_ndjson<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<usize> {
        let (path, file) = self.create(name)?;
        let mut w = std::io::BufWriter::new(file);
        for r in rows {
            serde_json::to_writer(&mut w, r).map_err(|e| CliError::output(&path, e))?;
            w.write_all(b"\n").map_err(|e| CliError::output(&path, e))?;
        }
        w.flush().map_err(|e| CliError::output(&path, e))?;
        self.record.outputs.insert(name.to_string(), rows.len());
        Ok(rows.len())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut raw = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::output(&self.path(name), e))?;
        raw.push('\n');
        self.write_text(name, &raw)
    }

    pub fn write_text(&mut self, name: &str, raw: &str) -> Result<()> {
        let (path, mut file) = self.create(name)?;
        file.write_all(raw.as_bytes())
            .map_err(|e| CliError::output(&path, e))?;
        self.record
            .outputs
            .insert(name.to_string(), raw.lines().count());
        Ok(())
    }

    /// A header row followed by one row per record.
    pub fn write_csv<T: Serialize>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[T],
    ) -> Result<()> {
        let (path, file) = self.create(name)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        w.write_record(header)
            .map_err(|e| CliError::output(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| CliError::output(&path, e))?;
        }
        w.flush().map_err(|e| CliError::output(&path, e))?;
        self.record.outputs.insert(name.to_string(), rows.len() + 1);
        Ok(())
    }
}

pub fn parse_ndjson<T: DeserializeOwned>(path: &Path, raw: &[u8]) -> Result<Vec<T>> {
    ndjson::read(raw).map_err(|e| CliError::input(path, e))
}

/// Number of non-empty lines in a file.
pub fn count_lines(path: &Path) -> Result<usize> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    Ok(raw.lines().filter(|l| !l.trim().is_empty()).count())
}
