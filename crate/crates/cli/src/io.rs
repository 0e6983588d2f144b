//! Population CSV files and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use tlrda::sample::PopulationSample;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationEntry {
    pub population_id: usize,
    pub file: PathBuf,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestEntry {
    pub file: PathBuf,
    #[serde(default)]
    pub rows: Option<usize>,
}

/// Maps population ids to files and marks the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub p: Option<usize>,
    pub populations: Vec<PopulationEntry>,
    /// Held-out rows from the target population.
    #[serde(default)]
    pub test: Option<TestEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> CliResult<()> {
        if self.schema_version != MANIFEST_VERSION {
            return Err(CliError::Config(format!(
                "manifest schema version {} is not {MANIFEST_VERSION}",
                self.schema_version
            )));
        }
        if self.populations.is_empty() {
            return Err(CliError::Config("manifest lists no populations".into()));
        }
        let targets = self.populations.iter().filter(|e| e.target).count();
        if targets != 1 {
            return Err(CliError::Config(format!("manifest marks {targets} targets, need exactly one")));
        }
        let mut ids: Vec<usize> = self.populations.iter().map(|e| e.population_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.populations.len() {
            return Err(CliError::Config("duplicate population_id in manifest".into()));
        }
        Ok(())
    }

    /// Training samples with the target last, followed by the test sample if any.
    /// Relative file names resolve against `base`.
    pub fn load(&self, base: &Path) -> CliResult<(Vec<PopulationSample>, Option<PopulationSample>)> {
        let mut entries: Vec<&PopulationEntry> = self.populations.iter().filter(|e| !e.target).collect();
        entries.extend(self.populations.iter().filter(|e| e.target));
        let target_id = entries.last().expect("checked").population_id;
        let samples = entries
            .iter()
            .map(|e| read_population(&base.join(&e.file), e.population_id))
            .collect::<CliResult<Vec<_>>>()?;
        let p = samples[0].p();
        if let Some(bad) = samples.iter().find(|s| s.p() != p) {
            return Err(CliError::Data(format!(
                "population {} has {} features, expected {p}",
                bad.population_id(),
                bad.p()
            )));
        }
        if let Some(expected) = self.p.filter(|&q| q != p) {
            return Err(CliError::Data(format!("manifest declares p = {expected}, files have {p}")));
        }
        let test = match &self.test {
            Some(t) => {
                let s = read_population(&base.join(&t.file), target_id)?;
                if s.p() != p {
                    return Err(CliError::Data(format!("test file has {} features, expected {p}", s.p())));
                }
                Some(s)
            }
            None => None,
        };
        Ok((samples, test))
    }
}

/// Reads a CSV with a header row, feature columns, and a final `label` column
/// holding -1 or 1.
pub fn read_population(path: &Path, population_id: usize) -> CliResult<PopulationSample> {
    let data_err = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| data_err(e.to_string()))?.clone();
    if header.len() < 2 || header.get(header.len() - 1) != Some("label") {
        return Err(data_err("last column must be `label`".into()));
    }
    let p = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| data_err(format!("row {}, column {}: `{field}` is not a number", row + 1, col + 1)))?;
            if col < p {
                values.push(x);
            } else if x == 1.0 || x == -1.0 {
                labels.push(x as i8);
            } else {
                return Err(data_err(format!("row {}: label `{field}` is not -1 or 1", row + 1)));
            }
        }
    }
    if labels.is_empty() {
        return Err(data_err("no rows".into()));
    }
    let features = DMatrix::from_row_slice(labels.len(), p, &values);
    Ok(PopulationSample::new(features, labels, population_id)?)
}

/// Writes `f1..fp,label` with shortest round-trip float formatting.
pub fn write_population(path: &Path, sample: &PopulationSample) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let p = sample.p();
    let mut header: Vec<String> = (1..=p).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(|e| csv_io(path, e))?;
    let x = sample.features();
    let mut record = Vec::with_capacity(p + 1);
    for (i, y) in sample.labels().iter().enumerate() {
        record.clear();
        record.extend((0..p).map(|j| x[(i, j)].to_string()));
        record.push(y.to_string());
        writer.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// Writes serializable rows as a CSV table.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}
