//! JSON-lines datasets with a metadata sidecar, target lists and sample
//! files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SAMPLES_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Row {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub rows: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Hex SHA-256 of the JSON-lines body.
    pub checksum: String,
    pub provenance: Option<Provenance>,
}

/// `dir/name.jsonl` pairs with `dir/name.meta.json`.
pub fn meta_path_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn checksum(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Serializes rows as `{"x": [...], "y": [...]}` lines.
pub fn dataset_to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for (x, y) in dataset.x.row_iter().zip(dataset.y.row_iter()) {
        out.push_str(&serde_json::to_string(&Row {
            x: x.to_vec(),
            y: y.to_vec(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the dataset and its sidecar; returns the sidecar contents.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<DatasetMeta> {
    let body = dataset_to_jsonl(dataset)?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        rows: dataset.len(),
        d_x: dataset.d_x(),
        d_y: dataset.d_y(),
        checksum: checksum(body.as_bytes()),
        provenance: dataset.provenance.clone(),
    };
    fs::write(path, body)?;
    fs::write(meta_path_for(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

type Rows = Vec<Vec<f64>>;

fn parse_rows(body: &str) -> Result<(Rows, Rows)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .map_err(|e| Error::Malformed(format!("dataset line {}: {e}", i + 1)))?;
        xs.push(row.x);
        ys.push(row.y);
    }
    Ok((xs, ys))
}

fn stack(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    Matrix::from_rows(rows).map_err(|_| Error::Shape(format!("{what} rows have differing lengths")))
}

/// Reads a dataset, checking it against its sidecar when one exists.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let body = fs::read_to_string(path)?;
    let (xs, ys) = parse_rows(&body)?;
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dataset = Dataset::new(stack(&xs, "x")?, stack(&ys, "y")?)?;
    let meta_path = meta_path_for(path);
    if meta_path.exists() {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: meta.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        if meta.checksum != checksum(body.as_bytes()) {
            return Err(Error::Malformed("dataset checksum does not match its sidecar".into()));
        }
        if (meta.rows, meta.d_x, meta.d_y) != (dataset.len(), dataset.d_x(), dataset.d_y()) {
            return Err(Error::Shape("dataset dimensions do not match its sidecar".into()));
        }
        dataset.provenance = meta.provenance;
    }
    Ok(dataset)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TargetLine {
    Bare(Vec<f64>),
    Target { target: Vec<f64> },
    Row { y: Vec<f64> },
}

/// Reads one target per line: a bare array, `{"target": [...]}` or any
/// object with a `"y"` array (so dataset files work too).
pub fn read_targets(path: &Path) -> Result<Matrix> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TargetLine = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("targets line {}: {e}", i + 1)))?;
        rows.push(match parsed {
            TargetLine::Bare(v) | TargetLine::Target { target: v } | TargetLine::Row { y: v } => v,
        });
    }
    if rows.is_empty() {
        return Err(Error::Malformed("no targets found".into()));
    }
    stack(&rows, "target")
}

/// One line of a samples file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub format_version: u32,
    pub target: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

/// Writes `samples` (grouped by target, `n_per_target` rows each) as lines.
pub fn write_samples(path: &Path, targets: &Matrix, samples: &Matrix, n_per_target: usize) -> Result<()> {
    if samples.rows() != targets.rows() * n_per_target {
        return Err(Error::Shape(format!(
            "{} sample rows for {} targets x {n_per_target}",
            samples.rows(),
            targets.rows()
        )));
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, target) in targets.row_iter().enumerate() {
        let record = SampleRecord {
            format_version: SAMPLES_FORMAT_VERSION,
            target: target.to_vec(),
            samples: (0..n_per_target)
                .map(|k| samples.row(i * n_per_target + k).to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
