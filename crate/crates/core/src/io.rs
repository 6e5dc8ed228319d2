//! On-disk artifacts: dataset directories, JSON documents and CSV tables.
//!
//! Raw numbers in CSV use 17 significant digits (`{:.16e}`), which round-trips
//! every `f64` exactly. JSON uses the shortest round-tripping representation.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::EpochRecord;
use crate::synthdata::{Dataset, Split};

pub const FEATURES_CSV: &str = "features.csv";
pub const LABELS_CSV: &str = "labels.csv";
pub const META_JSON: &str = "meta.json";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("not a number: `{s}`")))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("not an index: `{s}`")))
}

/// Fails with a dependency error when `path` is missing.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(path.to_path_buf()))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e))
}

fn csv_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    require(path)?;
    csv::ReaderBuilder::new()
        .has_headers(headers)
        .from_path(path)
        .map_err(|e| Error::format(path, e))
}

/// Writes `header` then `rows` as CSV.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::format(path, e))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Contents of `meta.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub c: usize,
    pub d: usize,
    pub n: usize,
    /// Echo of the generating specs.
    #[serde(default)]
    pub spec: serde_json::Value,
}

/// Headerless numeric CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV with `cols` columns.
pub fn read_matrix_csv(path: &Path, cols: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in csv_reader(path, false)?.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != cols {
            return Err(Error::format(path, format!("row {rows} has {} columns, expected {cols}", rec.len())));
        }
        for f in rec.iter() {
            flat.push(parse_f64(path, f)?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::format(path, e))
}

pub fn write_dataset(dir: &Path, data: &Dataset, spec: serde_json::Value) -> Result<()> {
    ensure_dir(dir)?;
    write_matrix_csv(&dir.join(FEATURES_CSV), &data.features)?;
    write_csv(
        &dir.join(LABELS_CSV),
        &["clean", "noisy", "split"],
        (0..data.n()).map(|i| {
            [
                data.clean_labels[i].to_string(),
                data.noisy_labels[i].to_string(),
                data.split[i].as_str().to_string(),
            ]
        }),
    )?;
    write_json(
        &dir.join(META_JSON),
        &DatasetMeta {
            c: data.c,
            d: data.d(),
            n: data.n(),
            spec,
        },
    )
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&dir.join(META_JSON))?;
    let features = read_matrix_csv(&dir.join(FEATURES_CSV), meta.d)?;
    let rows = features.nrows();
    let path = dir.join(LABELS_CSV);
    let (mut clean, mut noisy, mut split) = (Vec::new(), Vec::new(), Vec::new());
    for rec in csv_reader(&path, true)?.records() {
        let rec = rec.map_err(|e| Error::format(&path, e))?;
        if rec.len() != 3 {
            return Err(Error::format(&path, "expected columns clean,noisy,split"));
        }
        clean.push(parse_usize(&path, &rec[0])?);
        noisy.push(parse_usize(&path, &rec[1])?);
        split.push(Split::parse(rec[2].trim()).ok_or_else(|| Error::format(&path, format!("bad split `{}`", &rec[2])))?);
    }
    if rows != meta.n || clean.len() != meta.n {
        return Err(Error::format(dir, format!("expected {} examples", meta.n)));
    }
    let data = Dataset::new(features, clean, noisy, split, meta.c)?;
    Ok((data, meta))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "train_loss", "val_loss", "floor_rate", "lr"],
        history.iter().map(|h| {
            [
                h.epoch.to_string(),
                fmt_f64(h.train_loss),
                fmt_f64(h.val_loss),
                fmt_f64(h.floor_rate),
                fmt_f64(h.lr),
            ]
        }),
    )
}

/// `(index, predicted, true)` rows.
pub fn write_predictions(path: &Path, rows: &[(usize, usize, usize)]) -> Result<()> {
    write_csv(
        path,
        &["index", "predicted", "true"],
        rows.iter().map(|(i, p, t)| [i.to_string(), p.to_string(), t.to_string()]),
    )
}

pub fn read_predictions(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for rec in csv_reader(path, true)?.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != 3 {
            return Err(Error::format(path, "expected columns index,predicted,true"));
        }
        out.push((
            parse_usize(path, &rec[0])?,
            parse_usize(path, &rec[1])?,
            parse_usize(path, &rec[2])?,
        ));
    }
    Ok(out)
}

/// Path helper that keeps artifact names in one place.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    pub root: PathBuf,
}

impl ArtifactDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactDir { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn clean_data(&self) -> PathBuf {
        self.root.join("clean")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.json")
    }

    pub fn transition(&self) -> PathBuf {
        self.root.join("transition.json")
    }

    pub fn robust_model(&self) -> PathBuf {
        self.root.join("robust_model.json")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}
