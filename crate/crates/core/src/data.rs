//! Synthetic manifolds, IDX/CSV ingestion and labeled/unlabeled splits.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n x D`, one example per row.
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::invalid(format!("dataset points must be a matrix, got shape {:?}", points.shape())));
        }
        if !points.is_finite() {
            return Err(Error::invalid("dataset contains non-finite coordinates"));
        }
        if let Some(l) = &labels {
            if l.len() != points.rows() {
                return Err(Error::invalid(format!("{} labels for {} points", l.len(), points.rows())));
            }
        }
        Ok(Dataset {
            name: name.into(),
            points,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Number of classes implied by the labels (largest label + 1).
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            points: self.points.select_rows(rows),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
        }
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        sd * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Points on a circle of the given radius with Gaussian jitter.
pub fn make_circle<R: Rng + ?Sized>(n: usize, radius: f64, noise_sd: f64, rng: &mut R, deterministic_angles: bool) -> Result<Dataset> {
    if !(radius > 0.0) || !(noise_sd >= 0.0) {
        return Err(Error::invalid("circle needs radius > 0 and noise_sd >= 0"));
    }
    let mut data = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = if deterministic_angles {
            2.0 * PI * k as f64 / n as f64
        } else {
            rng.random_range(0.0..2.0 * PI)
        };
        data.push(radius * theta.cos() + jitter(rng, noise_sd));
        data.push(radius * theta.sin() + jitter(rng, noise_sd));
    }
    Dataset::new("circle", Tensor::matrix(n, 2, data)?, None)
}

/// Moon point for parameter `t` in `[0, pi]`: class 0 is the upper arc,
/// class 1 the shifted lower arc.
pub fn moon_point(class: usize, t: f64) -> [f64; 2] {
    if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// Two interleaved half circles; the first `n_per_class` rows are class 0.
pub fn make_two_moons<R: Rng + ?Sized>(n_per_class: usize, noise_sd: f64, rng: &mut R) -> Result<Dataset> {
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid("noise_sd must be nonnegative"));
    }
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let t = rng.random_range(0.0..=PI);
            let [a, b] = moon_point(class, t);
            data.push(a + jitter(rng, noise_sd));
            data.push(b + jitter(rng, noise_sd));
            labels.push(class);
        }
    }
    Dataset::new("two_moons", Tensor::matrix(2 * n_per_class, 2, data)?, Some(labels))
}

/// Contents of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Images flattened row-major into `count x (rows * cols)`, scaled to `[0, 1]`.
    Images { rows: usize, cols: usize, points: Tensor },
    Labels(Vec<usize>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes.get(at..at + 4).ok_or(Error::Truncated {
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let dims: Vec<usize> = match magic {
        IDX_LABELS_MAGIC => vec![read_u32(bytes, 4)? as usize],
        IDX_IMAGES_MAGIC => (0..3).map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize)).collect::<Result<_>>()?,
        found => return Err(Error::BadIdxMagic { found }),
    };
    let header = 4 + 4 * dims.len();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(Error::Truncated {
            expected: header + payload,
            actual: bytes.len(),
        });
    }
    let body = &bytes[header..header + payload];
    Ok(match dims.as_slice() {
        [_] => IdxData::Labels(body.iter().map(|&b| b as usize).collect()),
        &[n, rows, cols] => IdxData::Images {
            rows,
            cols,
            points: Tensor::matrix(n, rows * cols, body.iter().map(|&b| b as f64 / 255.0).collect())?,
        },
        _ => unreachable!(),
    })
}

/// Serializes back to IDX bytes; pixel values are rescaled by 255 and rounded.
pub fn write_idx(data: &IdxData) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match data {
        IdxData::Labels(labels) => {
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            for &l in labels {
                out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
            }
        }
        IdxData::Images { rows, cols, points } => {
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [points.rows(), *rows, *cols] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            out.extend(points.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Parses comma-separated numeric rows; the last column is an integer label
/// when `has_label_column` is set.
pub fn parse_csv(text: &str, has_label_column: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Csv {
                    row,
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        let features = if has_label_column { record.len() - 1 } else { record.len() };
        if has_label_column && record.len() < 2 {
            return Err(Error::Csv {
                row,
                message: "labeled rows need at least one feature and a label".into(),
            });
        }
        for (col, cell) in record.iter().enumerate().take(features) {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                message: format!("column {}: {cell:?} is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            data.push(v);
        }
        if has_label_column {
            let cell = &record[features];
            labels.push(cell.parse::<usize>().map_err(|_| Error::Csv {
                row,
                message: format!("column {}: {cell:?} is not a class index", features + 1),
            })?);
        }
        rows += 1;
    }
    let cols = width.map_or(0, |w| if has_label_column { w - 1 } else { w });
    Dataset::new("csv", Tensor::matrix(rows, cols, data)?, has_label_column.then_some(labels))
}

pub fn load_csv(path: impl AsRef<Path>, has_label_column: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_csv(&text, has_label_column)?;
    ds.name = path.display().to_string();
    Ok(ds)
}

/// Keeps `per_class` labeled examples of every class and strips the labels
/// from the rest. Both parts preserve the original row order.
pub fn split_labeled<R: Rng + ?Sized>(ds: &Dataset, per_class: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::invalid("split_labeled needs a labeled dataset"))?;
    let mut keep = vec![false; ds.len()];
    for class in 0..ds.num_classes() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == class).collect();
        if per_class > members.len() {
            return Err(Error::invalid(format!(
                "class {class} has {} examples, cannot keep {per_class}",
                members.len()
            )));
        }
        for pick in index::sample(rng, members.len(), per_class) {
            keep[members[pick]] = true;
        }
    }
    let labeled: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    let unlabeled: Vec<usize> = (0..ds.len()).filter(|&i| !keep[i]).collect();
    let mut rest = ds.subset(&unlabeled);
    rest.labels = None;
    Ok((ds.subset(&labeled), rest))
}
