//! Synthetic classification sets and a delimited-text loader.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Original label text per class index, when loaded from a table.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let (n, _) = features.expect_matrix("dataset")?;
        if n != labels.len() {
            return Err(Error::invalid(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::ClassOutOfRange { class: bad, classes });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
            label_names: (0..classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            label_names: self.label_names.clone(),
        }
    }

    /// First `n` rows (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Gaussian blobs around centers drawn uniformly on the radius-3 sphere.
///
/// Centers depend only on `seed`; the points of each split come from their
/// own stream, so train and test share centers but never share draws.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("blobs need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::invalid("blobs need per_class >= 1 and dim >= 1"));
    }
    let centers = blob_centers(classes, dim, seed);
    let mut rng = Stream::derived(seed, &["blobs".into(), split.as_str().into()]);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                data.push(m + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), dim, data)?, labels, classes, split)
}

pub fn blob_centers(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Stream::derived(seed, &["blob-centers".into()]);
    (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| 3.0 * x / norm).collect();
            }
        })
        .collect()
}

/// Concentric rings in the plane: class `c` lies on radius `c + 1` with
/// Gaussian radial noise and a uniform angle.
pub fn make_rings(classes: usize, per_class: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("rings need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(Error::invalid("rings need per_class >= 1"));
    }
    let mut rng = Stream::derived(seed, &["rings".into(), split.as_str().into()]);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            let angle = 2.0 * std::f64::consts::PI * rng.uniform();
            let r = (c + 1) as f64 + noise * rng.normal();
            data.push(r * angle.cos());
            data.push(r * angle.sin());
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), 2, data)?, labels, classes, split)
}

/// Per-feature affine scaling fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance columns get unit scale.
    pub fn fit(train: &Dataset) -> Self {
        let x = &train.features;
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{} features, scaler fitted on {}", ds.dim(), self.mean.len()),
            ));
        }
        let d = ds.dim();
        let mut features = ds.features.clone();
        for (i, v) in features.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(Dataset {
            features,
            ..ds.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableOptions {
    pub delimiter: u8,
    pub has_header: bool,
    pub label_column: LabelColumn,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            delimiter: b',',
            has_header: true,
            label_column: LabelColumn::Name("label".into()),
        }
    }
}

/// Reads a rectangular table of numeric features plus one label column.
///
/// Labels are relabeled densely in order of first appearance. When
/// `known_labels` is given (loading a test split against its training
/// split), that mapping is used instead and unseen labels are rejected.
pub fn load_table(
    path: &Path,
    opts: &TableOptions,
    split: Split,
    known_labels: Option<&[String]>,
) -> Result<Dataset> {
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)?;

    let label_idx = match &opts.label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !opts.has_header {
                return Err(data_err(format!(
                    "label column {name:?} given by name but the table has no header"
                )));
            }
            reader
                .headers()?
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| data_err(format!("no column named {name:?}")))?
        }
    };

    let mut names: Vec<String> = known_labels.map(<[String]>::to_vec).unwrap_or_default();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row + 1, |p| p.line() as usize);
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(data_err(format!(
                "ragged row at line {line}: {} fields, expected {}",
                record.len(),
                width.unwrap_or(0)
            )));
        }
        if label_idx >= record.len() {
            return Err(data_err(format!(
                "label column {label_idx} out of range for {} columns",
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                let label = field.trim().to_string();
                let class = match names.iter().position(|n| *n == label) {
                    Some(c) => c,
                    None if known_labels.is_some() => return Err(Error::LabelMismatch { label }),
                    None => {
                        names.push(label);
                        names.len() - 1
                    }
                };
                labels.push(class);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    data_err(format!("non-numeric feature {field:?} at line {line}, column {j}"))
                })?;
                if !v.is_finite() {
                    return Err(data_err(format!("non-finite feature at line {line}, column {j}")));
                }
                features.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(data_err("table has no data rows".into()));
    }
    let d = width.unwrap_or(0) - 1;
    if d == 0 {
        return Err(data_err("table has no feature columns".into()));
    }
    let classes = names.len();
    if classes < 2 {
        return Err(data_err(format!("need at least 2 classes, found {classes}")));
    }
    let mut ds = Dataset::new(Tensor::matrix(n, d, features)?, labels, classes, split)?;
    ds.label_names = names;
    Ok(ds)
}

/// Writes features followed by a `label` column, with a header row.
pub fn write_table(ds: &Dataset, path: &Path, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.label_names[ds.labels[i]].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
