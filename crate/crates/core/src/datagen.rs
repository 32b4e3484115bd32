//! Synthetic Gaussian-blob datasets and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::rng::{stream, Purpose};

/// Features plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N × input_dim`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::shape("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `indices` as a new feature tensor and label list.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((self.features.select_rows(indices)?, y))
    }

    /// Indices of samples whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

/// Parameters of the blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_classes: 10,
            input_dim: 16,
            train_per_class: 200,
            test_per_class: 50,
            separation: 4.0,
            noise: 1.0,
        }
    }
}

fn draw_means<R: Rng + ?Sized>(classes: usize, dim: usize, radius: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| loop {
            let v = Tensor::randn(&[dim], 1.0, rng);
            let norm = v.frobenius_norm();
            if norm > 1e-12 {
                break v.data().iter().map(|x| x / norm * radius).collect();
            }
        })
        .collect()
}

fn validate_blob_args(classes: usize, per_class: usize, dim: usize, separation: f64, noise: f64) -> Result<()> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config("blob dataset dimensions must be positive".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    Ok(())
}

fn sample_blobs<R: Rng + ?Sized>(
    means: &[Vec<f64>],
    per_class: usize,
    noise: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    let dim = means[0].len();
    let mut data = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let eps = Tensor::randn(&[dim], noise, rng);
            data.extend(mean.iter().zip(eps.data()).map(|(m, e)| m + e));
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, means.len())
}

/// `per_class` samples of each class, class-major. Class means lie on a
/// random sphere of radius `separation`; samples add `N(0, noise²)` noise.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    validate_blob_args(num_classes, per_class, input_dim, separation, noise)?;
    let mut rng = stream(seed, Purpose::Dataset, &[]);
    let means = draw_means(num_classes, input_dim, separation, &mut rng);
    sample_blobs(&means, per_class, noise, &mut rng)
}

/// Train and test sets drawn around the same class means.
pub fn make_blob_splits(spec: &BlobSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    validate_blob_args(spec.num_classes, spec.train_per_class, spec.input_dim, spec.separation, spec.noise)?;
    if spec.test_per_class == 0 {
        return Err(Error::Config("every class needs at least one test sample".into()));
    }
    let mut rng = stream(seed, Purpose::Dataset, &[]);
    let means = draw_means(spec.num_classes, spec.input_dim, spec.separation, &mut rng);
    let train = sample_blobs(&means, spec.train_per_class, spec.noise, &mut rng)?;
    let test = sample_blobs(&means, spec.test_per_class, spec.noise, &mut rng)?;
    Ok((train, test))
}

/// How to read a CSV dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub num_classes: usize,
    pub has_header: bool,
}

/// Parses comma-separated rows of float features followed by an integer label.
pub fn parse_csv<R: Read>(reader: R, schema: CsvSchema) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() < 2 {
            return Err(parse_err(format!("expected features and a label, found {} field(s)", record.len())));
        }
        let features = record.len() - 1;
        match width {
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(parse_err(format!("expected {w} feature columns, found {features}")));
            }
            _ => {}
        }
        for (col, field) in record.iter().take(features).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("column {}: `{field}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("line {line}, column {}: non-finite feature", col + 1)));
            }
            data.push(v);
        }
        let raw = &record[features];
        let y: i64 = raw
            .parse()
            .map_err(|_| parse_err(format!("label `{raw}` is not an integer")))?;
        if y < 0 || y as u64 >= schema.num_classes as u64 {
            return Err(Error::Validation(format!(
                "line {line}: label {y} out of range for {} classes",
                schema.num_classes
            )));
        }
        labels.push(y as usize);
    }
    let width = width.ok_or_else(|| Error::Validation("dataset has no rows".into()))?;
    LabeledDataset::new(Tensor::new(vec![labels.len(), width], data)?, labels, schema.num_classes)
}

pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(file), schema)
}

/// Writes rows in the format [`parse_csv`] reads, without a header. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(dataset: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, &y) in dataset.labels.iter().enumerate() {
        let mut row: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(y.to_string());
        w.write_record(&row)
            .map_err(|e| Error::Validation(format!("csv write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::Validation(format!("csv write failed: {e}")))?;
    Ok(())
}
