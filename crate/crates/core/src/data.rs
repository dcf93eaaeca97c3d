//! Classification datasets: synthetic Gaussian blobs, label shuffling,
//! mini-batch iteration and CSV / IDX ingestion.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

/// Default distance of each class mean from the origin along its own axis.
pub const DEFAULT_BLOB_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    /// Seed of the label permutation, if the labels were shuffled.
    pub label_permutation_seed: Option<u64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = x.dims2("dataset")?;
        if labels.len() != n {
            return Err(Error::InvalidConfig(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as i64,
                classes: num_classes,
            });
        }
        if n < num_classes {
            return Err(Error::InvalidConfig(format!(
                "{n} samples cannot cover {num_classes} classes"
            )));
        }
        Ok(Self {
            x,
            labels,
            num_classes,
            name: name.into(),
            label_permutation_seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let src = self.x.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), d], data), labels)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, labels) = self.gather(&idx);
        Dataset {
            x,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
            label_permutation_seed: self.label_permutation_seed,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Gaussian clusters whose means sit on the vertices `scale·e_k` of a simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of each cluster.
    pub spread: f64,
    pub scale: f64,
    pub seed: u64,
}

impl BlobsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim < self.classes {
            return Err(Error::InvalidConfig(format!(
                "simplex means need dim >= classes ({} < {})",
                self.dim, self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be >= 1".into()));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bad spread/scale {} / {}",
                self.spread, self.scale
            )));
        }
        Ok(())
    }

    /// Disjoint train and test draws from the same clusters.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let train = self.draw(self.per_class, stream::DATA, "blobs-train")?;
        let test = if self.test_per_class > 0 {
            self.draw(self.test_per_class, stream::TEST_DATA, "blobs-test")?
        } else {
            Dataset {
                x: Tensor::zeros(&[0, self.dim]),
                labels: Vec::new(),
                num_classes: self.classes,
                name: "blobs-test".into(),
                label_permutation_seed: None,
            }
        };
        Ok((train, test))
    }

    fn draw(&self, per_class: usize, stream_id: u64, name: &str) -> Result<Dataset> {
        let mut rng = seeded(self.seed, stream_id);
        let n = self.classes * per_class;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for class in 0..self.classes {
            for _ in 0..per_class {
                for j in 0..self.dim {
                    let mean = if j == class { self.scale } else { 0.0 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mean + self.spread * z);
                }
                labels.push(class);
            }
        }
        Dataset::new(name, Tensor::new(vec![n, self.dim], data)?, labels, self.classes)
    }
}

/// Training split of a blobs problem with the default simplex scale.
pub fn make_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let spec = BlobsSpec {
        classes,
        dim,
        per_class,
        test_per_class: 0,
        spread,
        scale: DEFAULT_BLOB_SCALE,
        seed,
    };
    Ok(spec.generate()?.0)
}

/// A copy of `d` whose labels are a uniformly random permutation of the originals.
pub fn shuffle_labels(d: &Dataset, seed: u64) -> Dataset {
    let mut rng = seeded(seed, stream::LABELS);
    let mut labels = d.labels.clone();
    labels.shuffle(&mut rng);
    Dataset {
        x: d.x.clone(),
        labels,
        num_classes: d.num_classes,
        name: format!("{}-shuffled", d.name),
        label_permutation_seed: Some(seed),
    }
}

/// Seeded mini-batch order. Each epoch is a fresh permutation split into
/// consecutive batches; a trailing batch of one sample is merged into the
/// previous batch so batch norm always sees at least two rows.
#[derive(Debug, Clone)]
pub struct BatchIter {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
}

impl BatchIter {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        let full = self.n / self.batch_size;
        match self.n % self.batch_size {
            0 => full,
            1 if full > 0 => full,
            _ => full + 1,
        }
    }

    /// Index batches for the next epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut rng = seeded(
            self.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            stream::BATCHES,
        );
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.batch_size > 1 && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        batches
    }
}

/// Where to read an external dataset from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum ExternalSource {
    /// Header row, feature columns, then a `label` column.
    CsvFeaturesLabel { path: PathBuf },
    /// IDX image container (u8 pixels) with a matching IDX label file.
    IdxImages { images: PathBuf, labels: PathBuf },
}

/// Reads an external dataset. Without `num_classes` the class count is `max label + 1`.
pub fn load_external(source: &ExternalSource, num_classes: Option<usize>) -> Result<Dataset> {
    match source {
        ExternalSource::CsvFeaturesLabel { path } => load_csv(path, num_classes),
        ExternalSource::IdxImages { images, labels } => load_idx(images, labels, num_classes),
    }
}

fn parse_err(path: &Path, record: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        source_name: path.display().to_string(),
        record,
        detail: detail.into(),
    }
}

fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(path, 0, e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(Error::Empty("csv file"));
    }
    if headers.iter().next_back() != Some("label") {
        return Err(parse_err(path, 0, "last column must be `label`"));
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(parse_err(
                path,
                row,
                format!("expected {} fields, got {}", d + 1, rec.len()),
            ));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, row, format!("bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, row, "non-finite feature"));
            }
            data.push(v);
        }
        let label_field = rec[d].trim();
        let label: i64 = label_field
            .parse()
            .map_err(|_| parse_err(path, row, format!("bad label `{label_field}`")))?;
        raw_labels.push((row, label));
    }
    if raw_labels.is_empty() {
        return Err(Error::Empty("csv file"));
    }
    let (labels, classes) = check_labels(&raw_labels, num_classes)?;
    let n = labels.len();
    let name = path
        .file_stem()
        .map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, d], data)?, labels, classes)
}

fn check_labels(raw: &[(usize, i64)], num_classes: Option<usize>) -> Result<(Vec<usize>, usize)> {
    let max = raw.iter().map(|&(_, l)| l).max().unwrap_or(0);
    let classes = num_classes.unwrap_or((max.max(0) + 1) as usize);
    let mut labels = Vec::with_capacity(raw.len());
    for &(index, label) in raw {
        if label < 0 || label as usize >= classes {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        labels.push(label as usize);
    }
    Ok((labels, classes))
}

/// Writes `d` in the CSV layout accepted by [`load_external`].
pub fn export_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| parse_err(path, 0, e.to_string()))?;
    for (i, row) in d.x.data().chunks(d.dim()).enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(d.labels[i].to_string());
        w.write_record(&rec)
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

struct Idx {
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn read_idx(path: &Path) -> Result<Idx> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 4 {
        return Err(parse_err(path, 0, "file shorter than the IDX magic"));
    }
    if buf[0] != 0 || buf[1] != 0 {
        return Err(parse_err(path, 0, "bad IDX magic"));
    }
    if buf[2] != 0x08 {
        return Err(parse_err(
            path,
            0,
            format!("unsupported IDX element type 0x{:02x}", buf[2]),
        ));
    }
    let ndim = buf[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || buf.len() < header {
        return Err(parse_err(path, 0, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let b = &buf[4 + 4 * i..8 + 4 * i];
            u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    if buf.len() - header != count {
        return Err(parse_err(
            path,
            0,
            format!("header promises {count} values, file holds {}", buf.len() - header),
        ));
    }
    Ok(Idx {
        dims,
        bytes: buf[header..].to_vec(),
    })
}

fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(parse_err(labels, 0, "label file must be one-dimensional"));
    }
    let n = img.dims[0];
    if n == 0 {
        return Err(Error::Empty("IDX image file"));
    }
    if lab.dims[0] != n {
        return Err(parse_err(labels, 0, format!("{} labels for {n} images", lab.dims[0])));
    }
    let d: usize = img.dims[1..].iter().product::<usize>().max(1);
    let data = img.bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let raw: Vec<(usize, i64)> = lab.bytes.iter().enumerate().map(|(i, &b)| (i, i64::from(b))).collect();
    let (labels_vec, classes) = check_labels(&raw, num_classes)?;
    let name = images
        .file_stem()
        .map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, d], data)?, labels_vec, classes)
}
