//! Small deterministic classification datasets and their batch schedule.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{derive_stream, SeedPlan, StreamTag};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// One example per row.
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Array2<T>, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(LabError::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(LabError::Config(format!("label {bad} outside [0, {n_classes})")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("dataset inputs".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `indices` gathered into a fresh batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<T>, Vec<usize>) {
        let x = self.inputs.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.mapv(|v| U::of(v.as_f64())),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            split: self.split,
        }
    }
}

/// Gaussian-mixture task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Approximate pairwise distance between class means.
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            n_classes: 10,
            dim: 32,
            n_train: 16384,
            n_test: 2048,
            separation: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(LabError::Config("mixture needs at least 2 classes".into()));
        }
        if self.dim < 1 {
            return Err(LabError::Config("mixture dimension must be >= 1".into()));
        }
        if self.noise_std.is_nan() || self.noise_std <= 0.0 {
            return Err(LabError::Config("noise_std must be > 0".into()));
        }
        if self.n_classes > self.n_train {
            return Err(LabError::Config(format!(
                "{} classes cannot be covered by {} training examples",
                self.n_classes, self.n_train
            )));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(LabError::Config("separation must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generates train and test splits of a Gaussian mixture.
///
/// Class means are random Gaussian directions normalized to length
/// `separation / sqrt(2)`, so two means are about `separation` apart. Labels
/// cycle through the classes; train and test draw their noise from distinct
/// streams.
pub fn gen_mixture<T: Scalar>(spec: &MixtureSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let k = spec.n_classes;
    let d = spec.dim;
    let mut means = Array2::<f64>::zeros((k, d));
    let mut s = derive_stream(spec.seed, StreamTag::Data, 0);
    let radius = spec.separation / std::f64::consts::SQRT_2;
    for mut row in means.rows_mut() {
        loop {
            row.mapv_inplace(|_| s.next_gaussian());
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm * radius);
                break;
            }
        }
    }
    let make = |n: usize, index: u64, split: Split| -> Result<Dataset<T>> {
        let mut s = derive_stream(spec.seed, StreamTag::Data, index);
        let mut x = Array2::<T>::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let c = i % k;
            for (v, &m) in row.iter_mut().zip(means.row(c)) {
                *v = T::of(m + spec.noise_std * s.next_gaussian());
            }
            y.push(c);
        }
        Dataset::new(x, y, k, split)
    };
    Ok((make(spec.n_train, 1, Split::Train)?, make(spec.n_test, 2, Split::Test)?))
}

fn read_idx_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>, usize)> {
    let fmt = |offset: u64, msg: String| LabError::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 4 {
        return Err(fmt(0, "file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(
            0,
            format!("bad magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1]),
        ));
    }
    let ty = bytes[2];
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(fmt(3, "zero dimensions".into()));
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(fmt(4, format!("truncated header: need {header_len} bytes")));
    }
    let dims = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    Ok((ty, dims, header_len))
}

fn idx_elem_size(ty: u8) -> Option<usize> {
    match ty {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

fn idx_values(bytes: &[u8], ty: u8, count: usize, offset: usize, path: &Path) -> Result<Vec<f64>> {
    let size = idx_elem_size(ty).ok_or_else(|| LabError::Format {
        path: path.to_path_buf(),
        offset: 2,
        msg: format!("unknown IDX element type 0x{ty:02x}"),
    })?;
    let need = offset + size * count;
    if bytes.len() < need {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated payload: expected {need} bytes, found {}", bytes.len()),
        });
    }
    let body = &bytes[offset..need];
    let out = match ty {
        0x08 => body.iter().map(|&b| f64::from(b)).collect(),
        0x09 => body.iter().map(|&b| f64::from(b as i8)).collect(),
        0x0B => body
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_be_bytes([c[0], c[1]])))
            .collect(),
        0x0C => body
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        0x0D => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

/// Loads an IDX image/label pair. Unsigned-byte images are scaled to
/// `[0, 1]`; floating-point payloads are taken as stored.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset<T>> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let (ity, idims, ioff) = read_idx_header(&img, images_path)?;
    let (lty, ldims, loff) = read_idx_header(&lab, labels_path)?;
    let n = idims[0];
    let row_len: usize = idims[1..].iter().product();
    let pixels = idx_values(&img, ity, n * row_len, ioff, images_path)?;
    if ldims.len() != 1 {
        return Err(LabError::Format {
            path: labels_path.to_path_buf(),
            offset: 3,
            msg: format!("label file must be 1-dimensional, found {} dims", ldims.len()),
        });
    }
    if ldims[0] != n {
        return Err(LabError::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("{} labels for {} images", ldims[0], n),
        });
    }
    let raw_labels = idx_values(&lab, lty, n, loff, labels_path)?;
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(LabError::Format {
                    path: labels_path.to_path_buf(),
                    offset: loff as u64,
                    msg: format!("label {v} is not a class id"),
                })
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;
    let scale = if ity == 0x08 { 1.0 / 255.0 } else { 1.0 };
    let inputs = Array2::from_shape_vec((n, row_len.max(1)), pixels.iter().map(|&p| T::of(p * scale)).collect())
        .map_err(|e| LabError::Shape(e.to_string()))?;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(inputs, labels, n_classes, split)
}

/// Writes inputs as a big-endian f64 IDX file (type 0x0E) and labels as
/// unsigned bytes.
pub fn write_idx<T: Scalar>(data: &Dataset<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    if data.n_classes > 256 {
        return Err(LabError::Config(
            "IDX labels are stored as bytes; at most 256 classes".into(),
        ));
    }
    let n = data.len() as u32;
    let d = data.dim() as u32;
    let mut img = vec![0, 0, 0x0E, 2];
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&d.to_be_bytes());
    for v in data.inputs.iter() {
        img.extend_from_slice(&v.as_f64().to_be_bytes());
    }
    let mut lab = vec![0, 0, 0x08, 1];
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(data.labels.iter().map(|&y| y as u8));
    std::fs::write(images_path, img).map_err(|e| LabError::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| LabError::io(labels_path, e))?;
    Ok(())
}

/// Number of full batches per epoch (the ragged tail is dropped).
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size).max(1)
}

/// Indices of the batch used at `step`: a fresh seeded shuffle of `0..n` per
/// epoch, cut into contiguous slices.
pub fn batch_indices(n: usize, batch_size: usize, step: usize, seeds: &SeedPlan) -> Vec<usize> {
    assert!(
        batch_size >= 1 && batch_size <= n,
        "batch size {batch_size} not in [1, {n}]"
    );
    let per_epoch = steps_per_epoch(n, batch_size);
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.stream(StreamTag::BatchOrder, epoch as u64));
    order[slot * batch_size..(slot + 1) * batch_size].to_vec()
}

/// Adds seeded Gaussian jitter, keyed by step. `jitter_std == 0` leaves the
/// batch untouched.
pub fn augment<T: Scalar>(inputs: &mut Array2<T>, step: usize, seeds: &SeedPlan, jitter_std: f64) {
    if jitter_std == 0.0 {
        return;
    }
    let mut s = seeds.stream(StreamTag::Augment, step as u64);
    for v in inputs.iter_mut() {
        *v += T::of(jitter_std * s.next_gaussian());
    }
}
