//! Desk-scale data: long-tail Gaussian blob generation, labeled/unlabeled
//! splits, and a binary PGM (P5) reader/writer for label maps.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::LabelBatch;
use crate::matrix::Matrix;
use crate::num::Real;
use crate::variation::NormalSource;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("blob spec invalid: {reason}")]
    InvalidBlobSpec { reason: String },
    #[error("labeled fraction must be in (0, 1], got {fraction}")]
    InvalidFraction { fraction: f64 },
    #[error("labeled split would be empty ({n} samples at fraction {fraction})")]
    EmptyLabeledSplit { n: usize, fraction: f64 },
}

/// Isotropic Gaussian blob per class, with per-class sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec<T> {
    pub num_classes: usize,
    pub dims: usize,
    pub counts: Vec<u64>,
    pub means: Vec<Vec<T>>,
    pub stddev: T,
    pub seed: u64,
}

impl<T: Real> BlobSpec<T> {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| Err(DataError::InvalidBlobSpec { reason });
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.dims < 2 {
            return fail(format!("dims must be >= 2, got {}", self.dims));
        }
        if self.counts.len() != self.num_classes || self.means.len() != self.num_classes {
            return fail(format!(
                "counts ({}) and means ({}) must both have num_classes ({}) entries",
                self.counts.len(),
                self.means.len(),
                self.num_classes
            ));
        }
        if let Some(k) = self.counts.iter().position(|&c| c == 0) {
            return fail(format!("counts[{k}] must be positive"));
        }
        if let Some(k) = self.means.iter().position(|m| m.len() != self.dims) {
            return fail(format!("means[{k}] must have {} entries", self.dims));
        }
        if !self.stddev.is_finite() || self.stddev < T::zero() {
            return fail(format!(
                "stddev must be finite and >= 0, got {}",
                self.stddev
            ));
        }
        if self.stddev == T::zero() {
            for i in 0..self.num_classes {
                for j in i + 1..self.num_classes {
                    if self.means[i] == self.means[j] {
                        return fail(format!(
                            "zero stddev with identical means for classes {i} and {j}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Features and labels; per-class counts match `BlobSpec::counts` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<u32>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Uniform random labeled/unlabeled partitioning, deliberately unstratified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Draw `counts[k]` points from an isotropic normal at `means[k]`.
///
/// Rows are grouped by class in spec order. Each class uses its own stream
/// seeded `seed + k`, so generation is reproducible per class.
pub fn generate_longtail_blobs<T: Real>(spec: &BlobSpec<T>) -> Result<Dataset<T>, DataError> {
    spec.validate()?;
    let total: u64 = spec.counts.iter().sum();
    let mut data = Vec::with_capacity(total as usize * spec.dims);
    let mut labels = Vec::with_capacity(total as usize);
    for (k, (&count, mean)) in spec.counts.iter().zip(&spec.means).enumerate() {
        let mut rng = StdRng::seed_from_u64(spec.seed.wrapping_add(k as u64));
        let mut normal = NormalSource::new();
        for _ in 0..count {
            for &m in mean {
                data.push(m + spec.stddev * T::cast(normal.next(&mut rng)));
            }
            labels.push(k as u32);
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(labels.len(), spec.dims, data),
        labels,
    })
}

/// Disjoint cover of the dataset; labeled size is `round(fraction * N)`.
///
/// Selection is uniform without stratification, so rare classes can vanish
/// from the labeled part. Both halves keep the original row order.
pub fn split_labeled_unlabeled<T: Real>(
    ds: &Dataset<T>,
    split: &SplitSpec,
) -> Result<(Dataset<T>, Dataset<T>), DataError> {
    let f = split.labeled_fraction;
    if !f.is_finite() || f <= 0.0 || f > 1.0 {
        return Err(DataError::InvalidFraction { fraction: f });
    }
    let n = ds.len();
    let labeled_size = ((f * n as f64).round() as usize).min(n);
    if labeled_size == 0 {
        return Err(DataError::EmptyLabeledSplit { n, fraction: f });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(split.seed);
    indices.shuffle(&mut rng);
    let mut labeled: Vec<usize> = indices[..labeled_size].to_vec();
    let mut unlabeled: Vec<usize> = indices[labeled_size..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((ds.gather(&labeled), ds.gather(&unlabeled)))
}

#[derive(Debug, Error, PartialEq)]
pub enum PgmError {
    #[error("byte {offset}: expected magic \"P5\"")]
    BadMagic { offset: usize },
    #[error("byte {offset}: unexpected end of header")]
    UnexpectedEof { offset: usize },
    #[error("byte {offset}: expected ASCII digit, found 0x{byte:02x}")]
    InvalidDigit { offset: usize, byte: u8 },
    #[error("byte {offset}: maxval {maxval} outside 1..=255")]
    MaxvalOutOfRange { offset: usize, maxval: u64 },
    #[error("byte {offset}: payload truncated, expected {expected} pixel bytes, found {actual}")]
    PayloadTruncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("byte {offset}: {extra} trailing bytes after pixel payload")]
    TrailingBytes { offset: usize, extra: usize },
}

/// A parsed label map: one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl LabelMap {
    pub fn to_label_batch(&self, ignore_index: u32) -> LabelBatch {
        LabelBatch::new(
            self.pixels.iter().map(|&p| p as u32).collect(),
            ignore_index,
        )
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) -> Result<(), PgmError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(PgmError::UnexpectedEof { offset: self.pos }),
            }
        }
    }

    fn read_number(&mut self) -> Result<(u64, usize), PgmError> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                value = value.saturating_mul(10).saturating_add((b - b'0') as u64);
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return match self.bytes.get(self.pos) {
                Some(&byte) => Err(PgmError::InvalidDigit {
                    offset: self.pos,
                    byte,
                }),
                None => Err(PgmError::UnexpectedEof { offset: self.pos }),
            };
        }
        Ok((value, start))
    }
}

/// Parse a binary PGM ("P5") byte buffer into a label map.
///
/// Header comments are allowed; maxval must fit a single byte. Errors carry
/// the byte offset where parsing stopped.
pub fn read_label_map(bytes: &[u8]) -> Result<LabelMap, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic { offset: 0 });
    }
    let mut cursor = HeaderCursor { bytes, pos: 2 };
    let (width, _) = cursor.read_number()?;
    let (height, _) = cursor.read_number()?;
    let (maxval, maxval_offset) = cursor.read_number()?;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::MaxvalOutOfRange {
            offset: maxval_offset,
            maxval,
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        Some(&byte) => {
            return Err(PgmError::InvalidDigit {
                offset: cursor.pos,
                byte,
            })
        }
        None => return Err(PgmError::UnexpectedEof { offset: cursor.pos }),
    }
    let expected = (width as usize) * (height as usize);
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(PgmError::PayloadTruncated {
            offset: cursor.pos,
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PgmError::TrailingBytes {
            offset: cursor.pos + expected,
            extra: payload.len() - expected,
        });
    }
    Ok(LabelMap {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u8,
        pixels: payload.to_vec(),
    })
}

/// Serialize with the canonical header: `P5\n{w} {h}\n{maxval}\n` + payload.
pub fn write_label_map(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, map.maxval).into_bytes();
    out.extend_from_slice(&map.pixels);
    out
}
