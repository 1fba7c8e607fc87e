//! Labeled I/Q datasets, the AMCD file format and the stratified split.
//!
//! ```text
//! "AMCD"  u32 version = 1
//! u32 num_classes, then per class: u16 length + UTF-8 name
//! u32 num_samples  u32 L
//! per sample: u16 class, f32 snr_db, f32 × L in-phase, f32 × L quadrature
//! ```
//!
//! Everything is little-endian. Samples are planar: all I values, then all
//! Q values, matching the two rows of the `2 × L` sample matrix.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::scalar::Scalar;

pub const AMCD_MAGIC: [u8; 4] = *b"AMCD";
pub const AMCD_VERSION: u32 = 1;

/// One labeled record: `iq` holds `L` in-phase then `L` quadrature values.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSample {
    pub iq: Vec<f32>,
    pub label: usize,
    pub snr_db: f32,
}

impl SignalSample {
    pub fn len(&self) -> usize {
        self.iq.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.iq.is_empty()
    }

    pub fn i(&self) -> &[f32] {
        &self.iq[..self.len()]
    }

    pub fn q(&self) -> &[f32] {
        &self.iq[self.len()..]
    }
}

/// Samples of one common length with a class-name table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub length: usize,
    pub samples: Vec<SignalSample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, length: usize) -> Self {
        Self {
            class_names,
            length,
            samples: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks labels, lengths and finiteness of every sample.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.num_classes(),
                });
            }
            if s.iq.len() != 2 * self.length {
                return Err(Error::Malformed(format!(
                    "sample {i} has {} values, expected {}",
                    s.iq.len(),
                    2 * self.length
                )));
            }
            if !s.snr_db.is_finite() || s.iq.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("dataset sample {i}")));
            }
        }
        Ok(())
    }

    /// Distinct SNR values in ascending order.
    pub fn snr_grid(&self) -> Vec<f32> {
        let mut snrs: Vec<f32> = self.samples.iter().map(|s| s.snr_db).collect();
        snrs.sort_by(f32::total_cmp);
        snrs.dedup();
        snrs
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the selected samples into `[B, 2, L]` plus their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * 2 * self.length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.iq.iter().map(|&v| T::of(v as f64)));
            labels.push(s.label);
        }
        Ok((Tensor::new(vec![indices.len(), 2, self.length], data)?, labels))
    }

    fn header_len(&self) -> usize {
        16 + 4 + self.class_names.iter().map(|n| 2 + n.len()).sum::<usize>()
    }

    /// Bytes per record: class, SNR and `2L` values.
    pub fn record_len(&self) -> usize {
        2 + 4 + 8 * self.length
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.header_len() + self.len() * self.record_len());
        out.extend_from_slice(&AMCD_MAGIC);
        binio::put_u32(&mut out, AMCD_VERSION);
        binio::put_u32(&mut out, binio::count_u32("class count", self.num_classes())?);
        for name in &self.class_names {
            binio::put_string_u16(&mut out, name)?;
        }
        binio::put_u32(&mut out, binio::count_u32("sample count", self.len())?);
        binio::put_u32(&mut out, binio::count_u32("length", self.length)?);
        for s in &self.samples {
            let label = u16::try_from(s.label)
                .map_err(|_| Error::invalid(format!("label {} exceeds u16", s.label)))?;
            binio::put_u16(&mut out, label);
            binio::put_f32(&mut out, s.snr_db);
            for &v in &s.iq {
                binio::put_f32(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "AMCD");
        r.header(AMCD_MAGIC, AMCD_VERSION)?;
        let num_classes = r.u32()? as usize;
        let class_names = (0..num_classes)
            .map(|_| r.string_u16())
            .collect::<Result<Vec<_>>>()?;
        let num_samples = r.u32()? as usize;
        let length = r.u32()? as usize;
        let record = 6 + 8 * length;
        let need = num_samples.checked_mul(record);
        match need {
            Some(n) if n == r.remaining() => {}
            Some(n) if n > r.remaining() => {
                return Err(Error::Truncated(format!(
                    "AMCD: {num_samples} records need {n} bytes, {} present",
                    r.remaining()
                )))
            }
            _ => {
                return Err(Error::Malformed(format!(
                    "AMCD: {} bytes do not hold {num_samples} records of {record} bytes",
                    r.remaining()
                )))
            }
        }
        let mut samples = Vec::with_capacity(num_samples);
        for i in 0..num_samples {
            let label = r.u16()? as usize;
            if label >= num_classes {
                return Err(Error::Malformed(format!(
                    "AMCD record {i}: class {label} >= {num_classes}"
                )));
            }
            let snr_db = r.f32()?;
            let iq = r.f32s(2 * length)?;
            samples.push(SignalSample { iq, label, snr_db });
        }
        Ok(Self {
            class_names,
            length,
            samples,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            class_names: self.class_names.clone(),
            length: self.length,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Stratified split by `(class, snr)` cell.
///
/// Each cell is shuffled with a generator keyed by `seed` and the cell, and
/// its first `floor(ratio · n)` samples go to the training side. Sample
/// order inside each side follows the original order.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut cells: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        cells.entry((s.label, s.snr_db.to_bits())).or_default().push(i);
    }
    let mut is_train = vec![false; dataset.len()];
    for (&(label, snr_bits), members) in &cells {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "cell (class {label}, snr {}) has {} sample(s); splitting needs at least 2",
                f32::from_bits(snr_bits),
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((label as u64) << 32) | snr_bits as u64);
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let n_train = (ratio * members.len() as f64).floor() as usize;
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_train[i]);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
