//! Checkpoint file: magic, version, config record, then every parameter.
//!
//! ```text
//! "MMCK"  u32 version = 1
//! u32 config length, UTF-8 JSON config
//! u32 parameter count
//! per parameter: u16 name length, UTF-8 name, u8 rank, u32 × rank extents,
//!                f32 × product(extents) values
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`,
//! so an `f32` model round-trips bit-exactly.

use std::path::Path;

use super::{MamcaConfig, MamcaModel};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> MamcaModel<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
        binio::put_u32(&mut out, binio::count_u32("config length", cfg.len())?);
        out.extend_from_slice(&cfg);
        binio::put_u32(&mut out, binio::count_u32("parameter count", self.store.len())?);
        for (name, t) in self.store.iter() {
            binio::put_string_u16(&mut out, name)?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::invalid(format!("rank of `{name}` exceeds 255")))?;
            out.push(rank);
            for &e in t.shape() {
                binio::put_u32(&mut out, binio::count_u32("extent", e)?);
            }
            for &v in t.data() {
                binio::put_f32(&mut out, v.to_f32().unwrap_or(f32::NAN));
            }
        }
        Ok(out)
    }

    /// Rebuilds the model from its config and overwrites every parameter.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let cfg_len = r.u32()? as usize;
        let cfg: MamcaConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
        let mut model = Self::build(cfg).map_err(|e| match e {
            Error::Config(msg) => Error::Malformed(format!("checkpoint config: {msg}")),
            other => other,
        })?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Malformed(format!(
                "checkpoint holds {count} parameters, config implies {}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name = r.string_u16()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Malformed(format!("unknown parameter `{name}`")))?;
            if seen[id.index()] {
                return Err(Error::Malformed(format!("parameter `{name}` repeated")));
            }
            seen[id.index()] = true;
            if model.store.get(id).shape() != shape.as_slice() {
                return Err(Error::Malformed(format!(
                    "parameter `{name}` has shape {shape:?}, expected {:?}",
                    model.store.get(id).shape()
                )));
            }
            let values: Vec<T> = r
                .f32s(model.store.get(id).len())?
                .into_iter()
                .map(|v| T::of(v as f64))
                .collect();
            model.store.set_values(id, &values)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last parameter",
                r.remaining()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MamcaModel<f32> {
        MamcaModel::build(MamcaConfig {
            d_model: 8,
            n_state: 4,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = m.to_bytes().unwrap();
        let back = MamcaModel::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((na, a), (nb, b)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.data()), bits(b.data()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_yields_distinct_errors() {
        let bytes = model().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(
            MamcaModel::<f32>::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MamcaModel::<f32>::from_bytes(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            MamcaModel::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            MamcaModel::<f32>::from_bytes(&bad),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn value_count_matches_file() {
        let m = model();
        let bytes = m.to_bytes().unwrap();
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = 12 + cfg_len + 4;
        let meta: usize = m
            .store()
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank())
            .sum();
        assert_eq!((bytes.len() - header - meta) / 4, m.param_count());
    }
}
