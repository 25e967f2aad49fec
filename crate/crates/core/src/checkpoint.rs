//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DFLB"  u32 version
//! u32 len, kind tag (UTF-8)
//! u32 len, config echo (JSON)
//! u32 record count, then per record in ascending name order:
//!   u32 len, name   u8 elem (0 = f32, 1 = f64)   u32 ndim   u64 dims[ndim]
//!   u64 byte length   raw row-major data
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::student::{SltConfig, SltParams};
use crate::teacher::{Backbone, BackboneConfig, FlowMapModel, VelocityField};
use crate::tensor::{ElemType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DFLB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub elem: ElemType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    records: Vec<Record>,
}

impl Checkpoint {
    /// Builds a container; records are sorted by name and must be unique.
    pub fn new(
        kind: impl Into<String>,
        config: impl Into<String>,
        mut records: Vec<Record>,
    ) -> Result<Self> {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = records.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Format(format!(
                "duplicate tensor record `{}`",
                w[0].name
            )));
        }
        Ok(Self {
            kind: kind.into(),
            config: config.into(),
            records,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn from_params<T: Scalar>(
        kind: &str,
        config: String,
        params: &ParamSet<T>,
    ) -> Result<Self> {
        let records = params
            .iter()
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.numel() * T::ELEM.size());
                for v in t.data() {
                    (*v).write_le(&mut bytes);
                }
                Record {
                    name: name.to_string(),
                    elem: T::ELEM,
                    shape: t.shape().to_vec(),
                    bytes,
                }
            })
            .collect();
        Self::new(kind, config, records)
    }

    /// Decodes every record as `T`; the stored element type must match.
    pub fn to_params<T: Scalar>(&self) -> Result<ParamSet<T>> {
        let size = T::ELEM.size();
        let entries = self
            .records
            .iter()
            .map(|r| {
                if r.elem != T::ELEM {
                    return Err(Error::Format(format!(
                        "record `{}` stores {:?}, requested {:?}",
                        r.name,
                        r.elem,
                        T::ELEM
                    )));
                }
                let data = r.bytes.chunks_exact(size).map(T::read_le).collect();
                Ok((r.name.clone(), Tensor::new(r.shape.clone(), data)?))
            })
            .collect::<Result<_>>()?;
        ParamSet::from_entries(entries)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.elem.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(r.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let elem = ElemType::from_tag(tag).ok_or_else(|| {
                Error::Format(format!("record `{name}`: unknown element tag {tag}"))
            })?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Format(format!("record `{name}`: extent overflows")))?;
                shape.push(d);
            }
            let declared = r.u64()?;
            let expected = shape
                .iter()
                .try_fold(elem.size() as u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("record `{name}`: size overflows")))?;
            if declared != expected {
                return Err(Error::Format(format!(
                    "record `{name}`: {declared} bytes declared, shape {shape:?} needs {expected}"
                )));
            }
            let data = r.take(declared as usize)?.to_vec();
            if let Some(prev) = records.last().map(|p: &Record| p.name.as_str()) {
                if prev >= name.as_str() {
                    return Err(Error::Format(format!(
                        "records out of order or duplicated at `{name}`"
                    )));
                }
            }
            records.push(Record {
                name,
                elem,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            config,
            records,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string field is not UTF-8".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Dependency(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::decode(&bytes)
}

/// Models that round-trip through a [`Checkpoint`].
pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_checkpoint(&self) -> Result<Checkpoint>;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

fn echo<C: Serialize>(config: &C) -> Result<String> {
    Ok(serde_json::to_string(config)?)
}

fn expect_kind<C: DeserializeOwned>(ckpt: &Checkpoint, kind: &str) -> Result<C> {
    if ckpt.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint holds a `{}`, expected `{kind}`",
            ckpt.kind
        )));
    }
    serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("config echo does not parse: {e}")))
}

impl<T: Scalar> Persist for VelocityField<T> {
    const KIND: &'static str = "velocity_field";

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(
            Self::KIND,
            echo(self.backbone().config())?,
            self.backbone().params(),
        )
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: BackboneConfig = expect_kind(ckpt, Self::KIND)?;
        Ok(Self(Backbone::from_params(
            config,
            false,
            ckpt.to_params()?,
        )?))
    }
}

impl<T: Scalar> Persist for FlowMapModel<T> {
    const KIND: &'static str = "flow_map";

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(
            Self::KIND,
            echo(self.backbone().config())?,
            self.backbone().params(),
        )
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: BackboneConfig = expect_kind(ckpt, Self::KIND)?;
        Ok(Self(Backbone::from_params(
            config,
            true,
            ckpt.to_params()?,
        )?))
    }
}

impl<T: Scalar> Persist for SltParams<T> {
    const KIND: &'static str = "slt";

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(Self::KIND, echo(self.config())?, self.params())
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: SltConfig = expect_kind(ckpt, Self::KIND)?;
        SltParams::from_params(config, ckpt.to_params()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let rec = |name: &str, vals: &[f32]| Record {
            name: name.into(),
            elem: ElemType::F32,
            shape: vec![vals.len()],
            bytes: vals.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        Checkpoint::new("test", "{}", vec![rec("b", &[1.0, 2.0]), rec("a", &[3.0])]).unwrap()
    }

    #[test]
    fn records_are_sorted() {
        let c = sample();
        assert_eq!(c.records()[0].name, "a");
        let again = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.encode(), c.encode());
    }

    #[test]
    fn truncation_and_version() {
        let bytes = sample().encode();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut wrong = bytes.clone();
        wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&wrong),
            Err(Error::Version {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn byte_length_must_match_shape() {
        let mut c = sample();
        c.records[0].shape = vec![2];
        assert!(matches!(
            Checkpoint::decode(&c.encode()),
            Err(Error::Format(_))
        ));
    }
}
