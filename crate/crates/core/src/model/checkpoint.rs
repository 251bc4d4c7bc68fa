//! Checkpoint files: `STOPCKPT`, u32 version, then records of
//! `name_len u32, name utf8, rank u32, dims u32 x rank, f32 payload`,
//! all little-endian.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"STOPCKPT";
pub const CKPT_VERSION: u32 = 1;

const TARGET_PREFIX: &str = "target.";

pub fn encode_records(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let size: usize = records
        .iter()
        .map(|(n, t)| 8 + n.len() + 4 * t.shape().len() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(12 + size);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_records(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut records = Vec::new();
    while c.pos < buf.len() {
        let start = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::Format {
            offset: start as u64 + 4,
            message: "record name is not utf-8".into(),
        })?;
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = c.pos;
            let d = c.u32("dims")? as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= buf.len())
                .ok_or_else(|| Error::Format {
                    offset: at as u64,
                    message: format!("record '{name}' dims exceed file size"),
                })?;
            dims.push(d);
        }
        let payload = c.take(4 * numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push((name.to_string(), Tensor::new(&dims, data)?));
    }
    Ok(records)
}

pub fn write_checkpoint(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&buf)
}

impl ModelState<f32> {
    /// Online parameters by name, then target encoder under `target.`.
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        let online = self.online.entries().iter().map(|e| (e.name.clone(), e.value.clone()));
        let target = self
            .target
            .entries()
            .iter()
            .map(|e| (format!("{TARGET_PREFIX}{}", e.name), e.value.clone()));
        online.chain(target).collect()
    }

    /// Builds a state for `config` and overwrites every parameter from
    /// `records`. Records with other names are ignored.
    pub fn from_records(config: &ModelConfig, records: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut state = ModelState::init(config, 0)?;
        let lookup = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let fill = |store: &mut super::ParamStore<f32>, prefix: &str| -> Result<()> {
            for e in store.entries_mut() {
                let key = format!("{prefix}{}", e.name);
                let t = lookup(&key).ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("checkpoint has no record '{key}'"),
                })?;
                if t.shape() != e.value.shape() {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!(
                            "record '{key}' has shape {:?}, model expects {:?}",
                            t.shape(),
                            e.value.shape()
                        ),
                    });
                }
                e.value.data_mut().copy_from_slice(t.data());
            }
            Ok(())
        };
        fill(&mut state.online, "")?;
        fill(&mut state.target, TARGET_PREFIX)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_records())
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        ModelState::from_records(config, &read_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_bits() {
        let recs = vec![
            (
                "a".to_string(),
                Tensor::new(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3e-39]).unwrap(),
            ),
            ("scalar".to_string(), Tensor::new(&[], vec![7.0f32]).unwrap()),
            ("empty".to_string(), Tensor::new(&[0, 3], vec![]).unwrap()),
        ];
        let back = decode_records(&encode_records(&recs)).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in recs.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            decode_records(b"NOTACKPT\x01\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_records(b"STOPCKPT\x09\0\0\0"),
            Err(Error::Format { offset: 8, .. })
        ));
        assert!(matches!(
            decode_records(b"STOPCK"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let recs = vec![("w".to_string(), Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap())];
        let bytes = encode_records(&recs);
        let cut = &bytes[..bytes.len() - 2];
        // header 12 + name_len 4 + name 1 + rank 4 + dim 4
        assert!(matches!(decode_records(cut), Err(Error::Format { offset: 25, .. })));
    }
}
