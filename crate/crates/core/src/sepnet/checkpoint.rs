//! Binary checkpoint format.
//!
//! Layout: the magic `SEPN`, a little-endian `u32` version, then one record
//! per tensor (`u32` name length, UTF-8 name, `u32` rank, `u64` extents,
//! `f32` little-endian payload) and finally a `u32` CRC32 over all record
//! bytes. The network specification travels as the first record, `meta.spec`,
//! whose payload is the JSON text of the spec, one byte per `f32`.

use std::fs;
use std::path::Path;

use super::{Model, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEPN";
pub const CHECKPOINT_VERSION: u32 = 1;
const SPEC_RECORD: &str = "meta.spec";

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &s in shape {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(model.spec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut records = Vec::new();
    push_record(
        &mut records,
        SPEC_RECORD,
        &[spec.len()],
        spec.iter().map(|&b| b as f32),
    );
    for p in model.params() {
        push_record(
            &mut records,
            &p.name,
            p.value.shape(),
            p.value.data().iter().map(|v| v.widen() as f32),
        );
    }
    let mut out = Vec::with_capacity(records.len() + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&records);
    out.extend_from_slice(&crc32fast::hash(&records).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let records = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(records);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader {
        buf: records,
        pos: 0,
    };
    let mut spec = None;
    let mut named = Vec::new();
    while r.pos < records.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if name == SPEC_RECORD {
            let text: Vec<u8> = data.iter().map(|&v| v as u8).collect();
            let s: NetworkSpec = serde_json::from_slice(&text)
                .map_err(|e| Error::Checkpoint(format!("bad spec record: {e}")))?;
            spec = Some(s);
        } else {
            let t = Tensor::from_vec(&shape, data.iter().map(|&v| T::cast(v as f64)).collect())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            named.push((name, t));
        }
    }
    let spec = spec.ok_or_else(|| Error::Checkpoint("missing spec record".into()))?;
    Model::from_named(&spec, named)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sepnet::build_sepnet;

    #[test]
    fn round_trip_is_exact() {
        let m = build_sepnet::<f32>(&NetworkSpec::sepnet(4, 3, 3), 11).unwrap();
        let back: Model<f32> = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back.spec(), m.spec());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let m = build_sepnet::<f32>(&NetworkSpec::sepnet(2, 2, 2), 1).unwrap();
        let good = encode_checkpoint(&m).unwrap();
        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(
            matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checkpoint(m)) if m.contains("CRC"))
        );
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint::<f32>(&magic).is_err());
        assert!(decode_checkpoint::<f32>(&good[..good.len() - 9]).is_err());
    }
}
