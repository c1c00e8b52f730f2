//! Binary checkpoint format. All integers are little-endian.
//!
//! ```text
//! magic      9 bytes   "OVIS-TOY\0"
//! version    u32
//! stage      u32       last completed stage, 0 for a fresh model
//! config     u32 length + UTF-8 model config (key = value lines)
//! count      u32
//! directory  count × { u32 name length, name, u32 rank, rank × u32 dims, u64 byte offset }
//! payload    u64 length + f32 values
//! checksum   u64       FNV-1a of the payload bytes
//! ```

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::OvisModel;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"OVIS-TOY\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u32,
    pub model: OvisModel<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large: {n}")))
}

pub fn to_bytes(model: &OvisModel<f32>, stage: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, stage);
    let cfg = Config::model_text(&model.cfg);
    put_u32(&mut out, len_u32(cfg.len(), "config")?);
    out.extend_from_slice(cfg.as_bytes());

    put_u32(&mut out, len_u32(model.store.len(), "parameter count")?);
    let mut offset = 0u64;
    for (_, p) in model.store.iter() {
        put_u32(&mut out, len_u32(p.name.len(), "name")?);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, len_u32(p.value.shape().len(), "rank")?);
        for &d in p.value.shape() {
            put_u32(&mut out, len_u32(d, "dimension")?);
        }
        put_u64(&mut out, offset);
        offset += 4 * p.value.numel() as u64;
    }

    let mut payload = Vec::with_capacity(offset as usize);
    for (_, p) in model.store.iter() {
        for x in p.value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    put_u64(&mut out, fnv1a64(&payload));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let stage = r.u32()?;
    let cfg = Config::from_text(&r.string()?)?.model;

    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let offset = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
        entries.push(Entry { name, shape, offset });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("payload overflow".into()))?;
    let payload = r.take(len)?;
    let checksum = r.u64()?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if fnv1a64(payload) != checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut model = OvisModel::<f32>::new(cfg, 0)?;
    if entries.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model has {}",
            entries.len(),
            model.store.len()
        )));
    }
    for e in entries {
        let n: usize = e.shape.iter().product();
        let bytes = e
            .offset
            .checked_add(4 * n)
            .and_then(|end| payload.get(e.offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("`{}` points outside the payload", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.store.set_value(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(Checkpoint { stage, model })
}

pub fn save(path: &Path, model: &OvisModel<f32>, stage: u32) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, stage)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BridgeKind, ModelConfig};

    fn small(bridge: BridgeKind) -> OvisModel<f32> {
        let cfg = ModelConfig {
            bridge,
            image_width: 8,
            image_height: 8,
            patch: 4,
            enc_width: 8,
            enc_heads: 2,
            visual_vocab: 6,
            llm_width: 8,
            llm_layers: 1,
            llm_heads: 2,
            ..ModelConfig::default()
        };
        OvisModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for bridge in [BridgeKind::Ovis, BridgeKind::Connector] {
            let m = small(bridge);
            let bytes = to_bytes(&m, 2).unwrap();
            let ck = from_bytes(&bytes).unwrap();
            assert_eq!(ck.stage, 2);
            assert_eq!(ck.model.cfg, m.cfg);
            assert_eq!(to_bytes(&ck.model, 2).unwrap(), bytes);
            assert_eq!(ck.model.store.hash_where(|_| true), m.store.hash_where(|_| true));
        }
    }

    #[test]
    fn corruption_is_refused() {
        let bytes = to_bytes(&small(BridgeKind::Ovis), 1).unwrap();
        let mut flipped = bytes.clone();
        let at = bytes.len() - 20;
        flipped[at] ^= 0x40;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));

        let mut bad_sum = bytes.clone();
        *bad_sum.last_mut().unwrap() ^= 1;
        assert!(from_bytes(&bad_sum).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"NOT-OVIS\0").is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small(BridgeKind::Ovis), 3).unwrap();
        assert_eq!(&bytes[..9], b"OVIS-TOY\0");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 3);
    }
}
