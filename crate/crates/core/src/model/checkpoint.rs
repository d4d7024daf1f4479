//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! b"MOLFCKPT" | u32 version | u32 header_len | header JSON
//! u32 n_params | n × (u32 name_len | name | u32 rank | rank × u64 dim | f64 data)
//! u32 crc32 of every preceding byte
//! ```
//!
//! The header holds `{"model": ModelConfig, "metadata": any}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Network};
use crate::numkit::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"MOLFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar>(net: &Network<T>, metadata: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: net.config.clone(),
        metadata: metadata.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, t) in net.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name =
            std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("parameter too large"))?)?;
        let data: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}` has non-finite values"
            )));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(Checkpoint {
        network: Network::from_parts(header.model, store)?,
        metadata: header.metadata,
    })
}

/// Writes through a temporary file and renames into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &Network<T>,
    metadata: &serde_json::Value,
) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, write_checkpoint(net, metadata))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TaskType, Variant};

    fn small(variant: Variant) -> Network<f64> {
        let mut c = ModelConfig::new(variant, TaskType::Classification, 3);
        c.gin.layers = 2;
        c.gin.hidden = 8;
        c.fusion.width = 8;
        c.fusion.heads = 2;
        c.fusion.knowledge_dim = 6;
        Network::new(c, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let net = small(v);
            let meta = serde_json::json!({"task": "sider", "seed": 11});
            let ck: Checkpoint<f64> = read_checkpoint(&write_checkpoint(&net, &meta)).unwrap();
            assert_eq!(ck.network.config, net.config);
            assert_eq!(ck.network.params.names(), net.params.names());
            for (a, b) in ck.network.params.tensors().iter().zip(net.params.tensors()) {
                let bits =
                    |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(ck.metadata, meta);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_checkpoint(&small(Variant::Full), &serde_json::Value::Null);
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(
            read_checkpoint::<f64>(&flipped),
            Err(ModelError::Checkpoint(_))
        ));
        assert!(matches!(
            read_checkpoint::<f64>(&bytes[..bytes.len() - 9]),
            Err(ModelError::Checkpoint(_))
        ));
        assert!(matches!(
            read_checkpoint::<f64>(b"garbage!garbage!"),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        let net = small(Variant::GinOnly);
        save_checkpoint(&p, &net, &serde_json::json!({})).unwrap();
        let ck: Checkpoint<f32> = load_checkpoint(&p).unwrap();
        assert_eq!(ck.network.params.len(), net.params.len());
    }
}
