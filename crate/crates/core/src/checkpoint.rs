//! Binary checkpoints: config echo, training stage, then every named tensor
//! as little-endian f64.
//!
//! Layout: `NATK` magic, u32 version, u32 config length + canonical config,
//! u8 stage (0 none, 1 A, 2 B), u32 lineage length + lineage text, u32
//! record count, then per record: u32 name length, name, u32 rank, u64
//! extents, f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"NATK";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `model` with a free-form lineage note (e.g. the host checkpoint
/// it was personalized from).
pub fn to_bytes<T: Scalar>(model: &Model<T>, lineage: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.canonical();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.push(match model.trained {
        None => 0,
        Some(Stage::A) => 1,
        Some(Stage::B) => 2,
    });
    out.extend_from_slice(&(lineage.len() as u32).to_le_bytes());
    out.extend_from_slice(lineage.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (a, b) = self.bytes.split_at(n);
        self.bytes = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-UTF-8 string"))
    }
}

#[derive(Clone, Debug)]
pub struct Loaded<T: Scalar = f64> {
    pub model: Model<T>,
    pub lineage: String,
    /// The config text exactly as stored.
    pub config_text: String,
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Loaded<T>> {
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_text = r.string()?;
    let config = RunConfig::parse(&config_text)?;
    let stage = match r.take(1)?[0] {
        0 => None,
        1 => Some(Stage::A),
        2 => Some(Stage::B),
        s => return Err(bad(format!("bad stage byte {s}"))),
    };
    let lineage = r.string()?;
    let mut model = Model::<T>::new(&config)?;
    model.trained = stage;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(bad(format!("{count} records, model has {} tensors", params.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let Some((_, t)) = params.iter_mut().find(|(n, _)| *n == name) else {
            return Err(bad(format!("unknown tensor {name:?}")));
        };
        if t.shape() != shape.as_slice() {
            return Err(bad(format!("{name}: stored {shape:?}, model {:?}", t.shape())));
        }
        for v in t.data_mut() {
            *v = T::lit(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
    }
    if !r.bytes.is_empty() {
        return Err(bad("trailing bytes"));
    }
    drop(params);
    Ok(Loaded {
        model,
        lineage,
        config_text,
    })
}

pub fn save<T: Scalar>(model: &Model<T>, lineage: &str, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, lineage))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| bad(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// SHA-256 over every parameter name and value.
pub fn param_checksum<T: Scalar>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng::RandomSource;
    use crate::tensor::Tensor;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        c.model.d_attn = 16;
        c.model.mlp_hidden = 16;
        c.model.blocks = 1;
        c.encoder.queries = 4;
        c.encoder.layers = 1;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m: Model<f64> = Model::new(&small()).unwrap();
        let mut rng = RandomSource::new(9, 0);
        for (_, t) in m.params_mut() {
            let noise = Tensor::<f64>::randn(t.shape(), 1.0, &mut rng);
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += *b;
            }
        }
        m.trained = Some(Stage::A);
        let bytes = to_bytes(&m, "host:abc");
        let back: Loaded<f64> = from_bytes(&bytes).unwrap();
        assert_eq!(back.lineage, "host:abc");
        assert_eq!(back.model.trained, Some(Stage::A));
        assert_eq!(param_checksum(&back.model), param_checksum(&m));
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.model.params()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(to_bytes(&back.model, "host:abc"), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m: Model<f64> = Model::new(&small()).unwrap();
        let bytes = to_bytes(&m, "");
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes::<f64>(&bad_magic).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
    }
}
