//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FCAP" | u32 version | u32 n | n bytes of UTF-8 key=value config
//! u32 tensor count | per tensor: u64 element count, f64 values
//! ```
//!
//! Tensor shapes are rebuilt from the config, so a checkpoint only loads into
//! the architecture it was saved from.

use std::path::Path;

use super::{CapsModel, FCapsNetConfig, Model, SmallVgg, SmallVggConfig};
use crate::capsule::Parameterized;
use crate::image::write_atomic;
use crate::kv::{KvMap, KvWriter};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn config_block(model: &Model) -> String {
    let mut w = KvWriter::default();
    w.put("model", model.name());
    match model {
        Model::Caps(m) => m.config().write_kv(&mut w),
        Model::SmallVgg(m) => m.config().write_kv(&mut w),
    }
    w.finish()
}

pub(crate) fn encode(model: &Model) -> Vec<u8> {
    let config = config_block(model);
    let params = model.parameters();
    let mut out = Vec::with_capacity(
        16 + config.len() + params.iter().map(|t| 8 + 8 * t.len()).sum::<usize>(),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.fail("config block is not UTF-8"))?;
    let kv = KvMap::parse(text)?;
    let mut model = match kv.require("model")? {
        "smallvgg" => Model::SmallVgg(SmallVgg::new(&SmallVggConfig::read_kv(
            &kv,
            &SmallVggConfig::default(),
        )?)?),
        arch => Model::Caps(CapsModel::new(
            arch.parse()?,
            &FCapsNetConfig::read_kv(&kv, &FCapsNetConfig::default())?,
        )?),
    };
    let count = r.u32()? as usize;
    let mut tensors = model.parameters_mut();
    if count != tensors.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", tensors.len())));
    }
    for t in tensors.iter_mut() {
        let len = r.u64()? as usize;
        if len != t.len() {
            return Err(r.fail(format!(
                "tensor has {len} values, model expects {}",
                t.len()
            )));
        }
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| r.fail("tensor length overflow"))?,
        )?;
        for (v, c) in t.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_capsnet;

    #[test]
    fn round_trip_is_bit_identical() {
        let models = [
            Model::Caps(
                CapsModel::new(super::super::Arch::Fused, &FCapsNetConfig::tiny()).unwrap(),
            ),
            Model::Caps(
                build_capsnet(&FCapsNetConfig {
                    seed: 5,
                    ..FCapsNetConfig::tiny()
                })
                .unwrap(),
            ),
            Model::SmallVgg(SmallVgg::new(&SmallVggConfig::small()).unwrap()),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, m) in models.iter().enumerate() {
            let p = dir.path().join(format!("m{i}.ckpt"));
            m.save(&p).unwrap();
            let back = Model::load(&p).unwrap();
            assert_eq!(&back, m);
            assert_eq!(encode(&back), std::fs::read(&p).unwrap());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::Caps(build_capsnet(&FCapsNetConfig::tiny()).unwrap());
        let bytes = encode(&m);
        let p = Path::new("x.ckpt");
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], p),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, p).is_err());
    }
}
