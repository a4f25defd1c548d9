//! Binary checkpoint container.
//!
//! ```text
//! "HCKP"  u16 version  u32 meta_len  meta (JSON, UTF-8)
//! u32 count, then per tensor:
//!   u16 name_len  name  u8 dtype (0 = f32, 1 = f64)  u8 rank  u64 dims[rank]  values (LE)
//! ```
//!
//! Model parameters are stored as `f32`; optimizer moments as `f64` under
//! `opt.m.<name>` / `opt.v.<name>` so a resumed run continues exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelSpec};
use crate::autodiff::Tensor;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    /// Epoch (1-based) the parameters were taken from.
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelSpec,
    config: serde_json::Value,
    epoch: usize,
    optimizer: Option<OptMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    config: AdamWConfig,
    step: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, wide: bool) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("parameter name too long: {name}")))?;
    out.extend(name_len.to_le_bytes());
    out.extend(name.as_bytes());
    out.push(wide as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        if wide {
            out.extend(v.to_le_bytes());
        } else {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(())
}

/// Serialises a checkpoint to bytes.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        model: ckpt.params.spec,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptMeta {
            config: o.config,
            step: o.step,
        }),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((meta.len() as u32).to_le_bytes());
    out.extend(&meta);

    let mut entries: Vec<(String, &Tensor, bool)> = Vec::new();
    let mut owned = Vec::new();
    for (name, t) in &ckpt.params.tensors {
        entries.push((name.clone(), t, false));
    }
    if let Some(opt) = &ckpt.optimizer {
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for (name, values) in moments {
                let shape = ckpt.params.get(name)?.shape().to_vec();
                owned.push((format!("opt.{kind}.{name}"), Tensor::new(shape, values.clone())?));
            }
        }
    }
    for (name, t) in &owned {
        entries.push((name.clone(), t, true));
    }
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t, wide) in entries {
        put_tensor(&mut out, &name, t, wide)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses a checkpoint from bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected \"HCKP\""));
    }
    let version = u16::from_le_bytes(cur.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u32::from_le_bytes(cur.array()?) as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = u32::from_le_bytes(cur.array()?) as usize;
    let mut tensors = BTreeMap::new();
    let mut moments: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.array()?) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
        let wide = match cur.array::<1>()?[0] {
            0 => false,
            1 => true,
            d => return Err(bad(format!("unknown dtype {d} for `{name}`"))),
        };
        let rank = cur.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(cur.array()?) as usize);
        }
        let n: usize = shape.iter().product();
        let width = if wide { 8 } else { 4 };
        let raw = cur.take(n.checked_mul(width).ok_or_else(|| bad("tensor too large"))?)?;
        let data: Vec<f64> = if wide {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        if let Some(rest) = name.strip_prefix("opt.") {
            let (kind, pname) = rest.split_once('.').ok_or_else(|| bad(format!("bad optimizer entry `{name}`")))?;
            moments.insert((kind.to_string(), pname.to_string()), data);
        } else {
            tensors.insert(name, Tensor::new(shape, data)?);
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after checkpoint"));
    }
    let params = ModelParams {
        spec: meta.model,
        tensors,
    };
    params.validate()?;
    let optimizer = meta.optimizer.map(|o| {
        let mut state = OptimizerState::new(o.config);
        state.step = o.step;
        for ((kind, pname), data) in moments {
            match kind.as_str() {
                "m" => state.m.insert(pname, data),
                _ => state.v.insert(pname, data),
            };
        }
        state
    });
    Ok(Checkpoint {
        params,
        config: meta.config,
        epoch: meta.epoch,
        optimizer,
    })
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Method};

    fn sample() -> Checkpoint {
        let spec = ModelSpec {
            method: Method::Hypcbc,
            input_dim: 5,
            d1: 4,
            d2: 2,
            num_classes: 3,
            curvature: 1.0,
            clip_radius: 1.0,
        };
        let params = init_params(3, spec).unwrap().rounded_to_f32();
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step = 7;
        for (n, t) in &params.tensors {
            opt.m.insert(n.clone(), t.data().iter().map(|v| v * 0.1 + 1e-12).collect());
            opt.v.insert(n.clone(), t.data().iter().map(|v| v * v).collect());
        }
        Checkpoint {
            params,
            config: serde_json::json!({"lr": 1e-4}),
            epoch: 12,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = write_checkpoint(&ckpt).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = write_checkpoint(&sample()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&bad_magic).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(read_checkpoint(&longer).is_err());
    }
}
