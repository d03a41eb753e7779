//! `MNCK` checkpoint files.
//!
//! Layout (little-endian): magic `MNCK` | version u32 = 1 | config length u32 |
//! config JSON | then per parameter until EOF: name length u32, name, rank u32,
//! extents u32 each, raw f32 values.

use std::fs;
use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{init, MeNetConfig, MeNetParams};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &MeNetParams<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)?;
    let mut out = Vec::with_capacity(12 + config.len() + params.numel() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    for (name, t) in params.store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint and checks the parameters against the layout its config implies.
pub fn from_bytes(bytes: &[u8]) -> Result<MeNetParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let len = r.u32("config length")? as usize;
    let config: MeNetConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let count = count.ok_or_else(|| Error::Data(format!("{name}: extents overflow")))?;
        let raw = r.take(count.saturating_mul(4), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
    }

    let layout = init::<f32>(&config, 0)?;
    let expected: Vec<(&str, &[usize])> = layout.store.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        return Err(Error::Data(
            "checkpoint parameters do not match the layout of its config".into(),
        ));
    }
    Ok(MeNetParams { config, store })
}

pub fn save(params: &MeNetParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MeNetParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
