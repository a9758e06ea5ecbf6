//! Binary checkpoint: `BALB` magic, format version, model config, optimizer
//! step, then named little-endian f32 tensor records. Optimizer moments are
//! stored as extra records whose names end in `.m` / `.v`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BALB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParameterStore<f32>,
    pub first_moments: ParameterStore<f32>,
    pub second_moments: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParameterStore<f32>) -> Self {
        Checkpoint {
            config,
            step: 0,
            params,
            first_moments: ParameterStore::new(),
            second_moments: ParameterStore::new(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len(), "tensor name length")?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len(), "tensor rank")?;
    for &d in t.shape() {
        put_u32(out, d, "tensor dimension")?;
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let c = &ckpt.config;
    c.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.embedding_size,
        c.hidden_size,
        c.num_layers,
        c.num_heads,
        c.ffn_size,
        c.max_positions,
        c.type_vocab_size,
    ] {
        put_u32(&mut out, v, "config field")?;
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    out.extend_from_slice(&c.layer_norm_eps.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let count = ckpt.params.len() + ckpt.first_moments.len() + ckpt.second_moments.len();
    put_u32(&mut out, count, "record count")?;
    for (name, t) in ckpt.params.iter() {
        if name.ends_with(".m") || name.ends_with(".v") {
            return Err(Error::invalid(format!(
                "parameter name {name:?} clashes with optimizer records"
            )));
        }
        put_record(&mut out, name, t)?;
    }
    for (name, t) in ckpt.first_moments.iter() {
        put_record(&mut out, &format!("{name}.m"), t)?;
    }
    for (name, t) in ckpt.second_moments.iter() {
        put_record(&mut out, &format!("{name}.v"), t)?;
    }
    w.write_all(&out).map_err(|e| Error::io("<checkpoint>", e))?;
    w.flush().map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                format!("byte {}", self.pos),
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format("byte 0", "not a checkpoint (bad magic)"));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::format(
            "byte 4",
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = cur.u32("config")?;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        embedding_size: dims[1],
        hidden_size: dims[2],
        num_layers: dims[3],
        num_heads: dims[4],
        ffn_size: dims[5],
        max_positions: dims[6],
        type_vocab_size: dims[7],
        dropout: cur.f32("config")?,
        layer_norm_eps: cur.f32("config")?,
    };
    config
        .validate()
        .map_err(|e| Error::format("config block", e.to_string()))?;
    let step = cur.u64("step")?;
    let count = cur.u32("record count")?;

    let mut ckpt = Checkpoint {
        step,
        ..Checkpoint::new(config, ParameterStore::new())
    };
    for _ in 0..count {
        let at = cur.pos;
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(format!("byte {at}"), "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u32("dims")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(format!("byte {at}"), "tensor too large"))?;
        let bytes = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format(format!("byte {at}"), "tensor too large"))?;
        let raw = cur.take(bytes, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("record {name:?}"), e.to_string()))?;
        let (store, key) = if let Some(base) = name.strip_suffix(".m") {
            (&mut ckpt.first_moments, base.to_string())
        } else if let Some(base) = name.strip_suffix(".v") {
            (&mut ckpt.second_moments, base.to_string())
        } else {
            (&mut ckpt.params, name.clone())
        };
        if store.insert(key, t).is_some() {
            return Err(Error::format(format!("record {name:?}"), "duplicate tensor name"));
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::format(
            format!("byte {}", cur.pos),
            "trailing bytes after last record",
        ));
    }
    ckpt.params
        .check_against(&ckpt.config)
        .map_err(|e| Error::format("parameters", e.to_string()))?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            dropout: 0.1,
            ..ModelConfig::micro(50)
        };
        let params = init_model(&config, 5).unwrap();
        let mut ckpt = Checkpoint::new(config, params.clone());
        ckpt.step = 1234;
        ckpt.first_moments = params.clone();
        ckpt.second_moments = params;
        ckpt.params
            .insert("head.weight", Tensor::from_f64(&[16, 3], &[0.25; 48]).unwrap());
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(&bytes[..4], b"BALB");
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }

    #[test]
    fn rejects_missing_parameters() {
        let config = ModelConfig::micro(50);
        let ckpt = Checkpoint::new(config, ParameterStore::new());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.balb");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(load_checkpoint(dir.path().join("missing")).is_err());
    }
}
