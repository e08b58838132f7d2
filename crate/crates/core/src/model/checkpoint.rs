//! Binary checkpoint container.
//!
//! Layout (all integers little-endian u32 unless noted):
//! magic `BSKM0001` (8 bytes); config fields in fixed order: num_layers,
//! num_heads, hidden_dim, ffn_dim, vocab_size, max_seq_len, block_size,
//! c1, c2, c3; dropout_rate (f64); entry count; then per entry: name
//! length + UTF-8 name, trainable flag (u8), ndim, dims, and the f64
//! payload. Entry order is the store's canonical insertion order, so a
//! round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::blockskim::PredictorConfig;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::encoder::BlockSkimModel;
use crate::model::params::ParamStore;
use crate::TensorData;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSKM0001";

pub fn save_checkpoint(model: &BlockSkimModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let cfg = &model.config;
    for v in [
        cfg.num_layers,
        cfg.num_heads,
        cfg.hidden_dim,
        cfg.ffn_dim,
        cfg.vocab_size,
        cfg.max_seq_len,
        model.block_size,
        model.predictor.c1,
        model.predictor.c2,
        model.predictor.c3,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.dropout_rate.to_le_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for e in model.params.iter() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[u8::from(e.trainable)])?;
        w.write_all(&(e.data.shape().len() as u32).to_le_bytes())?;
        for &d in e.data.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in e.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len();
                Ok(())
            }
            Err(_) => Err(Error::Format(format!(
                "checkpoint truncated reading {} at byte offset {}",
                what, self.offset
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<BlockSkimModel> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.take(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} at byte offset 0",
            magic
        )));
    }
    let mut fields = [0u32; 10];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = r.u32(&format!("config field {i}"))?;
    }
    let dropout_rate = r.f64("dropout")?;
    let config = ModelConfig {
        num_layers: fields[0] as usize,
        num_heads: fields[1] as usize,
        hidden_dim: fields[2] as usize,
        ffn_dim: fields[3] as usize,
        vocab_size: fields[4] as usize,
        max_seq_len: fields[5] as usize,
        dropout_rate,
    };
    config.validate()?;
    let block_size = fields[6] as usize;
    let predictor = PredictorConfig {
        c1: fields[7] as usize,
        c2: fields[8] as usize,
        c3: fields[9] as usize,
    };
    let count = r.u32("entry count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32(&format!("entry {i} name length"))? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!(
                "implausible name length {} at byte offset {}",
                name_len,
                r.offset - 4
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.take(&mut name_bytes, "entry name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| {
            Error::Format(format!(
                "non-UTF-8 parameter name at byte offset {}",
                r.offset - name_len
            ))
        })?;
        let mut flag = [0u8; 1];
        r.take(&mut flag, "trainable flag")?;
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!(
                "implausible rank {} for `{}` at byte offset {}",
                ndim,
                name,
                r.offset - 4
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("payload")?);
        }
        params.insert(name, TensorData::new(shape, data)?, flag[0] != 0);
    }
    Ok(BlockSkimModel {
        config,
        predictor,
        block_size,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> BlockSkimModel {
        BlockSkimModel::new(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 8,
                ffn_dim: 16,
                vocab_size: 16,
                max_seq_len: 16,
                dropout_rate: 0.0,
            },
            PredictorConfig {
                c1: 3,
                c2: 3,
                c3: 2,
            },
            4,
            42,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bskm");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.block_size, model.block_size);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.data.shape(), b.data.shape());
            let bits = |t: &TensorData| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data), "payload differs for {}", a.name);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bskm");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bskm");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("byte offset")),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }
}
