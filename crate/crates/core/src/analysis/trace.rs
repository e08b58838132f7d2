//! Attention trace container.
//!
//! Layout: magic `BSKM-TRC1` (9 bytes); u32 LE num_layers, num_heads,
//! max_len, example count; per example: num_layers u32 retained lengths,
//! then per layer `H * n * n` f32 LE attention values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::TensorData;

pub const TRACE_MAGIC: &[u8; 9] = b"BSKM-TRC1";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceExample {
    /// Retained length per layer (constant for full-capture traces).
    pub lengths: Vec<u32>,
    /// Per layer, `num_heads * n * n` post-softmax weights.
    pub attention: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub num_layers: u32,
    pub num_heads: u32,
    pub max_len: u32,
    pub examples: Vec<TraceExample>,
}

impl TraceFile {
    /// Build from captured f64 attention tensors (`[H,n,n]` per layer).
    pub fn from_captures(
        num_heads: usize,
        max_len: usize,
        captures: &[Vec<TensorData>],
    ) -> Result<Self> {
        let num_layers = captures.first().map_or(0, |c| c.len());
        let mut examples = Vec::with_capacity(captures.len());
        for cap in captures {
            if cap.len() != num_layers {
                return Err(Error::Alignment("inconsistent layer counts".into()));
            }
            let mut lengths = Vec::with_capacity(num_layers);
            let mut attention = Vec::with_capacity(num_layers);
            for t in cap {
                let sh = t.shape();
                if sh.len() != 3 || sh[0] != num_heads || sh[1] != sh[2] {
                    return Err(Error::Dimension(format!(
                        "trace capture must be [H,n,n], got {:?}",
                        sh
                    )));
                }
                lengths.push(sh[1] as u32);
                attention.push(t.data().iter().map(|&v| v as f32).collect());
            }
            examples.push(TraceExample { lengths, attention });
        }
        Ok(Self {
            num_layers: num_layers as u32,
            num_heads: num_heads as u32,
            max_len: max_len as u32,
            examples,
        })
    }

    /// Layer attention of one example as an f64 `[H,n,n]` tensor.
    pub fn layer_tensor(&self, example: usize, layer: usize) -> Result<TensorData> {
        let ex = self
            .examples
            .get(example)
            .ok_or_else(|| Error::Index(format!("trace example {example} out of range")))?;
        let n = ex.lengths[layer] as usize;
        let h = self.num_heads as usize;
        TensorData::new(
            vec![h, n, n],
            ex.attention[layer].iter().map(|&v| v as f64).collect(),
        )
    }
}

pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    for v in [
        trace.num_layers,
        trace.num_heads,
        trace.max_len,
        trace.examples.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for ex in &trace.examples {
        if ex.lengths.len() != trace.num_layers as usize {
            return Err(Error::Format("example layer count mismatch".into()));
        }
        for &n in &ex.lengths {
            w.write_all(&n.to_le_bytes())?;
        }
        for (l, layer) in ex.attention.iter().enumerate() {
            let n = ex.lengths[l] as usize;
            let expect = trace.num_heads as usize * n * n;
            if layer.len() != expect {
                return Err(Error::Format(format!(
                    "layer {l} payload {} != declared {}",
                    layer.len(),
                    expect
                )));
            }
            for v in layer {
                w.write_all(&v.to_le_bytes())?;
            }
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
                "trace truncated reading {} at byte offset {}",
                what, self.offset
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 9];
    r.take(&mut magic, "magic")?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(
            "bad trace magic at byte offset 0".into(),
        ));
    }
    let num_layers = r.u32("num_layers")?;
    let num_heads = r.u32("num_heads")?;
    let max_len = r.u32("max_len")?;
    let count = r.u32("count")?;
    if num_layers > 1024 || num_heads > 1024 {
        return Err(Error::Format(format!(
            "implausible trace header at byte offset {}",
            r.offset
        )));
    }
    let mut examples = Vec::with_capacity(count as usize);
    for e in 0..count {
        let mut lengths = Vec::with_capacity(num_layers as usize);
        for l in 0..num_layers {
            let n = r.u32(&format!("example {e} layer {l} length"))?;
            if n > max_len {
                return Err(Error::Format(format!(
                    "length {} exceeds max_len {} at byte offset {}",
                    n,
                    max_len,
                    r.offset - 4
                )));
            }
            lengths.push(n);
        }
        let mut attention = Vec::with_capacity(num_layers as usize);
        for (l, &n) in lengths.iter().enumerate() {
            let numel = num_heads as usize * (n as usize) * (n as usize);
            let mut layer = Vec::with_capacity(numel);
            let mut b = [0u8; 4];
            for _ in 0..numel {
                r.take(&mut b, &format!("example {e} layer {l} payload"))?;
                layer.push(f32::from_le_bytes(b));
            }
            attention.push(layer);
        }
        examples.push(TraceExample { lengths, attention });
    }
    Ok(TraceFile {
        num_layers,
        num_heads,
        max_len,
        examples,
    })
}
