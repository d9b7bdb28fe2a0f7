//! Little-endian binary policy checkpoints.
//!
//! Layout (all integers `u64` LE unless noted):
//!
//! ```text
//! magic      8 bytes  "OAPLCKPT"
//! format     u32      1
//! kind       u32      0 = tabular, 1 = linear softmax
//! vocab, horizon, prompt_count, eos (0/1), featurizer id (0 for tabular), param_count
//! params     param_count × f64 LE
//! ```

use std::io::{Read, Write};

use super::{Featurizer, LinearSoftmaxPolicy, SeqShape, SoftmaxPolicy, TabularPolicy};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OAPLCKPT";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Tabular(TabularPolicy),
    Linear(LinearSoftmaxPolicy),
}

impl From<TabularPolicy> for Checkpoint {
    fn from(p: TabularPolicy) -> Self {
        Checkpoint::Tabular(p)
    }
}

impl From<LinearSoftmaxPolicy> for Checkpoint {
    fn from(p: LinearSoftmaxPolicy) -> Self {
        Checkpoint::Linear(p)
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, checkpoint: &Checkpoint) -> std::io::Result<()> {
    let (kind, shape, prompts, featurizer, params) = match checkpoint {
        Checkpoint::Tabular(p) => (0u32, p.shape(), p.num_prompts(), 0u64, p.params()),
        Checkpoint::Linear(p) => (1u32, p.shape(), p.num_prompts(), p.featurizer().id(), p.params()),
    };
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT.to_le_bytes())?;
    out.write_all(&kind.to_le_bytes())?;
    for v in [
        shape.vocab as u64,
        shape.horizon as u64,
        prompts as u64,
        shape.eos as u64,
        featurizer,
        params.len() as u64,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut w4 = [0u8; 4];
    input.read_exact(&mut w4).map_err(bad)?;
    let format = u32::from_le_bytes(w4);
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {format}")));
    }
    input.read_exact(&mut w4).map_err(bad)?;
    let kind = u32::from_le_bytes(w4);
    let mut header = [0u64; 6];
    let mut w8 = [0u8; 8];
    for h in header.iter_mut() {
        input.read_exact(&mut w8).map_err(bad)?;
        *h = u64::from_le_bytes(w8);
    }
    let [vocab, horizon, prompts, eos, featurizer, count] = header;
    if count > 1 << 32 {
        return Err(Error::Checkpoint(format!("implausible parameter count {count}")));
    }
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        input.read_exact(&mut w8).map_err(bad)?;
        params.push(f64::from_le_bytes(w8));
    }
    let shape = SeqShape::new(vocab as usize, horizon as usize).with_eos(eos != 0);
    let wrap = |e: Error| Error::Checkpoint(e.to_string());
    match kind {
        0 => Ok(Checkpoint::Tabular(
            TabularPolicy::from_params(shape, prompts as usize, params).map_err(wrap)?,
        )),
        1 => {
            let f = Featurizer::from_id(featurizer)
                .ok_or_else(|| Error::Checkpoint(format!("unknown featurizer {featurizer}")))?;
            Ok(Checkpoint::Linear(
                LinearSoftmaxPolicy::from_params(shape, prompts as usize, f, params).map_err(wrap)?,
            ))
        }
        k => Err(Error::Checkpoint(format!("unknown policy kind {k}"))),
    }
}
