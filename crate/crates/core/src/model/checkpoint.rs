//! Binary checkpoints: `MPCK` magic, format version, a JSON header, the
//! float parameters as little-endian f64, and at 4 bits the packed state
//! head weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::encoder::Int8Encoder;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::features::GlobalNormStats;
use crate::quant::{PackedInt4Matrix, QuantScheme};

pub const MAGIC: &[u8; 4] = b"MPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: Option<GlobalNormStats>,
    steps: u64,
    /// Weight schemes of every fake-quantized layer: stem, pointwise convs, projection, state head.
    weight_schemes: Vec<Option<QuantScheme>>,
    state_act_scheme: Option<QuantScheme>,
    int8: Option<Int8Encoder>,
    shapes: Vec<(usize, usize)>,
    packed_state: bool,
}

fn schemes(model: &Model) -> Vec<Option<QuantScheme>> {
    let e = &model.encoder;
    std::iter::once(&e.stem)
        .chain(e.blocks.iter().map(|b| &b.pw))
        .chain([&e.fc, &model.state_head.linear])
        .map(|q| q.scheme().cloned())
        .collect()
}

pub fn write_checkpoint<W: Write>(
    model: &mut Model,
    norm: Option<GlobalNormStats>,
    mut w: W,
) -> Result<()> {
    let packed = model.state_head.packed()?;
    let params = model.trainable(true);
    let shapes = params.iter().map(|p| p.value.dim()).collect();
    let values: Vec<f64> = params
        .iter()
        .flat_map(|p| p.value.iter().copied().collect::<Vec<_>>())
        .collect();
    let header = Header {
        config: model.config.clone(),
        norm,
        steps: model.steps,
        weight_schemes: schemes(model),
        state_act_scheme: model.state_head.act_scheme().cloned(),
        int8: model.encoder.int8.clone(),
        shapes,
        packed_state: packed.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    if let Some(p) = packed {
        p.write_to(&mut w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, Option<GlobalNormStats>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;

    let mut model = Model::new(h.config, 0)?;
    {
        let params = model.trainable(true);
        if params.len() != h.shapes.len() {
            return Err(Error::Format("parameter count mismatch".into()));
        }
        for (p, &shape) in params.into_iter().zip(&h.shapes) {
            if p.value.dim() != shape {
                return Err(Error::Format(format!(
                    "shape {:?} != {shape:?}",
                    p.value.dim()
                )));
            }
            for v in p.value.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
        }
    }
    let e = &mut model.encoder;
    let layers = std::iter::once(&mut e.stem)
        .chain(e.blocks.iter_mut().map(|b| &mut b.pw))
        .chain([&mut e.fc, &mut model.state_head.linear]);
    let mut n = 0;
    for (q, s) in layers.zip(h.weight_schemes) {
        q.set_scheme(s)?;
        n += 1;
    }
    if n != model.encoder.blocks.len() + 3 {
        return Err(Error::Format("missing quantization schemes".into()));
    }
    model.state_head.set_act_scheme(h.state_act_scheme);
    model.encoder.int8 = h.int8;
    model.steps = h.steps;
    if h.packed_state {
        let packed = PackedInt4Matrix::read_from(&mut r)?;
        let expect = model.state_head.packed()?.expect("4-bit head");
        if packed != expect {
            return Err(Error::Format(
                "packed state weights disagree with float weights".into(),
            ));
        }
    }
    Ok((model, h.norm))
}

pub fn save(model: &mut Model, norm: Option<GlobalNormStats>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, norm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Option<GlobalNormStats>)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
