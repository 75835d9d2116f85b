//! Weight serialization.
//!
//! Binary layout (`weights.bin`):
//!   magic `TSCP` | format version u32 LE | parameterized-layer count u32 LE |
//!   then, for each parameterized layer in declaration order, the weight
//!   values followed by the bias values as little-endian f32.
//!
//! A JSON document alongside (`meta.json`-style, see [`WeightMeta`]) carries
//! the architecture, seed, and per-layer shapes. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Architecture, LayerParams, Network};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSCP";

/// Sidecar metadata for a serialized network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightMeta {
    pub arch: Architecture,
    pub seed: u64,
    /// (weight shape, bias shape) per parameterized layer, declaration order.
    pub shapes: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Write the binary blob and return the metadata describing it.
pub fn write_weights_bin(net: &Network<f32>, bin_path: &Path) -> Result<WeightMeta> {
    let mut w = BufWriter::new(File::create(bin_path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(WEIGHT_FORMAT_VERSION)?;
    let blocks: Vec<(&Tensor<f32>, &Tensor<f32>)> =
        net.params().iter().filter_map(|p| p.tensors()).collect();
    w.write_u32::<LittleEndian>(blocks.len() as u32)?;
    let mut shapes = Vec::with_capacity(blocks.len());
    for (weight, bias) in blocks {
        for v in weight.data() {
            w.write_f32::<LittleEndian>(*v)?;
        }
        for v in bias.data() {
            w.write_f32::<LittleEndian>(*v)?;
        }
        shapes.push((weight.shape().to_vec(), bias.shape().to_vec()));
    }
    w.flush()?;
    Ok(WeightMeta {
        arch: net.arch().clone(),
        seed: net.seed(),
        shapes,
    })
}

pub fn save_weights(net: &Network<f32>, bin_path: &Path, meta_path: &Path) -> Result<()> {
    let meta = write_weights_bin(net, bin_path)?;
    let f = BufWriter::new(File::create(meta_path)?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

/// Read a blob previously written by [`write_weights_bin`] under `meta`.
pub fn read_weights_bin(bin_path: &Path, meta: &WeightMeta) -> Result<Network<f32>> {
    meta.arch.validate()?;

    let mut r = BufReader::new(File::open(bin_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated header", bin_path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:02x?}",
            bin_path.display(),
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            bin_path.display()
        )));
    }
    let n_blocks = r.read_u32::<LittleEndian>()? as usize;
    if n_blocks != meta.shapes.len() {
        return Err(Error::Format(format!(
            "{}: {} layer blobs but metadata lists {}",
            bin_path.display(),
            n_blocks,
            meta.shapes.len()
        )));
    }

    let read_tensor = |r: &mut BufReader<File>, shape: &[usize]| -> Result<Tensor<f32>> {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::Format(format!("{}: truncated blob", bin_path.display())))?;
        Tensor::new(shape.to_vec(), data)
    };

    let mut blocks = meta.shapes.iter();
    let mut params = Vec::with_capacity(meta.arch.layers.len());
    for layer in &meta.arch.layers {
        if !layer.is_parameterized() {
            params.push(LayerParams::None);
            continue;
        }
        let (wshape, bshape) = blocks.next().ok_or_else(|| {
            Error::Format("metadata shape list shorter than layer list".into())
        })?;
        let weight = read_tensor(&mut r, wshape)?;
        let bias = read_tensor(&mut r, bshape)?;
        params.push(match layer {
            super::LayerSpec::Dense { .. } => LayerParams::Dense { weight, bias },
            super::LayerSpec::Conv2d { .. } => LayerParams::Conv { weight, bias },
            _ => unreachable!("is_parameterized covers exactly these"),
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after final blob",
            bin_path.display()
        )));
    }
    Network::from_parts(meta.arch.clone(), params, meta.seed)
}

pub fn load_weights(bin_path: &Path, meta_path: &Path) -> Result<Network<f32>> {
    let meta: WeightMeta = serde_json::from_reader(BufReader::new(File::open(meta_path)?))?;
    read_weights_bin(bin_path, &meta)
}
