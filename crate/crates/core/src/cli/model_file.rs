//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ICNM"             magic
//! u32                format version (1)
//! u64                training iteration the parameters belong to
//! u64                layer count
//! per layer:         u8 kind (0 irregular, 1 regular, 2 relu),
//!                    u64 c_in, c_out, grid rows, grid cols, stride rows, stride cols
//! per conv layer:    weight tensor, shape (c_out, c_in, 1, taps)
//! per irregular:     position tensor, shape (1, c_in, taps, 2), last axis (x, y)
//! ```
//!
//! Tensors use the `ICT1` format from [`crate::tensor`].

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::irrconv::{IrregularKernel, Offset, PositionSet};
use crate::nn::{Layer, LayerKind, LayerSpec, Network, RegularKernel};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"ICNM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub iteration: u64,
    pub network: Network,
}

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::IrregularConv => 0,
        LayerKind::RegularConv => 1,
        LayerKind::Relu => 2,
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::format("truncated model header"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(read_u64(r)?).map_err(|_| Error::format("model field exceeds usize"))
}

impl ModelFile {
    pub fn new(network: Network, iteration: u64) -> Self {
        ModelFile { iteration, network }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let layers = self.network.layers();
        out.extend_from_slice(&(layers.len() as u64).to_le_bytes());
        for layer in layers {
            let s = layer.spec();
            out.push(kind_code(s.kind));
            for v in [s.c_in, s.c_out, s.grid.0, s.grid.1, s.stride.0, s.stride.1] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        for layer in layers {
            let s = layer.spec();
            let taps = s.grid.0 * s.grid.1;
            if let Some(w) = layer.weights() {
                let t = Tensor::from_vec([s.c_out, s.c_in, 1, taps], w.to_vec()).expect("weight layout");
                out.extend_from_slice(&t.to_bytes());
            }
            if let Some(p) = layer.positions() {
                let data = p.offsets().iter().flat_map(|o| [o.x, o.y]).collect();
                let t = Tensor::from_vec([1, s.c_in, taps, 2], data).expect("position layout");
                out.extend_from_slice(&t.to_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("truncated model file"))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("not a model file (bad magic)"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| Error::format("truncated model file"))?;
        let version = u32::from_le_bytes(v);
        if version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let iteration = read_u64(&mut r)?;
        let count = read_usize(&mut r)?;
        if count > r.len() {
            return Err(Error::format("layer count exceeds file size"));
        }
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let mut k = [0u8; 1];
            r.read_exact(&mut k).map_err(|_| Error::format("truncated layer table"))?;
            let kind = match k[0] {
                0 => LayerKind::IrregularConv,
                1 => LayerKind::RegularConv,
                2 => LayerKind::Relu,
                other => return Err(Error::format(format!("unknown layer kind {other}"))),
            };
            let mut f = [0usize; 6];
            for x in f.iter_mut() {
                *x = read_usize(&mut r)?;
            }
            let spec = LayerSpec {
                kind,
                c_in: f[0],
                c_out: f[1],
                grid: (f[2], f[3]),
                stride: (f[4], f[5]),
            };
            spec.validate().map_err(|e| Error::format(format!("invalid layer: {e}")))?;
            specs.push(spec);
        }
        let mut layers = Vec::with_capacity(count);
        for s in specs {
            let taps = s.grid.0 * s.grid.1;
            let mut tensor = |shape: [usize; 4]| -> Result<Tensor> {
                let t = Tensor::read_binary(&mut r)?;
                if t.shape() != shape {
                    return Err(Error::format(format!(
                        "tensor shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t)
            };
            let layer = match s.kind {
                LayerKind::IrregularConv => {
                    let w = tensor([s.c_out, s.c_in, 1, taps])?;
                    let p = tensor([1, s.c_in, taps, 2])?;
                    let offsets = p.data().chunks_exact(2).map(|c| Offset::new(c[0], c[1])).collect();
                    let positions = PositionSet::new(s.grid, s.c_in, offsets)?;
                    Layer::Irregular(IrregularKernel::new(s.c_out, w.into_vec(), positions, s.stride)?)
                }
                LayerKind::RegularConv => {
                    let w = tensor([s.c_out, s.c_in, 1, taps])?;
                    Layer::Regular(RegularKernel::new(s.c_in, s.c_out, s.grid, s.stride, w.into_vec())?)
                }
                LayerKind::Relu => Layer::Relu { channels: s.c_in },
            };
            layers.push(layer);
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after model data"));
        }
        let network = Network::new(layers).map_err(|e| Error::format(format!("invalid network: {e}")))?;
        Ok(ModelFile { iteration, network })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelFile::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{toy_plan, Arch};
    use crate::tensor::Rng;

    fn bits(layers: &[Layer]) -> Vec<u64> {
        layers
            .iter()
            .flat_map(|l| {
                let w = l.weights().unwrap_or(&[]).iter().map(|v| v.to_bits());
                let p = l
                    .positions()
                    .map(|p| p.offsets().iter().flat_map(|o| [o.x.to_bits(), o.y.to_bits()]).collect())
                    .unwrap_or_else(Vec::new);
                w.chain(p).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in [Arch::Irregular, Arch::Regular] {
            let net = Network::from_specs(&toy_plan(arch, 2, 4, 3), &mut Rng::new(8), 0.05).unwrap();
            let m = ModelFile::new(net, 17);
            let back = ModelFile::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back.iteration, 17);
            assert_eq!(back.network.specs(), m.network.specs());
            assert_eq!(bits(back.network.layers()), bits(m.network.layers()));
        }
    }

    #[test]
    fn malformed_files_are_format_errors() {
        assert!(matches!(ModelFile::from_bytes(b"ICT1...."), Err(Error::Format(_))));
        let net = Network::from_specs(&toy_plan(Arch::Irregular, 1, 2, 2), &mut Rng::new(1), 0.05).unwrap();
        let bytes = ModelFile::new(net, 0).to_bytes();
        assert!(matches!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(ModelFile::from_bytes(&extra), Err(Error::Format(_))));
        let mut bad_kind = bytes.clone();
        bad_kind[24] = 9;
        assert!(matches!(ModelFile::from_bytes(&bad_kind), Err(Error::Format(_))));
    }
}
