//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `U2O1`, then one record per tensor until end of file:
//! name length (`u32`), UTF-8 name, rank (`u32`), dims (`u32` each), then the values
//! in row-major order as little-endian IEEE-754 `f32`. All integers are little-endian.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Layer, MlpSpec, NetworkParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"U2O1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for t in tensors {
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.values.len());
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend((d as u32).to_le_bytes());
        }
        for v in &t.values {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<Tensor>, String> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or("missing U2O1 magic")?;
    let mut cur = Cursor { buf: rest };
    let mut out = Vec::new();
    while !cur.buf.is_empty() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor { name, dims, values });
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err(format!(
                "truncated record: wanted {n} bytes, {} left",
                self.buf.len()
            ));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn params_to_tensors(params: &NetworkParams) -> Vec<Tensor> {
    params
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                Tensor {
                    name: format!("layer{i}.weight"),
                    dims: l.weight.shape().to_vec(),
                    values: l.weight.iter().map(|&v| v as f32).collect(),
                },
                Tensor {
                    name: format!("layer{i}.bias"),
                    dims: vec![l.bias.len()],
                    values: l.bias.iter().map(|&v| v as f32).collect(),
                },
            ]
        })
        .collect()
}

pub fn tensors_to_params(
    spec: &MlpSpec,
    tensors: &[Tensor],
) -> std::result::Result<NetworkParams, String> {
    let n = spec.num_layers();
    if tensors.len() != 2 * n {
        return Err(format!(
            "expected {} tensors, found {}",
            2 * n,
            tensors.len()
        ));
    }
    let mut layers = Vec::with_capacity(n);
    for (l, pair) in tensors.chunks_exact(2).enumerate() {
        let (w, b) = (&pair[0], &pair[1]);
        let (out_dim, in_dim) = (spec.widths[l + 1], spec.widths[l]);
        if w.name != format!("layer{l}.weight") || w.dims != [out_dim, in_dim] {
            return Err(format!("bad weight record `{}` {:?}", w.name, w.dims));
        }
        if b.name != format!("layer{l}.bias") || b.dims != [out_dim] {
            return Err(format!("bad bias record `{}` {:?}", b.name, b.dims));
        }
        let weight = Array2::from_shape_vec(
            (out_dim, in_dim),
            w.values.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| e.to_string())?;
        let bias = Array1::from_iter(b.values.iter().map(|&v| v as f64));
        layers.push(Layer { weight, bias });
    }
    Ok(NetworkParams { layers })
}

pub fn encode_params(params: &NetworkParams) -> Vec<u8> {
    encode_tensors(&params_to_tensors(params))
}

pub fn save_params(path: &Path, params: &NetworkParams) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path, spec: &MlpSpec) -> Result<NetworkParams> {
    let bytes = std::fs::read(path)?;
    let fmt = |msg: String| Error::Format {
        path: path.to_owned(),
        msg,
    };
    let tensors = decode_tensors(&bytes).map_err(fmt)?;
    tensors_to_params(spec, &tensors).map_err(fmt)
}
