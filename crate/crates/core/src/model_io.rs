//! Bit-exact model serialization.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GRAINFG1"
//! 8       8     header length (u64)
//! 16      n     header: canonical UTF-8 JSON {config, init_seed, trained_steps}
//! 16+n    ...   payload: parameter tensors in declaration order, each as
//!               extent count (u64), extents (u64 each), then raw IEEE-754
//!               f64 values
//! end-4   4     CRC-32 (IEEE) of header + payload
//! ```
//!
//! Saving the same network twice yields byte-identical files; loading
//! reproduces every parameter bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvParams, DenseParams};
use crate::network::{LayerParams, LayerSpec, Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRAINFG1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    init_seed: u64,
    trained_steps: u64,
}

/// Serializes a network to the model byte format.
pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let header = Header {
        config: net.config.clone(),
        init_seed: net.init_seed,
        trained_steps: net.trained_steps,
    };
    let header_text =
        serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let header_bytes = header_text.as_bytes();

    let mut body = Vec::new();
    body.extend_from_slice(header_bytes);
    for t in net.param_tensors() {
        body.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);

    let mut out = Vec::with_capacity(16 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes a network to `path`; equal networks produce equal bytes.
pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode(net)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated at byte {}: need {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a model byte buffer, validating magic, CRC and tensor shapes.
pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 || &bytes[0..8] != MAGIC {
        return Err(Error::Format("bad magic (not a model file)".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Corrupt("file too short for header and trailer".into()));
    }
    let body = &bytes[16..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Corrupt("CRC-32 mismatch".into()));
    }

    let mut r = Reader { bytes, pos: 8 };
    let header_len = r.u64()? as usize;
    let header_bytes = r.take(header_len)?;
    let header_text = std::str::from_utf8(header_bytes)
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let header: Header =
        serde_json::from_str(header_text).map_err(|e| Error::Format(e.to_string()))?;
    header.config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let shapes = header.config.infer_shapes()?;
    let mut params = Vec::with_capacity(header.config.layers.len());
    for (idx, layer) in header.config.layers.iter().enumerate() {
        let in_shape: &[usize] = if idx == 0 {
            &header.config.input_shape
        } else {
            &shapes[idx - 1]
        };
        let p = match layer {
            LayerSpec::Conv { kernel_size, out_maps } => {
                let expected = vec![*out_maps, in_shape[0], *kernel_size, *kernel_size];
                let kernels = read_tensor(&mut r, &expected, "conv kernels")?;
                let biases = read_tensor(&mut r, &[*out_maps], "conv biases")?;
                LayerParams::Conv(ConvParams { kernels, biases })
            }
            LayerSpec::Dense { out_units } => {
                let expected = vec![*out_units, in_shape[0]];
                let weights = read_tensor(&mut r, &expected, "dense weights")?;
                let biases = read_tensor(&mut r, &[*out_units], "dense biases")?;
                LayerParams::Dense(DenseParams { weights, biases })
            }
            _ => LayerParams::None,
        };
        params.push(p);
    }
    if r.pos != bytes.len() - 4 {
        return Err(Error::Format(format!(
            "{} unexpected trailing payload bytes",
            bytes.len() - 4 - r.pos
        )));
    }
    Ok(Network {
        config: header.config,
        params,
        init_seed: header.init_seed,
        trained_steps: header.trained_steps,
    })
}

fn read_tensor(r: &mut Reader, expected: &[usize], what: &str) -> Result<Tensor> {
    let ndim = r.u64()? as usize;
    if ndim != expected.len() {
        return Err(Error::Format(format!(
            "{what}: {ndim} extents on disk, config implies {}",
            expected.len()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    if shape != expected {
        return Err(Error::Format(format!(
            "{what}: shape {shape:?} on disk, config implies {expected:?}"
        )));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(Error::Format(format!("{what}: non-finite value on disk")));
        }
        data.push(v);
    }
    Tensor::from_data(&shape, data)
}

/// Reads a network from `path`.
pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = fs::read(path.as_ref())?;
    decode(&bytes)
}
