//! DeskNet: the fixed reference embedding CNN.
//!
//! conv1 16@3x3/s1/p1 -> relu -> conv2 32@3x3/s2/p1 -> relu ->
//! conv3 64@3x3/s2/p1 -> relu -> global avgpool -> dense(128) -> l2-normalize.
//!
//! Weights come either from seeded He initialization (xoshiro256** PRNG,
//! zero-mean Gaussian with variance 2/fan-in, zero biases) or from the `DNW1`
//! weight file, which stores parameters as little-endian f32. The three
//! convolution layers are tagged for activation recording.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::network::{Layer, Network};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Canonical input: 3x64x64 RGB, pixels normalized by `x/127.5 - 1`.
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: (usize, usize) = (64, 64);
/// Post-normalization value of a black pixel; occlusions paint this.
pub const BLACK: f64 = -1.0;
pub const EMBEDDING_DIM: usize = 128;

const MAGIC: &[u8; 4] = b"DNW1";

/// `(name, shape)` of every parameter tensor, in file and draw order.
const PARAM_SPECS: [(&str, &[usize]); 8] = [
    ("conv1.weight", &[16, 3, 3, 3]),
    ("conv1.bias", &[16]),
    ("conv2.weight", &[32, 16, 3, 3]),
    ("conv2.bias", &[32]),
    ("conv3.weight", &[64, 32, 3, 3]),
    ("conv3.bias", &[64]),
    ("dense.weight", &[128, 64]),
    ("dense.bias", &[128]),
];

/// The full parameter set of the fixed architecture.
#[derive(Debug, Clone)]
pub struct DeskNetParams {
    pub tensors: Vec<(String, Tensor)>,
}

impl DeskNetParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .1
    }

    fn validate(&self) -> Result<()> {
        if self.tensors.len() != PARAM_SPECS.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                PARAM_SPECS.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in PARAM_SPECS {
            let found = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if found.1.shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, architecture wants {shape:?}",
                    found.1.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Wire the fixed architecture around a parameter set.
pub fn assemble(params: DeskNetParams) -> Result<Network> {
    params.validate()?;
    let conv = |name: &str, stride: usize| Layer::Conv {
        name: name.to_string(),
        kernels: params.get(&format!("{name}.weight")).clone(),
        bias: params.get(&format!("{name}.bias")).clone(),
        stride,
        padding: 1,
    };
    let layers = vec![
        conv("conv1", 1),
        Layer::Relu,
        conv("conv2", 2),
        Layer::Relu,
        conv("conv3", 2),
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Dense {
            weights: params.get("dense.weight").clone(),
            bias: params.get("dense.bias").clone(),
        },
        Layer::L2Normalize,
    ];
    Network::new(
        layers,
        vec!["conv1".into(), "conv2".into(), "conv3".into()],
        INPUT_CHANNELS,
        INPUT_SIZE,
    )
}

/// He-initialized DeskNet from a 64-bit seed.
pub fn build_desknet(seed: u64) -> Network {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let tensors = PARAM_SPECS
        .iter()
        .map(|(name, shape)| {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(shape.to_vec())
            } else {
                // fan-in: everything but the leading output dimension.
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("valid std dev");
                Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng))
            };
            (name.to_string(), tensor)
        })
        .collect();
    assemble(DeskNetParams { tensors }).expect("fixed architecture is self-consistent")
}

/// Extract the parameter set back out of a network built by [`assemble`].
pub fn params_of(net: &Network) -> DeskNetParams {
    let mut tensors = Vec::with_capacity(PARAM_SPECS.len());
    for layer in net.layers() {
        match layer {
            Layer::Conv {
                name, kernels, bias, ..
            } => {
                tensors.push((format!("{name}.weight"), kernels.clone()));
                tensors.push((format!("{name}.bias"), bias.clone()));
            }
            Layer::Dense { weights, bias } => {
                tensors.push(("dense.weight".to_string(), weights.clone()));
                tensors.push(("dense.bias".to_string(), bias.clone()));
            }
            _ => {}
        }
    }
    DeskNetParams { tensors }
}

/// Serialize to the `DNW1` format: magic, u32 tensor count, then per tensor a
/// u32 name length + UTF-8 name, u32 rank, u32 dims, and little-endian f32
/// values in row-major order. Values are rounded to f32 on write.
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let params = params_of(net);
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated weight file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a `DNW1` file and assemble the fixed architecture around it.
pub fn load_weights(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected DNW1".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after declared payload".into()));
    }
    assemble(DeskNetParams { tensors })
}

/// Unit-norm 128-dim embedding of an image tensor. Equal to
/// `forward(net, image).embedding` but skips activation recording.
pub fn embed(net: &Network, image: &Tensor) -> Result<Tensor> {
    crate::network::run_embedding(net, image)
}

/// Map 8-bit pixel values into the network's `[-1, 1]` input range.
pub fn normalize_pixel(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}
