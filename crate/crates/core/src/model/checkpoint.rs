//! Checkpoint container:
//!
//! ```text
//! HSACN-CKPT v1\n
//! {"dtype":"f64","config":{…},"corpus_hash":"…","dimensions":{…},
//!  "tensors":[{"name":"embedding","shape":[V,d]},…],"meta":…}\n
//! <concatenated little-endian arrays in header order>
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::{Dimensions, ModelConfig};
use super::params::HsacnParams;
use crate::error::{HsacnError, Result};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "HSACN-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Hash of the corpus cache the parameters were trained on.
    pub corpus_hash: String,
    pub params: HsacnParams<Tensor<T>>,
    /// Free-form training metadata (best epoch, validation RMSE, …).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: DType,
    config: ModelConfig,
    corpus_hash: String,
    dimensions: Dimensions,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_checkpoint<T: Real, W: Write>(ckpt: &Checkpoint<T>, mut w: W) -> Result<()> {
    ckpt.params.check(&ckpt.config)?;
    let named = ckpt.params.named();
    let header = Header {
        dtype: T::DTYPE,
        config: ckpt.config,
        corpus_hash: ckpt.corpus_hash.clone(),
        dimensions: ckpt.params.dimensions(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for (_, t) in &named {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint, converting to `T` when it was stored at the other
/// precision.
pub fn read_checkpoint<T: Real, R: BufRead>(mut r: R) -> Result<Checkpoint<T>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(HsacnError::Format(format!(
            "expected `{CHECKPOINT_MAGIC}` header, found `{}`",
            line.trim_end()
        )));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    match header.dtype {
        DType::F64 => decode::<f64>(header, &body).map(|c| convert(c)),
        DType::F32 => decode::<f32>(header, &body).map(|c| convert(c)),
    }
}

fn convert<S: Real, T: Real>(c: Checkpoint<S>) -> Checkpoint<T> {
    Checkpoint {
        config: c.config,
        corpus_hash: c.corpus_hash,
        params: c.params.cast(),
        meta: c.meta,
    }
}

fn decode<S: Real>(header: Header, body: &[u8]) -> Result<Checkpoint<S>> {
    let want = HsacnParams::<Tensor<S>>::expected_shapes(&header.config, header.dimensions);
    if header.tensors.len() != want.len() {
        return Err(HsacnError::Format(format!(
            "checkpoint lists {} tensors, expected {}",
            header.tensors.len(),
            want.len()
        )));
    }
    let width = S::DTYPE.bytes();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(want.len());
    for (entry, shape) in header.tensors.iter().zip(&want) {
        if &entry.shape != shape {
            return Err(HsacnError::Format(format!(
                "tensor {} has shape {:?}, expected {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let end = offset + n * width;
        let bytes = body
            .get(offset..end)
            .ok_or_else(|| HsacnError::Format(format!("checkpoint truncated inside {}", entry.name)))?;
        let data = bytes.chunks_exact(width).map(S::read_le).collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != body.len() {
        return Err(HsacnError::Format(format!("{} trailing bytes in checkpoint", body.len() - offset)));
    }
    // Rebuild with zero tables of the right shape, then fill in order.
    let mut params = template::<S>(&header.config, header.dimensions)?;
    let names = params.names();
    for ((dst, src), (name, entry)) in params
        .fields_mut()
        .into_iter()
        .zip(tensors)
        .zip(names.into_iter().zip(&header.tensors))
    {
        if name != entry.name {
            return Err(HsacnError::Format(format!("tensor `{}` where `{name}` was expected", entry.name)));
        }
        *dst = src;
    }
    params.check(&header.config)?;
    Ok(Checkpoint {
        config: header.config,
        corpus_hash: header.corpus_hash,
        params,
        meta: header.meta,
    })
}

fn template<S: Real>(cfg: &ModelConfig, dims: Dimensions) -> Result<HsacnParams<Tensor<S>>> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    HsacnParams::init(cfg, dims, 0.0, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample<T: Real>() -> Checkpoint<T> {
        let dims = Dimensions {
            vocab: 9,
            users: 2,
            items: 3,
        };
        let cfg = ModelConfig::tiny();
        Checkpoint {
            config: cfg,
            corpus_hash: "abc".into(),
            params: HsacnParams::init(&cfg, dims, 3.25, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
            meta: serde_json::json!({"best_epoch": 2}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample::<f64>();
        let mut bytes = Vec::new();
        write_checkpoint(&c, &mut bytes).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);

        let c32 = sample::<f32>();
        let mut bytes = Vec::new();
        write_checkpoint(&c32, &mut bytes).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, c32);
        let widened: Checkpoint<f64> = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(widened.params.global_bias.data(), &[3.25]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = sample::<f64>();
        let mut bytes = Vec::new();
        write_checkpoint(&c, &mut bytes).unwrap();
        assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64, _>(&extra[..]).is_err());
        assert!(read_checkpoint::<f64, _>(&b"HSACN-CKPT v0\n{}\n"[..]).is_err());
    }
}
