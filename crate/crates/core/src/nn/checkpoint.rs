//! Checkpoint container: header plus a named-tensor list with f32
//! payloads, bit-exact across write/read cycles.
//!
//! Layout, all integers little-endian u32:
//! magic `TDCK`, version, in_channels, base_width, mid_width,
//! freq_features, tensor count; then per tensor: name length + UTF-8
//! name, rank, dims, f32 samples.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{tensor_names, Denoiser, DenoiserConfig};
use crate::nn::tensor::{Tensor, TensorSet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TDCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Denoiser) -> Result<()> {
    let path = path.as_ref();
    let names = tensor_names();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [
        VERSION,
        model.cfg.in_channels as u32,
        model.cfg.base_width as u32,
        model.cfg.mid_width as u32,
        model.cfg.freq_features as u32,
        model.params.tensors.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (name, tensor) in names.iter().zip(&model.params.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Denoiser> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;

    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Truncated {
                path: path.into(),
                expected: (*cur + n) as u64,
                found: bytes.len() as u64,
            });
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let take_u32 = |cur: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
    };

    let magic: [u8; 4] = take(&mut cur, 4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = take_u32(&mut cur)?;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg = DenoiserConfig {
        in_channels: take_u32(&mut cur)? as usize,
        base_width: take_u32(&mut cur)? as usize,
        mid_width: take_u32(&mut cur)? as usize,
        freq_features: take_u32(&mut cur)? as usize,
    };
    cfg.validate()?;
    let count = take_u32(&mut cur)? as usize;

    let expected_names = tensor_names();
    if count != expected_names.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {count} tensors, expected {}",
            expected_names.len()
        )));
    }

    let reference = Denoiser::new(cfg, 0)?;
    let mut tensors = Vec::with_capacity(count);
    for (idx, expected_name) in expected_names.iter().enumerate() {
        let name_len = take_u32(&mut cur)? as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::InvalidArgument("non-utf8 tensor name".into()))?
            .to_string();
        if &name != expected_name {
            return Err(Error::InvalidArgument(format!(
                "tensor {idx} named {name:?}, expected {expected_name:?}"
            )));
        }
        let rank = take_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut cur)? as usize);
        }
        if shape != reference.params.tensors[idx].shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", reference.params.tensors[idx].shape()),
                got: format!("{shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        let payload = take(&mut cur, len * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite weights in tensor {name}")));
        }
        tensors.push(Tensor::from_vec(&shape, data));
    }
    if cur != bytes.len() {
        return Err(Error::InvalidArgument(
            "trailing bytes after tensor list".into(),
        ));
    }
    Ok(Denoiser {
        cfg,
        params: TensorSet { tensors },
    })
}
