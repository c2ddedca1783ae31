//! Versioned weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "LSUNETW\0"
//! version      u32      currently 1
//! header_len   u32
//! header       UTF-8 key=value lines: depth, base_filters, kernel_size,
//!              inner_activation, head_activation, input_channels,
//!              output_channels, input_size, training_epochs_consumed,
//!              tensors
//! per tensor:  u16 name_len, name, u8 ndim, ndim x u32 dims,
//!              prod(dims) x f32
//! ```
//!
//! The file must end right after the last tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Activation, ModelState, NamedTensor, UNetConfig};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"LSUNETW\0";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

pub fn encode_weights(model: &ModelState) -> Vec<u8> {
    let c = &model.config;
    let mut header = String::new();
    let _ = writeln!(header, "depth={}", c.depth);
    let _ = writeln!(header, "base_filters={}", c.base_filters);
    let _ = writeln!(header, "kernel_size={}", c.kernel_size);
    let _ = writeln!(header, "inner_activation={}", c.inner_activation.as_str());
    let _ = writeln!(header, "head_activation={}", c.head_activation.as_str());
    let _ = writeln!(header, "input_channels={}", c.input_channels);
    let _ = writeln!(header, "output_channels={}", c.output_channels);
    let _ = writeln!(header, "input_size={}", c.input_size);
    let _ = writeln!(header, "training_epochs_consumed={}", model.training_epochs_consumed);
    let _ = writeln!(header, "tensors={}", model.tensors.len());

    let mut out = Vec::with_capacity(64 + header.len() + 4 * model.parameter_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in &model.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptWeights(format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&WEIGHTS_MAGIC[..]) {
        return Err(Error::CorruptWeights("not a weight file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::CorruptWeights(format!("unsupported format version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::CorruptWeights("header is not UTF-8".into()))?;

    let mut cfg = UNetConfig::default();
    let mut epochs = 0;
    let mut count = None;
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptWeights(format!("bad header line {line:?}")))?;
        let num = || v.parse::<usize>().map_err(|_| Error::CorruptWeights(format!("bad value for {k}: {v:?}")));
        let act = || Activation::parse(v).ok_or_else(|| Error::CorruptWeights(format!("unknown activation {v:?}")));
        match k {
            "depth" => cfg.depth = num()?,
            "base_filters" => cfg.base_filters = num()?,
            "kernel_size" => cfg.kernel_size = num()?,
            "inner_activation" => cfg.inner_activation = act()?,
            "head_activation" => cfg.head_activation = act()?,
            "input_channels" => cfg.input_channels = num()?,
            "output_channels" => cfg.output_channels = num()?,
            "input_size" => cfg.input_size = num()?,
            "training_epochs_consumed" => epochs = num()?,
            "tensors" => count = Some(num()?),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::CorruptWeights("header lacks tensor count".into()))?;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptWeights("tensor name is not UTF-8".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::CorruptWeights("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptWeights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = ModelState { config: cfg, tensors, training_epochs_consumed: epochs };
    model.check_shapes()?;
    Ok(model)
}

pub fn save_weights(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

/// Loads a weight file; shapes are checked against the stored config.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads a weight file that must match `config` exactly.
pub fn load_weights_for(path: impl AsRef<Path>, config: &UNetConfig) -> Result<ModelState> {
    let model = load_weights(path)?;
    if model.config != *config {
        return Err(Error::IncompatibleWeights(format!(
            "file holds depth {} / base {} / size {}, expected depth {} / base {} / size {}",
            model.config.depth,
            model.config.base_filters,
            model.config.input_size,
            config.depth,
            config.base_filters,
            config.input_size
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_unet, forward};

    #[test]
    fn save_load_forward_identical() {
        let cfg = UNetConfig::new(2, 2, 16);
        let mut m = build_unet(&cfg, 4).unwrap();
        m.training_epochs_consumed = 7;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&m, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, m);
        let x: Vec<f32> = (0..16 * 16 * 2).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(forward(&m, &x).unwrap(), forward(&back, &x).unwrap());
    }

    #[test]
    fn depth_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&build_unet(&UNetConfig::new(4, 1, 16), 0).unwrap(), &path).unwrap();
        let err = load_weights_for(&path, &UNetConfig::new(3, 1, 16)).unwrap_err();
        assert!(matches!(err, Error::IncompatibleWeights(_)));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_weights(&build_unet(&UNetConfig::new(1, 1, 8), 0).unwrap());
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::CorruptWeights(_))), "cut {cut}");
        }
    }

    #[test]
    fn renamed_tensor_is_incompatible() {
        let mut m = build_unet(&UNetConfig::new(1, 1, 8), 0).unwrap();
        m.tensors[2].name = "enc0.convX.weight".into();
        assert!(matches!(decode_weights(&encode_weights(&m)), Err(Error::IncompatibleWeights(_))));
    }
}
