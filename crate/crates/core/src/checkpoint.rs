//! Little-endian weights file.
//!
//! ```text
//! "SCIW"            magic
//! u32               format version (1)
//! u32               stage count T
//! u32               estimator layer count
//!   per layer:      u32 c_out, u32 c_in, f32[c_out·c_in·9] kernel, f32[c_out] bias
//! u32               calibrator layer count
//!   per layer:      same encoding
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SciError};
use crate::imaging::temp_sibling;
use crate::model::{EstimatorArch, ModelWeights};
use crate::ops::ConvParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCIW";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_layers(out: &mut Vec<u8>, layers: &[ConvParams]) {
    put_u32(out, layers.len() as u32);
    for layer in layers {
        put_u32(out, layer.c_out() as u32);
        put_u32(out, layer.c_in() as u32);
        for v in layer.kernel.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, weights.arch.stages as u32);
    put_layers(&mut out, &weights.estimator);
    put_layers(&mut out, &weights.calibrator);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SciError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| SciError::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn layers(&mut self, name: &str) -> Result<Vec<ConvParams>> {
        let count = self.u32(&format!("{name} layer count"))? as usize;
        let mut layers = Vec::new();
        for i in 0..count {
            let c_out = self.u32(&format!("{name} layer {i} c_out"))? as usize;
            let c_in = self.u32(&format!("{name} layer {i} c_in"))? as usize;
            if c_out == 0 || c_in == 0 {
                return Err(SciError::ArchMismatch(format!("{name} layer {i} has a zero channel count")));
            }
            let kernel = self.f32s(c_out * c_in * 9, &format!("{name} layer {i} kernel"))?;
            let bias = self.f32s(c_out, &format!("{name} layer {i} bias"))?;
            let kernel = Tensor::new([c_out, c_in, 3, 3], kernel)?;
            layers.push(ConvParams::new(kernel, bias)?);
        }
        Ok(layers)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 4 {
        return Err(SciError::Truncated("file shorter than the magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(SciError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SciError::UnsupportedVersion(version));
    }
    let stages = r.u32("stage count")? as usize;
    let estimator = r.layers("estimator")?;
    let calibrator = r.layers("calibrator")?;
    if r.pos != bytes.len() {
        return Err(SciError::ArchMismatch(format!(
            "{} trailing bytes after the calibrator section",
            bytes.len() - r.pos
        )));
    }
    if estimator.is_empty() {
        return Err(SciError::ArchMismatch("estimator has no layers".into()));
    }
    let mut channels = vec![estimator[0].c_in()];
    for (i, layer) in estimator.iter().enumerate() {
        if layer.c_in() != *channels.last().unwrap() {
            return Err(SciError::ArchMismatch(format!(
                "estimator layer {i} expects {} input channels, previous layer produces {}",
                layer.c_in(),
                channels.last().unwrap()
            )));
        }
        channels.push(layer.c_out());
    }
    let arch = EstimatorArch { channels, stages };
    arch.validate()
        .map_err(|e| SciError::ArchMismatch(e.to_string()))?;
    let weights = ModelWeights {
        arch,
        estimator,
        calibrator,
    };
    weights.validate().map_err(|e| match e {
        SciError::ArchMismatch(m) => SciError::ArchMismatch(m),
        other => SciError::ArchMismatch(other.to_string()),
    })?;
    Ok(weights)
}

/// Writes the weights file atomically (temporary sibling, then rename).
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    weights.validate()?;
    let tmp = temp_sibling(path);
    fs::write(&tmp, encode_weights(weights))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    decode_weights(&fs::read(path)?)
}
