//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MTFACKPT" | version u32
//! config: channels, gru_units, gru_layers, n_mels, chunk_frames,
//!         chunk_shift, n_scales, kernel (u32 each), dropout f64,
//!         threshold f64, mask kind u32, label (u32 length + UTF-8)
//! record count u32
//! record: name (u32 length + UTF-8), rank u32, dims u32×rank, data f32×len
//! ```
//!
//! Batchnorm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var` records.

use std::collections::HashMap;
use std::path::Path;

use super::config::{MaskKind, ModelConfig};
use super::network::Mtfa;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"MTFACKPT";
pub const CKPT_VERSION: u32 = 1;
const KERNEL: u32 = 3;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!("unexpected end of file at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            kind: "checkpoint",
            detail: "invalid UTF-8 in name".into(),
        })
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(buf, name);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Named tensors of a model, in store order.
fn records(model: &Mtfa) -> Vec<(String, Tensor)> {
    let store = model.params();
    let mut out: Vec<(String, Tensor)> = store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for s in store.all_stats() {
        out.push((format!("{}.running_mean", s.name), s.mean.clone()));
        out.push((format!("{}.running_var", s.name), s.var.clone()));
    }
    out
}

pub fn encode_checkpoint(model: &Mtfa) -> Vec<u8> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        c.channels,
        c.gru_units,
        c.gru_layers,
        c.n_mels,
        c.chunk_frames,
        c.chunk_shift,
        c.n_scales,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&KERNEL.to_le_bytes());
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend_from_slice(&c.threshold.to_le_bytes());
    buf.extend_from_slice(&c.mask.code().to_le_bytes());
    put_str(&mut buf, &c.label);
    let recs = records(model);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in &recs {
        put_record(&mut buf, name, t);
    }
    buf
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Mtfa) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

fn decode_config(r: &mut Reader) -> Result<ModelConfig> {
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: "missing MTFACKPT magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let mut ints = [0usize; 7];
    for v in &mut ints {
        *v = r.u32()? as usize;
    }
    let kernel = r.u32()?;
    if kernel != KERNEL {
        return Err(Error::CheckpointMismatch {
            record: "config.kernel".into(),
            detail: format!("kernel {kernel} is not supported (expected {KERNEL})"),
        });
    }
    let dropout = r.f64()?;
    let threshold = r.f64()?;
    let code = r.u32()?;
    let mask = MaskKind::from_code(code).ok_or_else(|| Error::CheckpointMismatch {
        record: "config.mask".into(),
        detail: format!("unknown mask kind {code}"),
    })?;
    let label = r.string()?;
    let [channels, gru_units, gru_layers, n_mels, chunk_frames, chunk_shift, n_scales] = ints;
    Ok(ModelConfig {
        label,
        channels,
        gru_units,
        gru_layers,
        n_mels,
        chunk_frames,
        chunk_shift,
        n_scales,
        dropout,
        threshold,
        mask,
    })
}

/// Name, shape and values of one stored tensor.
type Record = (String, Vec<usize>, Vec<f64>);

fn decode_records(r: &mut Reader) -> Result<Vec<Record>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, dims, data));
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: format!("{} trailing bytes", r.bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Copies records into `model`, checking every name and shape against its
/// architecture.
fn install(model: &mut Mtfa, recs: Vec<Record>) -> Result<()> {
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> =
        recs.into_iter().map(|(n, d, v)| (n, (d, v))).collect();
    let mut fetch = |name: &str, expected: &[usize]| -> Result<Vec<f64>> {
        let (dims, data) = by_name.remove(name).ok_or_else(|| Error::CheckpointMismatch {
            record: name.into(),
            detail: "missing from checkpoint".into(),
        })?;
        if dims != expected {
            return Err(Error::CheckpointMismatch {
                record: name.into(),
                detail: format!("shape {dims:?} does not match architecture {expected:?}"),
            });
        }
        Ok(data)
    };
    let store = model.params_mut();
    for p in store.params_mut() {
        let data = fetch(&p.name, p.value.shape())?;
        p.value.data_mut().copy_from_slice(&data);
    }
    for s in store.all_stats_mut() {
        let m = fetch(&format!("{}.running_mean", s.name), s.mean.shape())?;
        let v = fetch(&format!("{}.running_var", s.name), s.var.shape())?;
        s.mean.data_mut().copy_from_slice(&m);
        s.var.data_mut().copy_from_slice(&v);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::CheckpointMismatch {
            record: extra.clone(),
            detail: "not part of the architecture".into(),
        });
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mtfa> {
    let mut r = Reader { bytes, pos: 0 };
    let config = decode_config(&mut r)?;
    let mut model = Mtfa::new(config, 0)?;
    let recs = decode_records(&mut r)?;
    install(&mut model, recs)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mtfa> {
    decode_checkpoint(&std::fs::read(path)?)
}

impl Mtfa {
    /// Loads weights from a checkpoint into this architecture, ignoring the
    /// file's stored config and validating every record shape.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        decode_config(&mut r)?;
        let recs = decode_records(&mut r)?;
        install(self, recs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(label: &str) -> ModelConfig {
        ModelConfig {
            label: label.into(),
            channels: 2,
            gru_units: 2,
            n_mels: 8,
            chunk_frames: 8,
            chunk_shift: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let model = Mtfa::new(tiny("beep"), 3).unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..8], b"MTFACKPT");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in model.params().params().iter().zip(back.params().params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn mismatch_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &Mtfa::new(tiny("a"), 1).unwrap()).unwrap();
        let mut wider = Mtfa::new(ModelConfig { channels: 3, ..tiny("a") }, 1).unwrap();
        match wider.load_weights(&p) {
            Err(Error::CheckpointMismatch { record, .. }) => assert_eq!(record, "stem.weight"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = encode_checkpoint(&Mtfa::new(tiny("a"), 1).unwrap());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"MTFACKP").is_err());
    }
}
