//! Checkpoint container: magic "PSEG", a format version, then named
//! tensors as raw little-endian f32 with explicit shapes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "PSEG"
//! version  u16
//! count    u32      number of tensor records
//! record   u16 name length, name bytes (UTF-8), u8 rank,
//!          u32 extent per axis, then product(extents) f32 values
//! ```
//!
//! The wiring travels as a pseudo-tensor named `meta.wiring` holding
//! twelve values: input channels, class count, stem channels, the three
//! stage channels, the reweighting reduction, the three dilation rates,
//! height, width. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelParams, WiringConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSEG";
pub const CHECKPOINT_VERSION: u16 = 1;

const WIRING_KEY: &str = "meta.wiring";
const WIRING_FIELDS: usize = 12;

fn wiring_to_fields(w: &WiringConfig) -> [f32; WIRING_FIELDS] {
    [
        w.input_channels as f32,
        w.class_count as f32,
        w.conv1_channels as f32,
        w.stage_channels[0] as f32,
        w.stage_channels[1] as f32,
        w.stage_channels[2] as f32,
        w.sr_reduction as f32,
        w.el_rates[0] as f32,
        w.el_rates[1] as f32,
        w.el_rates[2] as f32,
        w.height as f32,
        w.width as f32,
    ]
}

fn field_to_usize(v: f32, what: &str) -> Result<usize> {
    // Counts are small integers; anything else marks a corrupt record.
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= (1u32 << 24) as f32) {
        return Err(Error::data(
            "checkpoint",
            format!("wiring field {what} holds {v}, expected a small nonnegative integer"),
        ));
    }
    Ok(v as usize)
}

fn wiring_from_fields(f: &[f32]) -> Result<WiringConfig> {
    if f.len() != WIRING_FIELDS {
        return Err(Error::data(
            "checkpoint",
            format!("wiring record has {} fields, expected {WIRING_FIELDS}", f.len()),
        ));
    }
    let g = |i: usize, what: &str| field_to_usize(f[i], what);
    Ok(WiringConfig {
        input_channels: g(0, "input_channels")?,
        class_count: g(1, "class_count")?,
        conv1_channels: g(2, "conv1_channels")?,
        stage_channels: [g(3, "stage0")?, g(4, "stage1")?, g(5, "stage2")?],
        sr_reduction: g(6, "sr_reduction")?,
        el_rates: [g(7, "rate0")?, g(8, "rate1")?, g(9, "rate2")?],
        height: g(10, "height")?,
        width: g(11, "width")?,
    })
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32 + 1).to_le_bytes());
    let fields = wiring_to_fields(&params.wiring);
    push_record(&mut out, WIRING_KEY, &[WIRING_FIELDS], &fields);
    for (name, tensor) in &params.tensors {
        push_record(&mut out, name, tensor.shape(), tensor.data());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(
                "checkpoint",
                format!(
                    "truncated while reading {what} at offset {} (need {n} bytes, {} left)",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::data(
            "checkpoint",
            format!("{} does not start with the PSEG magic", path.display()),
        ));
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(
            "checkpoint",
            format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut wiring_fields: Option<Vec<f32>> = None;
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::data("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, &format!("data of {name}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if name == WIRING_KEY {
            wiring_fields = Some(data);
            continue;
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::data("checkpoint", format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::data("checkpoint", format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::data(
            "checkpoint",
            format!("{} trailing bytes after the last record", bytes.len() - cur.pos),
        ));
    }
    let Some(fields) = wiring_fields else {
        return Err(Error::data("checkpoint", "missing wiring metadata record"));
    };
    let params = ModelParams {
        wiring: wiring_from_fields(&fields)?,
        tensors,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{model_forward, ModelParams, WiringConfig};
    use crate::projection::ProjectionConfig;
    use crate::synth;

    fn small_params() -> ModelParams {
        ModelParams::init(WiringConfig::scaled(16).with_frame(16, 64), 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_tensors_and_outputs() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(params.wiring, loaded.wiring);
        assert_eq!(params.tensors, loaded.tensors);

        let cfg = ProjectionConfig {
            height: 16,
            width: 64,
            ..ProjectionConfig::default()
        };
        let frame = synth::scene_frame(4, &cfg).unwrap();
        let a = model_forward(&params, &frame.channels).unwrap();
        let b = model_forward(&loaded, &frame.channels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Q';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "got: {err}");
    }

    #[test]
    fn rejects_unknown_version() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "got: {err}");
    }

    #[test]
    fn rejects_truncation_with_an_offset() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() * 2 / 3;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("offset"), "got: {err}");
    }

    #[test]
    fn rejects_trailing_bytes() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "got: {err}");
    }

    #[test]
    fn rejects_a_file_without_the_wiring_record() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pseg");

        // Rewrite the file with the wiring record dropped and the count
        // decremented.
        save_checkpoint(&params, &path).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &params.tensors {
            push_record(&mut out, name, tensor.shape(), tensor.data());
        }
        std::fs::write(&path, &out).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("wiring"), "got: {err}");
    }
}
