//! Checkpoint container.
//!
//! ```text
//! CHIRAL-DET-CHECKPOINT
//! version=1
//! payload_bytes=<n>
//! <model and train config as key=value lines>
//! end
//! <payload: n bytes>
//! <SHA-256 of everything above: 32 bytes>
//! ```
//!
//! The payload holds, for each named tensor in parameter order, the name
//! (u32 length + UTF-8), the shape (u32 rank + u64 dims) and the values
//! (u64 count + f64 little-endian). Then the optimizer step (u64) and the
//! two moment vectors (u64 count + f64 values each).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{apply_config_text, Adam, ModelConfig, ModelParams, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::Params;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "CHIRAL-DET-CHECKPOINT";
const HEADER_END: &str = "end\n";
const DIGEST_LEN: usize = 32;

/// Model, optimizer state and the training configuration it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: Adam,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams, train: TrainConfig) -> Self {
        let adam = Adam::new(params.num_params());
        Checkpoint { params, adam, train }
    }
}

fn encode_payload(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    for t in ck.params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_values(&mut out, t.data);
    }
    out.extend_from_slice(&ck.adam.step.to_le_bytes());
    put_values(&mut out, &ck.adam.m);
    put_values(&mut out, &ck.adam.v);
    out
}

fn put_values(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let payload = encode_payload(ck);
    let mut out = format!(
        "{MAGIC}\nversion={CHECKPOINT_VERSION}\npayload_bytes={}\n{}{}{HEADER_END}",
        payload.len(),
        ck.params.config.to_kv(),
        ck.train.to_kv()
    )
    .into_bytes();
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_checkpoint(&bytes)?)
}

/// Loads and requires the stored model config to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ensure_config(&ck, expected)?;
    Ok(ck)
}

/// Fails with [`CheckpointError::ConfigMismatch`] listing every differing key.
pub fn ensure_config(ck: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    if &ck.params.config != expected {
        let diff: Vec<String> = ck
            .params
            .config
            .to_kv()
            .lines()
            .zip(expected.to_kv().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint {a}, requested {b}"))
            .collect();
        return Err(CheckpointError::ConfigMismatch(diff.join("; ")).into());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self) -> std::result::Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn header_line<'a>(r: &mut Reader<'a>) -> std::result::Result<&'a str, CheckpointError> {
    let rest = &r.bytes[r.at..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::Truncated)?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;
    r.at += end + 1;
    Ok(line)
}

fn header_value<'a>(line: &'a str, key: &str) -> std::result::Result<&'a str, CheckpointError> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| CheckpointError::Header(format!("expected `{key}=…`, found `{line}`")))
}

pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if !bytes.starts_with(MAGIC.as_bytes()) || header_line(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version: u32 = header_value(header_line(&mut r)?, "version")?
        .parse()
        .map_err(|_| CheckpointError::Header("unreadable version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload_len: usize = header_value(header_line(&mut r)?, "payload_bytes")?
        .parse()
        .map_err(|_| CheckpointError::Header("unreadable payload size".into()))?;
    let mut config_text = String::new();
    loop {
        let line = header_line(&mut r)?;
        if line == HEADER_END.trim_end() {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let mut config = ModelConfig::desk();
    let mut train = TrainConfig::default();
    apply_config_text(&config_text, &mut config, &mut train)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let body_end = r.at + payload_len;
    match bytes.len().cmp(&(body_end + DIGEST_LEN)) {
        std::cmp::Ordering::Less => return Err(CheckpointError::Truncated),
        std::cmp::Ordering::Greater => {
            return Err(CheckpointError::Header("trailing bytes after checksum".into()))
        }
        std::cmp::Ordering::Equal => {}
    }

    let mut params =
        ModelParams::new(&config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    let mut payload = Reader {
        bytes: &bytes[..body_end],
        at: r.at,
    };
    let mut flat = Vec::with_capacity(params.num_params());
    for (name, shape) in &expected {
        let len = payload.u32()? as usize;
        let found_name = String::from_utf8_lossy(payload.take(len)?).into_owned();
        if &found_name != name {
            return Err(CheckpointError::TensorName {
                found: found_name,
                expected: name.clone(),
            });
        }
        let rank = payload.u32()? as usize;
        let found_shape = (0..rank)
            .map(|_| payload.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if &found_shape != shape {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                found: found_shape,
                expected: shape.clone(),
            });
        }
        let values = payload.values()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                found: vec![values.len()],
                expected: shape.clone(),
            });
        }
        flat.extend(values);
    }
    let step = payload.u64()?;
    let m = payload.values()?;
    let v = payload.values()?;
    if m.len() != flat.len() || v.len() != flat.len() {
        return Err(CheckpointError::Header(
            "optimizer moments do not match parameter count".into(),
        ));
    }
    if payload.at != body_end {
        return Err(CheckpointError::Header("payload size disagrees with header".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::Checksum);
    }
    params.set_flat(&flat);
    Ok(Checkpoint {
        params,
        adam: Adam { m, v, step },
        train,
    })
}
