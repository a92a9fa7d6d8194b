//! File formats: DTF1 tensors, generator checkpoints, atomic writes.
//!
//! DTF1 layout: magic `DTF1`, rank as `u8`, `rank` dims as little-endian
//! `u64`, then `prod(dims)` little-endian `f32` values in row-major order.
//!
//! Checkpoint layout: magic `DCK1`, `u32` version, 32-byte SHA-256 of the
//! resolved training config, `u64` step count, then parameters, first
//! moments and second moments, each as a `u64` length followed by
//! little-endian `f64` values. Moments are stored at full precision so a
//! resumed run continues bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{DriftError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCK1";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a tensor to DTF1, narrowing to `f32`.
pub fn encode_tensor(t: &ArrayD<f64>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(DriftError::invalid(format!("rank {} exceeds 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(5 + 8 * t.ndim() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DriftError::Format(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DriftError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parses DTF1 bytes into an `f64` tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(DriftError::Format("bad magic, expected DTF1".into()));
    }
    let rank = r.take(1, "rank")?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(usize::try_from(r.u64("dims")?).map_err(|_| DriftError::Format("dimension overflows usize".into()))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| DriftError::Format("element count overflows".into()))?;
    let payload = r.take(count * 4, "payload")?;
    r.finish()?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| DriftError::Format(e.to_string()))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path).map_err(|e| DriftError::invalid(format!("cannot read {}: {e}", path.display())))?;
    decode_tensor(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_tensor(path: &Path, t: &ArrayD<f64>) -> Result<()> {
    write_atomic(path, &encode_tensor(t)?)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| DriftError::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Generator parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let n = self.params.len() + self.m.len() + self.v.len();
        let mut out = Vec::with_capacity(4 + 4 + 32 + 8 + 24 + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        for vec in [&self.params, &self.m, &self.v] {
            out.extend_from_slice(&(vec.len() as u64).to_le_bytes());
            for x in vec.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(DriftError::Format("bad magic, expected DCK1".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DriftError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let step = r.u64("step")?;
        let mut vecs = Vec::with_capacity(3);
        for what in ["parameters", "first moments", "second moments"] {
            let len = r.u64(what)? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| DriftError::Format("length overflows".into()))?, what)?;
            vecs.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
        }
        r.finish()?;
        let v = vecs.pop().expect("three vectors");
        let m = vecs.pop().expect("three vectors");
        let params = vecs.pop().expect("three vectors");
        if m.len() != params.len() || v.len() != params.len() {
            return Err(DriftError::Format("optimizer state length differs from parameters".into()));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            params,
            m,
            v,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DriftError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}
