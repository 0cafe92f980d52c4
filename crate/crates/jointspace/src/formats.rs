//! Binary files: feature caches, embedding indexes and checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! Feature cache: `JSFEAT1`, modality `u8` (0 audio, 1 text), `N: u64`,
//! `D: u64`, dtype `u8` (0 f32, 1 f64), then the `N × D` matrix row-major.
//!
//! Index: `JSINDX1`, then the feature-cache header and matrix, then `N` ids,
//! each a `u32` byte length followed by UTF-8.
//!
//! Checkpoint: `JSCKPT1`, version `u32`, `d, V, U: u64`, metadata as a `u32`
//! byte length plus JSON, the parameters as f64 in the order `W_a, b_a, W_t,
//! b_t, log_scale`, and a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use jointspace_core::dataset::CaptionMode;
use jointspace_core::encoders::{Encoders, FeatureMatrix, Modality};
use jointspace_core::jointspace::{EmbeddingMatrix, ProjectionModel};
use jointspace_core::retrieval::EmbeddingIndex;
use jointspace_core::training::TrainConfig;
use jointspace_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 7] = b"JSFEAT1";
const INDEX_MAGIC: &[u8; 7] = b"JSINDX1";
const CHECKPOINT_MAGIC: &[u8; 7] = b"JSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Usage(format!("unknown dtype {other:?} (f32 or f64)"))),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "length overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn magic(&mut self, want: &[u8; 7]) -> Result<()> {
        if self.take(7)? != want {
            return Err(Error::format(
                self.path,
                format!("bad magic (expected {})", String::from_utf8_lossy(want)),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::read(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::write(path, e))
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix, modality: Modality, dtype: Dtype) {
    out.push(match modality {
        Modality::Audio => 0,
        Modality::Text => 1,
    });
    out.extend((m.rows() as u64).to_le_bytes());
    out.extend((m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => {
            out.push(0);
            for &v in m.as_slice() {
                out.extend((v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            out.push(1);
            for &v in m.as_slice() {
                out.extend(v.to_le_bytes());
            }
        }
    }
}

fn get_matrix(r: &mut Reader<'_>) -> Result<(Matrix, Modality, Dtype)> {
    let modality = match r.u8()? {
        0 => Modality::Audio,
        1 => Modality::Text,
        m => return Err(Error::format(r.path, format!("unknown modality tag {m}"))),
    };
    let n = r.len()?;
    let d = r.len()?;
    let count = n.checked_mul(d).ok_or_else(|| Error::format(r.path, "size overflow"))?;
    let (values, dtype) = match r.u8()? {
        0 => (r.f32s(count)?, Dtype::F32),
        1 => (r.f64s(count)?, Dtype::F64),
        t => return Err(Error::format(r.path, format!("unknown dtype tag {t}"))),
    };
    let m = Matrix::from_vec(n, d, values)?;
    if !m.is_finite() {
        return Err(Error::format(r.path, "non-finite values"));
    }
    Ok((m, modality, dtype))
}

pub fn write_features(path: &Path, feats: &FeatureMatrix, dtype: Dtype) -> Result<()> {
    let mut out = FEATURE_MAGIC.to_vec();
    put_matrix(&mut out, &feats.values, feats.modality, dtype);
    write_file(path, &out)
}

pub fn read_features(path: &Path) -> Result<(FeatureMatrix, Dtype)> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    r.magic(FEATURE_MAGIC)?;
    let (m, modality, dtype) = get_matrix(&mut r)?;
    r.finish()?;
    Ok((FeatureMatrix::new(m, modality), dtype))
}

/// Index embeddings are stored as f64 so they load back bit-exact.
pub fn write_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    let mut out = INDEX_MAGIC.to_vec();
    put_matrix(&mut out, &index.embeddings.values, index.modality, Dtype::F64);
    for id in &index.ids {
        let len = u32::try_from(id.len()).map_err(|_| Error::format(path, "id longer than 4 GiB"))?;
        out.extend(len.to_le_bytes());
        out.extend(id.as_bytes());
    }
    write_file(path, &out)
}

pub fn read_index(path: &Path) -> Result<EmbeddingIndex> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    r.magic(INDEX_MAGIC)?;
    let (m, modality, _) = get_matrix(&mut r)?;
    let mut ids = Vec::with_capacity(m.rows());
    for _ in 0..m.rows() {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| Error::format(path, "id is not UTF-8"))?);
    }
    r.finish()?;
    let embeddings = EmbeddingMatrix {
        values: m,
        normalized: true,
    };
    EmbeddingIndex::new(ids, embeddings, modality).map_err(|e| Error::format(path, e.to_string()))
}

/// Everything needed to rebuild the encoders and interpret the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoders: Encoders,
    pub caption_mode: CaptionMode,
    pub train: TrainConfig,
    pub scale_bounds: (f64, f64),
    pub normalize: bool,
    /// Epoch the parameters come from.
    pub epoch: usize,
}

pub fn encode_checkpoint(model: &ProjectionModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    for dim in [model.proj_dim(), model.audio_dim(), model.text_dim()] {
        out.extend((dim as u64).to_le_bytes());
    }
    let json = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    for slice in model.slices() {
        for &v in slice {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ProjectionModel, CheckpointMeta)> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::format(path, "CRC mismatch; the checkpoint is corrupted"));
    }
    let (d, v, u) = (r.len()?, r.len()?, r.len()?);
    let area = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| Error::format(path, "size overflow"));
    let (wa, wt) = (area(d, v)?, area(d, u)?);
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let mut model = ProjectionModel {
        w_audio: Matrix::from_vec(d, v, r.f64s(wa)?)?,
        b_audio: r.f64s(d)?,
        w_text: Matrix::from_vec(d, u, r.f64s(wt)?)?,
        b_text: r.f64s(d)?,
        log_scale: 0.0,
        scale_bounds: meta.scale_bounds,
        normalize: meta.normalize,
    };
    model.log_scale = r.f64s(1)?[0];
    r.finish()?;
    if !model.is_finite() {
        return Err(Error::format(path, "non-finite parameters"));
    }
    Ok((model, meta))
}

pub fn write_checkpoint(path: &Path, model: &ProjectionModel, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &encode_checkpoint(model, meta))
}

pub fn read_checkpoint(path: &Path) -> Result<(ProjectionModel, CheckpointMeta)> {
    decode_checkpoint(&read_file(path)?, path)
}
