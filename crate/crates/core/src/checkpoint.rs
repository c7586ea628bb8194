//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"KEHN"
//! version u32            (currently 1)
//! precision u8           (bytes per value: 8 = f64, 4 = f32)
//! config  u64 len + JSON (TrainConfig)
//! vocab   u64 len + JSON (id-ordered token list)
//! keys    u64 len + JSON (knowledge key list, row order)
//! n_sections u32
//! section: u32 name_len + name, u32 rank, u64 dims.., values LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::matcher::ModelParams;
use crate::tensor::{Real, Tensor, TensorError, REAL_WIDTH};
use crate::text::Vocabulary;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 4] = b"KEHN";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint stores {file}-byte values but this build uses {built}-byte values")]
    PrecisionMismatch { file: u8, built: u8 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<W: Write>(w: &mut W, value: &impl serde::Serialize) -> std::io::Result<()> {
    let bytes = serde_json::to_vec(value).expect("serializable");
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(&bytes)
}

fn read_json<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> CheckpointResult<T> {
    let len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    serde_json::from_slice(&buf).map_err(|e| CheckpointError::Format(e.to_string()))
}

/// Writes the config snapshot, vocabulary, knowledge keys, and every
/// parameter tensor. Byte-for-byte deterministic for identical inputs.
pub fn save(
    path: impl AsRef<Path>,
    params: &ModelParams,
    vocab: &Vocabulary,
) -> CheckpointResult<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);

    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err(path))?;
    w.write_u8(REAL_WIDTH).map_err(io_err(path))?;
    write_json(&mut w, &params.config).map_err(io_err(path))?;
    write_json(&mut w, &vocab.tokens()).map_err(io_err(path))?;
    write_json(&mut w, &params.knowledge_keys()).map_err(io_err(path))?;

    let sections: Vec<(&str, &Tensor)> = params.iter().collect();
    w.write_u32::<LittleEndian>(sections.len() as u32)
        .map_err(io_err(path))?;
    for (name, tensor) in sections {
        w.write_u32::<LittleEndian>(name.len() as u32)
            .map_err(io_err(path))?;
        w.write_all(name.as_bytes()).map_err(io_err(path))?;
        w.write_u32::<LittleEndian>(tensor.shape().len() as u32)
            .map_err(io_err(path))?;
        for &dim in tensor.shape() {
            w.write_u64::<LittleEndian>(dim as u64)
                .map_err(io_err(path))?;
        }
        for &v in tensor.values() {
            write_real(&mut w, v).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[cfg(not(feature = "single-precision"))]
fn write_real<W: Write>(w: &mut W, v: Real) -> std::io::Result<()> {
    w.write_f64::<LittleEndian>(v)
}

#[cfg(feature = "single-precision")]
fn write_real<W: Write>(w: &mut W, v: Real) -> std::io::Result<()> {
    w.write_f32::<LittleEndian>(v)
}

#[cfg(not(feature = "single-precision"))]
fn read_real<R: Read>(r: &mut R) -> std::io::Result<Real> {
    r.read_f64::<LittleEndian>()
}

#[cfg(feature = "single-precision")]
fn read_real<R: Read>(r: &mut R) -> std::io::Result<Real> {
    r.read_f32::<LittleEndian>()
}

/// Restores a model and its vocabulary.
pub fn load(path: impl AsRef<Path>) -> CheckpointResult<(ModelParams, Vocabulary)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let precision = r.read_u8().map_err(io_err(path))?;
    if precision != REAL_WIDTH {
        return Err(CheckpointError::PrecisionMismatch {
            file: precision,
            built: REAL_WIDTH,
        });
    }

    let config: TrainConfig = read_json(&mut r)?;
    let tokens: Vec<String> = read_json(&mut r)?;
    let knowledge_keys: Vec<String> = read_json(&mut r)?;
    let vocab = Vocabulary::from_tokens(tokens);

    let n_sections = r
        .read_u32::<LittleEndian>()
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut sections = Vec::with_capacity(n_sections as usize);
    for _ in 0..n_sections {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let name =
            String::from_utf8(name_buf).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(
                r.read_u64::<LittleEndian>()
                    .map_err(|e| CheckpointError::Format(e.to_string()))? as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(read_real(&mut r).map_err(|e| CheckpointError::Format(e.to_string()))?);
        }
        sections.push((name, Tensor::new(shape, values)?));
    }

    let vocab_size = vocab.len();
    let params = ModelParams::from_sections(config, knowledge_keys, sections, vocab_size)?;
    Ok((params, vocab))
}
