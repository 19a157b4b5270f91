//! Binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, then `V`, `D`, `H`, `hash_seed` as
//! `u64` and `dropout_rate` as `f64`, then row-major `f32` arrays: the
//! embedding table (`V x D`), and for cross-encoders `W` (`D x H`) and `w` (`H`).

use super::{CrossEncoderModel, EncoderConfig, EncoderError, EncoderModel};

pub const ENCODER_MAGIC: &[u8; 8] = b"NDRENC01";
pub const CROSS_MAGIC: &[u8; 8] = b"NDRXEN01";

const HEADER_LEN: usize = 8 + 5 * 8;

fn push_header(buf: &mut Vec<u8>, magic: &[u8; 8], cfg: EncoderConfig, h: usize, dropout: f64) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(cfg.vocab_buckets as u64).to_le_bytes());
    buf.extend_from_slice(&(cfg.dim as u64).to_le_bytes());
    buf.extend_from_slice(&(h as u64).to_le_bytes());
    buf.extend_from_slice(&cfg.hash_seed.to_le_bytes());
    buf.extend_from_slice(&dropout.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Header {
    cfg: EncoderConfig,
    hidden: usize,
    dropout: f64,
}

fn parse_header(bytes: &[u8], magic: &[u8; 8]) -> Result<Header, EncoderError> {
    if bytes.len() < HEADER_LEN {
        return Err(EncoderError::BadCheckpoint("truncated header".into()));
    }
    if &bytes[..8] != magic {
        return Err(EncoderError::BadCheckpoint(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let u = |i: usize| u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().unwrap());
    let cfg = EncoderConfig {
        vocab_buckets: u(0) as usize,
        dim: u(1) as usize,
        hash_seed: u(3),
    };
    cfg.validate()?;
    Ok(Header {
        cfg,
        hidden: u(2) as usize,
        dropout: f64::from_bits(u(4)),
    })
}

fn read_f32s(bytes: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f64>, EncoderError> {
    let end = *offset + n * 4;
    if bytes.len() < end {
        return Err(EncoderError::BadCheckpoint("truncated parameter array".into()));
    }
    let out = bytes[*offset..end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    *offset = end;
    Ok(out)
}

impl EncoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.table().len() * 4);
        push_header(&mut buf, ENCODER_MAGIC, self.config(), 0, 0.0);
        push_f32s(&mut buf, self.table());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let header = parse_header(bytes, ENCODER_MAGIC)?;
        let mut off = HEADER_LEN;
        let table = read_f32s(bytes, &mut off, header.cfg.vocab_buckets * header.cfg.dim)?;
        if off != bytes.len() {
            return Err(EncoderError::BadCheckpoint("trailing bytes".into()));
        }
        EncoderModel::from_table(header.cfg, table)
    }

    /// Content fingerprint of the checkpoint bytes.
    pub fn fingerprint(&self) -> u64 {
        crate::hashing::sha256_u64(&self.to_bytes())
    }
}

impl CrossEncoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        push_header(
            &mut buf,
            CROSS_MAGIC,
            self.base.config(),
            self.hidden(),
            self.dropout_rate(),
        );
        push_f32s(&mut buf, self.base.table());
        push_f32s(&mut buf, self.proj());
        push_f32s(&mut buf, self.out());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let header = parse_header(bytes, CROSS_MAGIC)?;
        let mut off = HEADER_LEN;
        let cfg = header.cfg;
        let table = read_f32s(bytes, &mut off, cfg.vocab_buckets * cfg.dim)?;
        let proj = read_f32s(bytes, &mut off, cfg.dim * header.hidden)?;
        let out = read_f32s(bytes, &mut off, header.hidden)?;
        if off != bytes.len() {
            return Err(EncoderError::BadCheckpoint("trailing bytes".into()));
        }
        let base = EncoderModel::from_table(cfg, table)?;
        CrossEncoderModel::from_parts(base, header.hidden, proj, out, header.dropout)
    }

    pub fn fingerprint(&self) -> u64 {
        crate::hashing::sha256_u64(&self.to_bytes())
    }
}

fn write_with_sidecar(
    path: &std::path::Path,
    bytes: &[u8],
    manifest: &serde_json::Value,
) -> Result<(), EncoderError> {
    std::fs::write(path, bytes)?;
    let mut sidecar = serde_json::to_vec_pretty(manifest)
        .map_err(|e| EncoderError::BadCheckpoint(e.to_string()))?;
    sidecar.push(b'\n');
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes the checkpoint and a `<path>.json` manifest next to it.
pub fn write_encoder_checkpoint(
    path: &std::path::Path,
    model: &EncoderModel,
    manifest: &serde_json::Value,
) -> Result<(), EncoderError> {
    write_with_sidecar(path, &model.to_bytes(), manifest)
}

pub fn read_encoder_checkpoint(path: &std::path::Path) -> Result<EncoderModel, EncoderError> {
    EncoderModel::from_bytes(&std::fs::read(path)?)
}

pub fn write_cross_checkpoint(
    path: &std::path::Path,
    model: &CrossEncoderModel,
    manifest: &serde_json::Value,
) -> Result<(), EncoderError> {
    write_with_sidecar(path, &model.to_bytes(), manifest)
}

pub fn read_cross_checkpoint(path: &std::path::Path) -> Result<CrossEncoderModel, EncoderError> {
    CrossEncoderModel::from_bytes(&std::fs::read(path)?)
}
