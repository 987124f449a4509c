//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "FMLSTM\0\0"
//! version    u32
//! sha256     32 bytes over everything that follows
//! config     input_dim u32, lstm_units u32, fc_units u32,
//!            dropout_rate f64, output_scale f64
//! count      u64 number of parameters
//! params     count × f64, in the flat parameter order
//! norm       input_mean 8 × f64, input_std 8 × f64,
//!            output_mean f64, output_std f64, degenerate 9 × u8
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::norm::NormStats;
use super::{NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::flow::OBSERVATION_DIM;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FMLSTM\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER: usize = 8 + 4 + 32;

pub fn encode(params: &NetParams, stats: &NormStats) -> Result<Vec<u8>> {
    params.check()?;
    let c = &params.config;
    let mut body = Vec::with_capacity(64 + 8 * params.values.len());
    for v in [c.input_dim, c.lstm_units, c.fc_units] {
        body.extend_from_slice(&(v as u32).to_le_bytes());
    }
    body.extend_from_slice(&c.dropout_rate.to_le_bytes());
    body.extend_from_slice(&c.output_scale.to_le_bytes());
    body.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    for v in stats.input_mean.iter().chain(&stats.input_std) {
        body.extend_from_slice(&v.to_le_bytes());
    }
    body.extend_from_slice(&stats.output_mean.to_le_bytes());
    body.extend_from_slice(&stats.output_std.to_le_bytes());
    body.extend(stats.degenerate.iter().map(|&d| d as u8));

    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(NetParams, NormStats)> {
    let format = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format("not a policy checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < HEADER || Sha256::digest(&bytes[HEADER..]).as_slice() != &bytes[12..HEADER] {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut r = Reader {
        buf: &bytes[HEADER..],
        pos: 0,
    };
    let short = || format("unexpected end of data");
    let config = NetConfig {
        input_dim: r.u32().ok_or_else(short)? as usize,
        lstm_units: r.u32().ok_or_else(short)? as usize,
        fc_units: r.u32().ok_or_else(short)? as usize,
        dropout_rate: r.f64().ok_or_else(short)?,
        output_scale: r.f64().ok_or_else(short)?,
    };
    config.validate().map_err(|e| format(&e.to_string()))?;
    let count = r.u64().ok_or_else(short)? as usize;
    if count != config.parameter_count() {
        return Err(format("parameter count does not match the stored network shape"));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f64().ok_or_else(short)?);
    }
    let mut stats = NormStats::identity();
    for c in 0..OBSERVATION_DIM {
        stats.input_mean[c] = r.f64().ok_or_else(short)?;
    }
    for c in 0..OBSERVATION_DIM {
        stats.input_std[c] = r.f64().ok_or_else(short)?;
    }
    stats.output_mean = r.f64().ok_or_else(short)?;
    stats.output_std = r.f64().ok_or_else(short)?;
    for d in stats.degenerate.iter_mut() {
        *d = r.take(1).ok_or_else(short)?[0] != 0;
    }
    if r.pos != r.buf.len() {
        return Err(format("trailing bytes after checkpoint body"));
    }
    let params = NetParams { config, values };
    params.check()?;
    Ok((params, stats))
}

pub fn save(params: &NetParams, stats: &NormStats, path: &Path) -> Result<()> {
    let bytes = encode(params, stats)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(NetParams, NormStats)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
