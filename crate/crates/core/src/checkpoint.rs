//! Versioned binary chain checkpoints.
//!
//! Layout: the 8-byte magic `CONDSPEC`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, the retained
//! coefficient and `τ²` draws as little-endian `f64`, and a trailing
//! SHA-256 digest of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::OutcomeTransform;
use crate::sampler::{build_basis, ChainDiagnostics, ChainSnapshot, ModelConfig, PosteriorDraws};

pub const MAGIC: &[u8; 8] = b"CONDSPEC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    crate_version: String,
    config: ModelConfig,
    config_hash: String,
    dim: usize,
    n_time: usize,
    outcomes: Vec<f64>,
    outcome_transform: OutcomeTransform,
    n_coef: usize,
    retained: usize,
    tau2_width: usize,
    diagnostics: ChainDiagnostics,
    snapshot: ChainSnapshot,
}

/// Hex SHA-256 of the canonical JSON encoding of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes draws. Per-iteration timings are left out so identical runs
/// give identical bytes.
pub fn encode(draws: &PosteriorDraws) -> Result<Vec<u8>> {
    let basis = &draws.basis;
    let per_draw = basis.n_coef() * draws.dim * draws.dim;
    let tau2_width = 3 * draws.dim * draws.dim;
    if draws.coefficients.iter().any(|c| c.len() != per_draw)
        || draws.tau2.iter().any(|t| t.len() != tau2_width)
    {
        return Err(Error::Checkpoint("inconsistent draw lengths".into()));
    }
    let header = Header {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: draws.config.clone(),
        config_hash: config_hash(&draws.config),
        dim: draws.dim,
        n_time: series_length(draws)?,
        outcomes: basis.outcome_basis().points().to_vec(),
        outcome_transform: draws.outcome_transform,
        n_coef: per_draw,
        retained: draws.len(),
        tau2_width,
        diagnostics: draws.diagnostics.clone(),
        snapshot: draws.snapshot.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * draws.len() * (per_draw + tau2_width) + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for row in &draws.coefficients {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for row in &draws.tau2 {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn series_length(draws: &PosteriorDraws) -> Result<usize> {
    // The Fourier grid stores n; M alone does not determine it.
    let omegas = draws.basis.frequency_basis().points();
    let first = *omegas
        .first()
        .ok_or_else(|| Error::Checkpoint("empty frequency grid".into()))?;
    let n = (1.0 / first).round() as usize;
    if (n - 1) / 2 != omegas.len() {
        return Err(Error::Checkpoint(
            "frequency grid is not a Fourier grid".into(),
        ));
    }
    Ok(n)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Parses a checkpoint and rebuilds its basis from the stored outcomes.
pub fn decode(bytes: &[u8]) -> Result<PosteriorDraws> {
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(Error::Checkpoint("file too short for a checkpoint".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 12,
    };
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.config_hash != config_hash(&header.config) {
        return Err(Error::Checkpoint(
            "stored config hash does not match stored config".into(),
        ));
    }
    let coefficients = (0..header.retained)
        .map(|_| r.f64s(header.n_coef))
        .collect::<Result<Vec<_>>>()?;
    let tau2 = (0..header.retained)
        .map(|_| r.f64s(header.tau2_width))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after draws".into()));
    }
    let basis = build_basis(&header.outcomes, header.n_time, &header.config)?;
    if basis.n_coef() * header.dim * header.dim != header.n_coef {
        return Err(Error::Checkpoint(
            "coefficient count does not match the rebuilt basis".into(),
        ));
    }
    Ok(PosteriorDraws {
        config: header.config,
        dim: header.dim,
        basis,
        coefficients,
        tau2,
        diagnostics: header.diagnostics,
        iteration_seconds: Vec::new(),
        outcome_transform: header.outcome_transform,
        snapshot: header.snapshot,
    })
}

/// Stored config hash, read without decoding the draws.
pub fn stored_config_hash(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut r = Reader { bytes, pos: 12 };
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(header.config_hash)
}

pub fn write(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    crate::ingest::write_file(path, &encode(draws)?)
}

pub fn read(path: &Path) -> Result<PosteriorDraws> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
