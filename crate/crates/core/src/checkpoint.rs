//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `PXCK`, `u32` version, `u32` header length,
//! UTF-8 header of `key=value` lines, `u64` parameter count, the parameters as
//! `f64`, and a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, NetKind, Network, ProxNet, ScoreNet};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 4] = b"PXCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Free-form string metadata stored alongside the parameters.
pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub schedule: NoiseSchedule,
    pub params: Vec<f64>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn of<N: Network>(net: &N, metadata: Metadata) -> Self {
        Self {
            architecture: net.architecture().clone(),
            schedule: *net.schedule(),
            params: net.params().to_vec(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!(
            "descriptor={}\nbeta_min={}\nbeta_max={}\n",
            self.architecture.descriptor(),
            self.schedule.beta_min(),
            self.schedule.beta_max()
        );
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') || matches!(k.as_str(), "descriptor" | "beta_min" | "beta_max") {
                return Err(Error::Argument(format!("metadata entry `{k}` cannot be stored")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.params.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: &str| Error::CheckpointFormat { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(format("not a checkpoint (bad magic)"));
        }
        if bytes.len() < 4 + 4 + 4 + 8 + DIGEST_LEN {
            return Err(Error::CheckpointChecksum { path: path.to_path_buf() });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CheckpointChecksum { path: path.to_path_buf() });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion { path: path.to_path_buf(), found: version, expected: VERSION });
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let rest = &body[12..];
        if rest.len() < header_len + 8 {
            return Err(format("header overruns the file"));
        }
        let header = std::str::from_utf8(&rest[..header_len]).map_err(|_| format("header is not UTF-8"))?;
        let rest = &rest[header_len..];
        let count = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let data = &rest[8..];
        if data.len() != count.checked_mul(8).ok_or_else(|| format("parameter count overflows"))? {
            return Err(format("parameter block length disagrees with its count"));
        }
        let params: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut fields = Metadata::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format("header line without `=`"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| format(&format!("header lacks `{k}`")));
        let architecture = Architecture::parse_descriptor(&take("descriptor")?).map_err(|e| format(&e.to_string()))?;
        let num = |v: String, k: &str| v.parse::<f64>().map_err(|_| format(&format!("bad `{k}`")));
        let beta_min = num(take("beta_min")?, "beta_min")?;
        let beta_max = num(take("beta_max")?, "beta_max")?;
        let schedule = NoiseSchedule::new(beta_min, beta_max).map_err(|e| format(&e.to_string()))?;
        if params.len() != architecture.param_count() {
            return Err(format("parameter count does not match the architecture"));
        }
        Ok(Self { architecture, schedule, params, metadata: fields })
    }

    /// Fails with a descriptor mismatch unless the stored architecture equals `expected`.
    pub fn expect_architecture(&self, expected: &Architecture, path: &Path) -> Result<()> {
        if &self.architecture != expected {
            return Err(Error::CheckpointDescriptor {
                path: path.to_path_buf(),
                expected: expected.descriptor(),
                found: self.architecture.descriptor(),
            });
        }
        Ok(())
    }

    fn expect_kind(&self, kind: NetKind, path: &Path) -> Result<()> {
        if self.architecture.kind != kind {
            return Err(Error::CheckpointDescriptor {
                path: path.to_path_buf(),
                expected: format!("kind={}", kind.as_str()),
                found: self.architecture.descriptor(),
            });
        }
        Ok(())
    }

    pub fn into_prox(self, path: &Path) -> Result<ProxNet> {
        self.expect_kind(NetKind::Prox, path)?;
        ProxNet::from_parts(self.architecture, self.schedule, self.params)
    }

    pub fn into_score(self, path: &Path) -> Result<ScoreNet> {
        self.expect_kind(NetKind::Score, path)?;
        ScoreNet::from_parts(self.architecture, self.schedule, self.params)
    }
}

pub fn save_checkpoint<N: Network>(net: &N, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = Checkpoint::of(net, metadata.clone()).to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

pub fn load_prox(path: &Path) -> Result<(ProxNet, Metadata)> {
    let ck = load_checkpoint(path)?;
    let meta = ck.metadata.clone();
    Ok((ck.into_prox(path)?, meta))
}

pub fn load_score(path: &Path) -> Result<(ScoreNet, Metadata)> {
    let ck = load_checkpoint(path)?;
    let meta = ck.metadata.clone();
    Ok((ck.into_score(path)?, meta))
}
