//! Versioned binary checkpoint for [`ToyPolicy`].
//!
//! Layout (little-endian): magic `VDTPOL\0\0`, u32 version, u32-prefixed
//! JSON metadata, u8 frozen flag, u32 token count followed by u32-prefixed
//! UTF-8 tokens, u32 rows, u32 cols, then `rows * cols` f64 parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{ParamTable, PolicyError, ToyPolicy};
use super::vocab::{Vocab, VocabError};

const MAGIC: &[u8; 8] = b"VDTPOL\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a policy checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint token is not UTF-8")]
    Utf8,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
}

pub fn encode_checkpoint(policy: &ToyPolicy, meta: &CheckpointMeta) -> Vec<u8> {
    let params = policy.params();
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(64 + params.as_slice().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, &meta_json);
    out.push(policy.is_frozen() as u8);
    out.extend_from_slice(&(policy.vocab().len() as u32).to_le_bytes());
    for t in policy.vocab().tokens() {
        put_bytes(&mut out, t.as_bytes());
    }
    out.extend_from_slice(&(params.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(params.cols() as u32).to_le_bytes());
    for x in params.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ToyPolicy, CheckpointMeta), CheckpointError> {
    let mut r = Reader { buf };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?)?;
    let frozen = r.take(1)?[0] != 0;
    let n_tokens = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let t = std::str::from_utf8(r.bytes()?).map_err(|_| CheckpointError::Utf8)?;
        tokens.push(t.to_string());
    }
    let vocab = Vocab::from_tokens(tokens)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let raw = r.take(rows * cols * 8)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ParamTable::from_vec(rows, cols, data).ok_or(CheckpointError::Truncated)?;
    let policy = ToyPolicy::from_params(vocab, params, frozen)?;
    Ok((policy, meta))
}

pub fn save_checkpoint(path: &Path, policy: &ToyPolicy, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(policy, meta))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyPolicy, CheckpointMeta), CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&buf)
}
