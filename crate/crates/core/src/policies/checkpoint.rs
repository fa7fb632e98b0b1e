//! Binary checkpoint format for [`ParametricPolicy`].
//!
//! All integers and floats are little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `GKDCKPT\0`             |
//! | 8      | 4    | format version (u32, = 1)     |
//! | 12     | 4    | vocab size (u32)              |
//! | 16     | 4    | EOS id (u32)                  |
//! | 20     | 4    | window (u32)                  |
//! | 24     | 4    | embedding width (u32)         |
//! | 28     | 4    | hidden width (u32)            |
//! | 32     | 8    | initialization seed (u64)     |
//! | 40     | 8    | parameter count N (u64)       |
//! | 48     | 8·N  | theta as f64                  |

use std::path::Path;

use crate::distributions::Vocab;
use crate::error::{Error, Result};
use crate::policies::{Architecture, ParametricPolicy};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GKDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 48;

impl ParametricPolicy {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.architecture();
        let vocab = crate::policies::Policy::vocab(self);
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.theta().len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            vocab.size() as u32,
            vocab.eos() as u32,
            arch.window as u32,
            arch.embed_dim as u32,
            arch.hidden_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed().to_le_bytes());
        out.extend_from_slice(&(self.theta().len() as u64).to_le_bytes());
        for t in self.theta() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic or truncated header)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let vocab = Vocab::new(u32_at(12) as usize, u32_at(16) as usize)?;
        let arch = Architecture {
            window: u32_at(20) as usize,
            embed_dim: u32_at(24) as usize,
            hidden_dim: u32_at(28) as usize,
        };
        let seed = u64_at(32);
        let n = u64_at(40) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * 8 {
            return Err(Error::Format(format!(
                "checkpoint declares {n} parameters but holds {} bytes",
                body.len()
            )));
        }
        let theta = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParametricPolicy::from_params(vocab, arch, seed, theta)
    }
}

pub fn write_checkpoint(path: &Path, policy: &ParametricPolicy) -> Result<()> {
    std::fs::write(path, policy.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParametricPolicy> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ParametricPolicy::from_bytes(&bytes)
}
