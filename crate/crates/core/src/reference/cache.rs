use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

use super::{PosteriorSamples, Provenance, SamplerConfig};

/// Environment variable naming the reference cache directory.
pub const CACHE_ENV: &str = "UCL_ABI_CACHE_DIR";

const MAGIC: &[u8; 4] = b"UCLR";
const VERSION: u32 = 1;

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// SHA-256 over the shape and little-endian bytes of `x`.
pub fn dataset_hash(x: &Tensor) -> String {
    let mut h = Sha256::new();
    for &s in x.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for v in x.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Reference draws on disk, one file per (model, dataset, sampler, seed).
#[derive(Clone, Debug)]
pub struct ReferenceCache {
    dir: PathBuf,
}

fn provenance_code(p: Provenance) -> u8 {
    match p {
        Provenance::Flow => 0,
        Provenance::Mcmc => 1,
        Provenance::Analytic => 2,
    }
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(model_id: &str, x: &Tensor, sampler: &SamplerConfig, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0]);
        h.update(dataset_hash(x).as_bytes());
        h.update([0]);
        h.update(
            serde_json::to_string(sampler)
                .expect("sampler config serializes")
                .as_bytes(),
        );
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.ref"))
    }

    pub fn load(&self, key: &str) -> Result<Option<PosteriorSamples>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => decode(&bytes)
                .map(Some)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store(&self, key: &str, samples: &PosteriorSamples) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        write_atomic(&self.path(key), &encode(samples))
    }

    /// Cached draws for `key`, computing and storing them on a miss.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<PosteriorSamples>,
    ) -> Result<PosteriorSamples> {
        if let Some(s) = self.load(key)? {
            return Ok(s);
        }
        let s = compute()?;
        self.store(key, &s)?;
        Ok(s)
    }
}

pub(crate) fn encode(samples: &PosteriorSamples) -> Vec<u8> {
    let t = samples.draws();
    let mut out = Vec::with_capacity(25 + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(provenance_code(samples.provenance()));
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<PosteriorSamples> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    let mut one = [0u8; 1];
    let short = |_| Error::Format("truncated reference file".into());
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a reference sample file".into()));
    }
    r.read_exact(&mut u32b).map_err(short)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported reference file version {version}"
        )));
    }
    r.read_exact(&mut one).map_err(short)?;
    let provenance = match one[0] {
        0 => Provenance::Flow,
        1 => Provenance::Mcmc,
        2 => Provenance::Analytic,
        c => return Err(Error::Format(format!("unknown provenance code {c}"))),
    };
    r.read_exact(&mut u64b).map_err(short)?;
    let rows = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u64b).map_err(short)?;
    let cols = u64::from_le_bytes(u64b) as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n.checked_mul(8) == Some(bytes.len() - r.position() as usize))
        .ok_or_else(|| Error::Format("reference payload size does not match its header".into()))?;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            r.read_exact(&mut u64b).expect("length checked");
            f64::from_le_bytes(u64b)
        })
        .collect();
    PosteriorSamples::new(Tensor::matrix(rows, cols, data)?, provenance)
}
