//! Binary parameter checkpoints with a plain-text sidecar.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "DISCWSOD"
//! version      u32      1
//! num_classes  u64
//! feature_dim  u64
//! noise_dim    u64
//! hidden       u64      hidden width shared by both heads (0 = linear)
//! rounds_done  u64
//! pred_len     u64, then pred_len f64 (prediction head, flat layout)
//! cond_len     u64, then cond_len f64 (conditional head, flat layout)
//! ```
//!
//! The sidecar `<file>.txt` repeats the shape as `key=value` lines and adds
//! the hash of the configuration that produced the parameters.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{CondParams, Head, PredParams};

pub const MAGIC: &[u8; 8] = b"DISCWSOD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pred: PredParams,
    pub cond: CondParams,
    /// Completed outer rounds; training resumes from the next one.
    pub rounds_done: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes `bytes` next to `path` and renames it into place, so a crash never
/// leaves a truncated file under the final name.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.pred.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.pred.feature_dim()
    }

    fn check_shapes(&self) -> Result<()> {
        let (p, c) = (&self.pred.head, &self.cond.head);
        if p.num_labels != c.num_labels || c.in_dim != p.in_dim + self.cond.noise_dim || p.hidden != c.hidden {
            return Err(bad("prediction and conditional heads disagree on shape"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let (p, c) = (&self.pred.head.params, &self.cond.head.params);
        let mut out = Vec::with_capacity(12 + 8 * (7 + p.len() + c.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.num_classes(), self.feature_dim(), self.cond.noise_dim, self.pred.head.hidden, self.rounds_done]
        {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for block in [p, c] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let num_classes = r.usize()?;
        let feature_dim = r.usize()?;
        let noise_dim = r.usize()?;
        let hidden = r.usize()?;
        let rounds_done = r.usize()?;
        if num_classes == 0 || feature_dim == 0 {
            return Err(bad("empty shape"));
        }
        let pred = r.block()?;
        let cond = r.block()?;
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let labels = num_classes + 1;
        let head = |in_dim, params: Vec<f64>, which: &str| {
            let want = Head::param_count(labels, in_dim, hidden);
            if params.len() != want {
                return Err(bad(format!("{which} head has {} parameters, shape needs {want}", params.len())));
            }
            Head::from_params(labels, in_dim, hidden, params)
        };
        Ok(Self {
            pred: PredParams { head: head(feature_dim, pred, "prediction")? },
            cond: CondParams { head: head(feature_dim + noise_dim, cond, "conditional")?, noise_dim },
            rounds_done,
        })
    }

    pub fn sidecar(&self, config_hash: &str) -> String {
        format!(
            "format=DISCWSOD\nversion={VERSION}\nconfig_hash={config_hash}\nrounds_done={}\nnum_classes={}\nfeature_dim={}\nnoise_dim={}\nhidden_units={}\npred_params={}\ncond_params={}\n",
            self.rounds_done,
            self.num_classes(),
            self.feature_dim(),
            self.cond.noise_dim,
            self.pred.head.hidden,
            self.pred.head.params.len(),
            self.cond.head.params.len(),
        )
    }

    /// Writes the binary file and its sidecar.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)?;
        write_atomic(&sidecar_path(path), self.sidecar(config_hash).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The `config_hash` entry of a checkpoint's sidecar.
pub fn read_config_hash(path: &Path) -> Result<String> {
    let text = fs::read_to_string(sidecar_path(path))?;
    text.lines()
        .find_map(|l| l.strip_prefix("config_hash="))
        .map(str::to_string)
        .ok_or_else(|| bad("sidecar has no config_hash"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("size overflows"))
    }

    fn block(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.bytes.len() - self.at) / 8 {
            return Err(bad("truncated"));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{init_params, TrainConfig};

    fn sample(hidden: usize) -> Checkpoint {
        let cfg = TrainConfig { hidden_units: hidden, ..TrainConfig::default() };
        let (pred, cond) = init_params(&cfg, 3, 5);
        Checkpoint { pred, cond, rounds_done: 4 }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for hidden in [0, 3] {
            let mut ck = sample(hidden);
            ck.pred.head.params[0] = -0.0;
            ck.pred.head.params[1] = f64::MIN_POSITIVE / 3.0;
            let path = dir.path().join(format!("m{hidden}.ckpt"));
            ck.save(&path, "abc123").unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let bits = |c: &Checkpoint| {
                c.pred.head.params.iter().chain(&c.cond.head.params).map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(&back), bits(&ck));
            assert_eq!(back, ck);
            assert_eq!(read_config_hash(&path).unwrap(), "abc123");
        }
    }

    #[test]
    fn sidecar_lists_shape() {
        let text = sample(0).sidecar("h");
        assert!(text.starts_with("format=DISCWSOD\nversion=1\nconfig_hash=h\nrounds_done=4\n"));
        assert!(text.contains("num_classes=3\nfeature_dim=5\nnoise_dim=4\n"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
