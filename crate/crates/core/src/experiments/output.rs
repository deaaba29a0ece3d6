//! Output files with provenance.
//!
//! Every CSV starts with `# seed=<seed> config_hash=<sha256>` followed by a
//! header row. Nothing time- or machine-dependent is written, so repeated
//! runs produce identical bytes.

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Overrides the default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "KATTN_OUT_DIR";

/// Default output directory.
pub const DEFAULT_OUT_DIR: &str = "kattn-out";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# seed={} config_hash={}\n", self.seed, self.config_hash)
    }

    /// `body` must start with its header row.
    pub fn csv(&self, body: &str) -> String {
        let mut s = self.comment();
        s.push_str(body);
        s
    }
}

/// `--out` if given, else `$KATTN_OUT_DIR`, else [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

/// Writes `name` under `dir`, creating the directory.
pub fn write(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

/// `x` in shortest round-trip form, for CSV cells.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
