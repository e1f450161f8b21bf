//! key=value configuration files. Lines are `key = value`, `#` starts a
//! comment. Explicit command-line flags take precedence over file entries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub struct CfgFile {
    entries: BTreeMap<String, String>,
}

impl CfgFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!(
                        "{}:{}: expected key=value, got {raw:?}",
                        path.display(),
                        lineno + 1
                    );
                };
                entries.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(CfgFile { entries })
    }

    /// Flag value if given, else the file entry, else the default.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.entries.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow::anyhow!("config key {key}={raw:?}: {e}")),
            None => Ok(default),
        }
    }

    /// Like `resolve` but the value is required from either source.
    pub fn resolve_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p);
        }
        match self.entries.get(key) {
            Some(raw) => Ok(PathBuf::from(raw)),
            None => bail!("missing required --{key}"),
        }
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(PathBuf::from)
    }
}

/// Echo the resolved configuration, sorted by key, into out/run.cfg.
pub fn write_run_cfg(out_dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut sorted: Vec<&(&str, String)> = entries.iter().collect();
    sorted.sort_by_key(|(k, _)| *k);
    let mut text = String::new();
    for (k, v) in sorted {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(out_dir.join("run.cfg"), text)
        .with_context(|| format!("writing run.cfg to {}", out_dir.display()))?;
    Ok(())
}
