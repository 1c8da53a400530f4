//! Run manifests: the resolved configuration plus input hashes, enough to
//! repeat a run bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::run::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "ctrlab";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run: RunConfig,
    pub inputs: Vec<InputFile>,
    /// Files whose bytes depend only on `run` and `inputs`.
    pub reproducible_outputs: Vec<String>,
    /// Other files written by the run, such as timing logs.
    pub other_outputs: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(CliError::runtime)?;
        write_file(&dir.join(MANIFEST_FILE), &(text + "\n"))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("reading manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("parsing manifest {}: {e}", path.display())))?;
        if m.tool != TOOL {
            return Err(CliError::Data(format!("{} was not written by {TOOL}", path.display())));
        }
        Ok(m)
    }

    /// Fails if any input changed since the manifest was written.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                return Err(CliError::Data(format!(
                    "input {} changed since the run (sha256 {} != {})",
                    input.path.display(),
                    now,
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn hash_inputs(paths: &[PathBuf]) -> CliResult<Vec<InputFile>> {
    paths.iter().map(|p| Ok(InputFile { path: p.clone(), sha256: sha256_file(p)? })).collect()
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Names of the files that differ between two run directories.
pub fn compare_outputs(names: &[String], a: &Path, b: &Path) -> CliResult<Vec<String>> {
    let mut differ = Vec::new();
    for name in names {
        let read = |dir: &Path| {
            fs::read(dir.join(name)).map_err(|e| CliError::Data(format!("reading {}: {e}", dir.join(name).display())))
        };
        if read(a)? != read(b)? {
            differ.push(name.clone());
        }
    }
    Ok(differ)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn compare_reports_changed_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for (dir, x) in [(&a, "1"), (&b, "2")] {
            fs::write(dir.path().join("same"), "s").unwrap();
            fs::write(dir.path().join("diff"), x).unwrap();
        }
        let names = vec!["same".to_string(), "diff".to_string()];
        assert_eq!(compare_outputs(&names, a.path(), b.path()).unwrap(), vec!["diff".to_string()]);
    }
}
