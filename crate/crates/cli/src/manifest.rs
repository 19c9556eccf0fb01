//! Run manifests: everything needed to repeat a command bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{at, CliError, CliResult};
use crate::plan::Plan;

pub const VERSION: &str = env!("BAIT_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl InputFile {
    pub fn hash(role: &str, path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(at(path))?;
        Ok(Self {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub argv: Vec<String>,
    /// Fully resolved command, config included.
    pub plan: Plan,
    /// Input files with content hashes. Generated data is described by the
    /// generator parameters inside `plan` instead.
    pub inputs: Vec<InputFile>,
    /// Files the command writes under its output directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(plan: Plan, argv: Vec<String>) -> CliResult<Self> {
        let inputs = plan
            .inputs()
            .into_iter()
            .map(|(role, path)| InputFile::hash(role, path))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            tool: "bait".into(),
            version: VERSION.into(),
            argv,
            outputs: plan.outputs(),
            plan,
            inputs,
        })
    }

    pub fn file_name(&self) -> String {
        format!("{}.manifest.json", self.plan.name())
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(self.file_name());
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(at(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(at(path))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Core(bait::Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })
        })
    }

    /// Fails if any input file changed since the manifest was written.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for input in &self.inputs {
            let now = InputFile::hash(&input.role, &input.path)?;
            if now.sha256 != input.sha256 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!(
                        "{} input {} changed since the manifest was written (sha256 {} now {})",
                        input.role,
                        input.path.display(),
                        input.sha256,
                        now.sha256
                    ),
                )
                .into());
            }
        }
        Ok(())
    }
}
