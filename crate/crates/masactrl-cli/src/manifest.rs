//! Run manifests: every command records its fully resolved arguments,
//! output files and summary statistics as JSON. `masactrl rerun` replays a
//! manifest and reproduces the outputs byte-for-byte.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::commands::{
    AblateArgs, DatasetArgs, DumpAttnArgs, EditArgs, InvertArgs, SampleArgs, TrainArgs,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandSpec {
    Train(TrainArgs),
    Sample(SampleArgs),
    Edit(EditArgs),
    Invert(InvertArgs),
    Ablate(AblateArgs),
    DumpAttn(DumpAttnArgs),
    Dataset(DatasetArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: CommandSpec,
    /// Output files relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub stats: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| format!("cannot parse manifest: {e}"))?;
        if m.version != MANIFEST_VERSION {
            return Err(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            ));
        }
        Ok(m)
    }
}
