//! Run manifests: the resolved job behind every artifact-producing command.
//!
//! Output paths are relative to the manifest's directory and nothing
//! time- or host-dependent is recorded, so a replay into another directory
//! produces a byte-identical manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{dataset, erf, gradcheck, train, CheckFailed};

pub const TOOL_VERSION: &str = concat!("dk ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// The fully resolved job; enough to re-run it.
    pub config: Value,
    pub seed: u64,
    pub tool_version: String,
    /// Artifacts, relative to the manifest's directory.
    pub outputs: Vec<String>,
    /// Command-specific facts about the run.
    pub details: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

/// What a job produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub details: BTreeMap<String, Value>,
    /// Set when the job ran to completion but its check failed.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    Dataset(dataset::Job),
    Train(train::Job),
    Gradcheck(gradcheck::Job),
    Erf(erf::Job),
}

impl Job {
    pub fn command(&self) -> &'static str {
        match self {
            Job::Dataset(_) => "dataset",
            Job::Train(_) => "train",
            Job::Gradcheck(_) => "gradcheck",
            Job::Erf(_) => "erf",
        }
    }

    fn config(&self) -> Value {
        let v = match self {
            Job::Dataset(j) => serde_json::to_value(j),
            Job::Train(j) => serde_json::to_value(j),
            Job::Gradcheck(j) => serde_json::to_value(j),
            Job::Erf(j) => serde_json::to_value(j),
        };
        v.expect("job serializes")
    }

    fn seed(&self) -> u64 {
        match self {
            Job::Dataset(j) => j.seed,
            Job::Train(j) => j.config.seed,
            Job::Gradcheck(j) => j.seeds.first().copied().unwrap_or(0),
            Job::Erf(j) => j.seed(),
        }
    }

    /// Manifest file name inside the output directory.
    pub fn manifest_name(&self) -> String {
        match self {
            Job::Erf(j) => format!("{}.manifest.json", j.name),
            _ => "manifest.json".to_string(),
        }
    }

    pub fn from_manifest(m: &RunManifest) -> anyhow::Result<Self> {
        let c = m.config.clone();
        Ok(match m.command.as_str() {
            "dataset" => Job::Dataset(serde_json::from_value(c)?),
            "train" => Job::Train(serde_json::from_value(c)?),
            "gradcheck" => Job::Gradcheck(serde_json::from_value(c)?),
            "erf" => Job::Erf(serde_json::from_value(c)?),
            other => bail!("manifest names unknown command `{other}`"),
        })
    }

    /// Runs the job into `dir` and writes its manifest. A failed check still
    /// leaves its artifacts and manifest behind.
    pub fn execute_in(&self, dir: &Path) -> anyhow::Result<(RunManifest, Outcome)> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let outcome = match self {
            Job::Dataset(j) => j.run(dir)?,
            Job::Train(j) => j.run(dir)?,
            Job::Gradcheck(j) => j.run(dir)?,
            Job::Erf(j) => j.run(dir)?,
        };
        let manifest = RunManifest {
            command: self.command().to_string(),
            config: self.config(),
            seed: self.seed(),
            tool_version: TOOL_VERSION.to_string(),
            outputs: outcome.outputs.clone(),
            details: outcome.details.clone(),
        };
        let path = dir.join(self.manifest_name());
        fs::write(&path, manifest.to_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok((manifest, outcome))
    }

    /// [`Job::execute_in`], turning a failed check into [`CheckFailed`].
    pub fn execute(&self, dir: &Path) -> anyhow::Result<()> {
        let (_, outcome) = self.execute_in(dir)?;
        match outcome.failure {
            Some(msg) => Err(CheckFailed(msg).into()),
            None => Ok(()),
        }
    }
}

/// Joins `rel` onto `dir`, rejecting paths that would escape it.
pub fn output_path(dir: &Path, rel: &str) -> anyhow::Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute()
        || p.components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        bail!("manifest output `{rel}` is not a plain relative path");
    }
    Ok(dir.join(p))
}
