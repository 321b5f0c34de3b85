use std::fs;
use std::path::PathBuf;

use anyhow::Context;

use crate::manifest::{output_path, Job, RunManifest};
use crate::CheckFailed;

#[derive(clap::Args)]
pub struct Args {
    /// Manifest written by an earlier run.
    manifest: PathBuf,
    /// Directory for the replayed artifacts; a temporary directory when
    /// omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Re-runs the manifest's job on one thread and compares every listed
/// artifact, and the manifest itself, byte for byte.
pub fn run(a: Args) -> anyhow::Result<()> {
    let original = RunManifest::read(&a.manifest)?;
    let job = Job::from_manifest(&original)?;
    let src = a
        .manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let tmp;
    let dst = match &a.out {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    job.execute_in(&dst)?;
    let mut files: Vec<String> = original.outputs.clone();
    files.push(job.manifest_name());
    let mut mismatched = Vec::new();
    for rel in &files {
        let a_path = output_path(&src, rel)?;
        let b_path = output_path(&dst, rel)?;
        let a_bytes = fs::read(&a_path).with_context(|| format!("reading {}", a_path.display()))?;
        let same = fs::read(&b_path).map(|b| b == a_bytes).unwrap_or(false);
        if !same {
            mismatched.push(rel.clone());
        }
    }
    println!(
        "replayed {} artifacts, {} differ",
        files.len(),
        mismatched.len()
    );
    for m in &mismatched {
        println!("differs: {m}");
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "{} artifacts differ from the original run",
            mismatched.len()
        ))
        .into())
    }
}
