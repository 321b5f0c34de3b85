use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dk_core::data::gen_dataset;
use dk_core::io::write_tsr;
use dk_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::manifest::{Job as AnyJob, Outcome};

pub const LABELS_FILE: &str = "labels.csv";
const SAMPLE_DIR: &str = "samples";

#[derive(clap::Args)]
pub struct Args {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 32)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub n: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl Job {
    /// Writes one `(1, 1, canvas, canvas)` f64 `.tsr` per sample plus
    /// `labels.csv` with `filename,label,scale,rotation`.
    pub fn run(&self, dir: &Path) -> anyhow::Result<Outcome> {
        let samples = gen_dataset(self.n, self.canvas, self.seed)?;
        fs::create_dir_all(dir.join(SAMPLE_DIR))?;
        let width = self.n.saturating_sub(1).to_string().len().max(5);
        let mut csv = String::from("filename,label,scale,rotation\n");
        let mut outputs = Vec::with_capacity(self.n + 1);
        for (i, s) in samples.iter().enumerate() {
            let file = format!("{SAMPLE_DIR}/{i:0width$}.tsr");
            write_tsr(
                dir.join(&file),
                &Tensor::from_vec([1, 1, s.canvas, s.canvas], s.pixels.clone())?,
            )?;
            writeln!(csv, "{file},{},{},{}", s.label(), s.scale, s.rotation)?;
            outputs.push(file);
        }
        fs::write(dir.join(LABELS_FILE), csv)?;
        outputs.push(LABELS_FILE.to_string());
        println!("wrote {} samples to {}", self.n, dir.display());
        Ok(Outcome {
            outputs,
            ..Default::default()
        })
    }
}

pub fn run(a: Args) -> anyhow::Result<()> {
    AnyJob::Dataset(Job {
        n: a.n,
        canvas: a.canvas,
        seed: a.seed,
    })
    .execute(&a.out)
}
