use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dk_core::gradcheck::{gradcheck_op, op_info, GRADCHECK_OPS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::{Job as AnyJob, Outcome};

pub const REPORT_FILE: &str = "report.txt";

#[derive(clap::Args)]
pub struct Args {
    /// Registered op name, or `all`.
    #[arg(long, required_unless_present = "list")]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Overrides the op's registered tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Also write the report and a manifest into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// List registered ops and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub ops: Vec<String>,
    pub seeds: Vec<u64>,
    pub tolerance: Option<f64>,
}

impl Job {
    /// Runs every (op, seed) pair and returns the concatenated report.
    fn report(&self) -> anyhow::Result<(String, usize)> {
        let mut text = String::new();
        let mut failed = 0;
        for op in &self.ops {
            for &seed in &self.seeds {
                let r = gradcheck_op(op, seed, self.tolerance)?;
                failed += usize::from(!r.pass);
                text.push_str(&r.to_string());
                text.push('\n');
            }
        }
        Ok((text, failed))
    }

    pub fn run(&self, dir: &Path) -> anyhow::Result<Outcome> {
        let (text, failed) = self.report()?;
        fs::write(dir.join(REPORT_FILE), &text)?;
        print!("{text}");
        Ok(self.outcome(failed, vec![REPORT_FILE.to_string()]))
    }

    fn outcome(&self, failed: usize, outputs: Vec<String>) -> Outcome {
        let total = self.ops.len() * self.seeds.len();
        let mut details = BTreeMap::new();
        details.insert("checks".to_string(), Value::from(total));
        details.insert("failed".to_string(), Value::from(failed));
        let failure = (failed > 0).then(|| format!("{failed} of {total} gradient checks failed"));
        Outcome {
            outputs,
            details,
            failure,
        }
    }
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.list {
        for o in GRADCHECK_OPS {
            println!("{:<24} tol={:e}  {}", o.name, o.tolerance, o.about);
        }
        return Ok(());
    }
    let op = a.op.expect("clap requires --op without --list");
    let ops = if op == "all" {
        GRADCHECK_OPS.iter().map(|o| o.name.to_string()).collect()
    } else {
        op_info(&op)?;
        vec![op]
    };
    if a.seeds == 0 {
        anyhow::bail!("--seeds must be at least 1");
    }
    let job = Job {
        ops,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        tolerance: a.tol,
    };
    match &a.out {
        Some(dir) => AnyJob::Gradcheck(job).execute(dir),
        None => {
            let (text, failed) = job.report()?;
            print!("{text}");
            match job.outcome(failed, Vec::new()).failure {
                Some(msg) => Err(crate::CheckFailed(msg).into()),
                None => Ok(()),
            }
        }
    }
}
