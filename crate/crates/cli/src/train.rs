use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dk_core::checkpoint::{save_checkpoint, INDEX_FILE};
use dk_core::model::{Layer, ModelGraph};
use dk_core::train::{shape_splits, train, Arch, Precision, TrainConfig, TrainOutcome};
use dk_core::Real;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::{Job as AnyJob, Outcome};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(clap::Args)]
pub struct Args {
    /// rigid, dk-global, dk-local, dc or dcdk; overrides the config file.
    #[arg(long)]
    arch: Option<String>,
    /// Line-oriented `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub config: TrainConfig,
}

/// One line per deformable layer naming its offset structures.
pub fn offset_structures<T: Real>(model: &ModelGraph<T>) -> Vec<String> {
    model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Deform(d) => {
                let mut parts = Vec::new();
                if let Some(g) = &d.kernel_generator {
                    let scope = match g {
                        dk_core::deform::OffsetGenerator::Global(_) => "global",
                        dk_core::deform::OffsetGenerator::Local(_) => "local",
                    };
                    parts.push(format!("kernel_offsets({scope})"));
                }
                if d.data_generator.is_some() {
                    parts.push("data_offsets(local)".to_string());
                }
                Some(format!("layer {i} {}: {}", d.kind.name(), parts.join(", ")))
            }
            _ => None,
        })
        .collect()
}

impl Job {
    pub fn run(&self, dir: &Path) -> anyhow::Result<Outcome> {
        match self.config.precision {
            Precision::F32 => self.run_as::<f32>(dir),
            Precision::F64 => self.run_as::<f64>(dir),
        }
    }

    fn run_as<T: Real>(&self, dir: &Path) -> anyhow::Result<Outcome> {
        let cfg = &self.config;
        let (train_set, val_set) = shape_splits(cfg)?;
        let TrainOutcome { model, log } = train::<T>(cfg, &train_set, &val_set, |r| {
            eprintln!(
                "epoch {:>3} {:<5} acc {:.4} loss {:.4} offset {:.5}",
                r.epoch, r.split, r.accuracy, r.loss, r.mean_offset_mag
            );
        })?;
        let ckpt = dir.join(CHECKPOINT_DIR);
        save_checkpoint(&ckpt, &model, Some(cfg), cfg.epochs)?;
        fs::write(dir.join(METRICS_FILE), log.to_csv("val"))?;
        fs::write(dir.join(TRAIN_METRICS_FILE), log.to_csv("train"))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_kv())?;
        let mut outputs = vec![format!("{CHECKPOINT_DIR}/{INDEX_FILE}")];
        outputs.extend(
            model
                .params()
                .into_iter()
                .map(|(info, _)| format!("{CHECKPOINT_DIR}/{}.tsr", info.name)),
        );
        outputs.extend([METRICS_FILE, TRAIN_METRICS_FILE, CONFIG_FILE].map(String::from));
        let mut details = BTreeMap::new();
        details.insert(
            "offset_structures".to_string(),
            Value::from(offset_structures(&model)),
        );
        if let Some(v) = log.last_val() {
            details.insert("final_val_accuracy".to_string(), Value::from(v.accuracy));
            println!("final val accuracy {:.4}", v.accuracy);
        }
        Ok(Outcome {
            outputs,
            details,
            failure: None,
        })
    }
}

pub fn resolve(a: &Args) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(arch) = &a.arch {
        cfg.arch = arch.parse::<Arch>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let config = resolve(&a)?;
    AnyJob::Train(Job { config }).execute(&a.out)
}
