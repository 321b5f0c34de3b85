use std::path::PathBuf;

use anyhow::Context;
use dk_core::checkpoint::{load_checkpoint, read_index, INDEX_FILE};
use dk_core::data::{centered_sample, ShapeClass};
use dk_core::io::read_tsr;
use dk_core::model::Layer;
use dk_core::Tensor;

use crate::manifest::RunManifest;

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint directory, `.tsr` file or manifest.
    path: PathBuf,
    /// For checkpoints: report per-layer offset magnitudes on a centered
    /// shape of this scale, one line per class.
    #[arg(long)]
    probe_scale: Option<f64>,
}

fn summarize(t: &Tensor<f64>) -> String {
    let d = t.data();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    format!("dims={:?} min={lo:.6} max={hi:.6} mean={mean:.6}", t.dims())
}

fn mean_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len().max(1) as f64
}

fn inspect_checkpoint(a: &Args) -> anyhow::Result<()> {
    let index = read_index(&a.path)?;
    let (model, config) = load_checkpoint::<f64>(&a.path)?;
    println!(
        "dtype={} epoch={} layers={}",
        index.dtype,
        index.epoch,
        model.layers.len()
    );
    if let Some(c) = &config {
        println!("arch={} seed={}", c.arch.name(), c.seed);
    }
    for (i, l) in model.layers.iter().enumerate() {
        let extra = match l {
            Layer::Rigid(c) => format!(
                " k={} stride={} {}→{}",
                c.spec.kernel_size, c.spec.stride, c.spec.in_channels, c.spec.out_channels
            ),
            Layer::Deform(d) => format!(
                " k={} scope={} stride={} lr_multiplier={}",
                d.spec.kernel_size,
                d.scope.scope_size(),
                d.spec.stride,
                d.lr_multiplier
            ),
            Layer::Fc(f) => format!(" {}→{}", f.inputs, f.outputs),
            _ => String::new(),
        };
        println!("layer {i:>2} {}{extra}", l.kind_name());
    }
    let total: usize = model.params().iter().map(|(_, p)| p.len()).sum();
    println!("parameters={total}");
    if let Some(scale) = a.probe_scale {
        let canvas = config.as_ref().map_or(32, |c| c.canvas);
        for class in ShapeClass::ALL {
            let s = centered_sample(class, scale, 0.0, canvas)?;
            let trace = model.forward(&Tensor::from_vec([1, 1, canvas, canvas], s.pixels)?)?;
            for (i, o) in trace.offsets.iter().enumerate() {
                if let Some((k, d)) = o {
                    let k = k
                        .as_ref()
                        .map_or(String::from("-"), |t| format!("{:.6}", mean_abs(t)));
                    let d = d
                        .as_ref()
                        .map_or(String::from("-"), |t| format!("{:.6}", mean_abs(t)));
                    println!(
                        "probe {} scale={scale} layer {i} mean|dk|={k} mean|dj|={d}",
                        class.name()
                    );
                }
            }
        }
    }
    Ok(())
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.path.join(INDEX_FILE).is_file() {
        return inspect_checkpoint(&a);
    }
    match a.path.extension().and_then(|e| e.to_str()) {
        Some("tsr") => {
            let t: Tensor<f64> =
                read_tsr(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
            println!("{}", summarize(&t));
        }
        Some("json") => {
            let m = RunManifest::read(&a.path)?;
            println!(
                "command={} seed={} tool_version={}",
                m.command, m.seed, m.tool_version
            );
            for (k, v) in &m.details {
                println!("{k}={v}");
            }
            for o in &m.outputs {
                println!("output {o}");
            }
        }
        _ => anyhow::bail!(
            "{} is not a checkpoint directory, .tsr file or manifest",
            a.path.display()
        ),
    }
    Ok(())
}
