//! `dk erf`: ERF maps from linear stack specs or trained checkpoints.
//!
//! Model specs: `linear:n=3,k=3,seed=1[,lo=-1,hi=1]`, `uniform:n=2,k=3`,
//! `delta:n=1,k=3` (centered unit kernels); any of them takes `relu=1` to
//! insert ReLUs between layers. Anything else is a checkpoint directory.
//!
//! Inputs: a `.tsr` path, `synthetic:ones:HxW`, `synthetic:random:HxW:SEED`,
//! `synthetic:shape:CLASS:SCALE[:CANVAS]` (centered, unrotated) or
//! `synthetic:sample:INDEX[:SEED]` (a generated dataset sample, canvas 32).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use dk_core::checkpoint::load_checkpoint;
use dk_core::data::{centered_sample, gen_dataset, ShapeClass};
use dk_core::erf::{
    erf_backprop, erf_enumerate_literal, erf_field, erf_stats, ErfMap, LinearStack,
};
use dk_core::io::read_tsr;
use dk_core::model::ModelGraph;
use dk_core::random::{seeded_rng, uniform_tensor};
use dk_core::{Error, KernelScope, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::{Job as AnyJob, Outcome};

const DEFAULT_STACK_INPUT: &str = "synthetic:ones:15x15";
const SAMPLE_CANVAS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Backprop,
    Enumerate,
    Both,
}

#[derive(clap::Args)]
pub struct Args {
    /// Stack spec or checkpoint directory.
    #[arg(long)]
    model: String,
    /// Input image; defaults to 15×15 ones for stack specs.
    #[arg(long)]
    input: Option<String>,
    /// Output unit as `y,x`.
    #[arg(long, value_parser = parse_at)]
    at: (usize, usize),
    #[arg(long, value_enum, default_value_t = Mode::Backprop)]
    mode: Mode,
    /// Enumerate paths literally instead of by layer composition.
    #[arg(long)]
    literal: bool,
    /// Output prefix; writes `<prefix>.pgm`, `<prefix>.tsr` and
    /// `<prefix>.manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_at(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(y)?, p(x)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    /// Stack spec, or an absolute checkpoint path.
    pub model: String,
    /// Synthetic input spec, or an absolute `.tsr` path.
    pub input: String,
    pub at: (usize, usize),
    pub mode: Mode,
    pub literal: bool,
    /// File stem of the outputs.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
struct StackSpec {
    stack: LinearStack,
    relu: bool,
    seed: u64,
}

fn parse_stack(spec: &str) -> anyhow::Result<Option<StackSpec>> {
    let Some((kind, rest)) = spec.split_once(':') else {
        return Ok(None);
    };
    if !matches!(kind, "linear" | "uniform" | "delta") {
        return Ok(None);
    }
    let mut kv = BTreeMap::new();
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .with_context(|| format!("`{part}` is not key=value"))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str, default: Option<&str>| -> anyhow::Result<String> {
        kv.get(k)
            .copied()
            .or(default)
            .map(String::from)
            .with_context(|| format!("{kind} spec needs `{k}`"))
    };
    for k in kv.keys() {
        if !["n", "k", "seed", "lo", "hi", "relu"].contains(k) {
            bail!("unknown key `{k}` in model spec");
        }
    }
    let n: usize = get("n", None)?.parse()?;
    let k: usize = get("k", Some("3"))?.parse()?;
    let relu = get("relu", Some("0"))? == "1";
    let seed: u64 = get("seed", Some("0"))?.parse()?;
    if n == 0 {
        bail!("stack depth n must be positive");
    }
    let stack = match kind {
        "linear" => LinearStack::random(
            n,
            k,
            seed,
            get("lo", Some("-1"))?.parse()?,
            get("hi", Some("1"))?.parse()?,
        )?,
        "uniform" => LinearStack::uniform(n, k)?,
        _ => {
            let mut w = Tensor::zeros([1, 1, k, k])?;
            w.set(0, 0, k / 2, k / 2, 1.0);
            let layers = (0..n)
                .map(|_| KernelScope::rigid(w.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            LinearStack::new(
                layers
                    .into_iter()
                    .map(dk_core::erf::StackLayer::new)
                    .collect::<Result<_, _>>()?,
            )?
        }
    };
    Ok(Some(StackSpec { stack, relu, seed }))
}

fn parse_dims(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .with_context(|| format!("`{s}` is not HxW"))?;
    Ok((h.parse()?, w.parse()?))
}

fn load_input(spec: &str) -> anyhow::Result<Tensor<f64>> {
    let Some(rest) = spec.strip_prefix("synthetic:") else {
        let t: Tensor<f64> = read_tsr(spec).with_context(|| format!("reading input {spec}"))?;
        if t.dims()[0] != 1 {
            bail!(
                "input tensor must hold one image, found batch {}",
                t.dims()[0]
            );
        }
        return Ok(t);
    };
    let parts: Vec<&str> = rest.split(':').collect();
    match parts.as_slice() {
        ["ones", dims] => {
            let (h, w) = parse_dims(dims)?;
            Ok(Tensor::new([1, 1, h, w], 1.0)?)
        }
        ["random", dims, seed] => {
            let (h, w) = parse_dims(dims)?;
            Ok(uniform_tensor(
                &mut seeded_rng(seed.parse()?),
                [1, 1, h, w],
                0.0,
                1.0,
            ))
        }
        ["shape", class, scale, canvas @ ..] => {
            let canvas = match canvas {
                [] => SAMPLE_CANVAS,
                [c] => c.parse()?,
                _ => bail!("too many fields in `{spec}`"),
            };
            let s = centered_sample(class.parse::<ShapeClass>()?, scale.parse()?, 0.0, canvas)?;
            Ok(Tensor::from_vec([1, 1, canvas, canvas], s.pixels)?)
        }
        ["sample", index, seed @ ..] => {
            let index: usize = index.parse()?;
            let seed = match seed {
                [] => 0,
                [s] => s.parse()?,
                _ => bail!("too many fields in `{spec}`"),
            };
            let s = gen_dataset(index + 1, SAMPLE_CANVAS, seed)?.swap_remove(index);
            Ok(Tensor::from_vec(
                [1, 1, SAMPLE_CANVAS, SAMPLE_CANVAS],
                s.pixels,
            )?)
        }
        _ => bail!("unknown synthetic input `{spec}`"),
    }
}

fn enumerate(
    stack: &LinearStack,
    j: (usize, usize),
    h: usize,
    w: usize,
    literal: bool,
) -> anyhow::Result<ErfMap> {
    let r = stack.rf_half_width();
    if j.0 < r || j.1 < r || j.0 + r >= h || j.1 + r >= w {
        return Err(Error::OutOfBounds { y: j.0, x: j.1 }).context(format!(
            "enumeration needs the receptive field (half-width {r}) inside the {h}×{w} input"
        ));
    }
    let mut map = erf_field(stack, j, h, w)?;
    if literal {
        for y in j.0 - r..=j.0 + r {
            for x in j.1 - r..=j.1 + r {
                map.values[y * w + x] =
                    erf_enumerate_literal(stack, (y as i64, x as i64), (j.0 as i64, j.1 as i64))?;
            }
        }
    }
    Ok(map)
}

fn describe(map: &ErfMap, details: &mut BTreeMap<String, Value>) {
    match erf_stats(map) {
        Ok(s) => {
            println!(
                "support={} density={:.6} second_moment={:.6} mass_center={:.4},{:.4}",
                s.support, s.density, s.second_moment, s.mass_center.0, s.mass_center.1
            );
            details.insert("support".into(), Value::from(s.support));
            details.insert("density".into(), Value::from(s.density));
            details.insert("second_moment".into(), Value::from(s.second_moment));
        }
        Err(_) => println!("support=0 (map is identically zero)"),
    }
}

impl Job {
    pub fn seed(&self) -> u64 {
        parse_stack(&self.model)
            .ok()
            .flatten()
            .map_or(0, |s| s.seed)
    }

    pub fn run(&self, dir: &Path) -> anyhow::Result<Outcome> {
        let input = load_input(&self.input)?;
        let [_, _, h, w] = input.dims();
        let stack = parse_stack(&self.model)?;
        let model: ModelGraph<f64> = match &stack {
            Some(s) => s.stack.to_model(s.relu)?,
            None => load_checkpoint::<f64>(Path::new(&self.model))?.0,
        };
        let linear_stack = stack.as_ref().filter(|s| !s.relu).map(|s| &s.stack);
        if self.mode != Mode::Backprop && linear_stack.is_none() {
            bail!("enumeration needs a linear stack spec without relu");
        }
        let mut details = BTreeMap::new();
        let map = match self.mode {
            Mode::Backprop => erf_backprop(&model, &input, self.at)?.0,
            Mode::Enumerate => enumerate(
                linear_stack.expect("checked above"),
                self.at,
                h,
                w,
                self.literal,
            )?,
            Mode::Both => {
                let back = erf_backprop(&model, &input, self.at)?.0;
                let en = enumerate(
                    linear_stack.expect("checked above"),
                    self.at,
                    h,
                    w,
                    self.literal,
                )?;
                let diff = back.max_abs_diff(&en)?;
                println!("max_abs_diff={diff:e}");
                details.insert("max_abs_diff".into(), Value::from(diff));
                back
            }
        };
        describe(&map, &mut details);
        let (pgm, tsr) = (format!("{}.pgm", self.name), format!("{}.tsr", self.name));
        map.write_pgm(&dir.join(&pgm))?;
        map.write_tsr(&dir.join(&tsr))?;
        Ok(Outcome {
            outputs: vec![pgm, tsr],
            details,
            failure: None,
        })
    }
}

fn absolute(p: &str) -> anyhow::Result<String> {
    let path = std::fs::canonicalize(p).with_context(|| format!("resolving {p}"))?;
    path.to_str()
        .map(String::from)
        .context("path is not valid UTF-8")
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let is_stack = parse_stack(&a.model)?.is_some();
    let model = if is_stack {
        a.model.clone()
    } else {
        absolute(&a.model)?
    };
    let input = match a.input {
        Some(s) if s.starts_with("synthetic:") => s,
        Some(path) => absolute(&path)?,
        None if is_stack => DEFAULT_STACK_INPUT.to_string(),
        None => bail!("--input is required with a checkpoint model"),
    };
    let name = a
        .out
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("--out {} has no file name", a.out.display()))?
        .to_string();
    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    AnyJob::Erf(Job {
        model,
        input,
        at: a.at,
        mode: a.mode,
        literal: a.literal,
        name,
    })
    .execute(&dir)
}
