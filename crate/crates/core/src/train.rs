//! Shape-classification training: configuration, architectures, SGD with
//! warmup and cosine decay, metrics, and the offset/scale correlation probe.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::data::{batch, gen_dataset, ShapeSample};
use crate::deform::GlobalOffsetGenerator;
use crate::error::{Error, Result};
use crate::model::{softmax_cross_entropy, DeformKind, Layer, LayerDesc, ModelGraph, Trace};
use crate::random::seeded_rng;
use crate::tensor::Real;

pub const NUM_CLASSES: usize = 4;
const EVAL_BATCH: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Rigid,
    DkGlobal,
    DkLocal,
    Dc,
    Dcdk,
}

impl Arch {
    pub fn deform_kind(self) -> Option<DeformKind> {
        match self {
            Arch::Rigid => None,
            Arch::DkGlobal => Some(DeformKind::DkGlobal),
            Arch::DkLocal => Some(DeformKind::DkLocal),
            Arch::Dc => Some(DeformKind::Dc),
            Arch::Dcdk => Some(DeformKind::Dcdk),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rigid => "rigid",
            Arch::DkGlobal => "dk_global",
            Arch::DkLocal => "dk_local",
            Arch::Dc => "dc",
            Arch::Dcdk => "dcdk",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Accepts `dk_local` and `dk-local` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        [
            Arch::Rigid,
            Arch::DkGlobal,
            Arch::DkLocal,
            Arch::Dc,
            Arch::Dcdk,
        ]
        .into_iter()
        .find(|a| a.name() == key)
        .ok_or_else(|| Error::Config(format!("unknown arch `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Learning-rate multiplier for offset generators.
    pub dk_lr_multiplier: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub canvas: usize,
    pub scope_size: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Rigid,
            epochs: 20,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1.0,
            schedule: Schedule::Cosine,
            seed: 0,
            dk_lr_multiplier: crate::deform::DEFAULT_GENERATOR_LR_MULTIPLIER,
            train_samples: 4000,
            val_samples: 1000,
            canvas: 32,
            scope_size: 4,
            precision: Precision::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "arch",
        "epochs",
        "batch_size",
        "base_lr",
        "momentum",
        "weight_decay",
        "warmup_epochs",
        "schedule",
        "seed",
        "dk_lr_multiplier",
        "train_samples",
        "val_samples",
        "canvas",
        "scope_size",
        "precision",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "arch" => self.arch = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::Config(format!("unknown schedule `{value}`"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "dk_lr_multiplier" => self.dk_lr_multiplier = parse(key, value)?,
            "train_samples" => self.train_samples = parse(key, value)?,
            "val_samples" => self.val_samples = parse(key, value)?,
            "canvas" => self.canvas = parse(key, value)?,
            "scope_size" => self.scope_size = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("unknown precision `{value}`"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64)
            && self.epochs > 0
        {
            return bad("warmup_epochs must be in [0, epochs]");
        }
        if !(self.dk_lr_multiplier >= 0.0 && self.dk_lr_multiplier.is_finite()) {
            return bad("dk_lr_multiplier must be non-negative");
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("train_samples and val_samples must be positive");
        }
        if self.canvas < crate::data::MIN_CANVAS {
            return bad("canvas is below the dataset minimum");
        }
        if self.scope_size < 3 {
            return bad("scope_size must be at least the kernel size 3");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in Self::KEYS {
            let s = match &v[key] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            writeln!(out, "{key} = {s}").expect("writing to a string");
        }
        out
    }

    /// Learning rate after `progress` epochs: linear warmup from zero, then
    /// the schedule over the remaining epochs.
    pub fn lr_at(&self, progress: f64) -> f64 {
        if progress < self.warmup_epochs {
            return self.base_lr * progress / self.warmup_epochs;
        }
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine => {
                let span = self.epochs as f64 - self.warmup_epochs;
                if span <= 0.0 {
                    return self.base_lr;
                }
                let t = ((progress - self.warmup_epochs) / span).clamp(0.0, 1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Stem conv, four depthwise-separable blocks, global pooling and a linear
/// head. Deformable architectures replace the depthwise convolutions of the
/// last two blocks.
pub fn classifier_descs(
    arch: Arch,
    scope_size: usize,
    generator_lr_multiplier: f64,
) -> Result<Vec<LayerDesc>> {
    let mut descs = vec![
        LayerDesc::Rigid {
            spec: ConvSpec::new(3, 1, 1, false, 1, 16)?,
            bias: true,
        },
        LayerDesc::Relu,
    ];
    let blocks = [(16, 32, 2), (32, 64, 1), (64, 64, 2), (64, 64, 1)];
    for (i, &(cin, cout, stride)) in blocks.iter().enumerate() {
        let dw = ConvSpec::new(3, stride, 1, true, cin, cin)?;
        match arch.deform_kind() {
            Some(kind) if i >= 2 => descs.push(LayerDesc::Deform {
                kind,
                spec: dw,
                scope_size: if kind.has_kernel_offsets() {
                    scope_size
                } else {
                    3
                },
                bias: false,
                lr_multiplier: generator_lr_multiplier,
            }),
            _ => descs.push(LayerDesc::Rigid {
                spec: dw,
                bias: false,
            }),
        }
        descs.push(LayerDesc::Relu);
        descs.push(LayerDesc::Rigid {
            spec: ConvSpec::new(1, 1, 0, false, cin, cout)?,
            bias: true,
        });
        descs.push(LayerDesc::Relu);
    }
    descs.push(LayerDesc::Pool);
    descs.push(LayerDesc::Fc {
        inputs: 64,
        outputs: NUM_CLASSES,
    });
    Ok(descs)
}

/// Seed offset separating the validation split from the training split.
const VAL_SEED_OFFSET: u64 = 0x7a1;

/// Training and validation splits for `cfg`, drawn from disjoint seeds.
pub fn shape_splits(cfg: &TrainConfig) -> Result<(Vec<ShapeSample>, Vec<ShapeSample>)> {
    Ok((
        gen_dataset(cfg.train_samples, cfg.canvas, cfg.seed)?,
        gen_dataset(
            cfg.val_samples,
            cfg.canvas,
            cfg.seed.wrapping_add(VAL_SEED_OFFSET),
        )?,
    ))
}

pub fn build_classifier<T: Real>(cfg: &TrainConfig) -> Result<ModelGraph<T>> {
    let mut model = ModelGraph::from_descs(&classifier_descs(
        cfg.arch,
        cfg.scope_size,
        cfg.dk_lr_multiplier,
    )?)?;
    model.init_random(&mut seeded_rng(cfg.seed));
    Ok(model)
}

/// SGD with momentum and decoupled-from-bias weight decay:
/// `v ← μv + g + λw`, `w ← w − lr·m·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &ModelGraph<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|(_, p)| vec![T::zero(); p.len()])
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, model: &mut ModelGraph<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        let infos: Vec<_> = model.params().into_iter().map(|(i, _)| i).collect();
        if grads.len() != infos.len() || self.velocity.len() != infos.len() {
            return Err(Error::Invalid(
                "gradient list does not match model parameters".into(),
            ));
        }
        let mu = T::from_f64(self.momentum);
        for (((info, params), grad), vel) in infos
            .iter()
            .zip(model.params_mut())
            .zip(grads)
            .zip(&mut self.velocity)
        {
            let wd = T::from_f64(if info.decays() {
                self.weight_decay
            } else {
                0.0
            });
            let step = T::from_f64(lr * info.lr_multiplier);
            for ((w, &g), v) in params.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= step * *v;
            }
        }
        Ok(())
    }
}

/// Batch statistics gathered during one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Mean loss over the batch.
    pub loss: f64,
    pub correct: usize,
    /// Sum over samples of the per-sample mean `|Δk|` at the last DK layer.
    pub offset_sum: f64,
}

/// Sum over the batch of each sample's mean absolute kernel offset at the
/// last DK layer; zero for models without kernel offsets.
fn offset_sum<T: Real>(model: &ModelGraph<T>, trace: &Trace<T>, n: usize) -> Result<f64> {
    Ok(match model.last_kernel_offsets(trace)? {
        Some(k) => k.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / (k.len() / n) as f64,
        None => 0.0,
    })
}

/// One forward/backward/update on a batch.
pub fn sgd_step<T: Real>(
    model: &mut ModelGraph<T>,
    opt: &mut Sgd<T>,
    samples: &[ShapeSample],
    indices: &[usize],
    lr: f64,
) -> Result<StepStats> {
    let (x, labels) = batch::<T>(samples, indices)?;
    let trace = model.forward(&x)?;
    let (loss, up) = softmax_cross_entropy(trace.output(), &labels)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    let stats = StepStats {
        loss,
        correct: count_correct(trace.output().data(), &labels),
        offset_sum: offset_sum(model, &trace, indices.len())?,
    };
    let (grads, _) = model.backward_from(&trace, model.layers.len(), &up, false)?;
    opt.step(model, &grads, lr)?;
    Ok(stats)
}

fn count_correct<T: Real>(logits: &[T], labels: &[usize]) -> usize {
    logits
        .chunks_exact(NUM_CLASSES)
        .zip(labels)
        .filter(|(z, &l)| {
            let best = z
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > z[b] { i } else { b });
            best == l
        })
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub mean_offset_mag: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricLog {
    pub const HEADER: &'static str = "epoch,split,accuracy,loss,mean_offset_mag";

    pub fn split(&self, split: &str) -> impl Iterator<Item = &EpochMetrics> {
        let split = split.to_string();
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn last_val(&self) -> Option<&EpochMetrics> {
        self.split("val").last()
    }

    pub fn to_csv(&self, split: &str) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in self.split(split) {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.split, r.accuracy, r.loss, r.mean_offset_mag
            )
            .expect("string write");
        }
        out
    }
}

/// Accuracy, mean loss and mean absolute clipped kernel offset (last
/// deformable layer; zero without one) over `samples`.
pub fn evaluate<T: Real>(
    model: &ModelGraph<T>,
    samples: &[ShapeSample],
) -> Result<(f64, f64, f64)> {
    let mut correct = 0;
    let mut loss = 0.0;
    let mut offset = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = batch::<T>(samples, chunk)?;
        let trace = model.forward(&x)?;
        let (l, _) = softmax_cross_entropy(trace.output(), &labels)?;
        loss += l * chunk.len() as f64;
        correct += count_correct(trace.output().data(), &labels);
        offset += offset_sum(model, &trace, chunk.len())?;
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss / n, offset / n))
}

pub struct TrainOutcome<T> {
    pub model: ModelGraph<T>,
    pub log: MetricLog,
}

/// Trains a fresh classifier. Validation metrics are logged before training
/// (epoch 0) and after every epoch; training rows carry running averages.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    train_set: &[ShapeSample],
    val_set: &[ShapeSample],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut model = build_classifier::<T>(cfg)?;
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = seeded_rng(cfg.seed.wrapping_add(0x5eed));
    let mut log = MetricLog::default();
    let mut push = |row: EpochMetrics, log: &mut MetricLog| {
        on_epoch(&row);
        log.rows.push(row);
    };
    let (acc, loss, off) = evaluate(&model, val_set)?;
    push(
        EpochMetrics {
            epoch: 0,
            split: "val".into(),
            accuracy: acc,
            loss,
            mean_offset_mag: off,
        },
        &mut log,
    );
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut offset) = (0.0, 0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.lr_at(epoch as f64 + (b + 1) as f64 / batches as f64);
            let stats =
                sgd_step(&mut model, &mut opt, train_set, chunk, lr).map_err(|e| match e {
                    Error::Divergence { .. } => Error::Divergence { step },
                    e => e,
                })?;
            loss_sum += stats.loss * chunk.len() as f64;
            correct += stats.correct;
            offset += stats.offset_sum;
            step += 1;
        }
        let n = train_set.len() as f64;
        push(
            EpochMetrics {
                epoch: epoch + 1,
                split: "train".into(),
                accuracy: correct as f64 / n,
                loss: loss_sum / n,
                mean_offset_mag: offset / n,
            },
            &mut log,
        );
        let (acc, loss, off) = evaluate(&model, val_set)?;
        push(
            EpochMetrics {
                epoch: epoch + 1,
                split: "val".into(),
                accuracy: acc,
                loss,
                mean_offset_mag: off,
            },
            &mut log,
        );
    }
    Ok(TrainOutcome { model, log })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Per-sample mean absolute clipped kernel offset at the last layer that has
/// kernel offsets.
pub fn offset_magnitudes<T: Real>(
    model: &ModelGraph<T>,
    samples: &[ShapeSample],
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = batch::<T>(samples, chunk)?;
        let trace = model.forward(&x)?;
        let k = model
            .last_kernel_offsets(&trace)?
            .ok_or_else(|| Error::Invalid("model has no kernel offsets".into()))?;
        for b in 0..chunk.len() {
            let item = k.item(b);
            out.push(item.iter().map(|v| v.as_f64().abs()).sum::<f64>() / item.len() as f64);
        }
    }
    Ok(out)
}

/// Spearman ρ between per-sample offset magnitude and object scale; `None`
/// when the offsets do not vary.
pub fn offset_scale_correlation<T: Real>(
    model: &ModelGraph<T>,
    samples: &[ShapeSample],
) -> Result<Option<f64>> {
    let mags = offset_magnitudes(model, samples)?;
    let scales: Vec<f64> = samples.iter().map(|s| s.scale).collect();
    Ok(spearman(&mags, &scales))
}

/// A single global DK layer whose offsets grow with mean image intensity,
/// which grows with object area and hence with scale.
pub fn positive_control_model(scope_size: usize) -> Result<ModelGraph<f64>> {
    let spec = ConvSpec::new(3, 1, 1, false, 1, 1)?;
    let mut layers = ModelGraph::<f64>::from_descs(&[LayerDesc::Deform {
        kind: DeformKind::DkGlobal,
        spec,
        scope_size,
        bias: false,
        lr_multiplier: 0.0,
    }])?
    .layers;
    if let Layer::Deform(d) = &mut layers[0] {
        let mut g = GlobalOffsetGenerator::zeros(1, 3);
        g.weights.iter_mut().for_each(|w| *w = 0.5);
        d.kernel_generator = Some(crate::deform::OffsetGenerator::Global(g));
    }
    Ok(ModelGraph::new(layers))
}
