//! Acceptance suite. Criteria run one after another so each runtime is
//! measured without contention; every criterion prints one PASS/FAIL line.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dk_core::conv::conv2d_rigid;
use dk_core::deform::{
    dc_forward, dcdk_forward, dk_forward_global, dk_forward_local, GlobalOffsetGenerator,
    LocalOffsetGenerator,
};
use dk_core::erf::{
    erf_backprop, erf_dc, erf_decompose_check, erf_dk, erf_field, erf_stats, LinearStack,
};
use dk_core::gradcheck::{gradcheck_op, GRADCHECK_OPS, LINEAR_TOLERANCE, OFFSET_TOLERANCE};
use dk_core::random::{seeded_rng, uniform_tensor, DetRng};
use dk_core::sampler::{clip_offsets, resample_kernel};
use dk_core::train::{
    build_classifier, offset_scale_correlation, positive_control_model, shape_splits, train, Arch,
    TrainConfig,
};
use dk_core::{ConvSpec, KernelOffsets, KernelScope, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn pick(rng: &mut DetRng, lo: usize, hi: usize) -> usize {
    let u = uniform_tensor::<f64>(rng, [1, 1, 1, 1], 0.0, 1.0).data()[0];
    (lo + (u * (hi - lo + 1) as f64) as usize).min(hi)
}

/// Zero offsets reproduce rigid convolution bit for bit.
fn degeneracy() -> Check {
    let mut rng = seeded_rng(2024);
    for inst in 0..50 {
        let k = pick(&mut rng, 1, 3);
        let depthwise = pick(&mut rng, 0, 1) == 1;
        let cin = pick(&mut rng, 1, 3);
        let cout = if depthwise { cin } else { pick(&mut rng, 1, 3) };
        let spec = ConvSpec::new(
            k,
            pick(&mut rng, 1, 2),
            pick(&mut rng, 0, k - 1),
            depthwise,
            cin,
            cout,
        )
        .map_err(err)?;
        let (h, w) = (pick(&mut rng, k.max(4), 9), pick(&mut rng, k.max(4), 9));
        let input = uniform_tensor::<f64>(&mut rng, [2, cin, h, w], -1.0, 1.0);
        let kin = if depthwise { 1 } else { cin };
        let scope = KernelScope::rigid(uniform_tensor(&mut rng, [cout, kin, k, k], -1.0, 1.0))
            .map_err(err)?;
        let rigid = bits(&conv2d_rigid(&input, &scope, &spec).map_err(err)?);
        let (ho, wo) = spec.output_size(h, w).map_err(err)?;
        let zero = Tensor::zeros([2, 2 * k * k, ho, wo]).map_err(err)?;
        let outputs = [
            (
                "dk_global",
                dk_forward_global(&input, &scope, &GlobalOffsetGenerator::zeros(cin, k), &spec)
                    .map_err(err)?
                    .0,
            ),
            (
                "dk_local",
                dk_forward_local(
                    &input,
                    &scope,
                    &LocalOffsetGenerator::for_target(&spec).map_err(err)?,
                    &spec,
                )
                .map_err(err)?
                .0,
            ),
            ("dc", dc_forward(&input, &scope, &zero, &spec).map_err(err)?),
            (
                "dcdk",
                dcdk_forward(&input, &scope, &zero, &zero, &spec).map_err(err)?,
            ),
        ];
        for (name, out) in outputs {
            ensure(bits(&out) == rigid, || {
                format!("instance {inst}: {name} differs from rigid ({spec:?})")
            })?;
        }
    }
    Ok("50 instances × 4 operators bitwise equal".into())
}

fn is_linear_op(name: &str) -> bool {
    matches!(name, "conv_weights" | "conv_input" | "sampler_weights")
}

fn is_offset_op(name: &str) -> bool {
    matches!(name, "dk_offsets" | "dc_offsets" | "generator_params")
}

/// Every registered op, 20 seeds, at its registered tolerance; the listed
/// linear and offset ops must be registered at or below the pinned bounds.
fn gradients() -> Check {
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for op in GRADCHECK_OPS {
        if is_linear_op(op.name) {
            ensure(
                op.tolerance <= LINEAR_TOLERANCE && LINEAR_TOLERANCE <= 1e-6,
                || format!("{} tolerance {}", op.name, op.tolerance),
            )?;
        }
        if is_offset_op(op.name) {
            ensure(
                op.tolerance <= OFFSET_TOLERANCE && OFFSET_TOLERANCE <= 1e-4,
                || format!("{} tolerance {}", op.name, op.tolerance),
            )?;
        }
        for seed in 0..20 {
            let r = gradcheck_op(op.name, seed, None).map_err(err)?;
            ensure(r.pass, || {
                format!(
                    "{} seed {seed}: max rel error {:e} > {:e}",
                    op.name, r.max_rel_error, r.tolerance
                )
            })?;
            if r.max_rel_error / r.tolerance > worst.0 {
                worst = (r.max_rel_error / r.tolerance, op.name);
            }
            checked += r.checked;
        }
    }
    Ok(format!(
        "{} ops × 20 seeds, {checked} components, worst error/tolerance {:.3} ({})",
        GRADCHECK_OPS.len(),
        worst.0,
        worst.1
    ))
}

const GRID: usize = 15;

fn ones() -> Tensor<f64> {
    Tensor::new([1, 1, GRID, GRID], 1.0).expect("valid dims")
}

fn random_offsets(rng: &mut DetRng, k: usize, amp: f64) -> KernelOffsets<f64> {
    KernelOffsets::new(
        k,
        uniform_tensor::<f64>(rng, [1, 1, 1, 2 * k * k], -amp, amp).into_vec(),
    )
    .expect("2K² values")
}

/// Max over the grid of |backprop - closed form| for output `j`.
fn grid_diff(
    map: &dk_core::erf::ErfMap,
    j: (usize, usize),
    f: impl Fn((i64, i64), (i64, i64)) -> dk_core::Result<f64>,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for y in 0..GRID {
        for x in 0..GRID {
            let v = f((y as i64, x as i64), (j.0 as i64, j.1 as i64)).map_err(err)?;
            worst = worst.max((map.get(y, x) - v).abs());
        }
    }
    Ok(worst)
}

/// Backprop against enumeration, the per-layer decomposition, and the DK/DC
/// closed forms against autodiff through the deformed graphs.
fn erf_oracles() -> Check {
    let (mut enum_worst, mut dec_worst, mut dk_worst, mut dc_worst) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut rng = seeded_rng(77);
    for n in 1..=3usize {
        for seed in 0..8u64 {
            let stack = LinearStack::random(n, 3, 100 * n as u64 + seed, -1.0, 1.0).map_err(err)?;
            let model = stack.to_model(false).map_err(err)?;
            let r = stack.rf_half_width();
            for jy in r..GRID - r {
                for jx in r..GRID - r {
                    let back = erf_backprop(&model, &ones(), (jy, jx)).map_err(err)?.0;
                    let en = erf_field(&stack, (jy, jx), GRID, GRID).map_err(err)?;
                    enum_worst = enum_worst.max(back.max_abs_diff(&en).map_err(err)?);
                }
            }
            let j = (GRID as i64 / 2, GRID as i64 / 2);
            for m in 0..n {
                for dy in -(r as i64)..=r as i64 {
                    for dx in -(r as i64)..=r as i64 {
                        let c =
                            erf_decompose_check(&stack, (j.0 + dy, j.1 + dx), j, m).map_err(err)?;
                        dec_worst = dec_worst.max(c.residual);
                    }
                }
            }
            let jc = (GRID / 2, GRID / 2);
            for m in 0..n {
                let mut dk = stack.clone();
                let scope =
                    KernelScope::new(3, 4, uniform_tensor(&mut rng, [1, 1, 4, 4], -1.0, 1.0))
                        .map_err(err)?;
                dk.set_kernel_offsets(m, scope, random_offsets(&mut rng, 3, 0.7))
                    .map_err(err)?;
                let back = erf_backprop(&dk.to_model(false).map_err(err)?, &ones(), jc)
                    .map_err(err)?
                    .0;
                dk_worst = dk_worst.max(grid_diff(&back, jc, |i, j| erf_dk(&dk, i, j))?);

                let mut dc = stack.clone();
                dc.set_data_offsets(m, random_offsets(&mut rng, 3, 0.9))
                    .map_err(err)?;
                let back = erf_backprop(&dc.to_model(false).map_err(err)?, &ones(), jc)
                    .map_err(err)?
                    .0;
                dc_worst = dc_worst.max(grid_diff(&back, jc, |i, j| erf_dc(&dc, i, j))?);
            }
        }
    }
    ensure(enum_worst <= 1e-10, || {
        format!("backprop vs enumeration {enum_worst:e}")
    })?;
    ensure(dec_worst <= 1e-12, || {
        format!("decomposition residual {dec_worst:e}")
    })?;
    ensure(dk_worst <= 1e-10, || {
        format!("erf_dk vs autodiff {dk_worst:e}")
    })?;
    ensure(dc_worst <= 1e-10, || {
        format!("erf_dc vs autodiff {dc_worst:e}")
    })?;
    Ok(format!(
        "enumeration {enum_worst:.1e}, decomposition {dec_worst:.1e}, dk {dk_worst:.1e}, dc {dc_worst:.1e}"
    ))
}

/// Positive ReLU networks have the linear ERF; a crafted mixed-sign network
/// loses support.
fn relu_erf() -> Check {
    let mut worst = 0.0f64;
    for n in 1..=3usize {
        for seed in 0..10u64 {
            let stack = LinearStack::random(n, 3, 500 + seed, 0.05, 1.0).map_err(err)?;
            let input = uniform_tensor(&mut seeded_rng(900 + seed), [1, 1, GRID, GRID], 0.05, 1.0);
            let j = (GRID / 2, GRID / 2);
            let gated = erf_backprop(&stack.to_model(true).map_err(err)?, &input, j)
                .map_err(err)?
                .0;
            let linear = erf_field(&stack, j, GRID, GRID).map_err(err)?;
            worst = worst.max(gated.max_abs_diff(&linear).map_err(err)?);
        }
    }
    ensure(worst <= 1e-12, || {
        format!("positive ReLU ERF differs from linear by {worst:e}")
    })?;

    let mut w1 = Tensor::new([1, 1, 3, 3], 1.0).map_err(err)?;
    w1.set(0, 0, 0, 0, -0.5);
    let stack =
        LinearStack::rigid(vec![w1, Tensor::new([1, 1, 3, 3], 1.0).map_err(err)?]).map_err(err)?;
    let j = (GRID / 2, GRID / 2);
    let mut input = Tensor::zeros([1, 1, GRID, GRID]).map_err(err)?;
    input.set(0, 0, j.0, j.1, 1.0);
    let gated = erf_backprop(&stack.to_model(true).map_err(err)?, &input, j)
        .map_err(err)?
        .0;
    let linear = erf_field(&stack, j, GRID, GRID).map_err(err)?;
    let (sg, sl) = (
        erf_stats(&gated).map_err(err)?.support,
        erf_stats(&linear).map_err(err)?.support,
    );
    ensure(sg < sl, || {
        format!("mixed-sign support {sg} not below linear support {sl}")
    })?;
    Ok(format!(
        "positive nets within {worst:.1e}; mixed-sign support {sg} < {sl}"
    ))
}

/// Partition of unity, four-tap locality and clipping idempotence through the
/// real resampler: a 1×1 kernel over a one-hot scope bank reads every cell's
/// bilinear weight at the sampled coordinate.
fn sampler_properties() -> Check {
    let mut rng = seeded_rng(5);
    let mut pou = 0.0f64;
    for i in 0..10_000 {
        let s = 3 + i % 4;
        let mut bank = Tensor::zeros([s * s, 1, s, s]).map_err(err)?;
        for c in 0..s * s {
            bank.set(c, 0, c / s, c % s, 1.0);
        }
        let scope = KernelScope::new(1, s, bank).map_err(err)?;
        let reach = s as f64 / 2.0 + 1.0;
        let off = random_offsets(&mut rng, 1, reach);
        let clipped = clip_offsets(&off, &scope).map_err(err)?;
        ensure(
            clip_offsets(&clipped, &scope).map_err(err)? == clipped,
            || format!("clip not idempotent at {off:?}"),
        )?;
        let w = resample_kernel(&scope, &off).map_err(err)?;
        let c = (s - 1) as f64 / 2.0;
        let (ux, uy) = (c + clipped.values()[0], c + clipped.values()[1]);
        let sum: f64 = w.data().iter().sum();
        pou = pou.max((sum - 1.0).abs());
        for (cell, &v) in w.data().iter().enumerate() {
            let (cy, cx) = ((cell / s) as f64, (cell % s) as f64);
            let near = (cx - ux).abs() < 1.0 && (cy - uy).abs() < 1.0;
            ensure(near || v == 0.0, || {
                format!("cell {cell} of scope {s} has weight {v} at ({ux}, {uy})")
            })?;
        }
    }
    ensure(pou <= 1e-12, || {
        format!("partition of unity off by {pou:e}")
    })?;
    Ok(format!(
        "10000 coordinates, partition of unity within {pou:.1e}, exact locality and idempotence"
    ))
}

struct Trained {
    dk: dk_core::model::ModelGraph<f32>,
    val: Vec<dk_core::data::ShapeSample>,
}

/// Rigid baseline and local DK under the default 20-epoch budget.
fn training(out: &mut Option<Trained>) -> Check {
    let base = TrainConfig::default();
    let (tr, va) = shape_splits(&base).map_err(err)?;
    ensure(
        tr.len() == 4000 && va.len() == 1000 && base.epochs == 20,
        || "budget differs from 4k/1k/20".into(),
    )?;
    let rigid = train::<f32>(
        &TrainConfig {
            arch: Arch::Rigid,
            ..base.clone()
        },
        &tr,
        &va,
        |_| {},
    )
    .map_err(err)?;
    let dk = train::<f32>(
        &TrainConfig {
            arch: Arch::DkLocal,
            ..base
        },
        &tr,
        &va,
        |_| {},
    )
    .map_err(err)?;
    let r = rigid.log.last_val().expect("val rows").accuracy;
    let d = dk.log.last_val().expect("val rows").accuracy;
    *out = Some(Trained {
        dk: dk.model,
        val: va,
    });
    ensure(r > 0.90, || format!("rigid val accuracy {r:.4} ≤ 0.90"))?;
    ensure(d >= r - 0.01, || {
        format!("local DK {d:.4} below rigid {r:.4} - 0.01")
    })?;
    Ok(format!("rigid {r:.4}, local DK {d:.4}"))
}

fn scale_awareness(trained: Option<&Trained>) -> Check {
    let t = trained.ok_or("training did not complete")?;
    let control =
        offset_scale_correlation(&positive_control_model(4).map_err(err)?, &t.val).map_err(err)?;
    let control = control.ok_or("positive control has constant offsets")?;
    ensure(control >= 0.95, || {
        format!("positive control ρ {control:.4} < 0.95")
    })?;
    let untrained = build_classifier::<f32>(&TrainConfig {
        arch: Arch::DkLocal,
        ..Default::default()
    })
    .map_err(err)?;
    let before = offset_scale_correlation(&untrained, &t.val)
        .map_err(err)?
        .map_or(0.0, f64::abs);
    let after = offset_scale_correlation(&t.dk, &t.val)
        .map_err(err)?
        .ok_or("trained offsets are constant")?;
    ensure(after.abs() >= before + 0.1, || {
        format!("trained |ρ| {:.4} vs untrained {before:.4}", after.abs())
    })?;
    Ok(format!(
        "control ρ {control:.4}, trained ρ {after:.4}, untrained |ρ| {before:.4}"
    ))
}

fn dk(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dk"))
        .args(args)
        .current_dir(dir)
        .env("DK_NUM_THREADS", "1")
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!(
            "dk {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Every artifact-producing command, replayed from its manifest.
fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let d = tmp.path();
    std::fs::write(
        d.join("small.cfg"),
        "epochs = 2\ntrain_samples = 96\nval_samples = 32\nbatch_size = 16\nprecision = f64\n",
    )
    .map_err(err)?;
    dk(&["dataset", "--n", "64", "--seed", "3", "--out", "ds"], d)?;
    dk(
        &["gradcheck", "--op", "all", "--seed", "1", "--out", "gc"],
        d,
    )?;
    dk(
        &[
            "erf",
            "--model",
            "linear:n=3,k=3,seed=4",
            "--at",
            "7,7",
            "--mode",
            "both",
            "--out",
            "erf/lin",
        ],
        d,
    )?;
    dk(
        &[
            "train",
            "--arch",
            "dcdk",
            "--config",
            "small.cfg",
            "--out",
            "tr",
        ],
        d,
    )?;
    dk(
        &[
            "erf",
            "--model",
            "tr/checkpoint",
            "--input",
            "synthetic:shape:cross:1.8",
            "--at",
            "4,4",
            "--out",
            "erf/ckpt",
        ],
        d,
    )?;
    let manifests = [
        "ds/manifest.json",
        "gc/manifest.json",
        "erf/lin.manifest.json",
        "tr/manifest.json",
        "erf/ckpt.manifest.json",
    ];
    for m in manifests {
        dk(&["replay", m], d)?;
    }
    Ok(format!(
        "{} manifests replayed byte-identically",
        manifests.len()
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report =
        |id: u32, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Check| {
            let start = Instant::now();
            let result = f();
            let took = start.elapsed();
            let within = budget.is_none_or(|b| took <= b);
            let verdict = match &result {
                Ok(_) if within => "PASS",
                _ => "FAIL",
            };
            let detail = match result {
                Ok(s) if within => s,
                Ok(s) => format!("{s}; over budget"),
                Err(e) => e,
            };
            if verdict == "FAIL" {
                failed += 1;
            }
            let limit = budget.map_or("no limit".to_string(), |b| format!("{}s", b.as_secs()));
            println!(
                "criterion {id} {name}: {verdict} [{:.1}s / {limit}] {detail}",
                took.as_secs_f64()
            );
        };
    let mut trained = None;
    report(
        1,
        "degeneracy",
        Some(Duration::from_secs(10)),
        &mut degeneracy,
    );
    report(
        2,
        "gradients",
        Some(Duration::from_secs(120)),
        &mut gradients,
    );
    report(
        3,
        "erf oracles",
        Some(Duration::from_secs(300)),
        &mut erf_oracles,
    );
    report(4, "relu erf", Some(Duration::from_secs(30)), &mut relu_erf);
    report(
        5,
        "sampler",
        Some(Duration::from_secs(5)),
        &mut sampler_properties,
    );
    report(6, "training", Some(Duration::from_secs(900)), &mut || {
        training(&mut trained)
    });
    report(
        7,
        "scale awareness",
        Some(Duration::from_secs(60)),
        &mut || scale_awareness(trained.as_ref()),
    );
    report(8, "determinism", None, &mut determinism);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
