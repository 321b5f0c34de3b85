//! Cross-module invariants through the public API.

use dk_core::conv::conv2d_rigid;
use dk_core::data::{gen_dataset, SCALE_RANGE};
use dk_core::deform::deform_forward;
use dk_core::erf::{erf_enumerate_dp, erf_enumerate_literal, erf_field, LinearStack};
use dk_core::gradcheck::{finite_diff, gradcheck_op, GRADCHECK_OPS};
use dk_core::io::{decode_tsr, encode_tsr};
use dk_core::random::{seeded_rng, uniform_tensor};
use dk_core::sampler::{clip_offsets, resample_kernel};
use dk_core::{ConvSpec, Error, KernelOffsets, KernelScope, Tensor};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = (ConvSpec, usize, usize)> {
    (
        1usize..=3,
        1usize..=2,
        0usize..=2,
        any::<bool>(),
        1usize..=3,
        1usize..=3,
        4usize..=8,
        4usize..=8,
    )
        .prop_filter_map("valid spec", |(k, s, p, dw, cin, cout, h, w)| {
            let cout = if dw { cin } else { cout };
            ConvSpec::new(k, s, p.min(k - 1), dw, cin, cout)
                .ok()
                .map(|spec| (spec, h, w))
        })
}

fn kernel_dims(spec: &ConvSpec, scope: usize) -> [usize; 4] {
    [
        spec.out_channels,
        if spec.depthwise { 1 } else { spec.in_channels },
        scope,
        scope,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_conv_is_linear_in_its_input((spec, h, w) in spec_strategy(), seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = seeded_rng(seed);
        let x = uniform_tensor::<f64>(&mut rng, [2, spec.in_channels, h, w], -1.0, 1.0);
        let y = uniform_tensor::<f64>(&mut rng, [2, spec.in_channels, h, w], -1.0, 1.0);
        let k = KernelScope::rigid(uniform_tensor(&mut rng, kernel_dims(&spec, spec.kernel_size), -1.0, 1.0)).unwrap();
        let mix = Tensor::from_vec(x.dims(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let lhs = conv2d_rigid(&mix, &k, &spec).unwrap();
        let (cx, cy) = (conv2d_rigid(&x, &k, &spec).unwrap(), conv2d_rigid(&y, &k, &spec).unwrap());
        let rhs = Tensor::from_vec(cx.dims(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn zero_offsets_match_rigid_bitwise((spec, h, w) in spec_strategy(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let x = uniform_tensor::<f64>(&mut rng, [2, spec.in_channels, h, w], -1.0, 1.0);
        let k = KernelScope::rigid(uniform_tensor(&mut rng, kernel_dims(&spec, spec.kernel_size), -1.0, 1.0)).unwrap();
        let (ho, wo) = spec.output_size(h, w).unwrap();
        let k2 = spec.kernel_size * spec.kernel_size;
        let zl = Tensor::zeros([2, 2 * k2, ho, wo]).unwrap();
        let zg = Tensor::zeros([2, 2 * k2, 1, 1]).unwrap();
        let rigid: Vec<u64> = conv2d_rigid(&x, &k, &spec).unwrap().data().iter().map(|v| v.to_bits()).collect();
        for (ko, dof) in [(Some(&zg), None), (Some(&zl), None), (None, Some(&zl)), (Some(&zl), Some(&zl))] {
            let out = deform_forward(&x, &k, &spec, ko, dof).unwrap();
            prop_assert_eq!(out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), rigid.clone());
        }
    }

    #[test]
    fn sampling_on_the_scope_lattice_reads_stored_values(seed in any::<u64>(), scope in 3usize..7, picks in proptest::collection::vec((0usize..7, 0usize..7), 9)) {
        let mut rng = seeded_rng(seed);
        let s = KernelScope::new(3, scope, uniform_tensor(&mut rng, [1, 1, scope, scope], -1.0, 1.0)).unwrap();
        let spacing = s.lattice_spacing();
        let mut values = Vec::new();
        for (t, &(cx, cy)) in picks.iter().enumerate() {
            let (cx, cy) = (cx % scope, cy % scope);
            let (bx, by) = ((t % 3) as f64 * spacing, (t / 3) as f64 * spacing);
            values.extend([cx as f64 - bx, cy as f64 - by]);
        }
        let w = resample_kernel(&s, &KernelOffsets::new(3, values).unwrap()).unwrap();
        for (t, &(cx, cy)) in picks.iter().enumerate() {
            prop_assert_eq!(w.data()[t], s.weights().get(0, 0, cy % scope, cx % scope));
        }
    }

    #[test]
    fn clipping_lands_inside_the_scope(vals in proptest::collection::vec(-8.0f64..8.0, 18), scope in 3usize..8) {
        let s = KernelScope::new(3, scope, Tensor::new([1, 1, scope, scope], 1.0).unwrap()).unwrap();
        let c = clip_offsets(&KernelOffsets::new(3, vals).unwrap(), &s).unwrap();
        let h = s.half_extent();
        for (t, p) in s.base_lattice().iter().enumerate() {
            let (dx, dy) = c.get(t);
            prop_assert!((p.x + dx).abs() <= h + 1e-12 && (p.y + dy).abs() <= h + 1e-12);
        }
        prop_assert_eq!(clip_offsets(&c, &s).unwrap(), c);
    }

    #[test]
    fn literal_and_composed_enumeration_agree(seed in any::<u64>(), n in 1usize..=3, dof in proptest::collection::vec(-0.9f64..0.9, 18), layer in 0usize..3) {
        let mut stack = LinearStack::random(n, 3, seed, -1.0, 1.0).unwrap();
        stack.set_data_offsets(layer % n, KernelOffsets::new(3, dof).unwrap()).unwrap();
        for dy in -4i64..=4 {
            for dx in -4i64..=4 {
                let a = erf_enumerate_literal(&stack, (10 + dy, 10 + dx), (10, 10)).unwrap();
                let b = erf_enumerate_dp(&stack, (10 + dy, 10 + dx), (10, 10)).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn erf_mass_is_the_product_of_kernel_sums(seed in any::<u64>(), n in 1usize..=4) {
        let stack = LinearStack::random(n, 3, seed, -1.0, 1.0).unwrap();
        let map = erf_field(&stack, (10, 10), 21, 21).unwrap();
        let expected: f64 = stack.layers.iter().map(|l| l.effective_kernel().unwrap().data().iter().sum::<f64>()).product();
        prop_assert!((map.values.iter().sum::<f64>() - expected).abs() < 1e-12);
    }

    #[test]
    fn tsr_round_trips_bitwise(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let t = uniform_tensor::<f64>(&mut seeded_rng(seed), [n, c, h, w], -1e3, 1e3);
        prop_assert_eq!(decode_tsr::<f64>(&encode_tsr(&t)).unwrap(), t.clone());
        let narrow = uniform_tensor::<f32>(&mut seeded_rng(seed), [n, c, h, w], -1.0, 1.0);
        prop_assert_eq!(decode_tsr::<f32>(&encode_tsr(&narrow)).unwrap(), narrow);
    }
}

#[test]
fn finite_differences_of_polynomials_are_second_order() {
    let f = |p: &[f64]| Ok(p[0] * p[0] * p[0] + 2.0 * p[1] * p[1]);
    for h in [1e-2, 1e-3] {
        let g = finite_diff(f, &[1.5, -2.0], h).unwrap();
        // Central difference of x³ has error exactly h².
        assert!((g[0] - (3.0 * 1.5 * 1.5 + h * h)).abs() < 1e-9);
        assert!((g[1] + 8.0).abs() < 1e-9);
    }
    let g = finite_diff(|p: &[f64]| Ok(p[0] * p[0]), &[3.0], 1e-6).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-6);
    assert_eq!(
        finite_diff(|_: &[f64]| Ok(4.0), &[1.0, 2.0], 1e-6).unwrap(),
        vec![0.0, 0.0]
    );
    assert!(finite_diff(|_: &[f64]| Ok(f64::NAN), &[1.0], 1e-6).is_err());
}

#[test]
fn every_registered_op_passes_one_seed_and_fails_at_zero_tolerance() {
    for op in GRADCHECK_OPS {
        let r = gradcheck_op(op.name, 3, None).unwrap();
        assert!(r.pass, "{r}");
        let strict = gradcheck_op(op.name, 3, Some(0.0)).unwrap();
        assert!(!strict.pass || strict.max_rel_error == 0.0, "{strict}");
    }
    assert!(matches!(
        gradcheck_op("bogus", 0, None),
        Err(Error::UnknownOp(_))
    ));
}

#[test]
fn dk_offsets_seed_seven_passes() {
    let r = gradcheck_op("dk_offsets", 7, Some(1e-4)).unwrap();
    assert!(r.pass && r.checked > 0, "{r}");
}

#[test]
fn scales_are_uniform() {
    let data = gen_dataset(10_000, 24, 11).unwrap();
    let bins = 10;
    let mut counts = vec![0usize; bins];
    for s in &data {
        let u = (s.scale - SCALE_RANGE.0) / (SCALE_RANGE.1 - SCALE_RANGE.0);
        counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let e = data.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99th percentile of χ² with 9 degrees of freedom.
    assert!(chi2 < 21.666, "χ² = {chi2}, counts {counts:?}");
}
