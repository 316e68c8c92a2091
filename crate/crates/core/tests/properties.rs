use alphaflops_core::alpha::{
    alpha_factor, alpha_flops, gustafson_ratio, regime_alpha, AlphaInput, AlphaParams, RegimeParams,
};
use alphaflops_core::bench::{count_ops, KernelVariant};
use alphaflops_core::layer::{
    conv_flops, dense_as_conv, dense_flops, gemm_flops, output_shape, Conv2DDescriptor,
    DenseDescriptor, GemmSpec, LayerDescriptor, Padding,
};
use alphaflops_core::sweep::{generate_sweep, Axis, Compensation, SweepSpec};
use proptest::prelude::*;

/// Walks every multiply-accumulate of a convolution, independent of the
/// library kernels: output positions times kernel taps times channels.
fn brute_force_conv_ops(c: &Conv2DDescriptor) -> u64 {
    let (w_out, h_out) = match c.padding {
        Padding::Same => (c.w_in.div_ceil(c.stride), c.h_in.div_ceil(c.stride)),
        Padding::Valid => (
            (c.w_in - c.k1) / c.stride + 1,
            (c.h_in - c.k2) / c.stride + 1,
        ),
    };
    let mut ops = 0u64;
    for _ in 0..c.batch {
        for _ in 0..w_out * h_out * c.c_out {
            for _ in 0..c.k1 * c.k2 * c.c_in {
                ops += 2;
            }
        }
    }
    ops
}

fn small_conv() -> impl Strategy<Value = Conv2DDescriptor> {
    (
        1u32..=16,
        1u32..=16,
        1u32..=16,
        1u32..=16,
        1u32..=5,
        1u32..=5,
        1u32..=3,
        any::<bool>(),
        1u32..=2,
    )
        .prop_filter_map(
            "kernel must fit for valid padding",
            |(w, h, cin, cout, k1, k2, s, valid, b)| {
                let pad = if valid { Padding::Valid } else { Padding::Same };
                let c = Conv2DDescriptor::new(w, h, cin, cout, 1)
                    .with_kernel(k1, k2)
                    .with_stride(s)
                    .with_padding(pad)
                    .with_batch(b);
                c.validate().ok().map(|_| c)
            },
        )
}

fn regime() -> impl Strategy<Value = RegimeParams> {
    (1e-4f64..=1.0, 0.05f64..=1.0, 1.0f64..=64.0).prop_map(|(b, g, s)| RegimeParams::new(b, g, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_count_matches_brute_force_and_kernels(c in small_conv()) {
        let formula = conv_flops(&c).unwrap();
        prop_assert_eq!(formula, brute_force_conv_ops(&c));
        let layer = LayerDescriptor::from(c);
        prop_assert_eq!(count_ops(&layer, KernelVariant::NaiveDirect).unwrap().total(), formula);
        prop_assert_eq!(count_ops(&layer, KernelVariant::Im2colGemm).unwrap().total(), formula);
    }

    #[test]
    fn dense_count_matches_kernels(din in 1u32..=16, dout in 1u32..=16, bias in any::<bool>()) {
        let d = DenseDescriptor::new(din, dout).with_bias(bias);
        let expected = 2 * u64::from(din) * u64::from(dout) + if bias { u64::from(dout) } else { 0 };
        prop_assert_eq!(dense_flops(&d, true).unwrap(), expected);
        for v in [KernelVariant::NaiveDirect, KernelVariant::Im2colGemm] {
            prop_assert_eq!(count_ops(&d.into(), v).unwrap().total(), expected);
        }
    }

    #[test]
    fn dense_equals_unary_conv(din in 1u32..100_000, dout in 1u32..100_000) {
        let d = DenseDescriptor::new(din, dout);
        prop_assert_eq!(conv_flops(&dense_as_conv(&d)).unwrap(), dense_flops(&d, false).unwrap());
        let p = AlphaParams::reference_defaults();
        prop_assert_eq!(
            alpha_flops(&d.into(), &p).unwrap().to_bits(),
            alpha_flops(&dense_as_conv(&d).into(), &p).unwrap().to_bits()
        );
    }

    #[test]
    fn batch_is_multiplicative(c in small_conv(), b in 1u32..64) {
        let one = conv_flops(&c.with_batch(1)).unwrap();
        prop_assert_eq!(conv_flops(&c.with_batch(b)).unwrap(), u64::from(b) * one);
    }

    #[test]
    fn same_stride_one_preserves_shape(w in 1u32..4096, h in 1u32..4096, k in 1u32..9) {
        let c = Conv2DDescriptor::new(w, h, 1, 1, k);
        prop_assert_eq!(output_shape(&c).unwrap(), (w, h));
    }

    #[test]
    fn gemm_exact_gap_is_three_mn(m in 1u32..2000, k in 1u32..2000, n in 1u32..2000) {
        let s = GemmSpec::new(m, k, n);
        let gap = gemm_flops(&s, true).unwrap() - gemm_flops(&s, false).unwrap();
        prop_assert_eq!(gap, 3 * u64::from(m) * u64::from(n));
    }

    #[test]
    fn descriptor_text_round_trips(c in small_conv()) {
        let layer = LayerDescriptor::from(c);
        let back: LayerDescriptor = layer.to_string().parse().unwrap();
        prop_assert_eq!(back, layer);
    }

    #[test]
    fn alpha_is_at_most_one_and_decreasing(r in regime(), s in 1.0f64..1e6, ds in 1.0f64..1e4) {
        let a = regime_alpha(&r, s);
        prop_assert!(a > 0.0 && a <= 1.0);
        if s > r.s_k && r.beta < 1.0 {
            prop_assert!(a < 1.0);
            prop_assert!(regime_alpha(&r, s + ds) < a);
        }
        if s <= r.s_k {
            prop_assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn alpha_flops_never_exceeds_flops(c in small_conv()) {
        let p = AlphaParams::reference_defaults();
        let f = conv_flops(&c).unwrap() as f64;
        let af = alpha_flops(&c.into(), &p).unwrap();
        let alpha = alpha_factor(&AlphaInput::for_conv(&c).unwrap(), &p);
        prop_assert!(af <= f);
        prop_assert_eq!(af == f, alpha == 1.0);
    }

    #[test]
    fn gamma_one_matches_gustafson(beta in 1e-6f64..=1.0, s in 1.0f64..1e7) {
        let r = RegimeParams::new(beta, 1.0, 1.0);
        let a = regime_alpha(&r, s);
        let g = gustafson_ratio(beta, s);
        prop_assert!((a - g).abs() <= 1e-12 * g);
    }

    #[test]
    fn sweeps_stay_within_ten_percent_spread(
        target in 1_000_000u64..5_000_000_000,
        lo in 1u32..6,
        span in 0u32..12,
        channels in any::<bool>(),
    ) {
        let (comp, base) = if channels {
            (Compensation::CInCOut, Conv2DDescriptor::new(12, 12, 1, 1, 1))
        } else {
            (Compensation::WH, Conv2DDescriptor::new(1, 1, 8, 8, 1))
        };
        let spec = SweepSpec::over_range(target, Axis::K, comp, lo, lo + span, base);
        if let Ok(out) = generate_sweep(&spec) {
            let fs: Vec<u64> = out.layers.iter().map(|c| conv_flops(c).unwrap()).collect();
            let (min, max) = (*fs.iter().min().unwrap(), *fs.iter().max().unwrap());
            prop_assert!(max as f64 / min as f64 <= 1.10);
            prop_assert_eq!(out.layers.len() + out.dropped.len(), spec.points.len());
        }
    }
}

#[test]
fn beta_one_is_identity_and_unit_surface_is_one() {
    for gamma in [0.05, 0.5, 1.0] {
        for s in [1.0, 7.0, 1e5] {
            assert_eq!(regime_alpha(&RegimeParams::new(1.0, gamma, 4.0), s), 1.0);
        }
        for beta in [1e-4, 0.3, 1.0] {
            assert_eq!(regime_alpha(&RegimeParams::new(beta, gamma, 1.0), 1.0), 1.0);
        }
    }
}
