//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use alphaflops_core::alpha::{
    gustafson_ratio, predicted_time, regime_alpha, AlphaParams, RegimeParams,
};
use alphaflops_core::bench::{count_ops, run_sweep_bench, BenchConfig, KernelVariant, SampleStats};
use alphaflops_core::calibration::{
    fit, synthesize_dataset, synthetic_layouts, FitConfig, FixedParams, TimingRecord,
};
use alphaflops_core::layer::{
    conv_flops, dense_flops, Conv2DDescriptor, DenseDescriptor, LayerDescriptor, Padding,
};
use alphaflops_core::sweep::{generate_sweep, preset, Axis, Compensation, SweepSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Multiply-accumulate walk over output positions and kernel taps.
fn oracle_conv(c: &Conv2DDescriptor) -> u64 {
    let out = |n: u32, k: u32| match c.padding {
        Padding::Same => n.div_ceil(c.stride),
        Padding::Valid => (n - k) / c.stride + 1,
    };
    let positions =
        u64::from(out(c.w_in, c.k1)) * u64::from(out(c.h_in, c.k2)) * u64::from(c.batch);
    let mut ops = 0;
    for _ in 0..positions * u64::from(c.c_out) {
        ops += 2 * u64::from(c.k1 * c.k2 * c.c_in);
    }
    ops
}

fn oracle_dense(d: &DenseDescriptor) -> u64 {
    let mut ops = 0;
    for _ in 0..d.d_out {
        ops += 2 * u64::from(d.d_in) + u64::from(d.has_bias);
    }
    ops
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checked = 0;
    while checked < 200 {
        let (layer, oracle): (LayerDescriptor, u64) = if rng.gen_bool(0.3) {
            let d = DenseDescriptor::new(rng.gen_range(1..=16), rng.gen_range(1..=16))
                .with_bias(rng.gen());
            (d.into(), oracle_dense(&d))
        } else {
            let pad = if rng.gen() {
                Padding::Same
            } else {
                Padding::Valid
            };
            let c = Conv2DDescriptor::new(
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
                1,
            )
            .with_kernel(rng.gen_range(1..=5), rng.gen_range(1..=5))
            .with_stride(rng.gen_range(1..=2))
            .with_padding(pad)
            .with_batch(rng.gen_range(1..=2));
            if c.validate().is_err() {
                continue;
            }
            (c.into(), oracle_conv(&c))
        };
        let formula = match layer {
            LayerDescriptor::Dense(d) => dense_flops(&d, true).unwrap(),
            LayerDescriptor::Conv2D(c) => conv_flops(&c).unwrap(),
        };
        for v in [KernelVariant::NaiveDirect, KernelVariant::Im2colGemm] {
            let tally = count_ops(&layer, v).map_err(|e| e.to_string())?.total();
            if tally != formula || formula != oracle {
                return Err(format!(
                    "{layer}: formula {formula}, tally {tally} ({v:?}), oracle {oracle}"
                ));
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} layers, formula == tally == oracle"))
}

fn criterion_2() -> Outcome {
    let dense = dense_flops(&DenseDescriptor::new(12800, 12800), false).unwrap();
    let convs =
        generate_sweep(&preset("unary").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let counts: Vec<u64> = convs
        .layers
        .iter()
        .map(|c| conv_flops(c).unwrap())
        .collect();
    check(
        dense == 327_680_000 && counts.len() == 4 && counts.iter().all(|&f| f == 327_680_000),
        format!("dense {dense}, conv rows {counts:?}"),
    )
}

fn criterion_3() -> Outcome {
    let betas = [1e-4, 1e-3, 0.01, 0.02, 0.1, 0.3, 0.5, 0.8, 0.99, 1.0];
    let gammas = [0.05, 0.2, 0.56, 0.99, 1.0];
    let s_ks = [1.0, 2.0, 8.0, 64.0];
    let surfaces = [
        1.0, 1.5, 2.0, 3.0, 10.0, 64.0, 65.0, 1e3, 1e4, 1e5, 1e6, 1e7,
    ];
    let kernels = [1u32, 3, 5, 7, 11];
    let mut tuples = 0usize;
    for &k in &kernels {
        for &beta in &betas {
            for &gamma in &gammas {
                for &s_k in &s_ks {
                    let s_k = if k == 1 { 1.0 } else { s_k };
                    let r = RegimeParams::new(beta, gamma, s_k);
                    for &s in &surfaces {
                        tuples += 1;
                        let a = regime_alpha(&r, s);
                        if s > s_k && beta < 1.0 && a >= 1.0 {
                            return Err(format!("property 1 fails at k={k} {r:?} S={s}: {a}"));
                        }
                        if beta == 1.0 && a != 1.0 {
                            return Err(format!("property 2 fails at {r:?} S={s}: {a}"));
                        }
                        if k == 1 && s == 1.0 && a != 1.0 {
                            return Err(format!("property 3 fails at {r:?}: {a}"));
                        }
                        if gamma == 1.0 && s_k == 1.0 {
                            let g = gustafson_ratio(beta, s);
                            if (a - g).abs() > 1e-12 * g {
                                return Err(format!(
                                    "gustafson mismatch at beta={beta} S={s}: {a} vs {g}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    check(tuples >= 10_000, format!("{tuples} tuples"))
}

fn criterion_4() -> Outcome {
    let truth = AlphaParams::reference_defaults();
    let layouts = synthetic_layouts(50);
    let mut parts = Vec::new();
    let mut ok = true;
    for (noise, limit) in [(0.0, 1.0), (0.05, 5.0)] {
        let recs = synthesize_dataset(&truth, &layouts, noise, 7).map_err(|e| e.to_string())?;
        let res = fit(&recs, &FixedParams::default(), &FitConfig::default())
            .map_err(|e| e.to_string())?;
        ok &= res.mape < limit;
        parts.push(format!("noise {noise}: MAPE {:.4}% (< {limit}%)", res.mape));
    }
    check(ok, parts.join(", "))
}

fn unary_layers() -> Vec<LayerDescriptor> {
    generate_sweep(&preset("unary").unwrap())
        .unwrap()
        .layers
        .into_iter()
        .map(Into::into)
        .collect()
}

fn criterion_5() -> Outcome {
    let layers = unary_layers();
    let params = AlphaParams::reference_defaults()
        .calibrated_to(&layers[0], 6.154e-3)
        .map_err(|e| e.to_string())?;
    let expected = [3.351, 1.847, 0.611];
    let mut worst: f64 = 0.0;
    let mut got = Vec::new();
    for (layer, want) in layers[1..].iter().zip(expected) {
        let ms = predicted_time(layer, &params).unwrap() * 1e3;
        worst = worst.max((ms - want).abs() / want);
        got.push(format!("{ms:.3}"));
    }
    check(
        worst <= 0.25,
        format!(
            "predicted [{}] ms vs [3.351, 1.847, 0.611], worst {:.1}%",
            got.join(", "),
            100.0 * worst
        ),
    )
}

fn criterion_6() -> Outcome {
    let measured = [6.392, 3.224, 1.626, 0.454];
    let recs: Vec<TimingRecord> = unary_layers()
        .into_iter()
        .zip(measured)
        .map(|(layer, time_ms)| TimingRecord {
            layer,
            device: "gpu".into(),
            time_ms,
            runs: 2000,
            time_std_ms: None,
        })
        .collect();
    let res =
        fit(&recs, &FixedParams::default(), &FitConfig::default()).map_err(|e| e.to_string())?;
    let r = res.params.regime_for(1);
    check(
        res.mape <= 15.0,
        format!(
            "MAPE {:.3}% (beta {:.4}, gamma {:.3})",
            res.mape, r.beta, r.gamma
        ),
    )
}

fn criterion_7() -> Outcome {
    let spec = SweepSpec {
        target_flops: 200_000_000,
        varied: Axis::K,
        compensating: Compensation::WH,
        points: [1, 3, 5, 7]
            .into_iter()
            .map(alphaflops_core::sweep::SweepPoint::Axis)
            .collect(),
        base: Conv2DDescriptor::new(1, 1, 16, 16, 1),
    };
    let layers = generate_sweep(&spec).map_err(|e| e.to_string())?.layers;
    let layers: Vec<LayerDescriptor> = layers.into_iter().map(Into::into).collect();
    let config = BenchConfig {
        kernel_variant: KernelVariant::NaiveDirect,
        ..BenchConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_sweep_bench(&layers, &config, dir.path().join("flat.csv"))
        .map_err(|e| e.to_string())?;
    if report.is_partial() {
        return Err(format!(
            "{} layers skipped by the memory cap",
            report.skipped.len()
        ));
    }
    let medians: Vec<f64> = report.results.iter().map(|r| r.median_ms).collect();
    let cv = SampleStats::from_samples(&medians).coefficient_of_variation();
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.2}")).collect();
    check(
        cv < 0.30,
        format!("medians [{}] ms, CV {:.1}%", shown.join(", "), 100.0 * cv),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_alphaflops"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!(
            "`{}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    // Four equal-FLOPs kernel sweeps at 16 channels: every regime gets several
    // surfaces, and all layers share the same vector width in the direct kernel.
    let mut layers = String::new();
    for target in ["2e8", "5e7", "2e7", "5e6"] {
        layers += &run_cli(
            &[
                "sweep",
                "--target",
                target,
                "--vary",
                "k",
                "--range",
                "1,3,5,7",
                "--compensate",
                "wh",
                "--cin",
                "16",
                "--cout",
                "16",
            ],
            d,
        )?;
    }
    fs::write(d.join("layers.txt"), layers).map_err(|e| e.to_string())?;
    run_cli(
        &["bench", "--layers", "layers.txt", "--out", "bench.csv"],
        d,
    )?;
    run_cli(&["fit", "bench.csv", "--out", "params.txt"], d)?;
    let report = run_cli(&["predict", "bench.csv", "--params", "params.txt"], d)?;
    let mape: f64 = report
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("# mape_pct="))
        .and_then(|r| r.split('\t').next())
        .and_then(|v| v.parse().ok())
        .ok_or("predict report has no MAPE footer")?;
    let rows = report.lines().filter(|l| l.starts_with("conv2d")).count();
    check(
        mape < 20.0 && rows == 16,
        format!("{rows} records, predict MAPE {mape:.2}%"),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 FLOPs oracle equivalence", criterion_1),
        ("2 reference constants", criterion_2),
        ("3 alpha properties", criterion_3),
        ("4 fit recovery", criterion_4),
        ("5 reference prediction tolerance", criterion_5),
        ("6 reference measured-time fit", criterion_6),
        ("7 CPU flatness baseline", criterion_7),
        ("8 pipeline closure", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
