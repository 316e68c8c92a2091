use alphaflops_core::bench::{
    run_sweep_bench, time_layer, BenchConfig, BenchError, KernelVariant, CPU_DEVICE,
};
use alphaflops_core::calibration::{load_dataset, COLUMNS};
use alphaflops_core::layer::{conv_flops, Conv2DDescriptor, DenseDescriptor, LayerDescriptor};
use alphaflops_core::sweep::{generate_sweep, preset};

fn quick() -> BenchConfig {
    BenchConfig {
        warmup_runs: 0,
        timed_runs: 3,
        memory_cap_mb: 256,
        ..BenchConfig::default()
    }
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let report = run_sweep_bench(&[], &quick(), &path).unwrap();
    assert!(report.records.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim_end(), COLUMNS.join(","));
}

#[test]
fn small_unary_sweep_round_trips_through_csv() {
    let layers: Vec<LayerDescriptor> = generate_sweep(&preset("unary-small").unwrap())
        .unwrap()
        .layers
        .into_iter()
        .map(Into::into)
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.csv");
    let report = run_sweep_bench(&layers, &quick(), &path).unwrap();
    assert!(!report.is_partial());
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded.len(), 4);
    for (rec, layer) in loaded.iter().zip(&layers) {
        assert_eq!(&rec.layer, layer);
        assert_eq!(rec.device, CPU_DEVICE);
        assert_eq!(rec.runs, 3);
        assert!(rec.time_ms > 0.0);
        assert_eq!(conv_flops(&rec.layer.as_conv()).unwrap(), 1_280_000);
    }
}

#[test]
fn over_cap_layers_are_skipped() {
    let layers: Vec<LayerDescriptor> = vec![
        Conv2DDescriptor::new(4, 4, 4, 4, 3).into(),
        DenseDescriptor::new(2000, 2000).into(),
    ];
    let config = BenchConfig {
        memory_cap_mb: 1,
        ..quick()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_sweep_bench(&layers, &config, dir.path().join("cap.csv")).unwrap();
    assert_eq!(report.records.len(), 1);
    assert!(report.is_partial());
    assert!(matches!(report.skipped[0].1, BenchError::MemoryCap { .. }));
}

#[test]
fn kernel_variants_agree_on_checksum() {
    for layer in [
        LayerDescriptor::from(Conv2DDescriptor::new(9, 7, 3, 5, 3)),
        LayerDescriptor::from(DenseDescriptor::new(33, 17)),
    ] {
        let a = time_layer(&layer, &quick()).unwrap();
        let b = time_layer(
            &layer,
            &BenchConfig {
                kernel_variant: KernelVariant::Im2colGemm,
                ..quick()
            },
        )
        .unwrap();
        assert_eq!(a.op_count, b.op_count);
        assert!((a.checksum - b.checksum).abs() <= 1e-4 * a.checksum.abs().max(1.0));
    }
}
