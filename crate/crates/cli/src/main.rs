use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use alphaflops_core::alpha::{AlphaParams, ParamsError};
use alphaflops_core::bench::{run_sweep_bench, BenchConfig, KernelVariant};
use alphaflops_core::calibration::{
    fit_with_template, load_dataset, save_dataset, ColumnMapping, FitConfig, FixedParams,
    TimingRecord,
};
use alphaflops_core::layer::{dense_flops, Conv2DDescriptor, LayerDescriptor, Padding};
use alphaflops_core::report::Report;
use alphaflops_core::sweep::{
    generate_sweep, preset, Axis, Compensation, SweepPoint, SweepSpec, PRESETS,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "alphaflops",
    version,
    about = "FLOPs and alpha-FLOPs layer cost model"
)]
struct Cli {
    /// Parameter file (defaults to the built-in two-regime table).
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write one SVG chart per equal-FLOPs group.
    #[arg(long, global = true)]
    plot: bool,
    #[arg(long, global = true, default_value = "plots")]
    plot_dir: PathBuf,
    /// Hold a parameter fixed while fitting, e.g. `gamma=1`. Repeatable.
    #[arg(long = "fix", global = true, value_name = "KEY=VALUE")]
    fix: Vec<String>,
    /// Drop the worst 1% of records and refit.
    #[arg(long, global = true)]
    trim: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// FLOPs of one layer, e.g. `flops conv2d w=8 h=8 cin=3 cout=16 k1=3 k2=3`.
    Flops {
        #[arg(required = true, num_args = 1.., allow_hyphen_values = true)]
        descriptor: Vec<String>,
    },
    /// Alpha factor, alpha-FLOPs and predicted time of one layer.
    Alpha {
        #[arg(required = true, num_args = 1..)]
        descriptor: Vec<String>,
    },
    /// Print an equal-FLOPs sweep as descriptor lines.
    Sweep(SweepArgs),
    /// Time a sweep on one CPU thread and write a timing CSV.
    Bench {
        #[command(flatten)]
        layers: LayerSource,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        runs: u32,
        #[arg(long, default_value_t = 3)]
        warmup: u32,
        #[arg(long, default_value = "naive")]
        kernel: KernelVariant,
    },
    /// Fit parameters to a timing CSV.
    Fit {
        dataset: PathBuf,
        /// Parameter file to write; printed to stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Compare predictions against a timing CSV.
    Predict {
        dataset: PathBuf,
        /// Recalibrate the time-per-FLOP constant on this (1-based) record.
        #[arg(long)]
        calibrate_row: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Prediction table for a set of layers without measurements.
    Report {
        #[command(flatten)]
        layers: LayerSource,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Convert a foreign CSV into the timing CSV schema.
    Import {
        source: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    /// Named sweep (unary, unary-small, kernel-channels, kernel-spatial, cpu-flat).
    #[arg(long, conflicts_with_all = ["target", "vary", "range", "compensate"])]
    preset: Option<String>,
    /// Target FLOPs; accepts scientific notation such as 2e8.
    #[arg(long, value_parser = parse_flops)]
    target: Option<u64>,
    #[arg(long, value_parser = parse_axis)]
    vary: Option<Axis>,
    /// `lo..hi` (inclusive) or a comma list.
    #[arg(long)]
    range: Option<String>,
    #[arg(long, value_parser = parse_compensation, default_value = "channels")]
    compensate: Compensation,
    #[arg(long, default_value_t = 1)]
    w: u32,
    #[arg(long, default_value_t = 1)]
    h: u32,
    #[arg(long, default_value_t = 1)]
    cin: u32,
    #[arg(long, default_value_t = 1)]
    cout: u32,
    #[arg(long, default_value_t = 1)]
    k: u32,
    #[arg(long, default_value_t = 1)]
    stride: u32,
    #[arg(long, default_value = "same")]
    pad: Padding,
    #[arg(long, default_value_t = 1)]
    batch: u32,
}

#[derive(Args, Debug)]
struct LayerSource {
    /// File of descriptor lines (`#` starts a comment).
    #[arg(long)]
    layers: Option<PathBuf>,
    #[command(flatten)]
    sweep: SweepArgs,
}

fn parse_flops(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(1.0..1.8e19).contains(&v) || v.fract() != 0.0 {
        return Err(format!("`{s}` is not a positive integer FLOPs count"));
    }
    Ok(v as u64)
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
        .map_err(|e: alphaflops_core::sweep::SweepError| e.to_string())
}

fn parse_compensation(s: &str) -> Result<Compensation, String> {
    s.parse()
        .map_err(|e: alphaflops_core::sweep::SweepError| e.to_string())
}

/// An error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_DATA,
            error: e.into(),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {}", render(&error));
            ExitCode::from(code)
        }
    }
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already ends with.
fn render(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let params = load_params(cli.params.as_deref())?;
    let mut out = io::stdout().lock();
    match &cli.command {
        Command::Flops { descriptor } => {
            let layer = parse_descriptor(descriptor)?;
            let (exact, asymptotic) = match layer {
                LayerDescriptor::Dense(d) => (dense_flops(&d, true)?, dense_flops(&d, false)?),
                LayerDescriptor::Conv2D(_) => (layer.flops()?, layer.flops()?),
            };
            writeln!(out, "layer\tflops_exact\tflops_asymptotic")?;
            writeln!(out, "{layer}\t{exact}\t{asymptotic}")?;
        }
        Command::Alpha { descriptor } => {
            let layer = parse_descriptor(descriptor)?;
            out.write_all(Report::from_layers(&[layer], &params)?.to_tsv().as_bytes())?;
        }
        Command::Sweep(args) => {
            for layer in sweep_layers(args)? {
                writeln!(out, "{layer}")?;
            }
        }
        Command::Bench {
            layers,
            out: path,
            runs,
            warmup,
            kernel,
        } => {
            if *runs == 0 {
                return Err(usage(anyhow!("--runs must be at least 1")));
            }
            let layers = resolve_layers(layers)?;
            let config = BenchConfig {
                warmup_runs: *warmup,
                timed_runs: *runs,
                seed: cli.seed,
                kernel_variant: *kernel,
                ..BenchConfig::default()
            };
            let report = run_sweep_bench(&layers, &config, path)?;
            for (layer, err) in &report.skipped {
                eprintln!("warning: skipped `{layer}`: {err}");
            }
            writeln!(
                out,
                "wrote {} records to {}{}",
                report.records.len(),
                path.display(),
                if report.is_partial() {
                    " (partial)"
                } else {
                    ""
                }
            )?;
            if report.is_partial() {
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Fit { dataset, out: path } => {
            let records = load_dataset(dataset)?;
            let mut fixed = FixedParams::default();
            for f in &cli.fix {
                fixed.set(f).map_err(usage)?;
            }
            let config = FitConfig {
                trim: cli.trim,
                ..FitConfig::default()
            };
            let result = fit_with_template(&records, &params, &fixed, &config)?;
            let summary = format!(
                "records\t{}\nmape_pct\t{:.6}\nmax_ape_pct\t{:.6}\nloss\t{:e}\nconverged\t{}\n",
                result.n_records, result.mape, result.max_ape, result.loss, result.converged
            );
            match path {
                Some(p) => {
                    result
                        .params
                        .write_file(p)
                        .with_context(|| format!("writing {}", p.display()))?;
                    out.write_all(summary.as_bytes())?;
                }
                None => {
                    out.write_all(result.params.to_file_string().as_bytes())?;
                    eprint!("{summary}");
                }
            }
        }
        Command::Predict {
            dataset,
            calibrate_row,
            out: path,
        } => {
            let records = load_dataset(dataset)?;
            check_single_device(&records)?;
            let params = match calibrate_row {
                None => params,
                Some(row) => {
                    let r = records.get(row.wrapping_sub(1)).ok_or_else(|| {
                        usage(anyhow!(
                            "--calibrate-row {row} is outside 1..={}",
                            records.len()
                        ))
                    })?;
                    params.calibrated_to(&r.layer, r.time_ms * 1e-3)?
                }
            };
            let report = Report::from_records(&records, &params)?;
            emit_report(&report, path.as_deref(), &cli, &mut out)?;
        }
        Command::Report { layers, out: path } => {
            let layers = resolve_layers(layers)?;
            let report = Report::from_layers(&layers, &params)?;
            emit_report(&report, path.as_deref(), &cli, &mut out)?;
        }
        Command::Import {
            source,
            mapping,
            out: path,
        } => {
            let mapping = ColumnMapping::from_file(mapping)?;
            let records = mapping.import_file(source)?;
            save_dataset(path, &records)?;
            writeln!(out, "wrote {} records to {}", records.len(), path.display())?;
        }
    }
    Ok(0)
}

fn load_params(path: Option<&Path>) -> Result<AlphaParams, Failure> {
    match path {
        None => Ok(AlphaParams::reference_defaults()),
        Some(p) => AlphaParams::from_file(p).map_err(|e| match e {
            ParamsError::Io(_) => {
                Failure::from(anyhow::Error::new(e).context(format!("reading {}", p.display())))
            }
            other => {
                Failure::from(anyhow::Error::new(other).context(format!("in {}", p.display())))
            }
        }),
    }
}

fn parse_descriptor(words: &[String]) -> Result<LayerDescriptor, Failure> {
    words.join(" ").parse().map_err(usage)
}

fn check_single_device(records: &[TimingRecord]) -> Result<(), Failure> {
    let devices: BTreeSet<&str> = records.iter().map(|r| r.device.as_str()).collect();
    if devices.len() > 1 {
        let list: Vec<&str> = devices.into_iter().collect();
        return Err(anyhow!(
            "dataset mixes devices ({}); run once per device on a filtered CSV",
            list.join(", ")
        )
        .into());
    }
    Ok(())
}

fn sweep_spec(args: &SweepArgs) -> Result<SweepSpec, Failure> {
    if let Some(name) = &args.preset {
        return preset(name).map_err(|e| usage(anyhow!("{e} (known: {})", PRESETS.join(", "))));
    }
    let (Some(target), Some(varied), Some(range)) = (args.target, args.vary, &args.range) else {
        return Err(usage(anyhow!(
            "give --preset, or all of --target, --vary and --range"
        )));
    };
    let points = parse_range(range).map_err(usage)?;
    let base = Conv2DDescriptor::new(args.w, args.h, args.cin, args.cout, args.k)
        .with_stride(args.stride)
        .with_padding(args.pad)
        .with_batch(args.batch);
    Ok(SweepSpec {
        target_flops: target,
        varied,
        compensating: args.compensate,
        points: points.into_iter().map(SweepPoint::Axis).collect(),
        base,
    })
}

fn parse_range(s: &str) -> Result<Vec<u32>> {
    let values: Vec<u32> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u32 = lo
            .trim()
            .parse()
            .with_context(|| format!("bad range start in `{s}`"))?;
        let hi: u32 = hi
            .trim()
            .parse()
            .with_context(|| format!("bad range end in `{s}`"))?;
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .with_context(|| format!("bad value `{v}` in `{s}`"))
            })
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        bail!("range `{s}` is empty");
    }
    Ok(values)
}

fn sweep_layers(args: &SweepArgs) -> Result<Vec<LayerDescriptor>, Failure> {
    let spec = sweep_spec(args)?;
    let outcome = generate_sweep(&spec).map_err(usage)?;
    for d in &outcome.dropped {
        match d.achieved {
            Some(f) => eprintln!(
                "warning: dropped point {} (best {f} FLOPs, target {})",
                d.point, spec.target_flops
            ),
            None => eprintln!("warning: dropped point {} (no valid layer)", d.point),
        }
    }
    Ok(outcome
        .layers
        .into_iter()
        .map(LayerDescriptor::from)
        .collect())
}

fn resolve_layers(source: &LayerSource) -> Result<Vec<LayerDescriptor>, Failure> {
    let Some(path) = &source.layers else {
        return sweep_layers(&source.sweep);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut layers = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let layer: LayerDescriptor = line
            .parse()
            .map_err(|e| usage(anyhow!("{}:{}: {e}", path.display(), i + 1)))?;
        layers.push(layer);
    }
    Ok(layers)
}

fn emit_report(
    report: &Report,
    path: Option<&Path>,
    cli: &Cli,
    out: &mut impl Write,
) -> Result<(), Failure> {
    let tsv = report.to_tsv();
    match path {
        Some(p) => fs::write(p, &tsv).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(tsv.as_bytes())?,
    }
    if cli.plot {
        fs::create_dir_all(&cli.plot_dir)
            .with_context(|| format!("creating {}", cli.plot_dir.display()))?;
        for (i, (flops, svg)) in report.svg_charts().into_iter().enumerate() {
            let file = cli.plot_dir.join(format!("group{:02}_{flops}.svg", i + 1));
            fs::write(&file, svg).with_context(|| format!("writing {}", file.display()))?;
        }
    }
    Ok(())
}
