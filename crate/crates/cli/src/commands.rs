//! The subcommand implementations, generic over the element type.
//!
//! Each command resolves its configuration (defaults, config file, flags),
//! calls into the library, and emits a human summary on stdout — or, where
//! a `--json` flag exists, the machine-readable document instead. Failures
//! propagate as library errors; the exit-code mapping lives in `main`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use vanillanet::arch::{self, ArchSpec, FlopReport, LayerRow, ParamReport};
use vanillanet::bench::{self, BenchReport};
use vanillanet::fusion::{self, FusionReport};
use vanillanet::graph::GraphMode;
use vanillanet::ops::LossKind;
use vanillanet::tensor::Element;
use vanillanet::train::checkpoint::{load_checkpoint, save_checkpoint};
use vanillanet::train::{self, OptState};
use vanillanet::{Error, Result, SCHEMA_VERSION};

use crate::args::{
    BenchArgs, Cli, Cmd, CountArgs, Dtype, EvalArgs, ExportArgs, FuseArgs, TrainArgs, VerifyArgs,
};
use crate::config::{self, ArchChoice, DataChoice, FileConfig, Global, TrainChoice};
use crate::data_src;
use crate::manifest::{self, EpochRow, RunManifest};

/// Parse the config file, resolve the globals, and run the subcommand
/// under the chosen element type.
pub fn run(cli: &Cli) -> Result<()> {
    let file = config::load_file(cli.global.config.as_deref())?;
    let g = config::resolve_global(&cli.global, &file)?;
    match g.dtype {
        Dtype::F32 => dispatch::<f32>(&cli.cmd, &g, &file),
        Dtype::F64 => dispatch::<f64>(&cli.cmd, &g, &file),
    }
}

fn dispatch<E: Element>(cmd: &Cmd, g: &Global, file: &FileConfig) -> Result<()> {
    match cmd {
        Cmd::Train(args) => cmd_train::<E>(args, g, file),
        Cmd::Fuse(args) => cmd_fuse::<E>(args, g, file),
        Cmd::Verify(args) => cmd_verify::<E>(args, g, file),
        Cmd::Eval(args) => cmd_eval::<E>(args, g, file),
        Cmd::Bench(args) => cmd_bench::<E>(args, g, file),
        Cmd::Count(args) => cmd_count::<E>(args, g, file),
        Cmd::ExportReport(args) => cmd_export(args, g, file),
    }
}

/// Load a checkpoint with the file named in any I/O error, so "no such
/// file" points somewhere.
fn load_ckpt<E: Element>(
    path: &Path,
) -> Result<(
    vanillanet::graph::LayerGraph<E>,
    vanillanet::train::checkpoint::CheckpointMeta,
    Option<OptState<E>>,
)> {
    load_checkpoint::<E>(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn write_json(path: &Path, doc: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(doc: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(doc)?);
    Ok(())
}

// ---------------------------------------------------------------- train --

fn cmd_train<E: Element>(args: &TrainArgs, g: &Global, file: &FileConfig) -> Result<()> {
    let arch_choice = ArchChoice::merged(&args.arch, &file.arch)?;
    let train_choice = TrainChoice::merged(&args.train, &file.train)?;
    let data_choice = DataChoice::merged(&args.data, &file.data)?;
    let cfg = train_choice.finalize(g.seed, g.deterministic)?;

    let prepared = data_src::prepare(&data_choice, &arch_choice, g.seed)?;
    let data = &prepared.data;

    // The data fixes the geometry; explicit flags may only agree with it.
    if let Some(c) = arch_choice.classes {
        if data_choice.source.map_or(false, |s| s != crate::args::SourceKind::Synthetic)
            && c != data.class_count()
        {
            return Err(Error::invalid(format!(
                "--classes {c} does not match the dataset's {} classes",
                data.class_count()
            )));
        }
    }
    if let Some(c) = arch_choice.in_channels {
        if c != data.channels() {
            return Err(Error::invalid(format!(
                "--in-channels {c} does not match the dataset's {} channels",
                data.channels()
            )));
        }
    }

    let mut spec = ArchSpec::new(arch_choice.variant.unwrap_or(6));
    arch_choice.apply(&mut spec);
    spec.in_channels = data.channels();
    spec.num_classes = data.class_count();
    spec.input_size = prepared.input_size;
    spec.reduced_pool = prepared.reduced_pool;
    spec.validate()?;

    let mut graph = arch::build::<E>(&spec, GraphMode::Train, g.seed)?;
    let mut opt = OptState::<E>::new(cfg.optimizer);

    fs::create_dir_all(&args.out)?;
    println!(
        "training variant {} width {:.4} n={} on {} ({} samples, {}x{}x{}, {} classes)",
        spec.variant,
        spec.width_scale,
        spec.act_radius,
        prepared.desc.source,
        data.len(),
        spec.in_channels,
        spec.input_size,
        spec.input_size,
        spec.num_classes,
    );

    let t0 = Instant::now();
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut epoch_start = Instant::now();
    train::fit(&mut graph, &mut opt, data, &cfg, |m| {
        let wall_secs = epoch_start.elapsed().as_secs_f64();
        epoch_start = Instant::now();
        println!(
            "epoch {:>3}/{}  lambda {:.2}  lr {:.3e}  loss {:.4}  acc {:5.1}%  {:.1}s",
            m.epoch + 1,
            cfg.epochs,
            m.lambda,
            m.lr,
            m.loss,
            m.accuracy * 100.0,
            wall_secs
        );
        rows.push(EpochRow {
            metrics: m.clone(),
            wall_secs,
        });
        Ok(())
    })?;
    let total_secs = t0.elapsed().as_secs_f64();

    let ckpt_path = args.out.join("last.vnck");
    save_checkpoint(&ckpt_path, &graph, cfg.epochs, g.seed, Some(&opt))?;

    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        run_id: manifest::run_id(&spec, &cfg, &prepared.desc, g.seed, g.dtype.name())?,
        created_unix: manifest::now_unix(),
        dtype: g.dtype.name().to_string(),
        deterministic: g.deterministic,
        seed: g.seed,
        arch: spec,
        train: cfg,
        data: prepared.desc,
        epochs: rows,
        total_secs,
        checkpoint: ckpt_path.display().to_string(),
    };
    let manifest_path = args.out.join("manifest.json");
    manifest.write(&manifest_path)?;
    println!(
        "run {}  wrote {} and {}",
        manifest.run_id,
        ckpt_path.display(),
        manifest_path.display()
    );
    Ok(())
}

// ----------------------------------------------------- fuse and verify --

fn tolerance(explicit: Option<f64>, dtype: Dtype) -> f64 {
    explicit.unwrap_or_else(|| dtype.default_tolerance())
}

fn print_fusion_summary(report: &FusionReport) {
    let max_probe = report
        .passes
        .iter()
        .map(|p| p.probe_deviation)
        .fold(0.0f64, f64::max);
    println!(
        "rewrites {}  max probe deviation {:.3e}",
        report.passes.len(),
        max_probe
    );
    if report.verified {
        println!(
            "verification: {} samples  max deviation {:.3e} (tolerance {:.1e})  argmax agreement {:.1}%  {}",
            report.num_samples,
            report.max_deviation,
            report.tolerance,
            report.argmax_agreement * 100.0,
            if report.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn verification_failure(report: &FusionReport) -> Error {
    Error::Numeric(format!(
        "fused network deviates from the original: max deviation {:.3e} exceeds tolerance {:.1e}",
        report.max_deviation, report.tolerance
    ))
}

fn cmd_fuse<E: Element>(args: &FuseArgs, g: &Global, _file: &FileConfig) -> Result<()> {
    let (graph, meta, _) = load_ckpt::<E>(&args.checkpoint)?;
    let tol = tolerance(args.tolerance, g.dtype);
    let (fused, report) = if args.samples == 0 {
        fusion::fuse_network(&graph, graph.lambda)?
    } else {
        fusion::fuse_and_verify(&graph, graph.lambda, args.samples, tol, g.seed)?
    };

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&report_path, &report)?;
    print_fusion_summary(&report);

    if args.samples > 0 && !report.passed {
        // Keep the diagnostic report, but leave no deployment checkpoint
        // claiming equivalence that did not hold.
        return Err(verification_failure(&report));
    }

    save_checkpoint(&args.out, &fused, meta.epoch, meta.seed, None)?;
    println!(
        "parameters {} -> {}",
        graph.param_count(),
        fused.param_count()
    );
    println!(
        "wrote {} and {}",
        args.out.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_verify<E: Element>(args: &VerifyArgs, g: &Global, _file: &FileConfig) -> Result<()> {
    let (graph, _meta, _) = load_ckpt::<E>(&args.checkpoint)?;
    if graph.mode == GraphMode::Deploy {
        return Err(Error::invalid(
            "checkpoint is already in deployment form; verify wants the trained original",
        ));
    }
    let tol = tolerance(args.tolerance, g.dtype);
    let (_fused, report) =
        fusion::fuse_and_verify(&graph, graph.lambda, args.samples.max(1), tol, g.seed)?;

    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    if args.json {
        print_json(&report)?;
    } else {
        print_fusion_summary(&report);
    }
    if !report.passed {
        return Err(verification_failure(&report));
    }
    Ok(())
}

// ----------------------------------------------------------------- eval --

#[derive(Serialize)]
struct EvalDoc {
    schema_version: u32,
    dtype: String,
    checkpoint: String,
    mode: GraphMode,
    epoch: usize,
    loss_kind: LossKind,
    label_smoothing: f64,
    data: crate::manifest::DataDescription,
    loss: f64,
    accuracy: f64,
    samples: usize,
}

fn cmd_eval<E: Element>(args: &EvalArgs, g: &Global, file: &FileConfig) -> Result<()> {
    let (graph, meta, _) = load_ckpt::<E>(&args.checkpoint)?;
    let choice = DataChoice::merged(&args.data, &file.data)?;
    let (data, desc) = data_src::prepare_for_spec(&choice, &graph.spec, g.seed)?;

    let loss_kind = args.loss.unwrap_or(LossKind::Ce);
    let smoothing = args.label_smoothing.unwrap_or(0.0);
    let m = train::evaluate(&graph, &data, args.batch_size, loss_kind, smoothing)?;

    let doc = EvalDoc {
        schema_version: SCHEMA_VERSION,
        dtype: g.dtype.name().to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        mode: meta.mode,
        epoch: meta.epoch,
        loss_kind,
        label_smoothing: smoothing,
        data: desc,
        loss: m.loss,
        accuracy: m.accuracy,
        samples: m.samples,
    };
    if args.json {
        print_json(&doc)?;
    } else {
        println!(
            "{} samples  loss {:.4}  accuracy {:.2}%",
            m.samples,
            m.loss,
            m.accuracy * 100.0
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- bench --

#[derive(Serialize)]
struct BenchDoc {
    schema_version: u32,
    dtype: String,
    deterministic: bool,
    source: String,
    mode: GraphMode,
    arch: ArchSpec,
    params: u64,
    latency: BenchReport,
}

fn cmd_bench<E: Element>(args: &BenchArgs, g: &Global, file: &FileConfig) -> Result<()> {
    let (graph, source) = match &args.checkpoint {
        Some(path) => {
            let (graph, _meta, _) = load_ckpt::<E>(path)?;
            let graph = if args.fused && graph.mode == GraphMode::Train {
                fusion::fuse_network(&graph, graph.lambda)?.0
            } else {
                graph
            };
            (graph, path.display().to_string())
        }
        None => {
            let spec = ArchChoice::merged(&args.arch, &file.arch)?.finalize_reference()?;
            let mode = if args.fused {
                GraphMode::Deploy
            } else {
                GraphMode::Train
            };
            (arch::build::<E>(&spec, mode, g.seed)?, "fresh".to_string())
        }
    };

    let latency = bench::bench_forward(&graph, args.batch, args.iters, args.warmup, g.seed)?;
    let doc = BenchDoc {
        schema_version: SCHEMA_VERSION,
        dtype: g.dtype.name().to_string(),
        deterministic: g.deterministic,
        source,
        mode: graph.mode,
        params: graph.param_count(),
        arch: graph.spec.clone(),
        latency,
    };
    if let Some(path) = &args.out {
        write_json(path, &doc)?;
    }
    if args.json {
        print_json(&doc)?;
    } else {
        println!(
            "variant {}  {:?} mode  batch {}  {} iters after {} warmup",
            doc.arch.variant, doc.mode, doc.latency.batch, doc.latency.iters, doc.latency.warmup
        );
        println!(
            "median {:.3} ms  mean {:.3} ms  p10 {:.3} ms  p90 {:.3} ms  min {:.3} ms  max {:.3} ms",
            doc.latency.median_ms,
            doc.latency.mean_ms,
            doc.latency.p10_ms,
            doc.latency.p90_ms,
            doc.latency.min_ms,
            doc.latency.max_ms
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- count --

#[derive(Serialize)]
struct CountDoc {
    schema_version: u32,
    dtype: String,
    mode: GraphMode,
    arch: ArchSpec,
    params: ParamReport,
    flops: FlopReport,
    /// Conv plus series cost under the window-area convention.
    flops_total: u64,
    /// Conv plus series cost under the literal convention.
    flops_total_literal: u64,
    layers: Vec<LayerRow>,
}

fn cmd_count<E: Element>(args: &CountArgs, g: &Global, file: &FileConfig) -> Result<()> {
    let spec = ArchChoice::merged(&args.arch, &file.arch)?.finalize_reference()?;
    let mode = if args.train_mode {
        GraphMode::Train
    } else {
        GraphMode::Deploy
    };
    let graph = arch::build::<E>(&spec, mode, g.seed)?;
    let params = ParamReport::of(&graph);
    let (flops, layers) = arch::flop_report(&graph)?;

    if args.json {
        let doc = CountDoc {
            schema_version: SCHEMA_VERSION,
            dtype: g.dtype.name().to_string(),
            mode,
            arch: spec,
            flops_total: flops.total(),
            flops_total_literal: flops.total_literal(),
            params,
            flops,
            layers,
        };
        return print_json(&doc);
    }

    println!(
        "variant {}  width {:.4}  n={}  input {}x{}x{}  {} classes  {:?} mode",
        spec.variant,
        spec.width_scale,
        spec.act_radius,
        spec.in_channels,
        spec.input_size,
        spec.input_size,
        spec.num_classes,
        mode
    );
    println!();
    println!(
        "{:<22} {:<11} {:>22} {:>14} {:>18}",
        "layer", "kind", "output", "params", "flops"
    );
    for row in &layers {
        println!(
            "{:<22} {:<11} {:>22} {:>14} {:>18}",
            row.name,
            row.kind,
            format!("{:?}", row.output_shape),
            row.params,
            row.flops
        );
    }
    println!();
    println!("total parameters   {:>18}", params.total);
    println!("conv flops         {:>18}", flops.conv);
    println!(
        "series flops       {:>18}   (window convention; literal {})",
        flops.series_radius, flops.series_literal
    );
    if flops.bn > 0 || flops.pool > 0 {
        println!("bn flops           {:>18}", flops.bn);
        println!("pool flops         {:>18}", flops.pool);
    }
    println!(
        "total flops        {:>18}   (window convention; literal {})",
        flops.total(),
        flops.total_literal()
    );
    Ok(())
}

// -------------------------------------------------------- export-report --

#[derive(Serialize)]
struct ExportDoc {
    schema_version: u32,
    run: String,
    run_id: Option<Value>,
    manifest: Value,
    fusion: Vec<NamedReport>,
    latency: Vec<NamedReport>,
    eval: Vec<NamedReport>,
    /// JSON files in the run directory that matched no known report shape.
    unrecognized: Vec<String>,
}

#[derive(Serialize)]
struct NamedReport {
    file: String,
    report: Value,
}

/// Merge a run directory — manifest plus any fusion, latency, and eval
/// reports written next to it — into one schema-versioned document.
fn cmd_export(args: &ExportArgs, _g: &Global, _file: &FileConfig) -> Result<()> {
    let manifest_path = args.run.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Value = serde_json::from_str(&manifest_text)?;

    let mut names: Vec<PathBuf> = fs::read_dir(&args.run)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "json")
                && p.file_name().is_some_and(|n| n != "manifest.json")
        })
        .collect();
    names.sort();

    let mut fusion = Vec::new();
    let mut latency = Vec::new();
    let mut eval = Vec::new();
    let mut unrecognized = Vec::new();
    for path in names {
        let file = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Ok(value) = serde_json::from_str::<Value>(&fs::read_to_string(&path)?) else {
            unrecognized.push(file);
            continue;
        };
        let named = |report: Value| NamedReport {
            file: file.clone(),
            report,
        };
        if value.get("passes").is_some() && value.get("max_deviation").is_some() {
            fusion.push(named(value));
        } else if value
            .get("latency")
            .is_some_and(|l| l.get("median_ms").is_some())
        {
            latency.push(named(value));
        } else if value.get("accuracy").is_some() && value.get("loss").is_some() {
            eval.push(named(value));
        } else {
            unrecognized.push(file);
        }
    }

    let doc = ExportDoc {
        schema_version: SCHEMA_VERSION,
        run: args.run.display().to_string(),
        run_id: manifest.get("run_id").cloned(),
        manifest,
        fusion,
        latency,
        eval,
        unrecognized,
    };
    match &args.out {
        Some(path) => {
            write_json(path, &doc)?;
            println!("wrote {}", path.display());
        }
        None => print_json(&doc)?,
    }
    Ok(())
}
