//! `fundus`: build, quantize, run, evaluate and profile retinopathy
//! classifiers.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 file format, 5 validation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fundus_core::evalbench::{self, DatasetIndex};
use fundus_core::graph::{
    self, Architecture, CustomDnnConfig, MobileNetConfig, ShuffleNetConfig, SqueezeNetConfig, WeightInit,
};
use fundus_core::profiler::{self, DeviceClass, ProfileSet};
use fundus_core::quantizer;
use fundus_core::{DrLabel, Error, ErrorFamily, ModelGraph, Precision, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "fundus", version, about = "Diabetic-retinopathy classifier toolkit")]
struct Cli {
    /// Seed for weight initialisation and sample selection.
    #[arg(long, global = true, default_value_t = WeightInit::DEFAULT_SEED)]
    seed: u64,

    /// Where to write the command's artifact.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Print `key=value` lines instead of tables.
    #[arg(long, global = true)]
    machine: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an f32 model with seeded random or imported weights.
    Build(BuildArgs),
    /// Calibrate on sample images and write an INT8 model.
    Quantize {
        model: PathBuf,
        /// Directory of calibration images (flat, or one folder per class).
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_samples: usize,
    },
    /// Classify one image.
    Infer { model: PathBuf, image: PathBuf },
    /// Score a model on a class-per-directory dataset.
    Evaluate { model: PathBuf, dataset: PathBuf },
    /// Estimate latency, arena RAM and ROM on every device class.
    Profile {
        model: PathBuf,
        /// Device profile file; defaults to the bundled fit.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// mobilenet, shufflenet, squeezenet or customdnn.
    arch: String,
    /// Width multiplier (mobilenet, shufflenet).
    #[arg(long)]
    width: Option<f32>,
    /// Group count (shufflenet).
    #[arg(long)]
    groups: Option<usize>,
    /// Conv schedule as `channels x kernel` pairs, e.g. `48x3,64x3` (customdnn).
    #[arg(long)]
    filters: Option<String>,
    /// Hidden dense width (customdnn).
    #[arg(long)]
    hidden: Option<usize>,
    /// Directory with `manifest.txt` and raw f32 weight files.
    #[arg(long)]
    weights: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.family() {
        ErrorFamily::Usage => 2,
        ErrorFamily::Io => 3,
        ErrorFamily::Format => 4,
        ErrorFamily::Validation => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Build(args) => cmd_build(cli, args),
        Command::Quantize { model, calib, max_samples } => cmd_quantize(cli, model, calib, *max_samples),
        Command::Infer { model, image } => cmd_infer(cli, model, image),
        Command::Evaluate { model, dataset } => cmd_evaluate(cli, model, dataset),
        Command::Profile { model, profiles } => cmd_profile(cli, model, profiles.as_deref()),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")))
    }
}

fn parse_filters(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|item| {
            let (c, k) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Usage(format!("filter {item:?} is not `channels x kernel`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::Usage(format!("bad number {s:?} in filter {item:?}")))
            };
            Ok((parse(c)?, parse(k)?))
        })
        .collect()
}

fn cmd_build(cli: &Cli, args: &BuildArgs) -> Result<String> {
    let arch = Architecture::from_name(&args.arch).ok_or_else(|| {
        Error::Usage(format!(
            "unknown architecture {:?}; expected one of {}",
            args.arch,
            Architecture::ALL.map(Architecture::name).join(", ")
        ))
    })?;
    let unsupported = |flag: &str| Error::Usage(format!("--{flag} does not apply to {}", arch.name()));
    let init = WeightInit::seeded(cli.seed);
    let mut graph = match arch {
        Architecture::MobileNet => {
            if args.groups.is_some() {
                return Err(unsupported("groups"));
            }
            let mut c = MobileNetConfig { init, ..Default::default() };
            if let Some(w) = args.width {
                c.width_multiplier = w;
            }
            graph::build_mobilenet(&c)?
        }
        Architecture::ShuffleNet => {
            let mut c = ShuffleNetConfig { init, ..Default::default() };
            if let Some(w) = args.width {
                c.width_multiplier = w;
            }
            if let Some(g) = args.groups {
                c.groups = g;
            }
            graph::build_shufflenet(&c)?
        }
        Architecture::SqueezeNet => {
            if args.width.is_some() {
                return Err(unsupported("width"));
            }
            if args.groups.is_some() {
                return Err(unsupported("groups"));
            }
            graph::build_squeezenet(&SqueezeNetConfig { init, ..Default::default() })?
        }
        Architecture::CustomDnn => {
            if args.width.is_some() {
                return Err(unsupported("width"));
            }
            if args.groups.is_some() {
                return Err(unsupported("groups"));
            }
            let mut c = CustomDnnConfig { init, ..Default::default() };
            if let Some(f) = &args.filters {
                c.filters = parse_filters(f)?;
            }
            if let Some(h) = args.hidden {
                c.hidden = h;
            }
            graph::build_custom_dnn(&c)?
        }
    };
    if arch != Architecture::CustomDnn && (args.filters.is_some() || args.hidden.is_some()) {
        return Err(unsupported(if args.filters.is_some() { "filters" } else { "hidden" }));
    }
    let mut imported = 0;
    if let Some(dir) = &args.weights {
        require_dir(dir)?;
        imported = graph::import_raw_weights(&mut graph, dir)?;
    }
    let out = cli
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.edrm", arch.name())));
    graph::save_model(&graph, &out)?;
    let mut s = String::new();
    if cli.machine {
        let _ = writeln!(s, "model={}", out.display());
        let _ = writeln!(s, "arch={}", arch.name());
        let _ = writeln!(s, "parameters={}", graph.parameter_count());
        let _ = writeln!(s, "imported_tensors={imported}");
        let _ = writeln!(s, "bytes={}", graph::encoded_len(&graph));
    } else {
        let _ = writeln!(
            s,
            "wrote {} ({}, {} parameters, {} bytes)",
            out.display(),
            graph.name,
            graph.parameter_count(),
            graph::encoded_len(&graph)
        );
        if imported > 0 {
            let _ = writeln!(s, "imported {imported} weight tensors");
        }
    }
    Ok(s)
}

/// Image files under `dir`: a class-per-directory dataset, or a flat folder.
fn calibration_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let has_class_dirs = DrLabel::ALL.iter().any(|l| dir.join(l.name()).is_dir());
    if has_class_dirs {
        return Ok(evalbench::index_dataset(dir)?.entries.into_iter().map(|(p, _)| p).collect());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| evalbench::IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_quantize(cli: &Cli, model: &Path, calib: &Path, max_samples: usize) -> Result<String> {
    require_file(model)?;
    require_dir(calib)?;
    if max_samples == 0 {
        return Err(Error::Usage("--max-samples must be at least 1".into()));
    }
    let graph = graph::load_model(model)?;
    if graph.precision == Precision::I8 {
        return Err(Error::AlreadyQuantized);
    }
    let mut files = calibration_files(calib)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no calibration images in {}", calib.display())));
    }
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(cli.seed));
    files.truncate(max_samples);
    files.sort();
    log::info!("calibrating on {} images", files.len());
    let samples = files
        .iter()
        .map(|p| evalbench::load_image(p).and_then(|img| evalbench::preprocess(&img)))
        .collect::<Result<Vec<_>>>()?;

    let ranges = quantizer::calibrate(&graph, &samples)?;
    let quantized = quantizer::quantize_graph(&graph, &ranges)?;
    let report = quantizer::fidelity_report(&graph, &quantized, &samples)?;
    let out = cli.output.clone().unwrap_or_else(|| {
        let stem = model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        model.with_file_name(format!("{stem}.i8.edrm"))
    });
    graph::save_model(&quantized, &out)?;

    let worst_layer = report.layer_unit_error.iter().map(|&(_, e)| e).max().unwrap_or(0);
    let mut s = String::new();
    if cli.machine {
        let _ = writeln!(s, "model={}", out.display());
        let _ = writeln!(s, "samples={}", report.samples);
        let _ = writeln!(s, "agreement={}", report.agreement);
        let _ = writeln!(s, "max_logit_error={}", report.max_logit_error);
        let _ = writeln!(s, "max_layer_unit_error={worst_layer}");
        for (node, e) in &report.layer_unit_error {
            let _ = writeln!(s, "layer_unit_error.{node}={e}");
        }
        let _ = writeln!(s, "f32_bytes={}", report.reference_bytes);
        let _ = writeln!(s, "i8_bytes={}", report.candidate_bytes);
    } else {
        let _ = writeln!(s, "wrote {}", out.display());
        let _ = writeln!(s, "calibration samples   {}", report.samples);
        let _ = writeln!(s, "top-1 agreement       {:.4}", report.agreement);
        let _ = writeln!(s, "max logit error       {:.6}", report.max_logit_error);
        let _ = writeln!(s, "max layer error       {worst_layer} units");
        let _ = writeln!(
            s,
            "size                  {} -> {} bytes ({:.3}x)",
            report.reference_bytes,
            report.candidate_bytes,
            report.candidate_bytes as f64 / report.reference_bytes as f64
        );
    }
    Ok(s)
}

fn cmd_infer(cli: &Cli, model: &Path, image: &Path) -> Result<String> {
    require_file(model)?;
    require_file(image)?;
    let graph = graph::load_model(model)?;
    let x = evalbench::preprocess(&evalbench::load_image(image)?)?;
    let (label, probs) = graph::classify(&graph, &x)?;
    let mut s = String::new();
    if cli.machine {
        let _ = writeln!(s, "label={label}");
        let _ = writeln!(s, "index={}", label.index());
        for (l, p) in DrLabel::ALL.iter().zip(&probs) {
            let _ = writeln!(s, "prob.{l}={p}");
        }
    } else {
        for (l, p) in DrLabel::ALL.iter().zip(&probs) {
            let _ = writeln!(s, "{:<14} {p:.6}", l.name());
        }
        let _ = writeln!(s, "prediction: {label}");
    }
    Ok(s)
}

fn cmd_evaluate(cli: &Cli, model: &Path, dataset: &Path) -> Result<String> {
    require_file(model)?;
    require_dir(dataset)?;
    let graph = graph::load_model(model)?;
    let index: DatasetIndex = evalbench::index_dataset(dataset)?;
    if index.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", dataset.display())));
    }
    let eval = evalbench::evaluate_paths(&graph, &index.entries)?;
    let kv = eval.report.to_key_value();
    if let Some(out) = &cli.output {
        fs::write(out, &kv).map_err(|e| Error::io(out, e))?;
    }
    let mut s = if cli.machine { kv } else { eval.report.to_text() };
    if !eval.skipped.is_empty() {
        if cli.machine {
            let _ = writeln!(s, "skipped={}", eval.skipped.len());
        } else {
            let _ = writeln!(s, "\nskipped {} undecodable files", eval.skipped.len());
        }
    }
    Ok(s)
}

fn human_bytes(b: usize) -> String {
    let b = b as f64;
    if b >= 1e6 {
        format!("{:.1}M", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.1}K", b / 1e3)
    } else {
        format!("{b}B")
    }
}

fn human_ms(ms: f64) -> String {
    if ms < 10.0 {
        return format!("{ms:.1} ms");
    }
    let digits = format!("{:.0}", ms);
    let mut grouped = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{grouped} ms")
}

fn cmd_profile(cli: &Cli, model: &Path, profiles: Option<&Path>) -> Result<String> {
    require_file(model)?;
    let graph: ModelGraph = graph::load_model(model)?;
    let set = match profiles {
        Some(p) => {
            require_file(p)?;
            ProfileSet::load(p)?
        }
        None => ProfileSet::bundled(),
    };
    let missing: Vec<&str> = DeviceClass::ALL
        .iter()
        .filter(|d| set.get(**d).is_none())
        .map(|d| d.key())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Profile(format!("profile set lacks {}", missing.join(", "))));
    }
    let macs = profiler::count_macs(&graph)?;
    let plan = profiler::plan_memory(&graph)?;
    let rom = profiler::estimate_rom(&graph)?;
    let mut s = String::new();
    if cli.machine {
        let _ = writeln!(s, "model={}", graph.name);
        let _ = writeln!(s, "precision={}", graph.precision);
        let _ = writeln!(s, "macs={}", macs.total);
        for d in DeviceClass::ALL {
            let p = set.get(d).expect("checked above");
            let _ = writeln!(
                s,
                "{}: latency_ms={} arena_ram={} rom={}",
                d.key(),
                p.latency_ms(macs.total),
                plan.arena_bytes,
                rom
            );
        }
    } else {
        let _ = writeln!(s, "{} ({}), {} MACs", graph.name, graph.precision, macs.total);
        let _ = writeln!(s, "{:<16} {:>14} {:>10} {:>10}", "Device", "Latency", "Arena RAM", "ROM");
        for d in DeviceClass::ALL {
            let p = set.get(d).expect("checked above");
            let _ = writeln!(
                s,
                "{:<16} {:>14} {:>10} {:>10}",
                d.label(),
                human_ms(p.latency_ms(macs.total)),
                human_bytes(plan.arena_bytes),
                human_bytes(rom)
            );
        }
    }
    if let Some(out) = &cli.output {
        fs::write(out, &s).map_err(|e| Error::io(out, e))?;
    }
    Ok(s)
}
