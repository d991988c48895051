//! `ternq` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid usage or
//! configuration, 3 training aborted on a non-finite loss, 4 corrupt or
//! malformed model file, 5 gradient verification failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ternq::checkpoint::{aux_path, read_checkpoint, write_model, Checkpoint, Payload};
use ternq::codec::{compression_report, CompressionReport, PackedModel};
use ternq::config::RunConfig;
use ternq::segnet::{build_unet3d, evaluate, train, EvalReport};
use ternq::verify;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NAN: u8 = 3;
const EXIT_CORRUPT: u8 = 4;
const EXIT_GRADIENTS: u8 = 5;

#[derive(Parser)]
#[command(name = "ternq", version, about = "Ternary quantization-aware training for 3-D segmentation networks")]
struct Cli {
    /// Run the finite-difference gradient verification suite first.
    #[arg(long, global = true)]
    double_check_grads: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset and write checkpoint, log and scores.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice scores of a model on the test split of the configured dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write per-volume scores as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a raw checkpoint into a `.3dqp` file plus its `.aux` companion.
    Pack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a `.3dqp` file (and its `.aux` companion) into a raw checkpoint.
    Unpack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compression table: full-precision bytes, packed bytes, ratio, per layer.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the configuration and entries of a model file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ternq::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::InvalidArgument(_)) => EXIT_USAGE,
        Some(E::NonFiniteLoss { .. } | E::NonFinite(_)) => EXIT_NAN,
        Some(E::BadMagic { .. } | E::UnsupportedVersion(_) | E::Truncated { .. } | E::Crc { .. } | E::Corrupt(_)) => {
            EXIT_CORRUPT
        }
        _ => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> Result<u8> {
    if cli.double_check_grads {
        let reports = verify::run_suite(20, 0)?;
        for r in &reports {
            println!("{r}");
        }
        if !reports.iter().all(|r| r.passed()) {
            eprintln!("error: gradient verification failed");
            return Ok(EXIT_GRADIENTS);
        }
    }
    match cli.command {
        None if cli.double_check_grads => Ok(0),
        None => {
            eprintln!("error: no command given; see `ternq --help`");
            Ok(EXIT_USAGE)
        }
        Some(Command::Train { config, seed, out }) => cmd_train(&config, seed, out),
        Some(Command::Eval { model, config, out }) => cmd_eval(&model, &config, out.as_deref()),
        Some(Command::Pack { model, out }) => cmd_pack(&model, out),
        Some(Command::Unpack { model, out }) => cmd_unpack(&model, out),
        Some(Command::Report { model, out }) => cmd_report(&model, out.as_deref()),
        Some(Command::Inspect { model }) => cmd_inspect(&model),
    }
}

fn print_scores(report: &EvalReport) {
    for (c, d) in report.per_class.iter().enumerate() {
        println!("class {c:>3}  dice {d:.4}");
    }
    println!("mean foreground dice {:.4}", report.mean_foreground);
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    let (train_set, test_set) = cfg.dataset()?;
    let mut net = build_unet3d(&cfg.net, cfg.train.seed)?;
    eprintln!(
        "training {} U-Net: {} parameters, {} iterations",
        cfg.net.scheme,
        net.parameter_count(),
        cfg.train.iterations
    );
    let log = train(&mut net, &train_set, &cfg.train)?;
    let dir = &cfg.output.dir;
    let stem = &cfg.output.name;
    let files = write_model(&net, dir, stem)?;
    let log_path = dir.join(format!("{stem}.train.csv"));
    fs::write(&log_path, log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    let scores = evaluate(&net, &test_set)?;
    let eval_path = dir.join(format!("{stem}.eval.csv"));
    fs::write(&eval_path, scores.to_csv()).with_context(|| format!("writing {}", eval_path.display()))?;
    print_scores(&scores);
    for f in files.iter().chain([&log_path, &eval_path]) {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn cmd_eval(model: &Path, config: &Path, out: Option<&Path>) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let ck = read_checkpoint(model)?;
    if ck.config.num_classes != cfg.net.num_classes {
        return Err(ternq::Error::Config(format!(
            "model has {} classes but the config specifies {}",
            ck.config.num_classes, cfg.net.num_classes
        ))
        .into());
    }
    let net = ck.to_model()?;
    let (_, test_set) = cfg.dataset()?;
    let scores = evaluate(&net, &test_set)?;
    print_scores(&scores);
    if let Some(path) = out {
        fs::write(path, scores.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_pack(model: &Path, out: Option<PathBuf>) -> Result<u8> {
    let ck = Checkpoint::from_bytes(&fs::read(model).with_context(|| format!("reading {}", model.display()))?)?;
    if ck.has_external() {
        bail!(ternq::Error::InvalidArgument(format!("{} is already the companion of a packed model", model.display())));
    }
    let (packed, aux) = ck.split()?;
    let out = out.unwrap_or_else(|| model.with_extension("3dqp"));
    fs::write(&out, packed.to_bytes()?).with_context(|| format!("writing {}", out.display()))?;
    fs::write(aux_path(&out), aux.to_bytes()?)?;
    println!("packed {} kernel weights into {} bytes", packed.weight_count(), packed.encoded_len());
    println!("wrote {} and {}", out.display(), aux_path(&out).display());
    Ok(0)
}

fn cmd_unpack(model: &Path, out: Option<PathBuf>) -> Result<u8> {
    let ck = read_checkpoint(model)?;
    let out = out.unwrap_or_else(|| model.with_extension("3dqr"));
    fs::write(&out, ck.to_bytes()?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn compression_of(ck: &Checkpoint) -> Result<CompressionReport> {
    if ck.config.scheme.is_quantized() {
        let (packed, _): (PackedModel, _) = ck.split()?;
        Ok(compression_report(&packed))
    } else {
        Ok(CompressionReport::uncompressed(ck.entries.iter().filter(|e| e.name.ends_with(".kernel")).map(
            |e| (e.name.clone(), e.payload.shape().iter().product()),
        )))
    }
}

fn cmd_report(model: &Path, out: Option<&Path>) -> Result<u8> {
    let ck = read_checkpoint(model)?;
    let report = compression_of(&ck)?;
    println!("{:<16} {:>10} {:>12} {:>12} {:>8}", "layer", "weights", "full bytes", "packed bytes", "ratio");
    for l in &report.layers {
        println!(
            "{:<16} {:>10} {:>12} {:>12} {:>8.2}",
            l.name,
            l.weights,
            l.full_bytes,
            l.packed_bytes,
            l.full_bytes as f64 / l.packed_bytes as f64
        );
    }
    println!(
        "{:<16} {:>10} {:>12} {:>12} {:>8.2}",
        "total", report.weight_count, report.full_bytes, report.packed_bytes, report.ratio
    );
    if let Some(path) = out {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_inspect(model: &Path) -> Result<u8> {
    let ck = read_checkpoint(model)?;
    println!("{}", serde_json::to_string_pretty(&ck.config)?);
    for e in &ck.entries {
        let (kind, extra) = match &e.payload {
            Payload::Dense(_) => ("dense", String::new()),
            Payload::Quantized(p) => (
                "quantized",
                format!("  γ+ {:.4} γ- {:.4} zeros {:.1}%", p.gamma_pos, p.gamma_neg, 100.0 * p.pattern.zero_fraction()),
            ),
            Payload::External { .. } => ("external", String::new()),
        };
        println!("{:<24} {:<9} {:?}{extra}", e.name, kind, e.payload.shape());
    }
    Ok(0)
}
