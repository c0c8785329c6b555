use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stegattn::metrics::{psnr, ssim};
use stegattn::numerics::OpKind;
use stegattn::pipeline::{
    self, image_to_tensor, load_checkpoint, load_image, save_checkpoint, save_png, tensor_to_image, TrainConfig,
};
use stegattn::{verify, AttentionMode, Error, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "stegattn", version, about = "Image-in-image steganography with channel and spatial attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a checkpoint plus `<out>.loss.csv`.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: AttentionMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all six configurations and write the comparison CSV.
    Compare {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a secret image in a cover image.
    Hide {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        secret: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the secret from a stego image.
    Reveal {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Original secret, to report reconstruction quality.
        #[arg(long)]
        secret: Option<PathBuf>,
    },
    /// Check every backward rule against central finite differences.
    Gradcheck {
        /// Also check the end-to-end loss of every attention mode.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
    },
    /// Write a folder of procedural PNG images for quick experiments.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 1.0)]
    beta: f32,
    #[arg(long, default_value_t = 8)]
    ratio: usize,
    #[arg(long)]
    decoder_attention: bool,
}

impl TrainArgs {
    fn config(&self, mode: AttentionMode) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            image_size: self.image_size,
            batch_size: self.batch,
            steps: self.steps,
            learning_rate: self.lr,
            beta: self.beta,
            mode,
            data_dir: self.data.clone(),
            reduction_ratio: self.ratio,
            decoder_attention: self.decoder_attention,
        }
    }
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op {s:?}"))
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) => EXIT_USAGE,
            Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
            Error::Shape { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Honour STEGATTN_THREADS; results do not depend on the thread count.
fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("STEGATTN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure {
            code: EXIT_USAGE,
            message: format!("STEGATTN_THREADS must be a positive integer, got {raw:?}"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_USAGE,
            message: format!("cannot size thread pool: {e}"),
        })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { common, mode, out } => cmd_train(&common.config(mode), &out),
        Command::Compare { common, out } => cmd_compare(&common.config(AttentionMode::Baseline), &out),
        Command::Hide {
            checkpoint,
            cover,
            secret,
            out,
        } => cmd_hide(&checkpoint, &cover, &secret, &out),
        Command::Reveal {
            checkpoint,
            stego,
            out,
            secret,
        } => cmd_reveal(&checkpoint, &stego, &out, secret.as_deref()),
        Command::Gradcheck {
            full,
            seed,
            inject_fault,
        } => cmd_gradcheck(full, seed, inject_fault),
        Command::SynthData { out, count, size, seed } => {
            pipeline::synth_dataset(&out, count, size, seed)?;
            Ok(())
        }
    }
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn cmd_train(config: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let outcome = pipeline::train(config)?;
    save_checkpoint(&outcome.params, config, out)?;
    let mut csv = String::from("step,loss\n");
    for (i, loss) in outcome.loss_log.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    write_file(&loss_log_path(out), csv.as_bytes())?;
    let first = outcome.loss_log.first().copied().unwrap_or(f32::NAN);
    let last = outcome.loss_log.last().copied().unwrap_or(f32::NAN);
    log::info!("loss {first:.5} -> {last:.5}; checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_compare(config: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let results = pipeline::compare(config)?;
    let csv = pipeline::render_csv(&results);
    write_file(out, csv.as_bytes())?;
    print!("{csv}");
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.report.as_ref().err().map(|e| format!("{}: {e}", r.mode)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{} configuration(s) failed: {}", failed.len(), failed.join("; ")),
        })
    }
}

/// Round-trip through 8-bit RGB, as writing and re-reading a PNG would.
fn quantised(t: &Tensor) -> Result<Tensor, Failure> {
    Ok(image_to_tensor(&tensor_to_image(t)?))
}

fn print_quality(label: &str, reference: &Tensor, float: &Tensor, png: &Tensor) -> Result<(), Failure> {
    println!("psnr_{label} {:.3}", psnr(reference, png, 1.0)?);
    println!("ssim_{label} {:.3}", ssim(reference, png)?);
    println!("psnr_{label}_float {:.3}", psnr(reference, float, 1.0)?);
    println!("ssim_{label}_float {:.3}", ssim(reference, float)?);
    Ok(())
}

fn cmd_hide(checkpoint: &Path, cover: &Path, secret: &Path, out: &Path) -> Result<(), Failure> {
    let (params, config) = load_checkpoint(checkpoint)?;
    let cover = load_image(cover, config.image_size)?;
    let secret = load_image(secret, config.image_size)?;
    let stego = params.hide(&cover, &secret)?;
    save_png(&stego, out)?;
    print_quality("cover", &cover, &stego, &quantised(&stego)?)
}

fn cmd_reveal(checkpoint: &Path, stego: &Path, out: &Path, secret: Option<&Path>) -> Result<(), Failure> {
    let (params, config) = load_checkpoint(checkpoint)?;
    let stego = load_image(stego, config.image_size)?;
    let revealed = params.reveal(&stego)?;
    save_png(&revealed, out)?;
    match secret {
        Some(path) => {
            let secret = load_image(path, config.image_size)?;
            print_quality("secret", &secret, &revealed, &quantised(&revealed)?)?;
        }
        None => log::info!("no --secret given; skipping reconstruction metrics"),
    }
    Ok(())
}

fn cmd_gradcheck(full: bool, seed: u64, fault: Option<OpKind>) -> Result<(), Failure> {
    let started = std::time::Instant::now();
    let reports = verify::run(seed, full, fault)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    println!("{:<44} {:>12} {:>7} {:>7}", "case", "rel_error", "coords", "kinks");
    for r in &reports {
        let mark = if r.passed() { "" } else { "  FAIL" };
        println!("{:<44} {:>12.3e} {:>7} {:>7}{mark}", r.name, r.rel_error, r.coords, r.skipped);
        worst = worst.max(r.rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!(
        "worst relative error {worst:.3e} (tolerance {:.0e}, step {:.0e}) over {} cases in {:.1?}",
        verify::TOLERANCE,
        verify::STEP,
        reports.len(),
        started.elapsed()
    );
    if failed.is_empty() {
        return Ok(());
    }
    let culprit = fault.map(|op| format!(" (backward rule of {} corrupted)", op.name())).unwrap_or_default();
    Err(Failure {
        code: EXIT_NUMERIC,
        message: format!("gradient check failed for {}{culprit}", failed.join(", ")),
    })
}
