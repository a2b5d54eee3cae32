//! `lmp`: run, probe, and visualize the motion-transfer pipeline.
//!
//! Exit codes: 0 success, 2 config or shape errors, 3 file errors,
//! 4 numeric failures. Diagnostics name the denoising step and block
//! when the failure happened inside the loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmp_core::config::RunConfig;
use lmp_core::fbdm::{aggregate_subject_saliency, select_foreground, SelectionPolicy};
use lmp_core::heatmap::Heatmap;
use lmp_core::latent::TokenLayout;
use lmp_core::lmpt;
use lmp_core::mmdit::{AttentionMap, BlockTrace, KvCache};
use lmp_core::pipeline::{asm_losses_csv, lmp_generate, DumpOptions};
use lmp_core::rng::{gaussian_vec, stream_rng, streams};
use lmp_core::schedule::proportional_noise;
use lmp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lmp", version, about = "Zero-shot motion transfer between seeded latent videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-branch denoising loop described by a JSON config.
    Generate(GenerateArgs),
    /// Render an attention dump as per-frame heatmaps plus a foreground mask.
    Inspect(InspectArgs),
    /// Noise a latent video to one step of the clean-fraction schedule.
    Noise(NoiseArgs),
    /// Run the built-in oracle battery and report each check.
    Selftest,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON run config
    #[arg(long)]
    config: PathBuf,
    /// Overrides LMP_SEED and the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Write reference and target attention maps under <output dir>/dumps
    #[arg(long)]
    dump_attn: bool,
    /// Write per-step saliency volumes and masks under <output dir>/dumps
    #[arg(long)]
    dump_saliency: bool,
    /// Dump only timesteps divisible by N
    #[arg(long, value_name = "N", default_value_t = 1)]
    dump_every: usize,
    /// Print the gate trace CSV to stdout
    #[arg(long)]
    trace_gates: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Attention dump (LMPA)
    dump: PathBuf,
    /// Subject prompt token indices, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    subject: Vec<usize>,
    /// Directory for the PGM frames and mask file
    #[arg(long)]
    out_dir: PathBuf,
    /// Select the top fraction of each frame (default 0.25)
    #[arg(long)]
    fraction: Option<f64>,
    /// Select tokens at or above this share of the frame peak
    #[arg(long, conflicts_with = "fraction")]
    threshold: Option<f64>,
}

#[derive(Args)]
struct NoiseArgs {
    /// Input latent (LMPT rank 4)
    input: PathBuf,
    /// Noise level, 0 (clean) to t_total
    #[arg(long)]
    t: usize,
    /// JSON run config supplying the schedule and blend policy
    #[arg(long)]
    config: PathBuf,
    /// Overrides LMP_SEED and the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output latent path
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root_cause() {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => generate(args)?,
        Command::Inspect(args) => inspect(args)?,
        Command::Noise(args) => noise(args)?,
        Command::Selftest => return Ok(selftest()),
    }
    Ok(ExitCode::SUCCESS)
}

/// --seed beats LMP_SEED beats the config file.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("LMP_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("LMP_SEED {text:?}: {e}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("LMP_SEED: {e}"))),
    }
}

fn load_config(path: &Path, seed_flag: Option<u64>) -> Result<RunConfig> {
    // An unreadable config is a caller mistake (exit 2), unlike missing
    // tensors it references.
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(seed) = seed_override(seed_flag)? {
        cfg.schedule.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(output: &Path) -> PathBuf {
    match output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let spec = cfg.build()?;
    let dir = run_dir(&cfg.output);
    fs::create_dir_all(&dir)?;
    let dumps = DumpOptions {
        attn: args.dump_attn,
        saliency: args.dump_saliency,
        every: args.dump_every,
        dir: (args.dump_attn || args.dump_saliency).then(|| dir.join("dumps")),
    };
    let out = lmp_generate(&spec, &dumps)?;
    lmpt::write_latent(&cfg.output, &out.z0)?;
    lmpt::atomic_write(&dir.join("gates.csv"), out.gates.csv().as_bytes())?;
    lmpt::atomic_write(
        &dir.join("asm_losses.csv"),
        asm_losses_csv(&out.asm_losses).as_bytes(),
    )?;
    if args.trace_gates {
        print!("{}", out.gates.csv());
    }
    log::info!("wrote {}", cfg.output.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (meta, mat) = lmpt::decode_attention(&fs::read(&args.dump)?)?;
    let map = AttentionMap::new(meta.m, meta.video_tokens(), meta.r, mat)?;
    let layout = TokenLayout::new(meta.frames, meta.height, meta.width);
    // The aggregation only reads the map; no cache travels with a dump.
    let trace = BlockTrace {
        attn: map,
        kv: KvCache {
            keys: vec![],
            values: vec![],
        },
    };
    let vol = aggregate_subject_saliency(&[trace], &args.subject, &layout)?;
    let policy = match (args.fraction, args.threshold) {
        (None, None) => SelectionPolicy::TopFraction { q: 0.25 },
        (Some(q), None) => SelectionPolicy::TopFraction { q },
        (None, Some(tau)) => SelectionPolicy::Threshold { tau },
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let mask = select_foreground(&vol, &policy)?;

    fs::create_dir_all(&args.out_dir)?;
    for f in 0..layout.frames() {
        let heat = Heatmap::normalize(layout.height(), layout.width(), vol.frame(f))?;
        if heat.constant_input() {
            eprintln!("warning: frame {f} saliency is constant, heatmap is all zeros");
        }
        lmpt::atomic_write(&args.out_dir.join(format!("saliency_f{f}.pgm")), &heat.to_pgm())?;
    }
    lmpt::atomic_write(
        &args.out_dir.join("mask.lmpt"),
        &lmpt::encode_indices(&mask.selected())?,
    )?;
    Ok(())
}

fn noise(args: NoiseArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let v = lmpt::read_latent(&args.input)?;
    let blend = cfg.blend.build(cfg.schedule.t_total)?;
    let eps = lmp_core::latent::LatentVideo::new(
        v.frames(),
        v.height(),
        v.width(),
        v.channels(),
        gaussian_vec(
            &mut stream_rng(cfg.schedule.seed, streams::EPS),
            v.frames() * v.height() * v.width() * v.channels(),
            1.0,
        ),
    )?;
    let noised = proportional_noise(&v, args.t, &eps, &blend)?;
    fs::create_dir_all(run_dir(&args.out))?;
    lmpt::write_latent(&args.out, &noised)
}

fn selftest() -> ExitCode {
    let results = lmp_core::selftest::run_all();
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
    }
    if lmp_core::selftest::all_passed(&results) {
        println!("all {} checks passed", results.len());
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    }
}
