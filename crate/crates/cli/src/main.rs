use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use stavc::checkpoint::{self, CheckpointMeta};
use stavc::codec::{decode_video, encode_video, verify_sync};
use stavc::data::{load_frames, write_frames, write_png, Clip, SyntheticSource};
use stavc::eval::{self, ExternalMode, ExternalReport};
use stavc::scale_space::build_scale_space_volume;
use stavc::train::{loss_csv, train, TrainConfig};
use stavc::transforms::{Model, ModelConfig, Variant};
use stavc::{Error, Var};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_SYNC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "stavc", version, about = "Learned low-latency video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the synthetic source and write a checkpoint.
    Train(TrainArgs),
    /// Compress a clip with a trained checkpoint.
    Encode(EncodeArgs),
    /// Decompress a bitstream into numbered PNG frames.
    Decode(DecodeArgs),
    /// Encode, decode and score one clip; prints a CSV row.
    Eval(EvalArgs),
    /// Score several checkpoints on one clip; prints the R-D CSV.
    Sweep(SweepArgs),
    /// Render a synthetic clip as numbered PNG frames.
    GenData(GenDataArgs),
    /// Score x265 at several CRF values on one clip.
    CompareExternal(ExternalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliVariant {
    Tat,
    Ssf,
    Stat,
    StatSsf,
}

impl From<CliVariant> for Variant {
    fn from(v: CliVariant) -> Self {
        match v {
            CliVariant::Tat => Variant::Tat,
            CliVariant::Ssf => Variant::Ssf,
            CliVariant::Stat => Variant::Stat,
            CliVariant::StatSsf => Variant::StatSsf,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: CliVariant,
    /// Condition the residual prior on the motion latent.
    #[arg(long)]
    structured_prior: bool,
    /// TOML or JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hyper: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    output: PathBuf,
    /// Loss log as CSV: step,loss,D,R,lr.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Must match the checkpoint when given.
    #[arg(long, value_enum)]
    variant: Option<CliVariant>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of numbered frames, or a raw RGB file with a `.json` sidecar.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write the scale-space volume of the first frame here, one PNG per level.
    #[arg(long)]
    dump_scale_space: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    /// Record wall-clock seconds; off keeps the CSV byte-stable.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene index within the seeded source.
    #[arg(long, default_value_t = 0)]
    index: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ColorMode {
    Rgb,
    Yuv420,
}

#[derive(Debug, Args)]
struct ExternalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, num_args = 1.., default_values_t = [22u32, 27, 32, 37])]
    crf: Vec<u32>,
    #[arg(long, value_enum, default_value_t = ColorMode::Rgb)]
    mode: ColorMode,
    #[arg(long)]
    work_dir: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_model(args: &ModelArgs) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if let Some(v) = args.variant {
        let want = Variant::from(v);
        if want != model.config.variant {
            return Err(Error::Usage(format!(
                "--variant {want} does not match checkpoint variant {}",
                model.config.variant
            ))
            .into());
        }
    }
    Ok((model, meta))
}

fn load_clip(path: &Path) -> Result<Clip> {
    load_frames(path).with_context(|| format!("reading frames from {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.beta = a.beta.unwrap_or(cfg.beta);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let mut mc = ModelConfig::new(a.variant.into(), a.structured_prior);
    mc.width = a.width.unwrap_or(mc.width);
    mc.latent = a.latent.unwrap_or(mc.latent);
    mc.hyper = a.hyper.unwrap_or(mc.hyper);
    mc.blocks = a.blocks.unwrap_or(mc.blocks);
    mc.seed = cfg.seed;
    let mut model = Model::new(mc)?;
    info!("training {} for {} steps at beta {}", model.config.variant, cfg.steps, cfg.beta);
    let report = train(&mut model, &cfg, |row| {
        info!("step {} loss {:.6} D {:.6} R {:.4} lr {:e}", row.step, row.loss, row.distortion, row.rate, row.lr);
    })?;
    println!("initial_loss {:.6}\nfinal_loss {:.6}", report.initial_loss, report.final_loss);
    checkpoint::save(&a.output, &model, &CheckpointMeta::new(&model.config, cfg.beta, cfg.steps as u64))?;
    if let Some(p) = &a.loss_csv {
        std::fs::write(p, loss_csv(&report.log))?;
    }
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let (model, meta) = load_model(&a.model)?;
    let clip = load_clip(&a.input)?;
    if let Some(dir) = &a.dump_scale_space {
        std::fs::create_dir_all(dir)?;
        let s = clip.frames[0].shape().to_vec();
        let x = Var::constant(clip.frames[0].reshape(&[1, s[0], s[1], s[2]])?);
        let vol = build_scale_space_volume(&x, model.config.sigma0, model.config.scale_depth)?;
        for (k, level) in vol.levels.iter().enumerate() {
            write_png(&dir.join(format!("level_{k}.png")), &level.value().select0(0)?)?;
        }
    }
    let encoded = encode_video(&model, &clip.frames, meta.beta)?;
    verify_sync(&model, &encoded)?;
    std::fs::write(&a.output, &encoded.bytes)?;
    let (h, w) = clip.dims();
    println!("bytes {}\nbpp {:.6}", encoded.bytes.len(), eval::bpp(encoded.bytes.len(), clip.len(), h, w));
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let bytes = std::fs::read(&a.input)?;
    let decoded = decode_video(&model, &bytes)?;
    let frames = decoded.frames.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect();
    write_frames(&a.output_dir, &Clip::new(frames)?)?;
    println!("frames {}", decoded.frames.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = load_model(&a.model)?;
    let clip = load_clip(&a.input)?;
    let point = eval::evaluate(&model, &clip, meta.beta, a.timing)?;
    print!("{}", eval::rd_csv(&[point]));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let clip = load_clip(&a.input)?;
    let mut models = Vec::with_capacity(a.checkpoints.len());
    for p in &a.checkpoints {
        let (model, meta) = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        models.push((model, meta.beta));
    }
    let csv = eval::rd_csv(&eval::rd_sweep(&models, &clip, a.timing)?);
    match &a.csv {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let source = SyntheticSource { seed: a.seed, ..SyntheticSource::default() };
    let clip = source.generate_clip(a.index, a.frames, a.height, a.width)?;
    write_frames(&a.output_dir, &clip)?;
    Ok(())
}

fn cmd_external(a: ExternalArgs) -> Result<()> {
    let clip = load_clip(&a.input)?;
    let mode = match a.mode {
        ColorMode::Rgb => ExternalMode::Rgb,
        ColorMode::Yuv420 => ExternalMode::Yuv420,
    };
    match eval::external_codec(&clip, &a.crf, mode, &a.work_dir)? {
        ExternalReport::Unavailable(why) => {
            println!("unavailable: {why}");
        }
        ExternalReport::Points(points) => {
            let csv = eval::rd_csv(&points);
            match &a.csv {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Sync(_)) => EXIT_SYNC,
        Some(Error::Usage(_) | Error::Checkpoint(_) | Error::Domain(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GenData(a) => {
            if a.frames == 0 {
                bail!(Error::Usage("--frames must be positive".into()));
            }
            cmd_gen_data(a)
        }
        Command::CompareExternal(a) => cmd_external(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
