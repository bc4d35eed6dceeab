use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perco_core::bitstream::{write_container, CompressedImage};
use perco_core::codec;
use perco_core::config::RunConfig;
use perco_core::dataset::Dataset;
use perco_core::diffusion::{SamplerConfig, SamplerKind};
use perco_core::eval::{rd_curve, to_csv, EvalOptions};
use perco_core::image_io::Image;
use perco_core::model::CodecModel;
use perco_core::synth::{generate, make_synthetic};
use perco_core::train::{Trainer, TrainingSet};
use perco_core::{Error, Result};
use perco_nn::{read_checkpoint, write_checkpoint};

#[derive(Parser)]
#[command(
    name = "perco-micro",
    version,
    about = "Tiny generative image codec with a diffusion decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a log to the output directory.
    Train(TrainArgs),
    /// Compress an image into a container.
    Encode(EncodeArgs),
    /// Reconstruct an image from a container.
    Decode(DecodeArgs),
    /// Write a rate-distortion CSV for one or more checkpoints.
    Eval(EvalArgs),
    /// Write the synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Training image directory; overrides the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Global token to transmit.
    #[arg(long, conflicts_with = "no_global")]
    global: Option<usize>,
    /// Transmit no global token.
    #[arg(long)]
    no_global: bool,
    /// Store free text as the global payload instead of a token.
    #[arg(long, conflicts_with_all = ["global", "no_global"])]
    caption: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Sampler defaults from a run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale.
    #[arg(long = "cfg")]
    cfg_scale: Option<f64>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    dataset: PathBuf,
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Ignore labels instead of sending them as global tokens.
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_model(path: &Path) -> Result<CodecModel<f32>> {
    CodecModel::from_checkpoint(&read_checkpoint(path)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

impl SamplerArgs {
    fn resolve(&self) -> Result<SamplerConfig> {
        let mut s = load_config(self.config.as_deref())?.sampler;
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.cfg_scale {
            s.cfg_scale = v;
        }
        if let Some(v) = self.sampler {
            s.kind = v;
        }
        Ok(s)
    }
}

/// Copies every line to stderr as well as the log file.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        io::stderr().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    cfg.validate()?;
    let (images, labels) = match &cfg.dataset {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            let m = &cfg.model;
            ds.check_geometry(m.channels, m.height, m.width)?;
            ds.training_tensors(m.classes)?
        }
        None => {
            let s = generate(&cfg.synthetic, cfg.seed)?;
            (
                s.train.iter().map(|x| x.image.to_tensor()).collect(),
                s.train.iter().map(|x| x.label).collect(),
            )
        }
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&read_checkpoint(p)?, cfg.train.clone())?;
            if t.model().config() != &cfg.model {
                log::warn!("model settings come from {}, not the config", p.display());
            }
            log::info!("resuming at step {}", t.step());
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.seed)?,
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let log_path = a.out.join("train.log");
    let log_file = File::options()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    let mut log = Tee(log_file);
    let out = a.out.clone();
    let data = TrainingSet {
        images: &images,
        labels: &labels,
    };
    trainer.run(&data, &mut log, |t| {
        let p = out.join(format!("step-{:06}.pmck", t.step()));
        Ok(write_checkpoint(&p, &t.to_checkpoint())?)
    })?;
    let last = a.out.join("model.pmck");
    write_checkpoint(&last, &trainer.to_checkpoint())?;
    println!("wrote {}", last.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let image = Image::read(&a.image)?;
    let global = if a.no_global { None } else { a.global };
    let mut ci = codec::encode_image(&model, &image, global)?;
    if let Some(text) = &a.caption {
        let h = ci.header;
        ci = CompressedImage::new(h.height, h.width, ci.grid, h.log2_v, codec::caption_payload(text)?)?;
    }
    let bytes = write_container(&ci)?;
    write_file(&a.out, &bytes)?;
    let r = codec::file_rate(&bytes)?;
    println!(
        "spatial_bpp={} global_bpp={} total_bpp={} bytes={}",
        r.spatial_bpp,
        r.global_bpp,
        r.total_bpp,
        bytes.len()
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let sampler = a.sampler.resolve()?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::io(format!("reading {}", a.input.display()), e))?;
    let ci = codec::read_for_model(&bytes, model.config())?;
    codec::decode_image(&model, &ci, &sampler)?.write(&a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        sampler: a.sampler.resolve()?,
        use_global: !a.no_global,
        ..EvalOptions::default()
    };
    let rows = rd_curve(&a.dataset, &a.checkpoints, &opts)?;
    write_file(&a.out, to_csv(&rows).as_bytes())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let s = make_synthetic(&cfg.synthetic, seed, &a.out)?;
    println!(
        "wrote {} training and {} held-out images to {}",
        s.train.len(),
        s.heldout.len(),
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
