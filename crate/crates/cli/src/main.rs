//! `lcg`: data generation, training, sampling, evaluation and self-checks.
//!
//! Exit status is 0 on success, 1 on runtime or I/O failure and 2 on
//! usage or configuration errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use lcg_core::checkpoint::{load_checkpoint, Checkpoint};
use lcg_core::checks::run_suite;
use lcg_core::config::RunConfig;
use lcg_core::data::{read_shard, write_shard, Shard};
use lcg_core::diffusion::{sample, InpaintRequest};
use lcg_core::image::{read_mask, read_pnm, write_mask, write_pnm};
use lcg_core::lcg::{scan_samples, Category};
use lcg_core::pipeline::{self, datagen, evaluate, train_run};

#[derive(Parser, Debug)]
#[command(name = "lcg", version, about = "Category-guided inpainting diffusion at desk scale")]
struct Cli {
    /// Run configuration (sectioned key = value file); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides run.seed for datagen, maskgen and train; the sampling seed for sample and eval.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Guidance scale for sample and eval.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Training steps for train; sampler steps for sample and eval.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Output location; its meaning depends on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training and held-out shards (into --out DIR if given).
    Datagen,
    /// Write mask previews and a listing into --out DIR.
    Maskgen {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train into the checkpoint directory (--out DIR overrides it).
    Train,
    /// Inpaint one image and write the result to --out.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// foreground or background.
        #[arg(long)]
        category: String,
    },
    /// Score a checkpoint on a shard; the report goes to --out or stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to run.eval_shard of the checkpoint's configuration.
        #[arg(long)]
        shard: Option<PathBuf>,
    },
    /// Run a verification suite: gla, grad, mask, codec or all.
    Check { suite: String },
}

/// Bad invocation detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<lcg_core::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LCG_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

/// Applies --scale and --steps to the sampler section.
fn sampler_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(s) = cli.scale {
        cfg.sample.scale = s;
    }
    if let Some(n) = cli.steps {
        cfg.sample.steps = n as usize;
    }
    cfg.validate()?;
    Ok(())
}

/// The checkpoint and its embedded configuration.
fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = RunConfig::parse(&ck.config).context("checkpoint configuration")?;
    Ok((ck, cfg))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Datagen => cmd_datagen(&cli),
        Command::Maskgen { count } => cmd_maskgen(&cli, *count),
        Command::Train => cmd_train(&cli),
        Command::Sample {
            checkpoint,
            image,
            mask,
            category,
        } => cmd_sample(&cli, checkpoint, image, mask, category),
        Command::Eval { checkpoint, shard } => cmd_eval(&cli, checkpoint, shard.as_deref()),
        Command::Check { suite } => cmd_check(&cli, suite),
    }
}

fn write_checked_shard(path: &Path, shard: &Shard, cfg: &RunConfig) -> Result<()> {
    let violations = scan_samples(&shard.samples, cfg.masks.min_coverage, cfg.masks.max_coverage);
    for v in violations.iter().take(10) {
        warn!("sample {}: {} ({})", v.index, v.rule, v.detail);
    }
    if !violations.is_empty() {
        anyhow::bail!("{} samples violate the dataset rules", violations.len());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_shard(path, shard).with_context(|| format!("writing {}", path.display()))?;
    info!("{}: {} samples, 0 violations", path.display(), shard.samples.len());
    Ok(())
}

fn cmd_datagen(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let (train_path, eval_path) = match &cli.out {
        Some(dir) => (dir.join("train.lcgs"), dir.join("eval.lcgs")),
        None => (PathBuf::from(&cfg.run.train_shard), PathBuf::from(&cfg.run.eval_shard)),
    };
    let (train, eval) = datagen(&cfg)?;
    write_checked_shard(&train_path, &train, &cfg)?;
    write_checked_shard(&eval_path, &eval, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_maskgen(cli: &Cli, count: usize) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let dir = cli.out.clone().ok_or_else(|| usage("maskgen needs --out DIR"))?;
    let samples = pipeline::generate_samples(&cfg, cfg.run.seed, cfg.data.scenes.min(count.max(1)), count)?;
    fs::create_dir_all(&dir)?;
    let mut listing = format!("# lcg {}\n", env!("CARGO_PKG_VERSION"));
    for (i, s) in samples.iter().enumerate() {
        write_mask(&dir.join(format!("mask-{i:04}.pgm")), &s.mask)?;
        write_pnm(&dir.join(format!("masked-{i:04}.ppm")), &s.image.masked(&s.mask)?)?;
        listing.push_str(&format!(
            "mask-{i:04}.pgm {} {} coverage={:.4} seed={}\n",
            s.category,
            s.mask_kind,
            s.mask.coverage(),
            s.seed
        ));
    }
    for line in cfg.to_text().lines() {
        listing.push_str(&format!("# {line}\n"));
    }
    fs::write(dir.join("masks.txt"), listing)?;
    let violations = scan_samples(&samples, cfg.masks.min_coverage, cfg.masks.max_coverage);
    info!("{} masks written to {}, {} violations", samples.len(), dir.display(), violations.len());
    if !violations.is_empty() {
        anyhow::bail!("{} masks violate the dataset rules", violations.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = cli.steps {
        cfg.train.steps = n;
    }
    if let Some(dir) = &cli.out {
        cfg.run.checkpoint_dir = dir.display().to_string();
    }
    cfg.validate()?;
    let shard_path = PathBuf::from(&cfg.run.train_shard);
    let shard = read_shard(&shard_path).with_context(|| format!("reading {}", shard_path.display()))?;
    let dir = PathBuf::from(&cfg.run.checkpoint_dir);
    let total = cfg.train.steps;
    let outcome = train_run(&cfg, &shard.samples, &dir, |step, loss| {
        if step % 50 == 0 || step == total {
            info!("step {step}/{total} loss {loss:.5}");
        }
    })?;
    info!(
        "trained steps {}..{} into {}",
        outcome.start_step,
        outcome.end_step,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(cli: &Cli, checkpoint: &Path, image: &Path, mask: &Path, category: &str) -> Result<ExitCode> {
    let out = cli.out.clone().ok_or_else(|| usage("sample needs --out PATH"))?;
    let category: Category = category.parse()?;
    if category == Category::Null {
        return Err(usage("--category must be foreground or background"));
    }
    let (ck, mut cfg) = open_checkpoint(checkpoint)?;
    sampler_overrides(&mut cfg, cli)?;
    let model = ck.inference_model(&cfg.denoiser_config())?;
    let request = InpaintRequest {
        image: read_pnm(image).with_context(|| format!("reading {}", image.display()))?,
        mask: read_mask(mask).with_context(|| format!("reading {}", mask.display()))?,
        category,
        seed: cli.seed.unwrap_or(0),
    };
    let f = cfg.model.factor;
    if request.image.height % f != 0 || request.image.width % f != 0 {
        return Err(usage(format!(
            "image is {}×{}, not divisible by the latent factor {f}",
            request.image.height, request.image.width
        )));
    }
    let result = sample(
        &model,
        &cfg.denoiser_config(),
        &cfg.schedule()?,
        &request,
        &cfg.sampler_config()?,
    )?;
    write_pnm(&out, &result).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, shard: Option<&Path>) -> Result<ExitCode> {
    let (ck, mut cfg) = open_checkpoint(checkpoint)?;
    sampler_overrides(&mut cfg, cli)?;
    let shard_path = shard.map_or_else(|| PathBuf::from(&cfg.run.eval_shard), Path::to_path_buf);
    let data = read_shard(&shard_path).with_context(|| format!("reading {}", shard_path.display()))?;
    let model = ck.inference_model(&cfg.denoiser_config())?;
    let seed = cli.seed.unwrap_or(0);
    let (report, _) = evaluate(&model, &cfg, &data.samples, &cfg.sampler_config()?, seed)?;
    let mut text = report.to_text(&[
        ("version", env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint", checkpoint.display().to_string()),
        ("checkpoint_step", ck.step.to_string()),
        ("shard", shard_path.display().to_string()),
        ("scale", cfg.sample.scale.to_string()),
        ("sampler_steps", cfg.sample.steps.to_string()),
        ("seed", seed.to_string()),
    ]);
    for line in cfg.to_text().lines() {
        text.push_str(&format!("# {line}\n"));
    }
    match &cli.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(cli: &Cli, suite: &str) -> Result<ExitCode> {
    let reports = run_suite(suite, cli.seed.unwrap_or(0))?;
    let mut ok = true;
    for r in &reports {
        print!("{}", r.to_text());
        ok &= r.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
