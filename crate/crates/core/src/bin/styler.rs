use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use styler::coarse::{CoarseDecoder, CoarseNetwork};
use styler::encoder::{Encoder, EncoderProfile, ProfileKind};
use styler::fine::{stylize, FineNetwork};
use styler::pipeline::{
    ablate, bench_stylize, perceptual_distance, ssim, train_coarse, train_fine, SsimConfig, TrainConfig,
};
use styler::ssf::Fusion;
use styler::substrate::{downsample2, load_image, save_image};
use styler::wct::WctConfig;

#[derive(Parser)]
#[command(name = "styler", version, about = "Coarse-to-fine structure-aware style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the coarse decoder by reconstruction.
    TrainCoarse {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the fine network against a frozen coarse checkpoint.
    TrainFine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
    },
    /// Stylize one content image.
    Stylize {
        #[arg(long)]
        coarse: PathBuf,
        /// Required unless `--coarse-only` is given.
        #[arg(long, required_unless_present = "coarse_only")]
        fine: Option<PathBuf>,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the coarse stage output at half resolution.
        #[arg(long)]
        coarse_only: bool,
    },
    /// Image quality metrics.
    Eval {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Time end-to-end stylization.
    Bench {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Coarse checkpoint; seeded networks are used when both checkpoints are absent.
        #[arg(long, requires = "fine")]
        coarse: Option<PathBuf>,
        #[arg(long, requires = "coarse")]
        fine: Option<PathBuf>,
        /// Profile of the seeded networks.
        #[arg(long, value_enum, default_value = "toy")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train and compare the loss, fusion and coarse-stage variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// Mean SSIM on luminance.
    Ssim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Feature distance under the encoder stored in a coarse checkpoint.
    Perceptual {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Toy,
    Full,
}

impl From<ProfileArg> for ProfileKind {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Toy => ProfileKind::Toy,
            ProfileArg::Full => ProfileKind::Full,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainCoarse { config } => {
            let cfg = TrainConfig::load(&config)?;
            let report = train_coarse(&cfg)?;
            println!("coarse checkpoint: {}", report.checkpoint.display());
            println!("loss log: {}", report.log.display());
        }
        Command::TrainFine { config, coarse } => {
            let cfg = TrainConfig::load(&config)?;
            let report = train_fine(&cfg, &coarse)?;
            println!("fine checkpoint: {}", report.checkpoint.display());
            println!("loss log: {}", report.log.display());
        }
        Command::Stylize {
            coarse,
            fine,
            content,
            style,
            out,
            coarse_only,
        } => {
            let coarse = CoarseNetwork::load(&coarse)?;
            let content = load_image(&content)?;
            let style = load_image(&style)?;
            let image = if coarse_only {
                coarse.stylize(&downsample2(&content)?, &downsample2(&style)?, &WctConfig::default())?
            } else {
                let fine = FineNetwork::load(fine.context("--fine is required without --coarse-only")?)?;
                stylize(&coarse, &fine, &content, &style)?
            };
            save_image(&image, &out)?;
        }
        Command::Eval { metric } => match metric {
            Metric::Ssim { a, b } => {
                println!("{}", ssim(&load_image(&a)?, &load_image(&b)?, &SsimConfig::default())?);
            }
            Metric::Perceptual { a, b, coarse } => {
                let net = CoarseNetwork::load(&coarse)?;
                println!("{}", perceptual_distance(&load_image(&a)?, &load_image(&b)?, &net.encoder)?);
            }
        },
        Command::Bench {
            n,
            size,
            coarse,
            fine,
            profile,
            seed,
            json,
        } => {
            let (coarse, fine) = match (coarse, fine) {
                (Some(c), Some(f)) => (CoarseNetwork::load(&c)?, FineNetwork::load(&f)?),
                _ => {
                    let kind = ProfileKind::from(profile);
                    let enc = match kind {
                        ProfileKind::Toy => EncoderProfile::toy(seed),
                        ProfileKind::Full => EncoderProfile::full_seeded(seed),
                    };
                    let coarse = CoarseNetwork::new(Encoder::build(enc)?, CoarseDecoder::new(kind, seed))?;
                    (coarse, FineNetwork::new(kind, Fusion::Ssf, true, seed))
                }
            };
            let report = bench_stylize(&coarse, &fine, n, size, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{} runs at {size}x{size}: mean {:.4} s, std {:.4} s ({})",
                    report.n, report.mean_seconds, report.std_seconds, report.hardware
                );
            }
        }
        Command::Ablate { config } => {
            let cfg = TrainConfig::load(&config)?;
            let report = ablate(&cfg)?;
            println!("table: {}", report.table.display());
            println!("grid: {}", report.grid.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<styler::Error>().map_or(1, styler::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
