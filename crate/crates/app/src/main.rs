use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use msn::evalharness::EvalLayout;
use msn_app::commands::{self, AblateArgs, DetectArgs, SynthArgs, TrainArgs};
use msn_app::config::{Family, RunConfig};

#[derive(Parser)]
#[command(name = "msn", version, about = "Copy-move forgery detection with multi-directional similarity maps")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "1d")]
    OneD,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a forgery dataset from an annotated corpus.
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the direction decoders and the scale stream.
    Train {
        #[arg(long, value_enum, default_value = "2d")]
        decoder: DecoderArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated directions in degrees.
        #[arg(long, value_delimiter = ',')]
        directions: Option<Vec<u32>>,
        #[arg(long)]
        no_scale: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Detect forgeries in an image or a directory of images.
    Detect {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write similarity-map mosaics for every stream.
        #[arg(long)]
        dump_similarity: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Group rows by CoMoFoD attack category.
        #[arg(long)]
        comofod: bool,
        #[arg(long, default_value = "")]
        pred_suffix: String,
        #[arg(long, default_value = "")]
        gt_suffix: String,
    },
    /// Compare stream and decoder variants on one dataset.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    let workers = cli.workers.unwrap_or(cfg.workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().context("configuring workers")?;
    }
    match cli.command {
        Command::Synth { count, seed, corpus, out } => {
            let s = commands::synth(&cfg, &SynthArgs { count: count.map(|c| c as usize), seed, out, corpus })?;
            println!("wrote {} records to {}", s.records, s.out.display());
            for (bin, n) in &s.per_direction {
                println!("  {bin}: {n}");
            }
            println!("warnings: {}", s.warnings);
            println!("manifest sha256: {}", s.manifest_sha256);
        }
        Command::Train { decoder, epochs, directions, no_scale, dataset } => {
            let family = match decoder {
                DecoderArg::TwoD => Family::SimilarityMaps,
                DecoderArg::OneD => Family::SortedPercentiles,
            };
            let args = TrainArgs { family, epochs, directions, scale_stream: no_scale.then_some(false), dataset };
            for r in commands::train(&cfg, &args)? {
                let last = r.epochs.last();
                println!(
                    "{}: {} epochs, final loss {:.5}, checkpoint {}",
                    r.run,
                    r.epochs.len(),
                    last.map_or(f64::NAN, |e| e.loss),
                    r.checkpoint.display()
                );
            }
        }
        Command::Detect { input, out, dump_similarity } => {
            let s = commands::detect_cmd(&cfg, &DetectArgs { input, out, dump_similarity })?;
            let mean = s.processed.iter().map(|(_, ms)| ms).sum::<f64>() / s.processed.len() as f64;
            println!(
                "processed {} images ({} failed), mean latency {mean:.1} ms; outputs in {}",
                s.processed.len(),
                s.failed.len(),
                s.out.display()
            );
        }
        Command::Eval { pred_dir, gt_dir, out, comofod, pred_suffix, gt_suffix } => {
            let layout = EvalLayout {
                pred_suffix,
                gt_suffix,
                comofod,
                verdict_fraction: cfg.detect.verdict_fraction,
            };
            let r = commands::eval_cmd(&pred_dir, &gt_dir, &layout, &out)?;
            println!("pixel-level: P {:.4} R {:.4} F1 {:.4}", r.pixel.precision, r.pixel.recall, r.pixel.f1);
            println!("image-level: P {:.4} R {:.4} F1 {:.4}", r.image.precision, r.image.recall, r.image.f1);
            println!(
                "{} paired ({} forged, {} pristine), {} unmatched predictions, {} unmatched ground truths",
                r.counts.paired,
                r.counts.forged,
                r.counts.pristine,
                r.unmatched_predictions.len(),
                r.unmatched_ground_truth.len()
            );
        }
        Command::Ablate { dataset, limit, out } => {
            let r = commands::ablate(&cfg, &AblateArgs { dataset, limit, out })?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<msn::Error>() {
                Some(msn::Error::EmptyPairing { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
