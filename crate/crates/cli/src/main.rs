use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iff_cli::commands::{self, AnalyzeArgs, TrainArgs};
use iff_cli::suites::Suite;
use iff_cli::sweep::SweepConfig;
use iff_core::analysis::DEFAULT_BINS;
use iff_core::toydet::DecodeParams;
use iff_core::traingraph::{LrSchedule, TrainConfig};

#[derive(Parser)]
#[command(name = "iffdet", version, about = "Closed-loop detector: data, training, sweeps and stability checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Optim {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Final learning rate of the cosine decay; equal to --lr for a constant rate.
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    #[arg(long)]
    no_early_stop: bool,
    /// Training scenes used for the per-epoch mAP estimate.
    #[arg(long, default_value_t = 64)]
    map_probe: usize,
}

impl Optim {
    fn config(&self) -> TrainConfig {
        let floor = self.lr_floor.unwrap_or(self.lr * 0.05);
        TrainConfig {
            epochs: self.epochs,
            schedule: LrSchedule::Cosine { base: self.lr, floor },
            momentum: self.momentum,
            batch_size: self.batch,
            seed: 0,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            early_stop: !self.no_early_stop,
            map_probe: self.map_probe,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset manifest of synthetic scenes.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector at a fixed feedback depth.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        mi: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to <out>.loss.csv.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        optim: Optim,
    },
    /// Train and evaluate one model per (seed, depth) pair.
    SweepMi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        mi_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        optim: Optim,
    },
    /// Run a checkpoint on a manifest and write detections.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Feedback depth; defaults to the checkpoint's.
        #[arg(long)]
        mi: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.5)]
        iou_thresh: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a randomized invariant sweep; exits 1 on any violation.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-check CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmaps, energy histograms, a stability report and timing.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        heatmaps: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = iff_cli::init_threads() {
        return usage(&e);
    }
    let result = match &cli.command {
        Command::Gen { count, seed, noise, out } => commands::gen(*count as usize, *seed, *noise, out),
        Command::Train { data, mi, seed, out, loss_csv, optim } => commands::train_cmd(&TrainArgs {
            data,
            mi: *mi,
            seed: *seed,
            out,
            loss_csv: loss_csv.as_deref(),
            train: optim.config(),
        }),
        Command::SweepMi { data, test, mi_list, seeds, out, optim } => {
            if mi_list.is_empty() || seeds.is_empty() {
                return usage("--mi-list and --seeds must be nonempty");
            }
            let cfg = SweepConfig {
                mi_list: mi_list.clone(),
                seeds: seeds.clone(),
                train: optim.config(),
            };
            commands::sweep_cmd(data, test, &cfg, out)
        }
        Command::Infer { ckpt, data, mi, score_thresh, iou_thresh, out } => {
            if !(0.0..1.0).contains(iou_thresh) || *iou_thresh == 0.0 {
                return usage("--iou-thresh must lie in (0, 1)");
            }
            let params = DecodeParams {
                score_thresh: *score_thresh,
                iou_thresh: *iou_thresh,
            };
            commands::infer(ckpt, data, *mi, &params, out.as_deref())
        }
        Command::Verify { suite, trials, seed, out } => {
            let trials = trials.unwrap_or(suite.default_trials());
            match commands::verify(*suite, trials, *seed, out.as_deref()) {
                Ok(report) => {
                    println!("{}", report.summary());
                    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
                    return if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) };
                }
                Err(e) => Err(e),
            }
        }
        Command::Analyze { ckpt, data, out_dir, scenes, heatmaps, bins } => {
            let mut args = AnalyzeArgs::new(ckpt, data, out_dir);
            args.scenes = *scenes;
            args.heatmaps = *heatmaps;
            args.bins = *bins;
            commands::analyze(&args)
        }
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
