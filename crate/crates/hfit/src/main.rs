use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hfit::ablation::AblationMode;
use hfit::config::RunConfig;
use hfit::core::data::synth_scene_with;
use hfit::{dataset, golden, report, run, Error};

#[derive(Parser)]
#[command(
    name = "hfit",
    version,
    about = "RGB-D scene parsing with a frozen ViT side adapter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory (defaults to the run's output directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Write a label map and per-class probability maps for one image pair.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero-pad inputs to a multiple of 32 and crop the outputs back.
        #[arg(long)]
        pad: bool,
    },
    /// Train and evaluate a list of ablation modes.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated modes: rgb, depth, rgbdepth, no-rgb-weight,
        /// no-depth-weight, no-hgfi-vit, no-hgfi-adapter.
        #[arg(long)]
        modes: String,
    },
    /// Print parameter counts of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write synthetic scenes in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay golden fixtures.
    Golden {
        #[arg(long)]
        suite: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let t = run::train(&cfg)?;
            let last = t.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
            println!("final loss {last:.5}");
            println!("checkpoint {}", t.final_checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            shards,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.train.output_dir.clone());
            let e = run::evaluate(&cfg, &checkpoint, &out, shards)?;
            print!("{}", report::metrics_table(&e.report));
        }
        Command::Predict {
            config,
            checkpoint,
            rgb,
            depth,
            out,
            pad,
        } => {
            let cfg = RunConfig::load(&config)?;
            let p = run::predict(&cfg, &checkpoint, &rgb, &depth, &out, pad)?;
            for f in &p.files {
                println!("{}", f.display());
            }
        }
        Command::Ablate { config, modes } => {
            let modes = AblationMode::parse_list(&modes)?;
            let cfg = RunConfig::load(&config)?;
            let rows = run::ablate(&cfg, &modes)?;
            print!("{}", report::ablation_table(&rows));
        }
        Command::Inspect { checkpoint } => print!("{}", run::inspect(&checkpoint)?),
        Command::Synth {
            out,
            split,
            count,
            size,
            classes,
            seed,
        } => {
            let cfg = hfit::core::data::SynthConfig::default();
            let samples = (0..count as u64)
                .map(|i| {
                    Ok((
                        format!("{split}_{i:04}"),
                        synth_scene_with(seed + i, size, size, classes, &cfg)?,
                    ))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            dataset::write_dataset(&out, &split, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Golden { suite } => {
            let results = golden::replay_suite(&suite)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {} {} max_diff={:e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.op,
                    r.max_diff
                );
                for (i, got, want) in &r.mismatches {
                    println!("    [{i}] got {got:?} expected {want:?}");
                }
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Fixture {
                    path: suite,
                    message: format!("{failed} case(s) failed"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("hfit-error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
