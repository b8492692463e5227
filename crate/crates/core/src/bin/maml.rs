use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use maml_core::autodiff::Element;
use maml_core::data::Section;
use maml_core::harness::{
    build_learner, hex, load_any_checkpoint, run_training, test_with_ensemble, AnyCheckpoint,
    Checkpoint, EpochSummary, ExperimentConfig, Observer, TaskData,
};
use maml_core::meta::IterationMetrics;
use maml_core::Error;

#[derive(Parser)]
#[command(
    name = "maml",
    version,
    about = "Meta-learning few-shot classifiers (MAML and MAML++)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed, then test each seed's top-3 ensemble.
    Train {
        /// Preset name (paper-omniglot, omniglot-desk, synthetic-ci) or TOML file.
        #[arg(long)]
        config: String,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory (overrides the config and MAML_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a line every this many iterations (0: epochs only).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate one checkpoint, or the probability-averaged ensemble of several.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Print a checkpoint's learned inner rates, loss weights and history.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Val,
    Test,
}

struct Progress {
    every: usize,
}

impl Observer for Progress {
    fn iteration(&mut self, seed: u64, m: &IterationMetrics) {
        if self.every > 0 && (m.iteration + 1).is_multiple_of(self.every) {
            eprintln!(
                "seed {seed} epoch {} iter {}: loss {:.4} acc {:.3} lr {:.2e} {} {:.0} ms",
                m.epoch,
                m.iteration + 1,
                m.loss,
                m.accuracy,
                m.lr,
                m.order.as_str(),
                m.wall_ms
            );
        }
    }

    fn epoch(&mut self, seed: u64, s: &EpochSummary) {
        eprintln!(
            "seed {seed} epoch {}: val accuracy {:.4} +- {:.4}, loss {:.4}",
            s.epoch, s.accuracy, s.std_error, s.loss
        );
    }

    fn diverged(&mut self, seed: u64, err: &Error) {
        eprintln!("seed {seed} diverged: {err}");
    }

    fn message(&mut self, msg: &str) {
        eprintln!("{msg}");
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ALL_DIVERGED: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Ingest { .. } | Error::Sampling(_) => EXIT_DATA,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            resume,
            out,
            log_every,
        } => train(&config, seed, resume, out, log_every),
        Command::Eval { ckpt, split } => eval(&ckpt, split).map(|_| 0),
        Command::Inspect { ckpt } => inspect(&ckpt).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train(
    config: &str,
    seed: Option<u64>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
    log_every: usize,
) -> Result<u8, Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply_env();
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    let summary = run_training(
        &cfg,
        seed,
        resume.as_deref(),
        &mut Progress { every: log_every },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(if summary.all_diverged() {
        EXIT_ALL_DIVERGED
    } else {
        0
    })
}

fn eval(paths: &[PathBuf], split: Split) -> Result<(), Error> {
    let mut cfg = match load_any_checkpoint(&paths[0])? {
        AnyCheckpoint::F32(ck) => ck.config,
        AnyCheckpoint::F64(ck) => ck.config,
    };
    cfg.apply_env();
    let data = TaskData::prepare(&cfg)?;
    let section = match split {
        Split::Val => Section::Val,
        Split::Test => Section::Test,
    };
    let episodes = data.eval_set(&cfg, section)?;
    let r = match cfg.run.precision {
        maml_core::harness::Precision::F32 => test_with_ensemble::<f32>(paths, &episodes, None)?,
        maml_core::harness::Precision::F64 => test_with_ensemble::<f64>(paths, &episodes, None)?,
    };
    println!(
        "{} model(s), {} episodes: accuracy {:.4} +- {:.4} (std error), loss {:.4}",
        paths.len(),
        episodes.len(),
        r.accuracy,
        r.std_error,
        r.loss
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Error> {
    match load_any_checkpoint(path)? {
        AnyCheckpoint::F32(ck) => describe(&ck),
        AnyCheckpoint::F64(ck) => describe(&ck),
    }
}

fn describe<T: Element>(ck: &Checkpoint<T>) -> Result<(), Error> {
    let cfg = &ck.config;
    println!(
        "config     {} (digest {})",
        cfg.name,
        &hex(&ck.config_digest)[..16]
    );
    println!("precision  {}", T::NAME);
    println!("seed       {}", ck.seed);
    println!(
        "progress   {} epochs, {} iterations, {} optimizer steps",
        ck.epoch, ck.iteration, ck.state.adam.step
    );
    let learner = build_learner(cfg)?;
    let steps = cfg.meta.inner_steps;
    if cfg.meta.toggles.lslr {
        println!("\ninner learning rates (layer x step)");
        print!("{:<10}", "layer");
        for s in 1..=steps {
            print!("{:>11}", format!("step{s}"));
        }
        println!();
        for group in learner.network().layer_groups() {
            print!("{group:<10}");
            for s in 1..=steps {
                let name = format!("lr/{group}/step{s}");
                match ck.state.params.get(&name) {
                    Some(t) => print!("{:>11.5}", t.item()),
                    None => print!("{:>11}", "-"),
                }
            }
            println!();
        }
    } else {
        println!("\ninner learning rate {} (fixed)", cfg.meta.inner_lr);
    }
    let epoch = ck.iteration / cfg.run.iterations_per_epoch;
    let v = learner.loss_weights(epoch, ck.iteration);
    println!(
        "\nloss weights at epoch {epoch} (steps {}..={})",
        v.first_step,
        v.last_step()
    );
    println!(
        "  {}",
        v.weights
            .iter()
            .map(|w| format!("{w:.4}"))
            .collect::<Vec<_>>()
            .join("  ")
    );
    println!(
        "derivative order {}, outer lr {:.3e}",
        learner.order(epoch).as_str(),
        learner.outer_lr(ck.iteration)
    );
    if !ck.history.is_empty() {
        println!("\nvalidation history");
        for h in &ck.history {
            println!(
                "  epoch {:>4}  acc {:.4} +- {:.4}  loss {:.4}",
                h.epoch, h.accuracy, h.std_error, h.loss
            );
        }
    }
    Ok(())
}
