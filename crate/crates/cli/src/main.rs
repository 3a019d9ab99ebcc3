use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsreg::config::{parse_strategy_token, RunConfig};
use gsreg::experiment::{self, Trainer};
use gsreg::io::Checkpoint;
use gsreg::synth::Split;
use gsreg::Error;

const FILES_HELP: &str = "\
Output files (every CSV starts with a header row):
  steps.csv    step, epoch, l_sim, l_reg, conflicted, groups, sim_norm, reg_norm, applied_norm
               conflicted = parameter groups whose similarity and regularisation
               gradients had a negative inner product at that step
  eval.csv     case, dice_lv, dice_myo, dice_rv, dice_mean, hd95_lv, hd95_myo,
               hd95_rv, hd95_mean, mse, njd_percent; last row is the mean
  compare.csv  method, dice_lv, dice_myo, dice_rv, dice_mean, hd95_mean, mse,
               njd_percent, params, speed_ms
  timing.csv   method, speed_ms, speed_std_ms, samples
Dice in [0, 1]; HD95 in pixels (empty when a structure is missing); mse on
intensities in [0, 1]; njd_percent = % of pixels with negative Jacobian
determinant; speed_ms = mean inference time per pair.

Exit codes: 0 ok, 2 config error, 3 I/O or file format error, 4 numeric
failure, 5 selftest failure, 6 dimension mismatch.

Environment: GSREG_THREADS caps how many compare runs train concurrently.";

#[derive(Parser)]
#[command(name = "gsreg", version, about = "2-D deformable registration with layer-wise gradient surgery", after_help = FILES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: <out_dir>/<command>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overrides `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Strategy, e.g. layerwise, global, agr, weighted:0.01, similarity-only
    #[arg(long)]
    strategy: Option<String>,
    /// desk or paper, overrides `preset`
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to data_dir
    Gen(RunArgs),
    /// Train one model, writing steps.csv and checkpoint.gsck
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint up to the configured epochs
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Register one pair, writing warped.pgm and field.gsmf
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Moving image (.pgm or single-channel GSMF)
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split, writing eval.csv
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every strategy in `compare` on shared data, writing compare.csv
    Compare(RunArgs),
    /// Gradient checks and projection properties
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::UndefinedDistance(_) => 4,
        Error::Shape { .. } => 6,
    }
}

fn load_config(args: &RunArgs) -> gsreg::Result<RunConfig> {
    let mut entries = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::entries(&text)?
        }
        None => Default::default(),
    };
    if let Some(p) = &args.preset {
        entries.insert("preset".into(), p.clone());
    }
    let mut cfg = RunConfig::from_entries(&entries)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = parse_strategy_token(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, args: &RunArgs, command: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| experiment::default_out(cfg, command))
}

fn epoch_progress(label: &str, epoch: u64) {
    eprintln!("{label}: epoch {} done", epoch + 1);
}

fn train(run: &RunArgs, resume: Option<&Path>) -> gsreg::Result<()> {
    let cfg = load_config(run)?;
    let out = out_dir(&cfg, run, "train");
    let label = cfg.strategy.label();
    let Some(ck) = resume else {
        let t = experiment::train(&cfg, &out, |e, _| epoch_progress(&label, e))?;
        eprintln!("{} steps, checkpoint in {}", t.step, out.display());
        return Ok(());
    };
    let cases = experiment::load_split(&cfg.data_dir, Split::Train)?;
    let mut t = Trainer::from_checkpoint(&cfg, Checkpoint::load(ck)?);
    let fresh = t.run(&cases, |e, _| epoch_progress(&label, e))?;
    let steps = out.join(experiment::STEPS_FILE);
    let mut log = std::fs::read_to_string(&steps).unwrap_or_default();
    if log.is_empty() {
        log = fresh;
    } else {
        log.extend(fresh.lines().skip(1).map(|l| format!("{l}\n")));
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    std::fs::write(&steps, log).map_err(|e| Error::Io { path: steps, source: e })?;
    t.checkpoint().save(&out.join(experiment::CHECKPOINT_FILE))?;
    eprintln!("resumed to step {}, checkpoint in {}", t.step, out.display());
    Ok(())
}

fn run(cli: Cli) -> gsreg::Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = load_config(&a)?;
            let entries = experiment::generate(&cfg)?;
            eprintln!("{} cases in {}", entries.len(), cfg.data_dir.display());
        }
        Command::Train { run, resume } => train(&run, resume.as_deref())?,
        Command::Register {
            checkpoint,
            moving,
            fixed,
            out,
        } => {
            experiment::register(&checkpoint, &moving, &fixed, &out)?;
        }
        Command::Eval { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let out = out_dir(&cfg, &run, "eval");
            let r = experiment::eval(&cfg, &checkpoint, &out)?;
            println!("dice_mean {:.4} mse {:.6} njd_percent {:.4}", r.dice_mean(), r.mse, r.njd_percent);
        }
        Command::Compare(a) => {
            let cfg = load_config(&a)?;
            let out = out_dir(&cfg, &a, "compare");
            let cmp = experiment::compare(&cfg, &out, epoch_progress)?;
            print!("{}", cmp.csv());
        }
        Command::Selftest { seed } => {
            let lines = experiment::selftest(seed)?;
            let mut ok = true;
            for l in &lines {
                println!("{} {} ({})", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                ok &= l.passed;
            }
            if !ok {
                return Ok(ExitCode::from(5));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
