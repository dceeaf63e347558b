mod bench;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use tdunet::config::RunConfig;
use tdunet::data::{generate_synthetic, Manifest, Split};
use tdunet::gradcheck::{run_gradcheck, GradcheckOptions};
use tdunet::pipeline::{evaluate, predict, render_all, train, write_report, MaskSource};

#[derive(Parser)]
#[command(name = "tdunet", version, about = "Transform-domain UNet wildfire-spread segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides the configured location.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and write checkpoints and logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Write probability maps and binary masks for a split.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Defaults to `best.ckpt` in the configured output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Defaults to the configured `eval_split`.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Score a checkpoint or a prediction directory against the targets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory written by `predict`.
        #[arg(long, value_name = "DIR")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Also write a confusion overlay per sample.
        #[arg(long)]
        render: bool,
    },
    /// Compare every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, value_name = "INT", default_value_t = 0)]
        seed: u64,
        /// Perturb one component's analytic gradient (negative control).
        #[arg(long, value_name = "COMPONENT", hide = true)]
        corrupt: Option<String>,
    },
    /// Time transforms and network passes; print parameter counts.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

/// A failure carrying its stable error code.
struct Failure {
    code: &'static str,
    message: String,
}

impl From<tdunet::Error> for Failure {
    fn from(e: tdunet::Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn default_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.out_dir.join("best.ckpt"))
}

fn cmd_gen_data(common: Common) -> CliResult {
    let cfg = load_config(&common)?;
    let dir = match common.out {
        Some(d) => d,
        None => cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let m = generate_synthetic(&cfg.synth(), &dir)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        m.samples.len(),
        m.split_indices(Split::Train).len(),
        m.split_indices(Split::Val).len(),
        m.split_indices(Split::Test).len(),
        dir.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_train(common: Common) -> CliResult {
    let mut cfg = load_config(&common)?;
    if let Some(out) = common.out {
        cfg.out_dir = out;
    }
    let outcome = train(&cfg)?;
    for r in &outcome.log {
        match r.val_f1 {
            Some(f1) => println!("epoch {:>4}  train loss {:.5}  val F1 {:.4}", r.epoch, r.train_loss, f1),
            None => println!("epoch {:>4}  train loss {:.5}", r.epoch, r.train_loss),
        }
    }
    println!(
        "{} steps, best epoch {}, checkpoints in {}",
        outcome.steps,
        outcome.best_epoch,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_predict(common: Common, checkpoint: Option<PathBuf>, split: Option<Split>) -> CliResult {
    let cfg = load_config(&common)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let split = split.unwrap_or(cfg.eval_split);
    let out = common.out.unwrap_or_else(|| cfg.out_dir.join("predictions"));
    let index = predict(&default_checkpoint(&cfg, checkpoint), &manifest, split, &out, cfg.batch_size)?;
    println!("wrote {} {split} predictions to {}", index.samples.len(), out.display());
    Ok(())
}

fn cmd_eval(
    common: Common,
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    split: Option<Split>,
    render: bool,
) -> CliResult {
    let cfg = load_config(&common)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let split = split.unwrap_or(cfg.eval_split);
    let ckpt = default_checkpoint(&cfg, checkpoint);
    let source = match &predictions {
        Some(dir) => MaskSource::Predictions(dir),
        None => MaskSource::Checkpoint(&ckpt),
    };
    let ev = evaluate(source, &manifest, split, cfg.batch_size)?;
    let out = common.out.unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure {
        code: "E_IO",
        message: format!("{}: {e}", out.display()),
    })?;
    write_report(&ev.report, &out.join(format!("metrics_{split}.json")))?;
    if render {
        let images = render_all(&ev, &manifest, &out)?;
        eprintln!("rendered {} overlays to {}", images.len(), out.join("render").display());
    }
    println!("{}", ev.report.to_json());
    Ok(())
}

fn cmd_gradcheck(seed: u64, corrupt: Option<String>) -> CliResult {
    let report = run_gradcheck(&GradcheckOptions { seed, corrupt })?;
    print!("{}", report.to_text());
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    Err(Failure {
        code: "E_GRADCHECK",
        message: format!(
            "{} component(s) exceed tolerance: {}",
            failures.len(),
            failures.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
        ),
    })
}

fn cmd_bench(common: Common) -> CliResult {
    let cfg = load_config(&common)?;
    let text = bench::report(&cfg)?;
    print!("{text}");
    if let Some(out) = common.out {
        let path = out.join("bench.txt");
        std::fs::create_dir_all(&out)
            .and_then(|_| std::fs::write(&path, &text))
            .map_err(|e| Failure {
                code: "E_IO",
                message: format!("{}: {e}", path.display()),
            })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid usage");
            eprintln!("error[E_USAGE] {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Train { common } => cmd_train(common),
        Command::Predict {
            common,
            checkpoint,
            split,
        } => cmd_predict(common, checkpoint, split),
        Command::Eval {
            common,
            checkpoint,
            predictions,
            split,
            render,
        } => cmd_eval(common, checkpoint, predictions, split, render),
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(seed, corrupt),
        Command::Bench { common } => cmd_bench(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}] {}", f.code, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
