use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clseg_cli::pipeline::{self, FoldModels};
use clseg_cli::{CliResult, ModelVariant, RunConfig};
use clseg_core::unet::DropChannel;

#[derive(Parser)]
#[command(name = "clseg", version, about = "Cortical lesion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides training.seed and phantom.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides model_variant and rewires the loss and sampler to match.
    #[arg(long, value_enum)]
    variant: Option<ModelVariant>,
    /// Overrides training.iterations.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Overrides cohort.subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train on every subject of a cohort.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides paths.cohort_dir.
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict one subject with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path, without `.json`/`.bin`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subject directory.
        #[arg(long)]
        subject: PathBuf,
        #[arg(long, value_parser = parse_drop)]
        drop_channel: Option<DropChannel>,
    },
    /// K-fold cross-validation with a pooled report.
    Xval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Overrides cohort.folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, value_parser = parse_drop)]
        drop_channel: Option<DropChannel>,
        /// Score the fold models of an earlier run instead of training.
        #[arg(long)]
        reuse: Option<PathBuf>,
    },
    /// Compare cross-validation evaluations of several models.
    Report {
        #[command(flatten)]
        common: Common,
        /// `NAME=PATH` or `PATH`, each an xval directory or evaluation.json.
        #[arg(required = true)]
        inputs: Vec<String>,
    },
}

fn parse_drop(s: &str) -> Result<DropChannel, String> {
    s.parse().map_err(|e: clseg_core::Error| e.to_string())
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.training.seed = s;
        cfg.phantom.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(v) = c.variant {
        cfg.set_variant(v);
    }
    if let Some(i) = c.iterations {
        cfg.training.iterations = i;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom { common, subjects } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = subjects {
                cfg.cohort.subjects = n;
            }
            let out = common.out.clone().unwrap_or_else(|| cfg.paths.cohort_dir.clone());
            let m = pipeline::cmd_phantom(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
        }
        Command::Train { common, cohort, resume } => {
            let cfg = load_config(&common)?;
            let cohort = cohort.unwrap_or_else(|| cfg.paths.cohort_dir.clone());
            let o = pipeline::cmd_train(&cfg, &cohort, &cfg.paths.out_dir, resume)?;
            if let Some(l) = o.last {
                println!(
                    "iteration {}: cl {:.6} tissue {:.6} total {:.6}",
                    o.checkpoint.iteration, l.cl, l.tissue, l.total
                );
            }
        }
        Command::Infer {
            common,
            checkpoint,
            subject,
            drop_channel,
        } => {
            let mut cfg = load_config(&common)?;
            if drop_channel.is_some() {
                cfg.inference.drop_channel = drop_channel;
            }
            pipeline::cmd_infer(&cfg, &checkpoint, &subject, &cfg.paths.out_dir, &cfg.inference)?;
        }
        Command::Xval {
            common,
            cohort,
            folds,
            drop_channel,
            reuse,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = folds {
                cfg.cohort.folds = k;
            }
            if drop_channel.is_some() {
                cfg.inference.drop_channel = drop_channel;
            }
            cfg.validate()?;
            let cohort = cohort.unwrap_or_else(|| cfg.paths.cohort_dir.clone());
            let models = match &reuse {
                Some(d) => FoldModels::Reuse(d),
                None => FoldModels::Train,
            };
            let o = pipeline::run_xval(&cfg, &cohort, &cfg.paths.out_dir, models)?;
            print_summary(&o.report);
        }
        Command::Report { common, inputs } => {
            let cfg = load_config(&common)?;
            let mut models = Vec::with_capacity(inputs.len());
            for input in &inputs {
                let (name, path) = match input.split_once('=') {
                    Some((n, p)) => (Some(n.to_string()), p),
                    None => (None, input.as_str()),
                };
                let mut m = pipeline::read_evaluation(Path::new(path))?;
                if let Some(n) = name {
                    m.name = n;
                }
                models.push(m);
            }
            let r = pipeline::cmd_report(&cfg, models, &cfg.paths.out_dir)?;
            print_summary(&r);
        }
    }
    Ok(())
}

fn print_summary(r: &clseg_core::eval::EvalReport) {
    for m in &r.models {
        let p = &m.pooled_rates;
        println!(
            "{}: LTPR {:.3} LFPR {:.3} accuracy {:.3} AVD {}",
            m.name,
            p.ltpr,
            p.lfpr,
            p.accuracy,
            m.mean_avd.map_or("n/a".to_string(), |a| format!("{a:.3}"))
        );
    }
    for c in &r.comparisons {
        println!(
            "{} vs {} ({}): {}",
            c.model_a,
            c.model_b,
            c.metric,
            match c.p_two_sided {
                Some(p) if c.significant => format!("p = {p:.4}"),
                Some(p) => format!("N.S. (p = {p:.4})"),
                None => format!("N.S.: {}", c.note.as_deref().unwrap_or("")),
            }
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

