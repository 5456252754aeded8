use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use latentcl::data::{export_dataset, generate_dataset, import_dataset, ClassRange};
use latentcl::metrics::{evaluate, CostLedger};
use latentcl::strategy::{finalize_task, StrategyKind};
use latentcl::train::{
    derive_seed, initial_progress, ledger_for, load_checkpoint, resume_experiment, run_experiment, run_suite,
    ExperimentConfig, Hyperparams, PreparedData, EVAL_BATCH,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod report;

#[derive(Parser)]
#[command(name = "latentcl", version, about = "Class-incremental detection experiments on a synthetic shapes dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to PPM images plus an annotation manifest.
    GenData {
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory; overrides the config's `output`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a per-task checkpoint of an earlier run.
        #[arg(long, conflicts_with = "strategies")]
        resume: Option<PathBuf>,
        /// Comma-separated strategies (or `all`) sharing one task-0 model;
        /// each writes to its own subdirectory.
        #[arg(long)]
        strategies: Option<String>,
        /// Full-scale schedule: lr 1e-3, 100 epochs, 500 warmup steps.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Evaluate a checkpoint on an exported dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Cost accounting of a config's continual update, without training.
    Ledger {
        #[arg(long)]
        config: PathBuf,
        /// Repeat for every freeze boundary the detector offers.
        #[arg(long)]
        sweep_freeze: bool,
    },
    /// Merge run directories into a comparison table and plot series.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the merged CSV, the table and the plot series.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn gen_data(images: usize, classes: usize, seed: u64, out: &Path) -> Result<()> {
    let d = generate_dataset(images, classes, seed)?;
    export_dataset(&d, out)?;
    let objects: usize = d.scenes.iter().map(|s| s.objects.len()).sum();
    println!("wrote {images} images ({objects} objects, {classes} classes, seed {seed}) to {}", out.display());
    Ok(())
}

fn parse_strategies(list: &str) -> Result<Vec<StrategyKind>> {
    if list == "all" {
        return Ok(StrategyKind::ALL.to_vec());
    }
    list.split(',').map(|s| s.trim().parse::<StrategyKind>().map_err(Into::into)).collect()
}

fn run(
    config: &Path,
    output: Option<PathBuf>,
    resume: Option<PathBuf>,
    strategies: Option<String>,
    paper_scale: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if output.is_some() {
        cfg.experiment.output = output;
    }
    if paper_scale {
        cfg.train = Hyperparams { batch_size: cfg.train.batch_size, ..Hyperparams::paper_scale() };
    }
    if let Some(list) = strategies {
        let kinds = parse_strategies(&list)?;
        for run in run_suite(&cfg, &kinds)? {
            println!("# {}", run.config.experiment.strategy);
            print!("{}", run.csv());
        }
        return Ok(());
    }
    let run = match resume {
        Some(ckpt) => resume_experiment(&cfg, &ckpt)?,
        None => run_experiment(&cfg)?,
    };
    print!("{}", run.csv());
    if let Some(dir) = &cfg.experiment.output {
        eprintln!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn fmt_map(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn eval(checkpoint: &Path, data: &Path, json: bool) -> Result<()> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = import_dataset(data).with_context(|| format!("importing {}", data.display()))?;
    let (old, new) = match &ck.state {
        Some(s) => (s.old_range, s.new_range),
        None => (ClassRange::empty_at(1), ClassRange::up_to(ck.model.num_classes())),
    };
    let report = evaluate(&ck.model, &dataset, old, new, EVAL_BATCH)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("{}", ck.model);
    println!("evaluated {} images; old classes {old}, new classes {new}", dataset.len());
    for (class, ap) in &report.per_class_ap {
        println!("  class {class}: AP {:.1}", 100.0 * ap);
    }
    println!("old {}  new {}  all {}", fmt_map(report.old_map), fmt_map(report.new_map), fmt_map(report.all_map));
    Ok(())
}

/// Ledger of the first continual update (task 1), or of task 0 when the
/// scenario has a single task. Only the model surgery runs, no training.
fn update_ledger(cfg: &ExperimentConfig, data: &PreparedData) -> Result<CostLedger> {
    let p = initial_progress(cfg)?;
    let counts = &cfg.experiment.scenario.counts;
    if counts.len() < 2 {
        return Ok(ledger_for(&p.model, &p.state));
    }
    let previous = data.task_data(cfg.experiment.strategy, 0)?;
    let seed = cfg.experiment.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[20, 1]));
    let (model, state) = finalize_task(&p.state, &p.model, &previous, counts[1], derive_seed(seed, &[30, 1]), &mut rng)?;
    Ok(ledger_for(&model, &state))
}

const LEDGER_HEADER: &str =
    "freeze\tstrategy\ttotal_params\ttrainable_params\toverhead_params\tfwd_macs\tbwd_macs\tfwd_flops\tbuffer_bytes";

fn ledger_line(freeze: &str, l: &CostLedger) -> String {
    format!(
        "{freeze}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        l.strategy,
        l.total_params,
        l.trainable_params,
        l.cl_overhead_params,
        l.forward_macs_update,
        l.backward_macs_update,
        l.forward_flops_update(),
        l.buffer_bytes
    )
}

fn ledger(config: &Path, sweep: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let data = PreparedData::new(&cfg)?;
    let freezes = if sweep { cfg.detector_spec().boundary_names() } else { vec![cfg.experiment.freeze.clone()] };
    println!("{LEDGER_HEADER}");
    for freeze in freezes {
        let mut c = cfg.clone();
        c.experiment.freeze = freeze.clone();
        println!("{}", ledger_line(&freeze, &update_ledger(&c, &data)?));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { images, classes, seed, out } => gen_data(images, classes, seed, &out),
        Command::Run { config, output, resume, strategies, paper_scale } => {
            run(&config, output, resume, strategies, paper_scale)
        }
        Command::Eval { checkpoint, data, json } => eval(&checkpoint, &data, json),
        Command::Ledger { config, sweep_freeze } => ledger(&config, sweep_freeze),
        Command::Report { runs, out } => report::report(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
