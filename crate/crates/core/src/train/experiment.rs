use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::trainer::{derive_seed, train_task, TaskCurve};
use crate::data::{generate_dataset, split_tasks, Dataset, TaskDataset, TaskSequence};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::metrics::{buffer_memory, evaluate, CostLedger, EvalReport};
use crate::strategy::{finalize_task, StrategyKind, StrategyState};

/// Salt separating the evaluation set's seed from the training set's;
/// per-image sub-seeds are `seed ^ index`, so nearby seeds would share images.
pub const EVAL_SEED_SALT: u64 = 0x5EED_0000_0000_0000;
pub const EVAL_BATCH: usize = 50;

pub const CSV_HEADER: &str =
    "task,strategy,old_map,new_map,all_map,trainable_params,total_params,overhead_params,fwd_macs,bwd_macs,buffer_bytes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub task: usize,
    pub strategy: StrategyKind,
    pub old_map: Option<f64>,
    pub new_map: Option<f64>,
    pub all_map: Option<f64>,
    pub trainable_params: u64,
    pub total_params: u64,
    pub overhead_params: u64,
    pub fwd_macs: u64,
    pub bwd_macs: u64,
    pub buffer_bytes: u64,
}

fn fmt_map(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CsvRow {
    pub fn new(task: usize, report: &EvalReport, ledger: &CostLedger) -> Self {
        CsvRow {
            task,
            strategy: ledger.strategy,
            old_map: report.old_map,
            new_map: report.new_map,
            all_map: report.all_map,
            trainable_params: ledger.trainable_params,
            total_params: ledger.total_params,
            overhead_params: ledger.cl_overhead_params,
            fwd_macs: ledger.forward_macs_update,
            bwd_macs: ledger.backward_macs_update,
            buffer_bytes: ledger.buffer_bytes,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.strategy,
            fmt_map(self.old_map),
            fmt_map(self.new_map),
            fmt_map(self.all_map),
            self.trainable_params,
            self.total_params,
            self.overhead_params,
            self.fwd_macs,
            self.bwd_macs,
            self.buffer_bytes
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid(format!("malformed results row '{line}'"));
        if f.len() != 11 {
            return Err(bad());
        }
        let map = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| bad()) };
        Ok(CsvRow {
            task: f[0].parse().map_err(|_| bad())?,
            strategy: f[1].parse()?,
            old_map: map(f[2])?,
            new_map: map(f[3])?,
            all_map: map(f[4])?,
            trainable_params: int(f[5])?,
            total_params: int(f[6])?,
            overhead_params: int(f[7])?,
            fwd_macs: int(f[8])?,
            bwd_macs: int(f[9])?,
            buffer_bytes: int(f[10])?,
        })
    }
}

pub fn csv_string(rows: &[CsvRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::invalid("results file does not start with the expected CSV header")),
    }
    lines.map(CsvRow::parse_csv_line).collect()
}

/// Per-task results of a run.
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub report: EvalReport,
    pub ledger: CostLedger,
    pub curve: TaskCurve,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub rows: Vec<CsvRow>,
    pub tasks: Vec<TaskResult>,
    pub model: Detector,
    pub state: StrategyState,
}

impl RunArtifacts {
    pub fn csv(&self) -> String {
        csv_string(&self.rows)
    }
}

/// Generated training and evaluation data for a config.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Arc<Dataset>,
    pub eval: Dataset,
    pub sequence: TaskSequence,
}

impl PreparedData {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let train = Arc::new(generate_dataset(d.images, d.classes, d.seed)?);
        let eval = generate_dataset(d.eval_images, d.classes, d.seed ^ EVAL_SEED_SALT)?;
        let sequence = split_tasks(Arc::clone(&train), &cfg.experiment.scenario)?;
        Ok(PreparedData { train, eval, sequence })
    }

    /// Training set of task `n` under `kind`: joint training sees every
    /// class so far, the others only the task's own classes.
    pub fn task_data(&self, kind: StrategyKind, n: usize) -> Result<TaskDataset> {
        if kind == StrategyKind::Joint {
            self.sequence.cumulative(n)
        } else {
            Ok(self.sequence.tasks[n].clone())
        }
    }
}

/// Ledger of the update performed at the state's task. Task 0 has no
/// teacher and no buffer, so every strategy costs a plain update there.
pub fn ledger_for(model: &Detector, state: &StrategyState) -> CostLedger {
    let bytes = state.buffer.as_ref().map_or(0, buffer_memory);
    if state.task == 0 {
        let mut l = CostLedger::compute(model, StrategyKind::Finetune, bytes);
        l.strategy = state.kind();
        l
    } else {
        CostLedger::compute(model, state.kind(), bytes)
    }
}

/// Carry-over between tasks.
#[derive(Clone, Debug)]
pub struct Progress {
    pub model: Detector,
    pub state: StrategyState,
    pub rows: Vec<CsvRow>,
    pub tasks: Vec<TaskResult>,
}

fn seed_of(cfg: &ExperimentConfig) -> u64 {
    cfg.experiment.seed
}

/// Model and state before task 0.
pub fn initial_progress(cfg: &ExperimentConfig) -> Result<Progress> {
    cfg.validate()?;
    let model = Detector::build(cfg.detector_spec(), derive_seed(seed_of(cfg), &[10]))?;
    let state = StrategyState::new(cfg.strategy_config()?, cfg.experiment.scenario.counts[0])?;
    Ok(Progress { model, state, rows: Vec::new(), tasks: Vec::new() })
}

fn check_warmup(cfg: &ExperimentConfig, task: &TaskDataset) -> Result<()> {
    let hp = &cfg.train;
    let steps = (hp.epochs * task.len().div_ceil(hp.batch_size)) as u64;
    if hp.epochs > 0 && hp.warmup_steps >= steps {
        return Err(Error::Config {
            line: 0,
            message: format!(
                "'warmup_steps': {} is not below the {steps} steps of task {}",
                hp.warmup_steps, task.index
            ),
        });
    }
    Ok(())
}

/// Trains and evaluates task `n`; for `n > 0` the previous task is
/// finalized first.
pub fn run_task(cfg: &ExperimentConfig, data: &PreparedData, progress: Progress, n: usize) -> Result<Progress> {
    let kind = cfg.experiment.strategy;
    let seed = seed_of(cfg);
    let Progress { mut model, mut state, mut rows, mut tasks } = progress;
    if state.task != n.saturating_sub(1) {
        return Err(Error::invalid(format!("state is at task {} but task {n} was requested", state.task)));
    }
    if n > 0 {
        let previous = data.task_data(kind, n - 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[20, n as u64]));
        let k = data.sequence.scenario.counts[n];
        (model, state) = finalize_task(&state, &model, &previous, k, derive_seed(seed, &[30, n as u64]), &mut rng)?;
    }
    let task = data.task_data(kind, n)?;
    if task.is_empty() {
        return Err(Error::invalid(format!("task {n} has no images")));
    }
    check_warmup(cfg, &task)?;
    let (trained, curve) = train_task(&model, &state, &task, &cfg.train, derive_seed(seed, &[40, n as u64]))?;
    let report = evaluate(&trained, &data.eval, state.old_range, state.new_range, EVAL_BATCH)?;
    let ledger = ledger_for(&trained, &state);
    rows.push(CsvRow::new(n, &report, &ledger));
    tasks.push(TaskResult { report, ledger, curve });
    Ok(Progress { model: trained, state, rows, tasks })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    task: usize,
    num_classes: usize,
    strategy: StrategyKind,
    config: String,
    rows: Vec<CsvRow>,
}

fn checkpoint_path(dir: &Path, n: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task{n}.ckpt"))
}

fn write_task_outputs(dir: &Path, cfg: &ExperimentConfig, p: &Progress, n: usize) -> Result<()> {
    let meta = CheckpointMeta {
        task: n,
        num_classes: p.model.num_classes(),
        strategy: cfg.experiment.strategy,
        config: cfg.to_toml(),
        rows: p.rows.clone(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    save_checkpoint(&checkpoint_path(dir, n), &p.model, Some(&p.state), meta)?;
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    let curve = &p.tasks.last().expect("task just ran").curve;
    let mut steps = String::from("step\tepoch\tlr\ttotal\tmodel\tdistill\tintermediate\n");
    for s in &curve.steps {
        let _ = writeln!(
            steps,
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            s.step, s.epoch, s.lr, s.loss.total, s.loss.model_loss, s.loss.distill_loss, s.loss.intermediate_loss
        );
    }
    let path = curves.join(format!("task{n}_steps.tsv"));
    fs::write(&path, steps).map_err(|e| Error::io(&path, e))?;
    let mut epochs = String::from("epoch\tmean_loss\n");
    for (e, l) in curve.epoch_loss.iter().enumerate() {
        let _ = writeln!(epochs, "{e}\t{l:.9e}");
    }
    let path = curves.join(format!("task{n}_epochs.tsv"));
    fs::write(&path, epochs).map_err(|e| Error::io(&path, e))
}

fn write_summary(dir: &Path, cfg: &ExperimentConfig, p: &Progress) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("results.csv");
    fs::write(&path, csv_string(&p.rows)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    #[derive(Serialize)]
    struct TaskJson<'a> {
        task: usize,
        report: &'a EvalReport,
        ledger: &'a CostLedger,
        epoch_loss: &'a [f64],
    }
    let tasks: Vec<TaskJson> = p
        .tasks
        .iter()
        .enumerate()
        .map(|(task, t)| TaskJson { task, report: &t.report, ledger: &t.ledger, epoch_loss: &t.curve.epoch_loss })
        .collect();
    let json = serde_json::to_string_pretty(&tasks).map_err(|e| Error::invalid(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn finish(cfg: &ExperimentConfig, data: &PreparedData, mut p: Progress, from: usize) -> Result<RunArtifacts> {
    let out = cfg.experiment.output.clone();
    for n in from..data.sequence.tasks.len() {
        p = run_task(cfg, data, p, n)?;
        if let Some(dir) = &out {
            write_task_outputs(dir, cfg, &p, n)?;
        }
    }
    if let Some(dir) = &out {
        write_summary(dir, cfg, &p)?;
    }
    Ok(RunArtifacts { config: cfg.clone(), rows: p.rows, tasks: p.tasks, model: p.model, state: p.state })
}

/// Runs every task of the config's scenario.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = PreparedData::new(cfg)?;
    run_experiment_with(cfg, &data)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunArtifacts> {
    finish(cfg, data, initial_progress(cfg)?, 0)
}

/// Continues a run from the checkpoint written after some task. Only the
/// tasks after it are trained; earlier CSV rows come from the checkpoint.
pub fn resume_experiment(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<RunArtifacts> {
    let ck = load_checkpoint(checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.metadata)
        .map_err(|e| Error::Checkpoint(format!("checkpoint lacks run metadata: {e}")))?;
    if meta.strategy != cfg.experiment.strategy {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by strategy {} but the config asks for {}",
            meta.strategy, cfg.experiment.strategy
        )));
    }
    let state = ck.state.ok_or_else(|| Error::Checkpoint("checkpoint has no strategy state".into()))?;
    let data = PreparedData::new(cfg)?;
    let progress = Progress { model: ck.model, state, rows: meta.rows, tasks: Vec::new() };
    finish(cfg, &data, progress, meta.task + 1)
}

/// Runs several strategies on one config, training task 0 once: before any
/// teacher or buffer exists every strategy performs the same updates, so
/// the shared result equals each strategy's own task-0 run bit for bit.
pub fn run_suite(cfg: &ExperimentConfig, kinds: &[StrategyKind]) -> Result<Vec<RunArtifacts>> {
    let data = PreparedData::new(cfg)?;
    let mut base = cfg.clone();
    base.experiment.output = None;
    base.experiment.strategy = StrategyKind::Finetune;
    let shared = run_task(&base, &data, initial_progress(&base)?, 0)?;
    let mut runs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut c = cfg.clone();
        c.experiment.strategy = kind;
        if let Some(dir) = &cfg.experiment.output {
            c.experiment.output = Some(dir.join(kind.name()));
        }
        let mut p = shared.clone();
        p.state.config = c.strategy_config()?;
        let last = p.tasks.last_mut().expect("task 0 ran");
        last.ledger = ledger_for(&p.model, &p.state);
        p.rows = vec![CsvRow::new(0, &last.report, &last.ledger)];
        if let Some(dir) = &c.experiment.output {
            write_task_outputs(dir, &c, &p, 0)?;
        }
        runs.push(finish(&c, &data, p, 1)?);
    }
    Ok(runs)
}
