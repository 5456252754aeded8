//! Continual-learning strategies: what each one stores between tasks, how it
//! builds training batches and which loss it optimizes.

mod buffer;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{BufferEntry, BufferKind, Payload, ReplayBuffer, LATENT_ELEMENT_BYTES};
pub use loss::{
    assign_targets, detection_loss, intermediate_distill_loss, lwf_distill_loss, masked_distill_loss, CellTargets,
    FOCAL_ALPHA, FOCAL_GAMMA,
};

use crate::data::{images_to_tensor, Annotation, Batch, ClassRange, TaskDataset};
use crate::detector::{Architecture, Boundary, Detector, HeadOutputs, Latent, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Toy buffer size: about 5% of a 1000-image training set.
pub const DEFAULT_BUFFER_CAPACITY: usize = 50;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Finetune,
    Joint,
    Replay,
    LatentReplay,
    Lwf,
    Sid,
    LatentDistill,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Finetune,
        StrategyKind::Joint,
        StrategyKind::Replay,
        StrategyKind::LatentReplay,
        StrategyKind::Lwf,
        StrategyKind::Sid,
        StrategyKind::LatentDistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::Joint => "joint",
            StrategyKind::Replay => "replay",
            StrategyKind::LatentReplay => "latent_replay",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Sid => "sid",
            StrategyKind::LatentDistill => "latent_distill",
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, StrategyKind::Lwf | StrategyKind::Sid | StrategyKind::LatentDistill)
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, StrategyKind::Replay | StrategyKind::LatentReplay)
    }

    /// Kinds that freeze the lower layers after task 0 and work on latents.
    pub fn is_latent(self) -> bool {
        matches!(self, StrategyKind::LatentReplay | StrategyKind::LatentDistill)
    }

    /// Kinds whose model loss covers only the current task's classes; the
    /// others treat every seen class as supervised.
    pub fn masks_model_loss(self) -> bool {
        self.uses_teacher()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown strategy '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Frozen copy of the previous model. For latent distillation only the
/// layers above the split are kept; the lower layers are shared with the
/// student.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub arch: Architecture,
    pub params: ParamStore,
    pub split: Boundary,
    pub upper_only: bool,
}

impl Teacher {
    pub fn snapshot(model: &Detector, upper_only: bool) -> Self {
        let params = if upper_only {
            model.upper_params(model.split_point())
        } else {
            let mut p = ParamStore::default();
            for (n, t) in model.params().iter() {
                p.insert(n.to_string(), t.detach().with_requires_grad(false));
            }
            p
        };
        let mut frozen = ParamStore::default();
        for (n, t) in params.iter() {
            frozen.insert(n.to_string(), t.clone().with_requires_grad(false));
        }
        Teacher { arch: model.arch().clone(), params: frozen, split: model.split_point(), upper_only }
    }

    pub fn num_classes(&self) -> usize {
        self.arch.spec().num_classes
    }

    pub fn stored_params(&self) -> u64 {
        self.params.numel()
    }

    pub fn forward(&self, images: &Tensor) -> Result<HeadOutputs> {
        if self.upper_only {
            return Err(Error::invalid("an upper-layer teacher needs a latent, not images"));
        }
        let tape = Tape::new();
        let z = self.arch.run_lower(&tape, &self.params, images, Boundary(0))?;
        self.arch.run_upper(&tape, &self.params, &z)
    }

    pub fn upper_forward(&self, z: &Latent) -> Result<HeadOutputs> {
        if z.split != self.split {
            return Err(Error::invalid("latent split differs from the teacher's split"));
        }
        let z = Latent { features: z.features.detach(), split: z.split };
        self.arch.run_upper(&Tape::new(), &self.params, &z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub alpha: f64,
    pub buffer_capacity: usize,
    /// Freeze boundary and latent split applied by latent kinds from task 1.
    pub freeze: Boundary,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, freeze: Boundary) -> Self {
        StrategyConfig { kind, alpha: DEFAULT_ALPHA, buffer_capacity: DEFAULT_BUFFER_CAPACITY, freeze }
    }
}

#[derive(Clone, Debug)]
pub struct StrategyState {
    pub config: StrategyConfig,
    pub task: usize,
    pub teacher: Option<Teacher>,
    pub buffer: Option<ReplayBuffer>,
    pub old_range: ClassRange,
    pub new_range: ClassRange,
}

impl StrategyState {
    /// State before task 0, which introduces `first_k` classes.
    pub fn new(config: StrategyConfig, first_k: usize) -> Result<Self> {
        if first_k == 0 {
            return Err(Error::invalid("the first task needs at least one class"));
        }
        if !(config.alpha.is_finite() && config.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and non-negative, got {}", config.alpha)));
        }
        if config.kind.uses_buffer() && config.buffer_capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be at least 1"));
        }
        Ok(StrategyState {
            config,
            task: 0,
            teacher: None,
            buffer: None,
            old_range: ClassRange::empty_at(1),
            new_range: ClassRange::new(1, first_k),
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    pub fn seen(&self) -> ClassRange {
        ClassRange::up_to(self.new_range.end() - 1)
    }

    /// Classes the model loss supervises on current-task images.
    pub fn supervised_range(&self) -> ClassRange {
        if self.kind().masks_model_loss() {
            self.new_range
        } else {
            self.seen()
        }
    }

    fn check_consistent(&self) -> Result<()> {
        if self.task > 0 && self.kind().uses_teacher() && self.teacher.is_none() {
            return Err(Error::invalid(format!("{} needs a teacher after task 0", self.kind())));
        }
        if self.task > 0 && self.kind().uses_buffer() && self.buffer.as_ref().is_none_or(|b| b.is_empty()) {
            return Err(Error::invalid(format!("{} needs a non-empty buffer after task 0", self.kind())));
        }
        Ok(())
    }
}

/// One optimization batch. Replayed latents skip the lower layers and are
/// appended after the image samples.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub latents: Option<Tensor>,
    /// Image annotations first, then latent ones.
    pub annotations: Vec<Vec<Annotation>>,
    pub ranges: Vec<ClassRange>,
    pub from_buffer: Vec<bool>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn buffer_count(&self) -> usize {
        self.from_buffer.iter().filter(|&&b| b).count()
    }
}

/// Relabels a task batch with the strategy's supervised range and, for
/// replay kinds after task 0, appends as many buffer samples as the batch
/// holds.
pub fn compose_batch(state: &StrategyState, batch: Batch, rng: &mut impl Rng) -> Result<TrainBatch> {
    let n = batch.len();
    let supervised = state.supervised_range();
    let mut annotations = batch.annotations;
    for objs in &mut annotations {
        objs.retain(|o| supervised.contains(o.class_id));
    }
    let mut out = TrainBatch {
        images: batch.images,
        latents: None,
        annotations,
        ranges: vec![supervised; n],
        from_buffer: vec![false; n],
    };
    if !state.kind().uses_buffer() || state.task == 0 {
        return Ok(out);
    }
    let buffer = state
        .buffer
        .as_ref()
        .filter(|b| !b.is_empty())
        .ok_or_else(|| Error::invalid("replay needs a non-empty buffer after task 0"))?;
    let drawn = buffer.draw(n, rng)?;
    match buffer.kind {
        BufferKind::Raw => {
            let mut raw: Vec<&[u8]> = Vec::with_capacity(n);
            for e in &drawn {
                match &e.payload {
                    Payload::Raw(b) => raw.push(b),
                    Payload::Latent(_) => return Err(Error::invalid("latent entry in a raw buffer")),
                }
            }
            out.images = Tensor::concat_batch(&[&out.images, &images_to_tensor(&raw)?])?;
        }
        BufferKind::Latent { shape, .. } => out.latents = Some(ReplayBuffer::latent_tensor(&drawn, shape)?),
    }
    for e in drawn {
        out.annotations.push(e.annotations.clone());
        out.ranges.push(e.range);
        out.from_buffer.push(true);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub model_loss: f64,
    pub distill_loss: f64,
    pub intermediate_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub breakdown: LossBreakdown,
    /// Scalar on the step's tape.
    pub total: Tensor,
}

/// Builds the strategy's loss on `tape`. `params` are the student's
/// parameters as bound to `tape`.
pub fn strategy_loss(
    tape: &Tape,
    state: &StrategyState,
    model: &Detector,
    params: &ParamStore,
    batch: &TrainBatch,
) -> Result<StepLoss> {
    state.check_consistent()?;
    let stride = model.spec().stride();
    let kind = state.kind();
    let teacher = if state.task > 0 { state.teacher.as_ref() } else { None };

    let (student, distill, intermediate) = match (kind, teacher) {
        (StrategyKind::LatentReplay, _) | (StrategyKind::LatentDistill, Some(_)) => {
            let z = model.latent_forward_on(tape, params, &batch.images)?;
            let z = match &batch.latents {
                Some(stored) => {
                    if z.features.requires_grad() {
                        return Err(Error::invalid("latent replay needs frozen lower layers below the split"));
                    }
                    Latent { features: Tensor::concat_batch(&[&z.features, stored])?, split: z.split }
                }
                None => z,
            };
            let student = model.upper_forward_on(tape, params, &z)?;
            match teacher {
                Some(t) if kind == StrategyKind::LatentDistill => {
                    let t_out = t.upper_forward(&z)?;
                    let d = masked_distill_loss(tape, &student, &t_out, state.old_range)?;
                    let i = intermediate_distill_loss(tape, &student.trunk_features, &t_out.trunk_features)?;
                    (student, Some(d), Some(i))
                }
                _ => (student, None, None),
            }
        }
        (StrategyKind::Lwf, Some(t)) => {
            let student = model.forward_on(tape, params, &batch.images)?;
            let t_out = t.forward(&batch.images)?;
            let d = lwf_distill_loss(tape, &student, &t_out, stride)?;
            (student, Some(d), None)
        }
        (StrategyKind::Sid, Some(t)) => {
            let student = model.forward_on(tape, params, &batch.images)?;
            let t_out = t.forward(&batch.images)?;
            let d = masked_distill_loss(tape, &student, &t_out, state.old_range)?;
            let i = intermediate_distill_loss(tape, &student.trunk_features, &t_out.trunk_features)?;
            (student, Some(d), Some(i))
        }
        _ => (model.forward_on(tape, params, &batch.images)?, None, None),
    };
    if student.class_logits.shape()[0] != batch.len() {
        return Err(Error::shape("batch annotations do not match the number of samples"));
    }

    let model_loss = detection_loss(tape, &student, stride, &batch.annotations, &batch.ranges)?;
    let mut breakdown = LossBreakdown { model_loss: model_loss.item()?, ..Default::default() };
    let total = match (distill, intermediate) {
        (None, None) => model_loss,
        (d, i) => {
            let mut extra: Option<Tensor> = None;
            if let Some(d) = d {
                breakdown.distill_loss = d.item()?;
                extra = Some(d);
            }
            if let Some(i) = i {
                breakdown.intermediate_loss = i.item()?;
                extra = Some(match extra {
                    Some(e) => tape.add(&e, &i)?,
                    None => i,
                });
            }
            let extra = extra.expect("at least one distillation term");
            tape.add(&model_loss, &tape.scale(&extra, state.config.alpha))?
        }
    };
    breakdown.total = total.item()?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
    }
    Ok(StepLoss { breakdown, total })
}

/// Closes the task just trained: snapshots the teacher, refreshes the
/// buffer, freezes the lower layers for latent kinds, grows the head by
/// `next_k` channels and advances the class ranges.
pub fn finalize_task(
    state: &StrategyState,
    model: &Detector,
    task: &TaskDataset,
    next_k: usize,
    head_seed: u64,
    rng: &mut impl Rng,
) -> Result<(Detector, StrategyState)> {
    if next_k == 0 {
        return Err(Error::invalid("the next task needs at least one class"));
    }
    let kind = state.kind();
    let mut model = model.clone();
    let mut next = state.clone();
    if kind.is_latent() {
        model.set_freeze_at(state.config.freeze)?;
        model.set_split_at(state.config.freeze)?;
    }
    if kind.uses_teacher() {
        next.teacher = Some(Teacher::snapshot(&model, kind == StrategyKind::LatentDistill));
    }
    if kind.uses_buffer() {
        let mut buffer = match next.buffer.take() {
            Some(b) => b,
            None => {
                let buffer_kind = if kind == StrategyKind::LatentReplay {
                    BufferKind::Latent { split: model.split_point(), shape: model.arch().latent_shape(model.split_point()) }
                } else {
                    BufferKind::Raw
                };
                ReplayBuffer::new(state.config.buffer_capacity, buffer_kind)?
            }
        };
        buffer.update(&model, task, rng)?;
        next.buffer = Some(buffer);
    }
    model.expand_head(next_k, head_seed)?;
    next.task += 1;
    next.old_range = state.seen();
    next.new_range = ClassRange::new(state.new_range.end(), next_k);
    Ok((model, next))
}
