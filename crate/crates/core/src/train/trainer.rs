use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, AdamW, Hyperparams};
use crate::data::{batch_iter, TaskDataset};
use crate::detector::{Detector, ParamStore};
use crate::error::{Error, Result};
use crate::strategy::{compose_batch, strategy_loss, LossBreakdown, StrategyState};
use crate::tensor::{Tape, Tensor};

fn splitmix64(z: u64) -> u64 {
    let z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed (epoch order, buffer draws, head growth)
/// from `base` and a path of integers via SplitMix64.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |x, &p| splitmix64(x ^ splitmix64(p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCurve {
    pub task: usize,
    pub steps: Vec<StepRecord>,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Gradients of every trainable parameter, keyed by name.
pub fn trainable_gradients(tape: &Tape, bound: &ParamStore, loss: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, t) in bound.iter() {
        if let Some(g) = grads.get(t) {
            out.insert(name.to_string(), g.clone());
        }
    }
    Ok(out)
}

/// Trains `model` on `task` for `hp.epochs` epochs with a fresh optimizer
/// and a restarted schedule. Only trainable parameters move.
pub fn train_task(
    model: &Detector,
    state: &StrategyState,
    task: &TaskDataset,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(Detector, TaskCurve)> {
    hp.validate()?;
    let mut model = model.clone();
    let mut curve = TaskCurve { task: state.task, ..Default::default() };
    if hp.epochs == 0 {
        return Ok((model, curve));
    }
    let mut opt = AdamW::new();
    let mut step: u64 = 0;
    for epoch in 0..hp.epochs {
        let order = batch_iter(task, hp.batch_size, derive_seed(seed, &[0, epoch as u64]))?;
        let mut sum = 0.0;
        for indices in &order {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, step]));
            let batch = compose_batch(state, task.batch(indices)?, &mut rng)?;
            let tape = Tape::new();
            let bound = model.params().bind(&tape);
            let loss = strategy_loss(&tape, state, &model, &bound, &batch)?;
            let grads = trainable_gradients(&tape, &bound, &loss.total)?;
            let lr = lr_at(step, epoch as f64, hp);
            opt.apply(&mut model, &grads, lr, hp).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("task {} epoch {epoch} step {step}: {m}", state.task)),
                other => other,
            })?;
            sum += loss.breakdown.total;
            curve.steps.push(StepRecord { epoch, step, lr, loss: loss.breakdown });
            step += 1;
        }
        curve.epoch_loss.push(sum / order.len() as f64);
    }
    Ok((model, curve))
}
