use serde::{Deserialize, Serialize};

use crate::detector::{Boundary, Detector, LayerInfo};
use crate::strategy::{ReplayBuffer, StrategyKind};

/// `Cout·H'·W'·Cin·kh·kw` for one example.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, out_hw: usize) -> u64 {
    (cout * out_hw * out_hw * cin * kernel * kernel) as u64
}

/// `n·m` for a dense `n → m` layer.
pub fn linear_macs(n: usize, m: usize) -> u64 {
    (n * m) as u64
}

/// Raw image buffer: `N·H·W·C` bytes.
pub fn raw_buffer_bytes(entries: usize, height: usize, width: usize, channels: usize) -> u64 {
    (entries * height * width * channels) as u64
}

/// Latent buffer: every entry stores each listed activation shape.
pub fn latent_buffer_bytes(entries: usize, shapes: &[&[usize]], bytes_per_element: usize) -> u64 {
    let per: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    (entries * per * bytes_per_element) as u64
}

pub fn buffer_memory(buffer: &ReplayBuffer) -> u64 {
    buffer.byte_size() as u64
}

/// Parameter and compute accounting of one strategy on one detector.
/// MAC counts are per training example of the current task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub strategy: StrategyKind,
    pub split: String,
    pub total_params: u64,
    pub trainable_params: u64,
    /// Parameters stored by the strategy beyond one deployable model.
    pub cl_overhead_params: u64,
    /// `|f|`: parameters below the split.
    pub lower_params: u64,
    /// `|h|`: parameters above the split.
    pub upper_params: u64,
    /// `F`: forward MACs below the split.
    pub lower_macs: u64,
    /// `H`: forward MACs above the split.
    pub upper_macs: u64,
    pub forward_macs_update: u64,
    pub backward_macs_update: u64,
    pub buffer_bytes: u64,
}

fn split_sums(layers: &[LayerInfo], split: Boundary, f: impl Fn(&LayerInfo) -> u64) -> (u64, u64) {
    layers.iter().fold((0, 0), |(lo, hi), l| if l.below(split) { (lo + f(l), hi) } else { (lo, hi + f(l)) })
}

pub fn layer_macs(l: &LayerInfo) -> u64 {
    conv_macs(l.cin, l.cout, l.kernel, l.out_hw)
}

impl CostLedger {
    /// Counts for `d` as configured (freeze boundary and split point).
    pub fn compute(d: &Detector, kind: StrategyKind, buffer_bytes: u64) -> Self {
        let split = d.split_point();
        let (lower_params, upper_params) = split_sums(d.layers(), split, LayerInfo::param_count);
        let (lower_macs, upper_macs) = split_sums(d.layers(), split, layer_macs);
        let (f, h) = (lower_macs, upper_macs);
        let m = f + h;
        let forward = match kind {
            StrategyKind::Finetune | StrategyKind::Joint => m,
            StrategyKind::Replay => 2 * m,
            StrategyKind::LatentReplay => m + h,
            StrategyKind::Lwf | StrategyKind::Sid => 2 * (f + h),
            StrategyKind::LatentDistill => f + 2 * h,
        };
        let frozen = d.frozen_boundary();
        let trainable_macs: u64 = d.layers().iter().filter(|l| !l.below(frozen)).map(layer_macs).sum();
        let replayed = if kind.uses_buffer() { 2 } else { 1 };
        let total = d.total_params();
        let cl_overhead_params = match kind {
            StrategyKind::Lwf | StrategyKind::Sid => total,
            StrategyKind::LatentDistill => upper_params,
            _ => 0,
        };
        CostLedger {
            strategy: kind,
            split: d.spec().boundary_name(split).to_string(),
            total_params: total,
            trainable_params: d.trainable_params(),
            cl_overhead_params,
            lower_params,
            upper_params,
            lower_macs,
            upper_macs,
            forward_macs_update: forward,
            backward_macs_update: 2 * trainable_macs * replayed,
            buffer_bytes,
        }
    }

    pub fn total_macs_update(&self) -> u64 {
        self.forward_macs_update + self.backward_macs_update
    }

    pub fn forward_flops_update(&self) -> u64 {
        2 * self.forward_macs_update
    }
}

/// Fraction of the classic (full-teacher) parameter overhead saved by keeping
/// only the upper layers: `|f| / (|f| + |h|)`.
pub fn param_overhead_reduction(total_params: f64, upper_params: f64) -> f64 {
    1.0 - upper_params / total_params
}

/// Fraction of the classic teacher's forward cost saved when the teacher
/// shares the lower layers: `F / (F + H)`.
pub fn teacher_macs_reduction(lower_macs: f64, upper_macs: f64) -> f64 {
    lower_macs / (lower_macs + upper_macs)
}

/// Reduction implied by a measured overhead fraction of the classic cost.
pub fn reduction_from_overhead(overhead_fraction: f64) -> f64 {
    1.0 - overhead_fraction
}

/// Latent-distillation cost relative to classic distillation, forward only
/// and forward + backward, with both students trained above the same
/// freeze boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    pub forward: f64,
    pub forward_backward: f64,
    pub overhead_params: f64,
}

pub fn latent_vs_classic(ld: &CostLedger, classic: &CostLedger) -> CostRatios {
    CostRatios {
        forward: ld.forward_macs_update as f64 / classic.forward_macs_update as f64,
        forward_backward: ld.total_macs_update() as f64 / classic.total_macs_update() as f64,
        overhead_params: ld.cl_overhead_params as f64 / classic.cl_overhead_params as f64,
    }
}
