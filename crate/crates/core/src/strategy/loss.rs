use crate::data::{Annotation, ClassRange};
use crate::detector::HeadOutputs;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Per-cell supervision built from box annotations.
#[derive(Clone, Debug)]
pub struct CellTargets {
    /// `[B, C, S, S]` one-hot class targets.
    pub class_targets: Tensor,
    /// `[B, C, S, S]`, 1 on channels of each image's supervised range.
    pub class_mask: Tensor,
    /// `[B, 4, S, S]` left/top/right/bottom distances in stride units.
    pub box_targets: Tensor,
    /// `[B, 4, S, S]`, 1 on positive cells.
    pub box_mask: Tensor,
    pub positives: usize,
}

/// Assigns each cell whose center lies strictly inside a box to that box;
/// the smallest box wins when several contain the center.
pub fn assign_targets(
    classes: usize,
    grid: usize,
    stride: usize,
    annotations: &[Vec<Annotation>],
    ranges: &[ClassRange],
) -> Result<CellTargets> {
    if annotations.len() != ranges.len() {
        return Err(Error::invalid(format!(
            "{} annotation lists for {} class ranges",
            annotations.len(),
            ranges.len()
        )));
    }
    let batch = annotations.len();
    let cells = grid * grid;
    let mut cls_t = vec![0.0; batch * classes * cells];
    let mut cls_m = vec![0.0; batch * classes * cells];
    let mut box_t = vec![0.0; batch * 4 * cells];
    let mut box_m = vec![0.0; batch * 4 * cells];
    let mut positives = 0;
    let s = stride as f64;
    for (b, (objs, range)) in annotations.iter().zip(ranges).enumerate() {
        if !range.is_empty() && range.last() > classes {
            return Err(Error::invalid(format!("class range {range} exceeds the {classes} head channels")));
        }
        for c in range.ids() {
            let base = (b * classes + c - 1) * cells;
            cls_m[base..base + cells].fill(1.0);
        }
        for o in objs {
            if !range.contains(o.class_id) {
                return Err(Error::invalid(format!("target class {} outside supervised range {range}", o.class_id)));
            }
        }
        for i in 0..grid {
            for j in 0..grid {
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let owner = objs
                    .iter()
                    .filter(|o| cx > o.bbox[0] && cx < o.bbox[2] && cy > o.bbox[1] && cy < o.bbox[3])
                    .min_by(|a, b| area(&a.bbox).total_cmp(&area(&b.bbox)));
                let Some(o) = owner else { continue };
                positives += 1;
                let cell = i * grid + j;
                cls_t[(b * classes + o.class_id - 1) * cells + cell] = 1.0;
                let d = [cx - o.bbox[0], cy - o.bbox[1], o.bbox[2] - cx, o.bbox[3] - cy];
                for (k, v) in d.iter().enumerate() {
                    box_t[(b * 4 + k) * cells + cell] = v / s;
                    box_m[(b * 4 + k) * cells + cell] = 1.0;
                }
            }
        }
    }
    let cls_shape = [batch, classes, grid, grid];
    let box_shape = [batch, 4, grid, grid];
    Ok(CellTargets {
        class_targets: Tensor::new(&cls_shape, cls_t)?,
        class_mask: Tensor::new(&cls_shape, cls_m)?,
        box_targets: Tensor::new(&box_shape, box_t)?,
        box_mask: Tensor::new(&box_shape, box_m)?,
        positives,
    })
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Focal classification loss plus smooth-L1 box loss. Each is a mean over the
/// elements it covers: focal over the supervised class elements, smooth-L1
/// over the whole `[B, 4, S, S]` box tensor, matching the element means of the
/// distillation MSE terms. Only channels inside each image's range are
/// supervised; the others get exactly zero gradient.
pub fn detection_loss(
    tape: &Tape,
    out: &HeadOutputs,
    stride: usize,
    annotations: &[Vec<Annotation>],
    ranges: &[ClassRange],
) -> Result<Tensor> {
    let shape = out.class_logits.shape();
    if shape.len() != 4 || shape[2] != shape[3] || shape[0] != annotations.len() {
        return Err(Error::shape(format!(
            "class logits {shape:?} do not fit a batch of {} images",
            annotations.len()
        )));
    }
    let t = assign_targets(shape[1], shape[2], stride, annotations, ranges)?;
    let supervised = t.class_mask.data().iter().sum::<f64>().max(1.0);
    let focal = tape.sigmoid_focal(&out.class_logits, &t.class_targets, &t.class_mask, FOCAL_GAMMA, FOCAL_ALPHA)?;
    let focal = tape.scale(&tape.sum_all(&focal), 1.0 / supervised);
    let pred = tape.scale(&out.box_regress, 1.0 / stride as f64);
    let reg = tape.smooth_l1(&pred, &t.box_targets, &t.box_mask)?;
    let reg = tape.scale(&tape.sum_all(&reg), 1.0 / out.box_regress.numel() as f64);
    tape.add(&focal, &reg)
}

fn mse(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    Ok(tape.mean_all(&tape.mul(&d, &d)?))
}

/// MSE between student and teacher class logits on `old_range` channels only.
pub fn masked_distill_loss(
    tape: &Tape,
    student: &HeadOutputs,
    teacher: &HeadOutputs,
    old_range: ClassRange,
) -> Result<Tensor> {
    let (sc, tc) = (student.class_logits.shape()[1], teacher.class_logits.shape()[1]);
    if old_range.is_empty() || old_range.last() > tc || tc > sc {
        return Err(Error::invalid(format!(
            "old range {old_range} does not fit teacher ({tc}) / student ({sc}) channels"
        )));
    }
    let start = old_range.channel_start();
    let s = tape.narrow(&student.class_logits, 1, start, old_range.count)?;
    let t = tape.narrow(&teacher.class_logits, 1, start, old_range.count)?;
    mse(tape, &s, &t)
}

/// Unmasked output distillation: MSE over every teacher class channel plus
/// MSE over box distances (in stride units).
pub fn lwf_distill_loss(tape: &Tape, student: &HeadOutputs, teacher: &HeadOutputs, stride: usize) -> Result<Tensor> {
    let tc = teacher.class_logits.shape()[1];
    if student.class_logits.shape()[1] < tc || student.box_regress.shape() != teacher.box_regress.shape() {
        return Err(Error::shape(format!(
            "student {:?}/{:?} cannot be compared with teacher {:?}/{:?}",
            student.class_logits.shape(),
            student.box_regress.shape(),
            teacher.class_logits.shape(),
            teacher.box_regress.shape()
        )));
    }
    let cls = masked_distill_loss(tape, student, teacher, ClassRange::up_to(tc))?;
    let inv = 1.0 / stride as f64;
    let sb = tape.scale(&student.box_regress, inv);
    let tb = tape.scale(&teacher.box_regress, inv);
    tape.add(&cls, &mse(tape, &sb, &tb)?)
}

/// MSE between trunk features before the class/box split.
pub fn intermediate_distill_loss(tape: &Tape, student_trunk: &Tensor, teacher_trunk: &Tensor) -> Result<Tensor> {
    mse(tape, student_trunk, teacher_trunk)
}
