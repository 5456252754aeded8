use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, Annotation, ClassRange, Dataset};
use crate::detector::{decode_detections, Detection, Detector};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const EVAL_NMS_IOU: f64 = 0.6;

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    for (name, bx) in [("first", a), ("second", b)] {
        if !(bx[0] < bx[2] && bx[1] < bx[3]) {
            return Err(Error::invalid(format!("{name} box {bx:?} is degenerate")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(inter / union)
}

/// A detection tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: [f64; 4],
}

/// Detections in evaluation order: descending score, ties kept in input order.
pub fn rank_detections(dets: &[ScoredBox]) -> Vec<ScoredBox> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    sorted
}

/// True-positive flags of ranked detections under greedy matching: each
/// detection takes the unmatched ground truth of its image with the highest
/// IoU, provided it reaches `iou_thr`.
pub fn match_detections(ranked: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Result<Vec<bool>> {
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(ranked.len());
    for d in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != d.image {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox)?;
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(tp)
}

/// Area under the 101-point interpolated precision/recall curve. Returns 0
/// when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Result<f64> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let ranked = rank_detections(dets);
    let tp = match_detections(&ranked, gts, iou_thr)?;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / gts.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for t in 0..RECALL_POINTS {
        let r = t as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Ok(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class id → AP averaged over the ten IoU thresholds; classes without
    /// ground truth are absent.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub old_map: Option<f64>,
    pub new_map: Option<f64>,
    pub all_map: Option<f64>,
}

fn mean_over(per_class: &BTreeMap<usize, f64>, range: ClassRange) -> Option<f64> {
    let vals: Vec<f64> = range.ids().filter_map(|c| per_class.get(&c).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores per-image detections against full ground truth. `old` and `new`
/// partition the seen classes; an empty `old` gives an absent Old mAP.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    old: ClassRange,
    new: ClassRange,
) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let seen = ClassRange::up_to(new.end() - 1);
    let mut per_class_ap = BTreeMap::new();
    for class in seen.ids() {
        let gts: Vec<GroundTruth> = ground_truth
            .iter()
            .enumerate()
            .flat_map(|(image, objs)| {
                objs.iter().filter(move |o| o.class_id == class).map(move |o| GroundTruth { image, bbox: o.bbox })
            })
            .collect();
        if gts.is_empty() {
            continue;
        }
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter()
                    .filter(move |d| d.class_id == class)
                    .map(move |d| ScoredBox { image, bbox: d.bbox, score: d.score })
            })
            .collect();
        let mut sum = 0.0;
        for thr in iou_thresholds() {
            sum += average_precision(&dets, &gts, thr)?;
        }
        per_class_ap.insert(class, sum / 10.0);
    }
    Ok(EvalReport {
        old_map: mean_over(&per_class_ap, old),
        new_map: mean_over(&per_class_ap, new),
        all_map: mean_over(&per_class_ap, seen),
        per_class_ap,
    })
}

/// Runs the model over every image of `dataset` and scores it against the
/// full annotations.
pub fn evaluate(
    model: &Detector,
    dataset: &Dataset,
    old: ClassRange,
    new: ClassRange,
    batch_size: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut detections = Vec::with_capacity(dataset.len());
    for chunk in dataset.scenes.chunks(batch_size) {
        let images: Vec<&[u8]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let out = model.forward(&images_to_tensor(&images)?)?;
        detections.extend(decode_detections(&out, model.spec().input_size, EVAL_SCORE_THRESHOLD, EVAL_NMS_IOU));
    }
    let truth: Vec<Vec<Annotation>> = dataset.scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate_detections(&detections, &truth, old, new)
}
