//! Detection quality (COCO-style mAP over Old/New/All classes) and the cost
//! ledger for parameters, multiply-accumulates and buffer memory.

mod ap;
mod ledger;

pub use ap::{
    average_precision, evaluate, evaluate_detections, iou, iou_thresholds, match_detections, rank_detections,
    EvalReport, GroundTruth, ScoredBox, EVAL_NMS_IOU, EVAL_SCORE_THRESHOLD, RECALL_POINTS,
};
pub use ledger::{
    buffer_memory, conv_macs, latent_buffer_bytes, latent_vs_classic, layer_macs, linear_macs,
    param_overhead_reduction, raw_buffer_bytes, reduction_from_overhead, teacher_macs_reduction, CostLedger,
    CostRatios,
};
