use latentcl::data::{generate_dataset, ClassRange};
use latentcl::detector::{Detection, Detector, DetectorSpec};
use latentcl::metrics::{
    average_precision, buffer_memory, conv_macs, evaluate, evaluate_detections, iou, iou_thresholds,
    latent_buffer_bytes, latent_vs_classic, linear_macs, param_overhead_reduction, raw_buffer_bytes,
    reduction_from_overhead, teacher_macs_reduction, CostLedger, GroundTruth, ScoredBox,
};
use latentcl::strategy::{BufferKind, ReplayBuffer, StrategyKind};
use proptest::prelude::*;

mod common;
use common::brute_force_ap;

#[test]
fn iou_examples() {
    let a = [0.0, 0.0, 2.0, 2.0];
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
    assert_eq!(iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap(), 1.0 / 7.0);
    assert!(iou(&a, &[1.0, 1.0, 1.0, 3.0]).is_err());
    assert!(iou(&[2.0, 0.0, 0.0, 2.0], &a).is_err());
}

#[test]
fn thresholds_step_by_five_hundredths() {
    let t = iou_thresholds();
    assert_eq!(t[0], 0.5);
    assert_eq!(t[9], 0.95);
    assert_eq!(t.len(), 10);
}

fn det(image: usize, bbox: [f64; 4], score: f64) -> ScoredBox {
    ScoredBox { image, bbox, score }
}

#[test]
fn single_exact_detection_has_unit_ap() {
    let b = [1.0, 1.0, 5.0, 5.0];
    for thr in iou_thresholds() {
        let ap = average_precision(&[det(0, b, 0.9)], &[GroundTruth { image: 0, bbox: b }], thr).unwrap();
        assert_eq!(ap, 1.0);
    }
}

#[test]
fn missing_detection_has_zero_ap() {
    let g = [GroundTruth { image: 0, bbox: [0.0, 0.0, 3.0, 3.0] }];
    assert_eq!(average_precision(&[], &g, 0.5).unwrap(), 0.0);
    assert_eq!(average_precision(&[det(0, [0.0, 0.0, 1.0, 1.0], 0.5)], &[], 0.5).unwrap(), 0.0);
}

#[test]
fn mixed_case_matches_oracle() {
    let gts = [GroundTruth { image: 0, bbox: [0.0, 0.0, 4.0, 4.0] }, GroundTruth { image: 0, bbox: [6.0, 6.0, 9.0, 9.0] }];
    let dets = [det(0, [0.0, 0.0, 4.0, 3.0], 0.9), det(0, [0.0, 0.0, 4.0, 4.0], 0.8), det(0, [6.0, 6.0, 9.0, 9.0], 0.3)];
    for thr in iou_thresholds() {
        assert_eq!(average_precision(&dets, &gts, thr).unwrap(), brute_force_ap(&dets, &gts, thr));
    }
    // Second detection duplicates the first match at 0.5, so precision dips.
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    assert!(ap > 0.5 && ap < 1.0, "{ap}");
}

fn small_box() -> impl Strategy<Value = [f64; 4]> {
    (0u8..8, 0u8..8, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| [x as f64, y as f64, (x + w) as f64, (y + h) as f64])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_equals_brute_force_oracle(
        dets in prop::collection::vec((0usize..2, small_box(), 0u8..6), 0..=6),
        gts in prop::collection::vec((0usize..2, small_box()), 0..=4),
    ) {
        let dets: Vec<ScoredBox> = dets.into_iter().map(|(i, b, s)| det(i, b, s as f64 / 5.0)).collect();
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(image, bbox)| GroundTruth { image, bbox }).collect();
        for thr in iou_thresholds() {
            prop_assert_eq!(average_precision(&dets, &gts, thr).unwrap(), brute_force_ap(&dets, &gts, thr));
        }
    }
}

#[test]
fn perfect_predictions_score_one() {
    let d = generate_dataset(40, 8, 3).unwrap();
    let truth: Vec<_> = d.scenes.iter().map(|s| s.objects.clone()).collect();
    let dets: Vec<Vec<Detection>> = truth
        .iter()
        .map(|objs| objs.iter().map(|o| Detection { class_id: o.class_id, bbox: o.bbox, score: 1.0 }).collect())
        .collect();
    let r = evaluate_detections(&dets, &truth, ClassRange::up_to(4), ClassRange::new(5, 4)).unwrap();
    assert_eq!(r.all_map, Some(1.0));
    assert_eq!(r.old_map, Some(1.0));
    assert_eq!(r.new_map, Some(1.0));
    assert_eq!(r.per_class_ap.len(), 8);
}

#[test]
fn task_zero_report_has_no_old_map() {
    let d = generate_dataset(20, 8, 4).unwrap();
    let truth: Vec<_> = d.scenes.iter().map(|s| s.objects.clone()).collect();
    let r = evaluate_detections(&vec![vec![]; 20], &truth, ClassRange::empty_at(1), ClassRange::up_to(4)).unwrap();
    assert_eq!(r.old_map, None);
    assert_eq!(r.all_map, Some(0.0));
    assert!(r.per_class_ap.keys().all(|&c| c <= 4));
    assert!(evaluate_detections(&[], &[], ClassRange::empty_at(1), ClassRange::up_to(4)).is_err());
    assert!(evaluate_detections(&[vec![]], &truth, ClassRange::empty_at(1), ClassRange::up_to(4)).is_err());
}

#[test]
fn untrained_model_scores_near_zero() {
    let d = generate_dataset(30, 8, 5).unwrap();
    let model = Detector::build(DetectorSpec::toy(4), 1).unwrap();
    let r = evaluate(&model, &d, ClassRange::empty_at(1), ClassRange::up_to(4), 10).unwrap();
    assert!(r.all_map.unwrap() < 0.01, "{:?}", r.all_map);
    assert!(evaluate(&model, &generate_dataset(0, 8, 0).unwrap(), ClassRange::empty_at(1), ClassRange::up_to(4), 10).is_err());
}

#[test]
fn conv_macs_match_loop_count() {
    assert_eq!(conv_macs(3, 8, 1, 64), 98_304);
    let (cin, cout, k, hw) = (3, 5, 3, 7);
    let mut count = 0u64;
    for _ in 0..cout {
        for _ in 0..hw * hw {
            for _ in 0..cin * k * k {
                count += 1;
            }
        }
    }
    assert_eq!(conv_macs(cin, cout, k, hw), count);
    assert_eq!(linear_macs(7, 9), 63);
}

#[test]
fn paper_arithmetic() {
    let reduction = param_overhead_reduction(1.2e6, 309e3);
    assert!((reduction - 0.74).abs() < 0.01, "{reduction}");
    assert!((reduction_from_overhead(0.44) - 0.56).abs() < 1e-12);
    assert_eq!(raw_buffer_bytes(250, 320, 320, 3), 76_800_000);
    assert_eq!(raw_buffer_bytes(50, 64, 64, 3), 614_400);
    assert_eq!(latent_buffer_bytes(50, &[&[32, 8, 8]], 8), 819_200);
    assert_eq!(teacher_macs_reduction(1.0, 1.0), 0.5);
}

#[test]
fn empty_buffer_uses_no_memory() {
    assert_eq!(buffer_memory(&ReplayBuffer::new(50, BufferKind::Raw).unwrap()), 0);
}

fn frozen_at(name: &str) -> Detector {
    let mut d = Detector::build(DetectorSpec::toy(4), 0).unwrap();
    d.set_freeze(name).unwrap();
    d.set_split(name).unwrap();
    d
}

#[test]
fn overhead_per_strategy() {
    let d = frozen_at("stage3");
    let total = d.total_params();
    assert_eq!(CostLedger::compute(&d, StrategyKind::Finetune, 0).cl_overhead_params, 0);
    for kind in [StrategyKind::Lwf, StrategyKind::Sid] {
        assert_eq!(CostLedger::compute(&d, kind, 0).cl_overhead_params, total);
    }
    let ld = CostLedger::compute(&d, StrategyKind::LatentDistill, 0);
    assert_eq!(ld.cl_overhead_params, ld.upper_params);
    assert_eq!(ld.lower_params + ld.upper_params, total);
    assert!(ld.trainable_params <= ld.total_params);
}

#[test]
fn latent_distill_identities_hold_at_every_boundary() {
    for name in DetectorSpec::toy(4).boundary_names() {
        let d = frozen_at(&name);
        let ld = CostLedger::compute(&d, StrategyKind::LatentDistill, 0);
        for kind in [StrategyKind::Sid, StrategyKind::Lwf] {
            let classic = CostLedger::compute(&d, kind, 0);
            assert_eq!(ld.forward_macs_update, classic.forward_macs_update - ld.lower_macs, "{name}");
            assert_eq!(ld.cl_overhead_params, classic.cl_overhead_params - ld.lower_params, "{name}");
            assert_eq!(ld.backward_macs_update, classic.backward_macs_update);
            let r = latent_vs_classic(&ld, &classic);
            let (f, h) = (ld.lower_macs as f64, ld.upper_macs as f64);
            assert!((r.forward - (f + 2.0 * h) / (2.0 * (f + h))).abs() < 1e-12);
            if name != "input" {
                assert!(r.forward_backward < 1.0);
            }
        }
    }
}

#[test]
fn equal_halves_give_three_quarters() {
    let d = frozen_at("stage3");
    let mut ld = CostLedger::compute(&d, StrategyKind::LatentDistill, 0);
    let mut classic = CostLedger::compute(&d, StrategyKind::Sid, 0);
    let half = 1_000_000;
    ld.forward_macs_update = half + 2 * half;
    classic.forward_macs_update = 2 * (half + half);
    assert_eq!(latent_vs_classic(&ld, &classic).forward, 0.75);
}

#[test]
fn raising_the_freeze_boundary_shrinks_training_cost() {
    let names = DetectorSpec::toy(4).boundary_names();
    let ledgers: Vec<CostLedger> =
        names.iter().map(|n| CostLedger::compute(&frozen_at(n), StrategyKind::LatentDistill, 0)).collect();
    for w in ledgers.windows(2) {
        assert!(w[1].trainable_params < w[0].trainable_params);
        assert!(w[1].backward_macs_update < w[0].backward_macs_update);
    }
}

#[test]
fn replay_kinds_double_the_batch() {
    let d = frozen_at("stage3");
    let m = CostLedger::compute(&d, StrategyKind::Finetune, 0);
    let r = CostLedger::compute(&d, StrategyKind::Replay, 614_400);
    assert_eq!(r.forward_macs_update, 2 * m.forward_macs_update);
    assert_eq!(r.backward_macs_update, 2 * m.backward_macs_update);
    assert_eq!(r.buffer_bytes, 614_400);
    let lr = CostLedger::compute(&d, StrategyKind::LatentReplay, 0);
    assert_eq!(lr.forward_macs_update, m.forward_macs_update + m.upper_macs);
}
