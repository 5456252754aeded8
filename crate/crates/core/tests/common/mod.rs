//! Helpers shared by several test targets.
#![allow(dead_code)]

use latentcl::metrics::{GroundTruth, ScoredBox, RECALL_POINTS};
use latentcl::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept at least `gap` away from zero, for relu kinks.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Finite-difference relative error of every differentiable tape op, each
/// wrapped in a small scalar function.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = away_from_zero(&[2, 3], &mut rng, 1e-3);
    let b = random(&[2, 3], &mut rng);
    let bias = random(&[3], &mut rng);
    let wide = random(&[3, 4], &mut rng);
    let eps = 1e-5;
    type Case<'a> = (&'static str, Box<dyn Fn(&Tape, &Tensor) -> latentcl::Result<Tensor> + 'a>);
    let cases: Vec<Case> = vec![
        ("matmul-lhs", Box::new(|t, x| Ok(t.sum_all(&t.matmul(x, &wide)?)))),
        ("relu", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.relu(x), &b)?)))),
        ("sigmoid", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.sigmoid(x), &b)?)))),
        ("add", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.add(x, &b)?, x)?)))),
        ("sub", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.sub(&b, x)?, x)?)))),
        ("scale", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.scale(x, -0.7), x)?)))),
        ("add_scalar", Box::new(|t, x| Ok(t.sum_all(&t.mul(&t.add_scalar(x, 0.3), x)?)))),
        ("sum-axis", Box::new(|t, x| {
            let s = t.sum(&t.mul(x, x)?, &[0])?;
            Ok(t.sum_all(&t.mul(&s, &bias)?))
        })),
        ("mean-axis", Box::new(|t, x| {
            let s = t.mean(&t.mul(x, &b)?, &[1])?;
            Ok(t.sum_all(&t.mul(&s, &s)?))
        })),
        ("narrow", Box::new(|t, x| {
            let n = t.narrow(x, 1, 1, 2)?;
            Ok(t.sum_all(&t.mul(&n, &n)?))
        })),
        ("reshape", Box::new(|t, x| {
            let r = t.reshape(x, &[3, 2])?;
            Ok(t.sum_all(&t.matmul(&r, &t.reshape(&b, &[2, 3])?)?))
        })),
        ("channel-bias", Box::new(|t, x| {
            let y = t.add_channel_bias(&t.reshape(x, &[1, 2, 3, 1])?, &Tensor::new(&[2], vec![0.5, -0.25]).unwrap())?;
            Ok(t.sum_all(&t.mul(&y, &y)?))
        })),
        ("focal", Box::new(|t, x| {
            let targets = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
            let mask = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
            Ok(t.sum_all(&t.sigmoid_focal(&t.scale(x, 3.0), &targets, &mask, 2.0, 0.25)?))
        })),
        ("smooth-l1", Box::new(|t, x| {
            let target = t.scale(&b, 2.0);
            Ok(t.sum_all(&t.smooth_l1(&t.scale(x, 1.5), &target, &Tensor::ones(&[2, 3]))?))
        })),
    ];
    let mut out: Vec<(&'static str, f64)> =
        cases.iter().map(|(name, f)| (*name, grad_check(f, &a, eps).unwrap())).collect();

    let x4 = random(&[2, 3, 2, 2], &mut rng);
    let err = grad_check(
        |t, bias| {
            let y = t.add_channel_bias(&x4, bias)?;
            Ok(t.sum_all(&t.mul(&y, &y)?))
        },
        &bias,
        eps,
    )
    .unwrap();
    out.push(("channel-bias-bias", err));
    let err = grad_check(|t, w| Ok(t.sum_all(&t.sigmoid(&t.matmul(&b.reshape(&[3, 2]).unwrap(), w)?))), &b, eps).unwrap();
    out.push(("matmul-rhs", err));

    let x = random(&[2, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    out.push(("conv2d-kernel", grad_check(|t, k| Ok(t.mean_all(&t.relu(&t.conv2d(&x, k, 2, 1)?))), &k, eps).unwrap()));
    out.push(("conv2d-input", grad_check(|t, x| Ok(t.mean_all(&t.relu(&t.conv2d(x, &k, 2, 1)?))), &x, eps).unwrap()));
    out
}

pub fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

/// Recomputes precision and recall from scratch at every rank cut, then
/// takes the best precision among cuts reaching each recall point.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut curve = Vec::new();
    for cut in 1..=order.len() {
        let mut taken = vec![false; gts.len()];
        let mut hits = 0;
        for &i in &order[..cut] {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image != d.image {
                    continue;
                }
                let v = oracle_iou(&d.bbox, &gt.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                hits += 1;
            }
        }
        curve.push((hits as f64 / cut as f64, hits as f64 / gts.len() as f64));
    }
    let mut sum = 0.0;
    for t in 0..RECALL_POINTS {
        let r = t as f64 / 100.0;
        sum += curve.iter().filter(|(_, rec)| *rec >= r).map(|(p, _)| *p).fold(0.0, f64::max);
    }
    sum / RECALL_POINTS as f64
}

/// A random instance on a coarse grid (so IoUs land on thresholds) over two
/// images, with scores drawn from six levels (so ties occur). Half the
/// detections are jittered copies of a ground-truth box.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<ScoredBox>, Vec<GroundTruth>) {
    let rect = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64);
        [x, y, x + rng.random_range(1..5) as f64, y + rng.random_range(1..5) as f64]
    };
    let ng = rng.random_range(0..=4);
    let gts: Vec<GroundTruth> = (0..ng).map(|_| GroundTruth { image: rng.random_range(0..2), bbox: rect(rng) }).collect();
    let nd = rng.random_range(0..=6);
    let dets = (0..nd)
        .map(|_| {
            let score = rng.random_range(0..6) as f64 / 5.0;
            if !gts.is_empty() && rng.random_bool(0.5) {
                let g = &gts[rng.random_range(0..gts.len())];
                let mut b = g.bbox;
                let side = rng.random_range(0..4);
                b[side] += if side < 2 { -1.0 } else { 1.0 } * rng.random_range(0..2) as f64;
                ScoredBox { image: g.image, bbox: b, score }
            } else {
                ScoredBox { image: rng.random_range(0..2), bbox: rect(rng), score }
            }
        })
        .collect();
    (dets, gts)
}
