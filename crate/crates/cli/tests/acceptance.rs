//! Acceptance criteria, run in sequence so wall-clock budgets are measured
//! without competing tests. Each criterion prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use owlet::anchors::{
    inertia, kmeans_run, kmeanspp_seed, mean_best_iou, mine_anchors, random_seed, BoxWH, KmeansConfig, Metric,
};
use owlet::checks::{run_suite, SuiteOptions, Target};
use owlet::data_io::{
    format_labels, gen_synthetic_scene, load_image, mean_brightness, parse_labels, save_image, synthetic_pairs,
    PairConfig, SceneConfig,
};
use owlet::geometry::{ciou_loss, nms, nms_indices, BBox, Detection, NmsConfig, Suppression};
use owlet::metrics::{average_precision, evaluate, mean_average_precision, precision_recall, Counts};
use owlet::retinex::{
    enhance_image, loss_ir, loss_is, loss_recon, train_decom, train_enhance, DecomConfig, EnhanceConfig,
    LossCoefficients, RetinexModel, TrainConfig,
};
use owlet::{Rng, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(Target::All, &SuiteOptions::default(), |_| {}).unwrap();
    let elapsed = start.elapsed();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let probes: usize = entries.iter().map(|e| e.report.probes).sum();
    let kinks: usize = entries.iter().map(|e| e.report.kinks).sum();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} cases, {probes} probes ({kinks} straddling kinks), worst {} at {:.2e} (< 1e-4), failed {:?}, {:.1} s (< 120 s)",
            entries.len(),
            worst.name,
            worst.report.max_rel_error,
            failed,
            secs(elapsed)
        ),
    )
}

fn plain_tv(i: &Tensor) -> f64 {
    let (_, h, w) = i.dims3().unwrap();
    let at = |y: usize, x: usize| i.data()[y * w + x];
    let mut horizontal = 0.0;
    let mut vertical = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                horizontal += (at(y, x + 1) - at(y, x)).abs();
            }
            if y + 1 < h {
                vertical += (at(y + 1, x) - at(y, x)).abs();
            }
        }
    }
    (horizontal + vertical) / (h * w) as f64
}

fn loss_identities() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    let mut ir_separates = true;
    let coeffs = LossCoefficients::default();
    for _ in 0..20 {
        let r = rng.uniform_tensor(&[3, 8, 8], 0.05, 1.0);
        let i_low = rng.uniform_tensor(&[1, 8, 8], 0.05, 1.0);
        let i_normal = rng.uniform_tensor(&[1, 8, 8], 0.05, 1.0);
        let product = |i: &Tensor| Tensor::from_fn(r.shape(), |k| r.data()[k] * i.data()[k % 64]);
        let (s_low, s_normal) = (product(&i_low), product(&i_normal));
        let recon = loss_recon(&r, &r, &i_low, &i_normal, &s_low, &s_normal, &coeffs.recon).unwrap();
        worst = worst.max(recon.abs());

        worst = worst.max(loss_ir(&r, &r).unwrap().abs());
        let mut other = r.clone();
        let k = rng.below(other.numel());
        other.data_mut()[k] = (other.data()[k] + 0.01).min(1.0) - 0.005;
        ir_separates &= loss_ir(&r, &other).unwrap() > 0.0;

        let r2 = rng.uniform_tensor(&[3, 8, 8], 0.0, 1.0);
        let flat = |v: f64| Tensor::full(&[1, 8, 8], v);
        let constant = loss_is(&flat(0.3), &flat(0.8), &r, &r2, coeffs.g).unwrap();
        worst = worst.max(constant.abs());

        let tv = loss_is(&i_low, &i_normal, &r, &r2, 0.0).unwrap();
        worst = worst.max((tv - (plain_tv(&i_low) + plain_tv(&i_normal))).abs());
    }
    outcome(
        worst <= 1e-12 && ir_separates,
        format!("max deviation {worst:.1e} (<= 1e-12) over 20 cases; reflectance loss positive when reflectances differ: {ir_separates}"),
    )
}

fn retinex_descent() -> Outcome {
    let seed = 7;
    let pairs = synthetic_pairs(16, &PairConfig::default(), seed).unwrap();
    let held_out = synthetic_pairs(4, &PairConfig::default(), seed + 1000).unwrap();
    let decom_config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let coeffs = LossCoefficients::default();
    let run = || {
        let (decom, history) = train_decom(&pairs, DecomConfig::default(), &coeffs, &decom_config, seed).unwrap();
        let (enhance, _) = train_enhance(
            &pairs,
            &decom,
            EnhanceConfig::default(),
            coeffs.g,
            &TrainConfig::default(),
            seed,
        )
        .unwrap();
        let model = RetinexModel {
            decom,
            enhance,
            coeffs,
            seed,
        };
        (model, history)
    };
    let start = Instant::now();
    let (model, history) = run();
    let elapsed = start.elapsed();
    let smoothed = history.smoothed(10);
    let ratio = smoothed.last().unwrap() / smoothed[0];
    let brightness: Vec<(f64, f64)> = held_out
        .iter()
        .map(|p| {
            let out = enhance_image(&p.low, &model.decom, &model.enhance).unwrap();
            (mean_brightness(&p.low), mean_brightness(&out))
        })
        .collect();
    let brighter = brightness.iter().all(|(before, after)| after > before);
    let (model2, history2) = run();
    let deterministic = history == history2 && model.to_container().to_bytes() == model2.to_container().to_bytes();
    let pass = history.step_losses.len() == 200 && ratio < 0.5 && brighter && deterministic && elapsed < Duration::from_secs(300);
    let shown: Vec<String> = brightness.iter().map(|(b, a)| format!("{b:.3}->{a:.3}")).collect();
    outcome(
        pass,
        format!(
            "{} steps, smoothed loss ratio {ratio:.3} (< 0.5), held-out brightness [{}], rerun identical: {deterministic}, {:.1} s per run (< 300 s)",
            history.step_losses.len(),
            shown.join(", "),
            secs(elapsed)
        ),
    )
}

/// Minimum mean squared distance over all 2-partitions, with the two centroids.
fn best_two_partition(boxes: &[BoxWH]) -> (f64, [BoxWH; 2]) {
    let n = boxes.len();
    let mut best = (f64::INFINITY, [boxes[0], boxes[0]]);
    for mask in 1..(1u32 << (n - 1)) {
        let mut cost = 0.0;
        let mut centers = [boxes[0]; 2];
        for (side, center) in centers.iter_mut().enumerate() {
            let members: Vec<&BoxWH> = (0..n)
                .filter(|&i| ((mask >> i) & 1) as usize == side)
                .map(|i| &boxes[i])
                .collect();
            let m = members.len() as f64;
            let w = members.iter().map(|b| b.w).sum::<f64>() / m;
            let h = members.iter().map(|b| b.h).sum::<f64>() / m;
            cost += members.iter().map(|b| (b.w - w).powi(2) + (b.h - h).powi(2)).sum::<f64>();
            *center = BoxWH { w, h };
        }
        if cost / (n as f64) < best.0 {
            best = (cost / n as f64, centers);
        }
    }
    best.1.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)).then(a.w.total_cmp(&b.w)));
    best
}

fn random_boxes(rng: &mut Rng, n: usize) -> Vec<BoxWH> {
    (0..n)
        .map(|_| BoxWH::new(rng.uniform_range(0.01, 1.0), rng.uniform_range(0.01, 1.0)).unwrap())
        .collect()
}

fn kmeans_correctness() -> Outcome {
    let mut matches = 0;
    let mut worst_gap = 0.0f64;
    for instance in 0..50u64 {
        let mut rng = Rng::new(4000 + instance);
        let n = 3 + rng.below(6);
        let boxes = random_boxes(&mut rng, n);
        let (oracle, centers) = best_two_partition(&boxes);
        let mined = mine_anchors(&boxes, 2, Metric::Euclidean, instance).unwrap();
        let gap = (mined.inertia - oracle).abs();
        let center_gap = mined
            .anchors
            .iter()
            .zip(&centers)
            .map(|(a, c)| (a.w - c.w).abs().max((a.h - c.h).abs()))
            .fold(0.0, f64::max);
        worst_gap = worst_gap.max(gap).max(center_gap);
        if gap <= 1e-12 && center_gap <= 1e-12 {
            matches += 1;
        }
    }

    let mut monotone = true;
    let mut runs = 0;
    for instance in 0..200u64 {
        let mut rng = Rng::new(9000 + instance);
        let n = 10 + rng.below(90);
        let boxes = random_boxes(&mut rng, n);
        let k = 1 + rng.below(9);
        for metric in [Metric::Iou, Metric::Euclidean] {
            for initial in [
                kmeanspp_seed(&boxes, k, metric, &mut rng).unwrap(),
                random_seed(&boxes, k, &mut rng).unwrap(),
            ] {
                let run = kmeans_run(&boxes, &initial, metric, &KmeansConfig::default()).unwrap();
                monotone &= run.history.windows(2).all(|w| w[1] <= w[0]);
                runs += 1;
            }
        }
    }

    let mut rng = Rng::new(77);
    let mut boxes = Vec::new();
    for (cw, ch) in [(0.08, 0.1), (0.5, 0.35)] {
        for _ in 0..50 {
            let w = (cw + rng.normal(0.0, 0.02)).clamp(0.005, 1.0);
            let h = (ch + rng.normal(0.0, 0.02)).clamp(0.005, 1.0);
            boxes.push(BoxWH::new(w, h).unwrap());
        }
    }
    let (mut pp, mut uniform) = (0.0, 0.0);
    for seed in 0..100u64 {
        let root = Rng::new(seed);
        pp += inertia(&boxes, &kmeanspp_seed(&boxes, 2, Metric::Euclidean, &mut root.fork(0)).unwrap(), Metric::Euclidean);
        uniform += inertia(&boxes, &random_seed(&boxes, 2, &mut root.fork(1)).unwrap(), Metric::Euclidean);
    }
    let (pp, uniform) = (pp / 100.0, uniform / 100.0);
    outcome(
        matches == 50 && monotone && pp <= uniform,
        format!(
            "exhaustive oracle matched {matches}/50 (worst gap {worst_gap:.1e}); inertia non-increasing in all {runs} runs: {monotone}; \
             mean seeding inertia k-means++ {pp:.5} vs uniform {uniform:.5}"
        ),
    )
}

fn anchor_quality() -> Outcome {
    let config = SceneConfig::default();
    let root = Rng::new(2024);
    let boxes: Vec<BoxWH> = (0..150u64)
        .flat_map(|i| {
            gen_synthetic_scene(&mut root.fork(i), &config, &i.to_string())
                .unwrap()
                .labeled
                .boxes
        })
        .map(|b| BoxWH::from(&b))
        .collect();
    let mut wins = 0;
    let mut margin = f64::INFINITY;
    for seed in 0..100u64 {
        let mined = mine_anchors(&boxes, 9, Metric::Iou, seed).unwrap();
        let random = random_seed(&boxes, 9, &mut Rng::new(seed).fork(99)).unwrap();
        let (m, r) = (
            mean_best_iou(&boxes, &mined.anchors).unwrap(),
            mean_best_iou(&boxes, &random).unwrap(),
        );
        if m >= r {
            wins += 1;
        }
        margin = margin.min(m - r);
    }
    outcome(
        wins >= 95,
        format!("mined k=9 anchors >= random anchors in {wins}/100 seeds (>= 95) on {} boxes; smallest margin {margin:.4}", boxes.len()),
    )
}

/// All-point AP from the precision envelope over every distinct score threshold.
fn ap_oracle(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / num_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

fn gt_box(cx: f64, cy: f64) -> BBox {
    BBox::new(cx, cy, 0.2, 0.2, 0).unwrap()
}

fn metrics_oracle() -> Outcome {
    let mut rng = Rng::new(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 1 + rng.below(30);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (rng.uniform(), rng.uniform() < 0.5)).collect();
        let tp = scored.iter().filter(|s| s.1).count();
        let num_gt = (tp + rng.below(5)).max(1);
        let ap = average_precision(&scored, num_gt).unwrap();
        worst = worst.max((ap - ap_oracle(&scored, num_gt)).abs());
    }

    let hand = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    let mut gts = BTreeMap::new();
    gts.insert("img".to_string(), vec![gt_box(0.25, 0.25), gt_box(0.75, 0.75)]);
    let dets = vec![
        Detection::new("img", gt_box(0.25, 0.25), 0.9).unwrap(),
        Detection::new("img", gt_box(0.25, 0.75), 0.8).unwrap(),
        Detection::new("img", gt_box(0.75, 0.75), 0.7).unwrap(),
    ];
    let report = evaluate(&dets, &gts, 0.5).unwrap();

    let mut arithmetic = true;
    for _ in 0..200 {
        let c = Counts {
            tp: rng.below(50),
            fp: rng.below(50),
            fn_: rng.below(50),
        };
        let (p, r) = precision_recall(c);
        let expect_p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
        let expect_r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
        arithmetic &= p == expect_p && r == expect_r;
        let aps: Vec<f64> = (0..1 + rng.below(5)).map(|_| rng.uniform()).collect();
        let direct = aps.iter().sum::<f64>() / aps.len() as f64;
        arithmetic &= (mean_average_precision(&aps).unwrap() - direct).abs() <= 1e-15;
    }
    let pass = worst <= 1e-12 && (hand - 5.0 / 6.0).abs() <= 1e-12 && (report.map - 5.0 / 6.0).abs() <= 1e-12 && arithmetic;
    outcome(
        pass,
        format!(
            "AP vs envelope oracle max deviation {worst:.1e} over 200 instances; hand example AP {hand:.12} (report mAP {:.12}); \
             precision/recall/mAP arithmetic exact: {arithmetic}",
            report.map
        ),
    )
}

fn corner_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// The unique subset in which a box is kept exactly when no kept box of
/// higher priority suppresses it, found by checking every subset.
fn nms_oracle(dets: &[Detection], config: &NmsConfig) -> Vec<usize> {
    let eligible: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= config.score_threshold).collect();
    let before = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    let overlap = |a: &BBox, b: &BBox| match config.criterion {
        Suppression::Iou => corner_iou(a, b),
        Suppression::Diou => {
            let cw = (a.cx + a.w / 2.0).max(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).min(b.cx - b.w / 2.0);
            let ch = (a.cy + a.h / 2.0).max(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).min(b.cy - b.h / 2.0);
            corner_iou(a, b) - ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)) / (cw * cw + ch * ch)
        }
    };
    let suppresses = |a: usize, b: usize| {
        dets[a].image_id == dets[b].image_id
            && dets[a].bbox.class_id == dets[b].bbox.class_id
            && overlap(&dets[a].bbox, &dets[b].bbox) > config.iou_threshold
    };
    let mut solutions = Vec::new();
    for mask in 0..(1u32 << eligible.len()) {
        let kept: Vec<usize> = (0..eligible.len()).filter(|&j| (mask >> j) & 1 == 1).map(|j| eligible[j]).collect();
        let consistent = eligible.iter().all(|&b| {
            let blocked = kept.iter().any(|&a| before(a, b) && suppresses(a, b));
            kept.contains(&b) != blocked
        });
        if consistent {
            solutions.push(kept);
        }
    }
    assert_eq!(solutions.len(), 1, "greedy characterization must be unique");
    let mut kept = solutions.pop().unwrap();
    kept.sort_by(|&a, &b| if before(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

fn nms_oracle_check() -> Outcome {
    let mut rng = Rng::new(7);
    let (mut agree, mut idempotent) = (0, 0);
    for instance in 0..100 {
        let dets: Vec<Detection> = (0..10)
            .map(|_| {
                let w = rng.uniform_range(0.1, 0.4);
                let h = rng.uniform_range(0.1, 0.4);
                let bbox = BBox::new(rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7), w, h, rng.below(2)).unwrap();
                let score = (rng.uniform() * 10.0).round() / 10.0;
                Detection::new(if rng.below(4) == 0 { "b" } else { "a" }, bbox, score).unwrap()
            })
            .collect();
        let criterion = if instance % 2 == 0 { Suppression::Iou } else { Suppression::Diou };
        let config = NmsConfig {
            criterion,
            ..NmsConfig::default()
        };
        if nms_indices(&dets, &config).unwrap() == nms_oracle(&dets, &config) {
            agree += 1;
        }
        let once = nms(&dets, &config).unwrap();
        if nms(&once, &config).unwrap() == once {
            idempotent += 1;
        }
    }
    outcome(
        agree == 100 && idempotent == 100,
        format!("matches exhaustive oracle on {agree}/100 instances (IoU and DIoU suppression); idempotent on {idempotent}/100"),
    )
}

fn ciou_checks() -> Outcome {
    let mut rng = Rng::new(8);
    let random_box = |rng: &mut Rng| {
        BBox::new(
            rng.uniform_range(0.1, 0.9),
            rng.uniform_range(0.1, 0.9),
            rng.uniform_range(0.05, 0.5),
            rng.uniform_range(0.05, 0.5),
            0,
        )
        .unwrap()
    };
    let (mut zero_on_identical, mut positive_on_distinct) = (true, true);
    let mut asymmetry = 0.0f64;
    for _ in 0..1000 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        zero_on_identical &= ciou_loss(&a, &a) == 0.0;
        positive_on_distinct &= ciou_loss(&a, &b) > 0.0;
        asymmetry = asymmetry.max((ciou_loss(&a, &b) - ciou_loss(&b, &a)).abs());
        let nudged = BBox::new(a.cx + 1e-6, a.cy, a.w, a.h, 0).unwrap();
        positive_on_distinct &= ciou_loss(&a, &nudged) > 0.0;
    }
    let concentric = ciou_loss(&BBox::new(3.0, 3.0, 4.0, 4.0, 0).unwrap(), &BBox::new(3.0, 3.0, 2.0, 2.0, 0).unwrap());
    outcome(
        zero_on_identical && positive_on_distinct && asymmetry <= 1e-12 && concentric == 0.75,
        format!(
            "zero on identical: {zero_on_identical}, positive on distinct: {positive_on_distinct}, concentric squares {concentric}, \
             max asymmetry {asymmetry:.1e} over 1000 pairs"
        ),
    )
}

fn owlet(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_owlet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OWLET_CONFIG")
        .output()
        .unwrap();
    assert!(out.status.success(), "owlet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path) -> (BTreeMap<String, Vec<u8>>, String) {
    let mut log = String::new();
    log += &owlet(&["--seed", "11", "synth", "--n", "8", "--out", "data", "--size", "64"], dir);
    log += &owlet(&["--seed", "11", "anchors", "--labels", "data", "--k", "4", "--out", "anchors.json"], dir);
    log += &owlet(
        &[
            "--seed", "11", "train-retinex", "--out", "model", "--epochs", "3", "--num-pairs", "4", "--decom-channels", "8",
            "--enhance-channels", "8",
        ],
        dir,
    );
    log += &owlet(&["enhance", "--input", "data/images/000000.png", "--model", "model", "--out", "enhanced.png"], dir);
    let mut detections = String::new();
    for entry in std::fs::read_dir(dir.join("data/labels")).unwrap() {
        let path = entry.unwrap().path();
        let id = path.file_stem().unwrap().to_str().unwrap().to_string();
        for (j, b) in parse_labels(&std::fs::read_to_string(&path).unwrap()).unwrap().iter().enumerate() {
            let score = 1.0 / (2.0 + j as f64);
            detections += &format!("{id} {} {score:.6} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx + 0.01, b.cy, b.w, b.h);
        }
    }
    std::fs::write(dir.join("detections.txt"), detections).unwrap();
    log += &owlet(&["eval", "--gt", "data", "--detections", "detections.txt", "--out", "report.json"], dir);

    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    (files, log)
}

fn end_to_end_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (files_a, log_a) = pipeline(a.path());
    let (files_b, log_b) = pipeline(b.path());
    let differing: Vec<&String> = files_a.keys().filter(|k| files_a.get(*k) != files_b.get(*k)).collect();
    let same = files_a.len() == files_b.len() && differing.is_empty() && log_a == log_b;
    outcome(
        same && files_a.len() > 20,
        format!(
            "synth -> anchors -> train-retinex -> enhance -> eval twice: {} artifacts, differing {:?}, identical stdout: {}",
            files_a.len(),
            differing,
            log_a == log_b
        ),
    )
}

fn round_trips() -> Outcome {
    let mut rng = Rng::new(10);
    let mut labels_exact = true;
    let mut count = 0;
    for _ in 0..200 {
        let boxes: Vec<BBox> = (0..1 + rng.below(8))
            .map(|_| {
                let q = |v: f64| (v * 1e6).round() / 1e6;
                BBox::new(
                    q(rng.uniform()),
                    q(rng.uniform()),
                    q(rng.uniform_range(1e-6, 1.0)),
                    q(rng.uniform_range(1e-6, 1.0)),
                    rng.below(5),
                )
                .unwrap()
            })
            .collect();
        count += boxes.len();
        let text = format_labels(&boxes);
        let parsed = parse_labels(&text).unwrap();
        labels_exact &= parsed == boxes && format_labels(&parsed) == text;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    for (i, ext) in ["png", "ppm"].iter().enumerate() {
        let image = rng.uniform_tensor(&[3, 17, 23], 0.0, 1.0);
        let path = dir.path().join(format!("img{i}.{ext}"));
        save_image(&image, &path).unwrap();
        worst = worst.max(load_image(&path, None).unwrap().max_abs_diff(&image));
    }
    outcome(
        labels_exact && worst <= 1.0 / 255.0,
        format!("{count} labels round-trip exactly: {labels_exact}; image max error {worst:.5} (<= 1/255 = {:.5}) for png and ppm", 1.0 / 255.0),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("retinex training descent", retinex_descent),
        ("k-means++ correctness", kmeans_correctness),
        ("anchor quality", anchor_quality),
        ("metrics oracle", metrics_oracle),
        ("nms oracle", nms_oracle_check),
        ("ciou", ciou_checks),
        ("end-to-end determinism", end_to_end_determinism),
        ("round-trips", round_trips),
    ];
    let mut failed = Vec::new();
    for (n, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "{verdict} criterion {:>2} ({name}): {}", n + 1, result.detail);
        if !result.pass {
            failed.push(n + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
