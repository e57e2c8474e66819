//! Acceptance suite: twelve end-to-end criteria, each checked against an
//! independent oracle or closed form. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpnsd::anchors::{build_anchor_grid, iou, Interval, DEFAULT_ANCHOR_SIZES};
use rpnsd::features::SyntheticSpeakerSpec;
use rpnsd::io::{canonicalize, format_rttm, parse_rttm};
use rpnsd::losses::{
    binary_cls_loss, binary_cls_loss_var, smooth_l1, smooth_l1_loss_var, speaker_cls_loss, speaker_cls_loss_var,
    total_loss, ClassificationTarget, LossBreakdown, SpeakerDistribution, ALPHA_ADAPT, ALPHA_TRAIN,
};
use rpnsd::model::{Model, ModelConfig, TrainExample, Trainer};
use rpnsd::pipeline::{postprocess, Annotation, NumSpeakers, PostprocessConfig, Turn};
use rpnsd::proposals::{
    decode_unclipped, encode, nms, roi_align, roi_align_var, CoordDelta, ProposalSet, RoiAlignConfig,
};
use rpnsd::scoring::{der, der_totals, max_weight_assignment, overlap_stats, DerTotals, OverlapStats, ScoringConfig};
use rpnsd::simulate::{simulate_mixture, SimulationSpec};
use rpnsd::tensor::{grad_check_multi, Conv2dSpec, Graph, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------
// 1. anchor geometry

fn anchor_geometry() -> Outcome {
    let grid = build_anchor_grid(63, &DEFAULT_ANCHOR_SIZES, 16);
    ensure(grid.len() == 567, || format!("{} anchors", grid.len()))?;
    let lens: Vec<f64> = grid.anchors.iter().map(|a| a.length()).collect();
    let min = lens.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = lens.iter().cloned().fold(0.0, f64::max);
    ensure(min == 16.0 && max == 1024.0, || format!("lengths span {min}..{max}"))?;
    for c in 0..63 {
        for (k, &s) in DEFAULT_ANCHOR_SIZES.iter().enumerate() {
            let a = grid.anchors[grid.index(c, k)];
            ensure(
                a.center() == (c as f64 + 0.5) * 16.0 && a.length() == 16.0 * s as f64,
                || format!("anchor ({c},{k}) = {a:?}"),
            )?;
        }
    }
    Ok("567 anchors, lengths 16..1024 frames".into())
}

// ---------------------------------------------------------------------------
// 2. coordinate round trip

fn coordinate_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let s = Interval::from_center(rng.random_range(0.0..1000.0), rng.random_range(1.0..1024.0));
        let r = Interval::from_center(rng.random_range(0.0..1000.0), rng.random_range(1.0..1024.0));
        let back = decode_unclipped(encode(&s, &r), &r);
        worst = worst.max((back.start - s.start).abs()).max((back.end - s.end).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e} frames"))?;
    Ok(format!("1e5 pairs, max error {worst:.2e} frames"))
}

// ---------------------------------------------------------------------------
// 3. NMS oracle

/// Quadratic reference: repeatedly take the best remaining candidate (lowest
/// index on ties) and delete everything overlapping it above the threshold.
fn nms_oracle(ivs: &[Interval], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..ivs.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou(&ivs[i], &ivs[best]) <= thr);
    }
    keep
}

fn nms_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let n = rng.random_range(0..=50);
        let ivs: Vec<Interval> = (0..n)
            .map(|_| {
                let s = rng.random_range(0.0..900.0);
                Interval::new(s, s + rng.random_range(1.0..200.0)).unwrap()
            })
            .collect();
        // coarse scores so that ties occur
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let thr = [0.3, 0.5, 0.7][trial % 3];
        let got = nms(&ivs, &scores, thr);
        let want = nms_oracle(&ivs, &scores, thr);
        ensure(got == want, || format!("trial {trial}: {got:?} vs {want:?}"))?;
    }
    Ok("1000 random sets identical".into())
}

// ---------------------------------------------------------------------------
// 4. RoIAlign oracle

/// Bilinear value at continuous `(y, x)` with cell centres at `i + 0.5`,
/// clamped at the borders.
fn bilinear(m: &[f64], f: usize, t: usize, y: f64, x: f64) -> f64 {
    let lerp_idx = |p: f64, n: usize| {
        let u = (p - 0.5).max(0.0).min((n - 1) as f64);
        let i = u.floor() as usize;
        (i, (i + 1).min(n - 1), u - i as f64)
    };
    let (y0, y1, fy) = lerp_idx(y, f);
    let (x0, x1, fx) = lerp_idx(x, t);
    let v = |a: usize, b: usize| m[a * t + b];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// Dense average of the bilinear surface over every bin (64×64 midpoints).
fn roi_oracle(map: &Tensor, roi: &Interval, n: usize) -> Vec<f64> {
    let (c, f, t) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let dense = 64;
    let (bh, bw) = (f as f64 / n as f64, roi.length() / n as f64);
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        let m = &map.data()[ch * f * t..(ch + 1) * f * t];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for i in 0..dense {
                    for j in 0..dense {
                        let y = (a as f64 + (i as f64 + 0.5) / dense as f64) * bh;
                        let x = roi.start + (b as f64 + (j as f64 + 0.5) / dense as f64) * bw;
                        acc += bilinear(m, f, t, y, x);
                    }
                }
                out[(ch * n + a) * n + b] = acc / (dense * dense) as f64;
            }
        }
    }
    out
}

fn roi_align_oracle() -> Outcome {
    let cfg = RoiAlignConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (c, f, t) = (rng.random_range(1..4), rng.random_range(1..=7), rng.random_range(8..40));
        let map = uniform(&[c, f, t], 1.0, 2.0, &mut rng);
        let len = rng.random_range(0.5..7.0);
        let start = rng.random_range(0.0..(t as f64 - len));
        let roi = Interval::new(start, start + len).unwrap();
        let got = roi_align(&map, &roi, &cfg).unwrap();
        let want = roi_oracle(&map, &roi, cfg.bins_per_axis);
        let num: f64 = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    ensure(worst <= 0.02, || format!("relative error {worst:.4}"))?;

    // constant and linear maps are reproduced exactly
    let mut exact: f64 = 0.0;
    for k in 0..20 {
        let (f, t) = (14, 30);
        let v = rng.random_range(-3.0..3.0);
        let constant = Tensor::full(&[2, f, t], v);
        let start = rng.random_range(0.0..20.0);
        let roi = Interval::new(start, start + rng.random_range(0.1..9.0)).unwrap();
        for &x in roi_align(&constant, &roi, &cfg).unwrap().data() {
            exact = exact.max((x - v).abs());
        }
        // linear surface; the RoI stays between the first and last cell centres
        let (a, by, bx) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let lin = Tensor::from_fn(&[1, f, t], |i| a + by * (i / t) as f64 + bx * (i % t) as f64);
        let start = rng.random_range(0.5..20.0);
        let roi = Interval::new(start, (start + rng.random_range(0.1..9.0)).min(t as f64 - 0.5)).unwrap();
        let out = roi_align(&lin, &roi, &cfg).unwrap();
        let n = cfg.bins_per_axis;
        for r in 0..n {
            for col in 0..n {
                let yc = (r as f64 + 0.5) * f as f64 / n as f64;
                let xc = roi.start + (col as f64 + 0.5) * roi.length() / n as f64;
                let want = a + by * (yc - 0.5) + bx * (xc - 0.5);
                exact = exact.max((out.data()[r * n + col] - want).abs());
            }
        }
        let _ = k;
    }
    ensure(exact <= 1e-9, || format!("constant/linear error {exact:e}"))?;
    Ok(format!(
        "100 pairs, max relative L2 error {:.3}%; constant/linear error {exact:.1e}",
        100.0 * worst
    ))
}

// ---------------------------------------------------------------------------
// 5. gradient suite

const EPS: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;
const POINTS: usize = 20;

/// Checks `f` at `POINTS` random input draws away from kinks; returns the
/// worst relative error.
fn check_op<F, D>(name: &str, f: F, mut draw: D, rng: &mut ChaCha8Rng) -> Result<f64, String>
where
    F: Fn(&mut Graph, &[Var]) -> rpnsd::tensor::Result<Var>,
    D: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
{
    let mut worst: f64 = 0.0;
    let (mut accepted, mut tries) = (0, 0);
    while accepted < POINTS {
        tries += 1;
        if tries > 50 * POINTS {
            return Err(format!("{name}: could not find {POINTS} points away from kinks"));
        }
        let inputs = draw(rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&mut g, &vars).map_err(|e| format!("{name}: {e}"))?;
        if g.kink_distance() < KINK_MARGIN {
            continue;
        }
        accepted += 1;
        let err = grad_check_multi(&f, &inputs, EPS).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(err);
    }
    if worst > 1e-4 {
        return Err(format!("{name}: relative error {worst:e}"));
    }
    Ok(worst)
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn weighted(g: &mut Graph, out: Var, weights: &Tensor) -> rpnsd::tensor::Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = Vec::new();
    let mut run = |name: &str, r: Result<f64, String>| -> Result<(), String> {
        report.push(format!("{name} {:.1e}", r.clone()?));
        r.map(|_| ())
    };

    let w_conv = uniform(&[3, 3, 6], -1.0, 1.0, &mut rng);
    run(
        "conv2d",
        check_op(
            "conv2d",
            |g, v| {
                let spec = Conv2dSpec {
                    stride: (1, 2),
                    padding: (1, 2),
                    dilation: (2, 1),
                };
                let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                weighted(g, y, &w_conv)
            },
            |r| {
                vec![
                    uniform(&[2, 5, 9], -1.0, 1.0, r),
                    uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
                    uniform(&[3], -1.0, 1.0, r),
                ]
            },
            &mut rng,
        ),
    )?;
    let w_lin = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    run(
        "linear",
        check_op(
            "linear",
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted(g, y, &w_lin)
            },
            |r| {
                vec![
                    uniform(&[4, 5], -1.0, 1.0, r),
                    uniform(&[3, 5], -1.0, 1.0, r),
                    uniform(&[3], -1.0, 1.0, r),
                ]
            },
            &mut rng,
        ),
    )?;
    let w6 = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let x6 = |r: &mut ChaCha8Rng| vec![uniform(&[2, 3], -2.0, 2.0, r)];
    let x66 = |r: &mut ChaCha8Rng| vec![uniform(&[2, 3], -2.0, 2.0, r), uniform(&[2, 3], -2.0, 2.0, r)];
    run(
        "relu",
        check_op(
            "relu",
            |g, v| {
                let y = g.relu(v[0])?;
                weighted(g, y, &w6)
            },
            x6,
            &mut rng,
        ),
    )?;
    run(
        "sigmoid",
        check_op(
            "sigmoid",
            |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted(g, y, &w6)
            },
            x6,
            &mut rng,
        ),
    )?;
    run(
        "scale",
        check_op(
            "scale",
            |g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted(g, y, &w6)
            },
            x6,
            &mut rng,
        ),
    )?;
    run(
        "add",
        check_op(
            "add",
            |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, &w6)
            },
            x66,
            &mut rng,
        ),
    )?;
    run(
        "sub",
        check_op(
            "sub",
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, &w6)
            },
            x66,
            &mut rng,
        ),
    )?;
    run(
        "mul",
        check_op(
            "mul",
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, &w6)
            },
            x66,
            &mut rng,
        ),
    )?;
    run(
        "softmax",
        check_op(
            "softmax",
            |g, v| {
                let y = g.softmax(v[0])?;
                weighted(g, y, &w6)
            },
            x6,
            &mut rng,
        ),
    )?;
    let w_pool = uniform(&[2, 4], -1.0, 1.0, &mut rng);
    run(
        "mean_pool",
        check_op(
            "mean_pool",
            |g, v| {
                let y = g.mean_pool(v[0], 1)?;
                weighted(g, y, &w_pool)
            },
            |r| vec![uniform(&[2, 3, 4], -1.0, 1.0, r)],
            &mut rng,
        ),
    )?;
    run("sum", check_op("sum", |g, v| g.sum(v[0]), x6, &mut rng))?;
    run("mean", check_op("mean", |g, v| g.mean(v[0]), x6, &mut rng))?;
    let w_t = uniform(&[3, 2], -1.0, 1.0, &mut rng);
    run(
        "transpose",
        check_op(
            "transpose",
            |g, v| {
                let y = g.transpose(v[0])?;
                weighted(g, y, &w_t)
            },
            x6,
            &mut rng,
        ),
    )?;
    run(
        "reshape",
        check_op(
            "reshape",
            |g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                weighted(g, y, &w_t)
            },
            x6,
            &mut rng,
        ),
    )?;
    let w_gather = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    run(
        "gather_rows",
        check_op(
            "gather_rows",
            |g, v| {
                let y = g.gather_rows(v[0], &[1, 0, 1, 1])?;
                weighted(g, y, &w_gather)
            },
            x6,
            &mut rng,
        ),
    )?;
    let rois = [Interval::new(0.3, 4.1).unwrap(), Interval::new(2.0, 9.5).unwrap()];
    let cfg = RoiAlignConfig::default();
    let w_roi = uniform(&[2, 2, 7, 7], -1.0, 1.0, &mut rng);
    run(
        "roi_align",
        check_op(
            "roi_align",
            |g, v| {
                let y = roi_align_var(g, v[0], &rois, &cfg)?;
                weighted(g, y, &w_roi)
            },
            |r| vec![uniform(&[2, 3, 10], -1.0, 1.0, r)],
            &mut rng,
        ),
    )?;
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0];
    run(
        "binary_cls_loss",
        check_op(
            "binary_cls_loss",
            |g, v| binary_cls_loss_var(g, v[0], &targets, 5.0),
            |r| vec![uniform(&[5, 1], 0.05, 0.95, r)],
            &mut rng,
        ),
    )?;
    let deltas = [
        CoordDelta { dx: 0.2, dw: -0.4 },
        CoordDelta { dx: -1.0, dw: 0.5 },
        CoordDelta { dx: 0.0, dw: 2.0 },
    ];
    run(
        "smooth_l1",
        check_op(
            "smooth_l1",
            |g, v| smooth_l1_loss_var(g, v[0], &deltas, 4.0),
            |r| vec![uniform(&[3, 2], -3.0, 3.0, r)],
            &mut rng,
        ),
    )?;
    run(
        "speaker_cls_loss",
        check_op(
            "speaker_cls_loss",
            |g, v| {
                let p = g.softmax(v[0])?;
                speaker_cls_loss_var(g, p, &[2, 0, 1], 3.0)
            },
            |r| vec![uniform(&[3, 4], -2.0, 2.0, r)],
            &mut rng,
        ),
    )?;

    // full micro-model with frozen proposals and samples
    let chunk_rng = &mut ChaCha8Rng::seed_from_u64(55);
    let chunk = rpnsd::features::FeatureChunk::new(uniform(&[4, 64], 0.0, 2.0, chunk_rng), 0.01, "micro");
    let truth = [
        rpnsd::anchors::FrameTurn {
            interval: Interval::new(4.0, 20.0).unwrap(),
            speaker: 0,
        },
        rpnsd::anchors::FrameTurn {
            interval: Interval::new(16.0, 50.0).unwrap(),
            speaker: 2,
        },
    ];
    let mut worst_model: f64 = 0.0;
    let (mut accepted, mut seed) = (0, 0);
    let mut params_checked = 0;
    while accepted < POINTS {
        seed += 1;
        if seed > 50 * POINTS as u64 {
            return Err("micro-model: too few points away from kinks".into());
        }
        let model = Model::new(ModelConfig {
            seed,
            ..ModelConfig::micro()
        })
        .map_err(|e| e.to_string())?;
        let plan = model
            .plan(&chunk, &truth, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let vars: Vec<Var> = model.params.tensors.iter().map(|t| g.constant(t.clone())).collect();
        model
            .plan_loss(&mut g, &vars, &chunk, &plan)
            .map_err(|e| e.to_string())?;
        if g.kink_distance() < KINK_MARGIN || plan.roi_fg.is_empty() {
            continue;
        }
        accepted += 1;
        params_checked = model.params.count();
        let err = grad_check_multi(|g, v| model.plan_loss(g, v, &chunk, &plan), &model.params.tensors, EPS)
            .map_err(|e| e.to_string())?;
        worst_model = worst_model.max(err);
    }
    ensure(worst_model <= 1e-4, || {
        format!("micro-model relative error {worst_model:e}")
    })?;
    report.push(format!("micro-model({params_checked} params) {worst_model:.1e}"));
    Ok(format!(
        "{} checks x {POINTS} points: {}",
        report.len(),
        report.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 6. loss closed forms

fn loss_closed_forms() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    for p_star in [0.0, 1.0] {
        let v = binary_cls_loss(ClassificationTarget { p: 0.5, p_star });
        ensure((v - ln2).abs() <= 1e-12, || format!("bce(0.5, {p_star}) = {v}"))?;
    }
    let z = CoordDelta::default();
    let a = smooth_l1(CoordDelta { dx: 0.5, dw: 0.0 }, z);
    let b = smooth_l1(CoordDelta { dx: 0.0, dw: 2.0 }, z);
    ensure(a == 0.125 && b == 1.5, || format!("smooth-L1 0.5 -> {a}, 2 -> {b}"))?;
    for k in [2usize, 3, 7, 10] {
        let v = speaker_cls_loss(&SpeakerDistribution::one_hot(vec![1.0 / k as f64; k], 0));
        ensure((v - (k as f64).ln()).abs() <= 1e-12, || {
            format!("uniform CE over {k} = {v}")
        })?;
    }
    let parts = |alpha| LossBreakdown {
        rpn_cls: 0.3,
        rpn_reg: 0.2,
        rcnn_cls: 0.4,
        rcnn_reg: 0.1,
        spk_cls: 1.7,
        alpha,
    };
    let (l1, l01) = (total_loss(&parts(ALPHA_TRAIN)), total_loss(&parts(ALPHA_ADAPT)));
    ensure(ALPHA_TRAIN == 1.0 && ALPHA_ADAPT == 0.1, || "alpha constants".into())?;
    ensure(
        (l1 - (1.0 + 1.7)).abs() <= 1e-12 && (l01 - (1.0 + 0.17)).abs() <= 1e-12,
        || format!("{l1} {l01}"),
    )?;
    let slope = (l1 - l01) / (ALPHA_TRAIN - ALPHA_ADAPT);
    ensure((slope - 1.7).abs() <= 1e-12, || format!("slope {slope}"))?;
    Ok("bce log2, smooth-L1 0.125/1.5, CE log K, total linear in alpha".into())
}

// ---------------------------------------------------------------------------
// 7. DER oracle

fn random_annotation(rng: &mut ChaCha8Rng, name: &str, prefix: &str, span_ms: i64) -> Annotation {
    let speakers = rng.random_range(1..=4);
    let mut ann = Annotation::new(name);
    for _ in 0..rng.random_range(1..12) {
        let s = rng.random_range(0..span_ms - 10);
        let e = (s + rng.random_range(10..3000)).min(span_ms);
        ann.push(
            format!("{prefix}{}", rng.random_range(0..speakers)),
            s as f64 / 1000.0,
            e as f64 / 1000.0,
        );
    }
    ann
}

/// Independent brute force: explicit per-frame speaker sets on the 1 ms grid
/// and an exhaustive search over speaker mappings.
fn der_oracle(reference: &Annotation, hyp: &Annotation, collar: f64, score_overlap: bool) -> (f64, f64) {
    let step = 0.001;
    let horizon = reference.end().max(hyp.end()) + collar + 0.01;
    let frames = (horizon / step).ceil() as usize;
    let rs: Vec<String> = reference.speakers();
    let hs: Vec<String> = hyp.speakers();
    let active = |ann: &Annotation, names: &[String], c: f64| -> Vec<usize> {
        (0..names.len())
            .filter(|&k| {
                ann.turns
                    .iter()
                    .any(|t| t.speaker == names[k] && t.interval.start <= c && c < t.interval.end)
            })
            .collect()
    };
    let ref_active: Vec<Vec<usize>> = (0..frames).map(|k| active(reference, &rs, (k as f64 + 0.5) * step)).collect();
    // boundaries are the grid points where some reference speaker switches on or off
    let boundaries: Vec<f64> = (0..=frames)
        .filter(|&k| {
            let before = if k == 0 { &[][..] } else { &ref_active[k - 1][..] };
            let after = if k == frames { &[][..] } else { &ref_active[k][..] };
            before != after
        })
        .map(|k| k as f64 * step)
        .collect();
    let mut scored: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (k, r) in ref_active.into_iter().enumerate() {
        let c = (k as f64 + 0.5) * step;
        let near_boundary = collar > 0.0 && boundaries.iter().any(|&b| b - collar <= c && c < b + collar);
        if near_boundary || (!score_overlap && r.len() >= 2) {
            continue;
        }
        scored.push((r, active(hyp, &hs, c)));
    }
    // every injective map from hyp speakers to ref speakers (or none)
    let mut best_correct = 0usize;
    let mut assign = vec![usize::MAX; hs.len()];
    fn search(
        h: usize,
        assign: &mut Vec<usize>,
        used: &mut Vec<bool>,
        scored: &[(Vec<usize>, Vec<usize>)],
        best: &mut usize,
    ) {
        if h == assign.len() {
            let correct = scored
                .iter()
                .map(|(r, hy)| {
                    hy.iter()
                        .filter(|&&x| assign[x] != usize::MAX && r.contains(&assign[x]))
                        .count()
                })
                .sum();
            *best = (*best).max(correct);
            return;
        }
        assign[h] = usize::MAX;
        search(h + 1, assign, used, scored, best);
        for r in 0..used.len() {
            if !used[r] {
                used[r] = true;
                assign[h] = r;
                search(h + 1, assign, used, scored, best);
                used[r] = false;
            }
        }
        assign[h] = usize::MAX;
    }
    let mut used = vec![false; rs.len()];
    search(0, &mut assign, &mut used, &scored, &mut best_correct);
    let (mut total, mut err) = (0usize, 0usize);
    for (r, h) in &scored {
        total += r.len();
        err += r.len().max(h.len());
    }
    let err = err - best_correct;
    (err as f64 / total.max(1) as f64, total as f64 * step)
}

fn der_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for i in 0..200 {
        let r = random_annotation(&mut rng, "rec", "r", 8000);
        let h = random_annotation(&mut rng, "rec", "h", 8000);
        for collar in [0.0, 0.1, 0.25] {
            for overlap in [true, false] {
                let cfg = ScoringConfig::with_collar(collar, overlap);
                let (want, scored) = der_oracle(&r, &h, collar, overlap);
                match der(&r, &h, &cfg) {
                    Ok(got) => {
                        worst = worst.max((got.der - want).abs());
                        ensure((got.der - want).abs() <= 5e-4, || {
                            format!("pair {i} collar {collar} overlap {overlap}: {} vs {want}", got.der)
                        })?;
                        compared += 1;
                    }
                    Err(_) => ensure(scored == 0.0, || format!("pair {i}: scorer refused a scorable pair"))?,
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let x = random_annotation(&mut rng, "rec", "s", 20000);
        let same = der(&x, &x, &ScoringConfig::default()).unwrap();
        ensure(same.der == 0.0, || format!("DER(x, x) = {}", same.der))?;
        let empty = der(&x, &Annotation::new("rec"), &ScoringConfig::default()).unwrap();
        ensure(empty.der == 1.0 && empty.miss == 1.0, || {
            format!("DER(x, {{}}) = {:?}", empty)
        })?;
    }
    Ok(format!(
        "{compared} scored comparisons, max |diff| {:.2e}; DER(x,x)=0, DER(x,{{}})=100% miss",
        worst
    ))
}

// ---------------------------------------------------------------------------
// 8. assignment oracle

fn best_by_permutation(w: &[Vec<f64>]) -> f64 {
    let cols = w.first().map_or(0, Vec::len);
    fn rec(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == w.len() {
            *best = best.max(acc);
            return;
        }
        rec(w, row + 1, used, acc, best);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                rec(w, row + 1, used, acc + w[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = 0.0;
    rec(w, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn assignment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..500 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let w: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if rng.random_range(0..4) == 0 {
                            0.0
                        } else {
                            rng.random_range(0..1000) as f64 / 10.0
                        }
                    })
                    .collect()
            })
            .collect();
        let got = max_weight_assignment(&w);
        let mut seen = vec![false; m];
        let mut total = 0.0;
        for (r, c) in got.iter().enumerate() {
            if let Some(c) = *c {
                ensure(!seen[c], || format!("trial {trial}: column {c} used twice"))?;
                seen[c] = true;
                total += w[r][c];
            }
        }
        let best = best_by_permutation(&w);
        ensure((total - best).abs() <= 1e-9, || {
            format!("trial {trial}: {total} vs {best} on {w:?}")
        })?;
    }
    Ok("500 random matrices up to 6x6 optimal".into())
}

// ---------------------------------------------------------------------------
// 9. oracle pipeline

fn oracle_pipeline() -> Outcome {
    let shift = 0.01;
    let spec = SimulationSpec::synthetic(SyntheticSpeakerSpec::random("s", 6, 4, 1.0, 9), 2.0, 30, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut totals = DerTotals::default();
    for i in 0..30 {
        let mut spec_i = spec.clone();
        spec_i.num_speakers = 2 + i % 3;
        spec_i.duration_s = 30.0;
        let reference = canonicalize(&simulate_mixture(&spec_i, i).map_err(|e| e.to_string())?.annotation);
        let names = reference.speakers();
        let centres: Vec<Vec<f64>> = (0..names.len())
            .map(|k| (0..8).map(|d| if d == k { 10.0 } else { 0.0 }).collect())
            .collect();
        let mut set = ProposalSet::default();
        let mut emb = Vec::new();
        for t in &reference.turns {
            let k = names.iter().position(|n| *n == t.speaker).unwrap();
            set.intervals.push(t.interval.scaled(1.0 / shift));
            set.scores.push(1.0);
            emb.push(centres[k].iter().map(|c| c + rng.random_range(-0.1..0.1)).collect());
        }
        set.embeddings = Some(emb);
        let cfg = PostprocessConfig {
            num_speakers: NumSpeakers::Fixed(names.len()),
            ..Default::default()
        };
        let out = postprocess(&reference.recording, &[set], shift, &cfg).map_err(|e| e.to_string())?;
        let t = der_totals(&reference, &out.annotation, &ScoringConfig::default()).map_err(|e| e.to_string())?;
        totals.add(&t);
    }
    let r = totals.report();
    ensure(r.der <= 0.005, || format!("DER {:.4}%", 100.0 * r.der))?;
    Ok(format!("30 recordings, DER {:.4}%", 100.0 * r.der))
}

// ---------------------------------------------------------------------------
// 10. simulation trend

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn simulation_trend() -> Outcome {
    let inventory = SyntheticSpeakerSpec::random("s", 12, 2, 1.0, 10);
    let mut medians = Vec::new();
    let mut gap_report = Vec::new();
    for beta in [2.0, 3.0, 5.0] {
        let mut ratios = Vec::new();
        let mut gaps = Vec::new();
        for corpus in 0..20u64 {
            let mut spec = SimulationSpec::synthetic(inventory.clone(), beta, 30, 1000 + corpus);
            spec.duration_s = 90.0;
            spec.frame_shift_s = 0.1;
            let mut parts = Vec::new();
            for i in 0..spec.num_mixtures {
                let m = simulate_mixture(&spec, i).map_err(|e| e.to_string())?;
                parts.push(overlap_stats(&m.annotation));
                gaps.extend(m.trace.gaps.iter().flatten().copied());
            }
            ratios.push(OverlapStats::combine(&parts).overlap_ratio);
        }
        medians.push(median(ratios));
        ensure(gaps.len() >= 10_000, || {
            format!("only {} gaps at beta {beta}", gaps.len())
        })?;
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        ensure((mean - beta).abs() <= 0.05 * beta, || {
            format!("beta {beta}: mean gap {mean:.3}")
        })?;
        gap_report.push(format!("{mean:.3}"));
    }
    ensure(medians[0] > medians[1] && medians[1] > medians[2], || {
        format!("medians {medians:?}")
    })?;
    Ok(format!(
        "median overlap {:.1}% / {:.1}% / {:.1}% for beta 2/3/5; mean gaps {}",
        100.0 * medians[0],
        100.0 * medians[1],
        100.0 * medians[2],
        gap_report.join(" / ")
    ))
}

// ---------------------------------------------------------------------------
// 11. training smoke test

// Calibrated once: lr 0.01 for 1000 steps, then 0.001 until the end.
const SMOKE_SEED: u64 = 1;
const SMOKE_STEPS: u64 = 1500;
const SMOKE_BATCH: usize = 8;
const SMOKE_LR: f64 = 0.01;
const SMOKE_DECAY_AT: u64 = 1000;
const SMOKE_HELD_OUT: usize = 100;

fn training_smoke() -> Outcome {
    let started = Instant::now();
    let inventory = SyntheticSpeakerSpec::random("s", 10, 32, 1.0, 42);
    let names: Vec<String> = inventory.speakers.iter().map(|s| s.name.clone()).collect();
    let train_spec = SimulationSpec::synthetic(inventory.clone(), 2.0, 200, 1);
    let test_spec = SimulationSpec::synthetic(inventory, 2.0, SMOKE_HELD_OUT, 2);
    let train: Vec<TrainExample> = (0..200)
        .map(|i| {
            let m = simulate_mixture(&train_spec, i).unwrap();
            TrainExample::new(m.features, &m.annotation, &names).unwrap()
        })
        .collect();
    let test: Vec<_> = (0..SMOKE_HELD_OUT)
        .map(|i| simulate_mixture(&test_spec, i).unwrap())
        .collect();
    let cfg = ModelConfig {
        speakers: names,
        lr: SMOKE_LR,
        seed: SMOKE_SEED,
        decay_steps: vec![SMOKE_DECAY_AT],
        ..Default::default()
    };
    let mut trainer = Trainer::new(Model::new(cfg).map_err(|e| e.to_string())?);
    let eval = |m: &Model| -> Result<f64, String> {
        let pp = PostprocessConfig {
            num_speakers: NumSpeakers::Fixed(2),
            ..Default::default()
        };
        let mut tot = DerTotals::default();
        for mix in &test {
            let out = m.diarize(&mix.features, &pp).map_err(|e| e.to_string())?;
            let t = der_totals(&mix.annotation, &out.annotation, &ScoringConfig::with_collar(0.0, true))
                .map_err(|e| e.to_string())?;
            tot.add(&t);
        }
        Ok(tot.report().der)
    };
    let untrained = eval(&trainer.model)?;
    let mut windows = Vec::new();
    let mut acc = Vec::new();
    for s in 0..SMOKE_STEPS {
        let batch: Vec<TrainExample> = (0..SMOKE_BATCH)
            .map(|k| train[(s as usize * SMOKE_BATCH + k) % train.len()].clone())
            .collect();
        acc.push(trainer.train_step(&batch).map_err(|e| e.to_string())?.total());
        if acc.len() == 50 {
            windows.push(acc.iter().sum::<f64>() / 50.0);
            acc.clear();
        }
    }
    let trained = eval(&trainer.model)?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let summary = format!(
        "untrained DER {:.1}%, trained DER {:.1}% after {SMOKE_STEPS} steps; window losses {}; {minutes:.1} min",
        100.0 * untrained,
        100.0 * trained,
        windows.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" ")
    );
    ensure(trained <= 0.20, || format!("held-out DER above 20%: {summary}"))?;
    ensure(trained <= 0.5 * untrained, || {
        format!("not half the untrained DER: {summary}")
    })?;
    ensure(windows.windows(2).all(|w| w[1] < w[0]), || {
        format!("window losses not strictly decreasing: {summary}")
    })?;
    ensure(minutes <= 30.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 12. persistence

fn persistence() -> Outcome {
    let dir = std::env::temp_dir().join(format!("rpnsd-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let chunk = rpnsd::features::FeatureChunk::new(uniform(&[4, 64], 0.0, 2.0, &mut rng), 0.01, "probe");
    let ann = Annotation::with_turns("probe", vec![Turn::new("a", 0.05, 0.3), Turn::new("b", 0.2, 0.6)]);
    let speakers: Vec<String> = ModelConfig::micro().speakers;
    let ex = TrainExample::new(chunk.clone(), &ann, &speakers).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(Model::new(ModelConfig::micro()).map_err(|e| e.to_string())?);
    for _ in 0..3 {
        trainer
            .train_step(std::slice::from_ref(&ex))
            .map_err(|e| e.to_string())?;
    }
    let path = dir.join("model.ckpt");
    trainer.save(&path).map_err(|e| e.to_string())?;
    let back = Trainer::load(&path).map_err(|e| e.to_string())?;
    let (a, b) = (
        trainer.model.predict(&chunk).unwrap(),
        back.model.predict(&chunk).unwrap(),
    );
    let bits = |p: &ProposalSet| -> Vec<u64> {
        let mut v: Vec<u64> = p
            .intervals
            .iter()
            .flat_map(|i| [i.start.to_bits(), i.end.to_bits()])
            .collect();
        v.extend(p.scores.iter().map(|s| s.to_bits()));
        v.extend(p.embeddings.iter().flatten().flatten().map(|e| e.to_bits()));
        v
    };
    ensure(
        bits(&a.proposals) == bits(&b.proposals) && !a.proposals.is_empty(),
        || "forward outputs differ".into(),
    )?;
    ensure(back.to_bytes() == trainer.to_bytes(), || {
        "re-serialized checkpoint differs".into()
    })?;

    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let mut anns = BTreeMap::new();
        for r in 0..3 {
            let name = format!("rec{r}");
            let mut x = Annotation::new(name.clone());
            for _ in 0..rng.random_range(0..10) {
                let s = rng.random_range(0.0..100.0);
                x.push(
                    format!("spk{}", rng.random_range(0..3)),
                    s,
                    s + rng.random_range(0.01..5.0),
                );
            }
            anns.insert(name, canonicalize(&x));
        }
        let text = format_rttm(anns.values());
        let parsed = parse_rttm(&text, std::path::Path::new("mem")).map_err(|e| e.to_string())?;
        for (name, want) in &anns {
            if want.turns.is_empty() {
                ensure(!parsed.contains_key(name), || "empty annotation produced lines".into())?;
                continue;
            }
            let got = &parsed[name];
            ensure(got.turns.len() == want.turns.len(), || {
                format!("case {i}: turn count changed")
            })?;
            for (g, w) in got.turns.iter().zip(&want.turns) {
                ensure(g.speaker == w.speaker, || format!("case {i}: speaker changed"))?;
                worst = worst
                    .max((g.interval.start - w.interval.start).abs())
                    .max((g.interval.end - w.interval.end).abs());
            }
        }
    }
    ensure(worst <= 1e-3 + 1e-9, || format!("RTTM boundary error {worst}"))?;
    std::fs::remove_dir_all(&dir).ok();
    Ok(format!(
        "checkpoint forward bit-identical; RTTM max boundary error {worst:.1e} s"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("anchor geometry", anchor_geometry),
        ("coordinate round trip", coordinate_round_trip),
        ("NMS oracle", nms_equivalence),
        ("RoIAlign oracle", roi_align_oracle),
        ("gradient suite", gradient_suite),
        ("loss closed forms", loss_closed_forms),
        ("DER oracle", der_oracle_check),
        ("assignment oracle", assignment_oracle),
        ("oracle pipeline", oracle_pipeline),
        ("simulation trend", simulation_trend),
        ("training smoke test", training_smoke),
        ("persistence", persistence),
    ];
    let only: Option<usize> = std::env::var("RPNSD_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
