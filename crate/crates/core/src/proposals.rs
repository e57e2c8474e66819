//! Segment coordinate encoding, proposal filtering with NMS, and 1-D RoIAlign.

use crate::anchors::{iou, Interval};
use crate::tensor::{Backward, BackwardCtx, Graph, Result, Tensor, TensorError, Var};

/// Regression target relative to a reference segment: centre offset in
/// reference lengths and log length ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoordDelta {
    pub dx: f64,
    pub dw: f64,
}

pub fn encode(segment: &Interval, reference: &Interval) -> CoordDelta {
    let wa = reference.length();
    CoordDelta {
        dx: (segment.center() - reference.center()) / wa,
        dw: (segment.length() / wa).ln(),
    }
}

/// Exact inverse of [`encode`], without clipping.
pub fn decode_unclipped(delta: CoordDelta, reference: &Interval) -> Interval {
    let wa = reference.length();
    Interval::from_center(reference.center() + delta.dx * wa, wa * delta.dw.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    OutsideClip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub interval: Interval,
    /// Clipped result spans one frame or less.
    pub degenerate: bool,
}

/// Decodes then intersects with `clip_to`.
pub fn decode(delta: CoordDelta, reference: &Interval, clip_to: &Interval) -> std::result::Result<Decoded, DropReason> {
    let raw = decode_unclipped(delta, reference);
    let interval = raw.intersect(clip_to).ok_or(DropReason::OutsideClip)?;
    Ok(Decoded {
        interval,
        degenerate: interval.length() <= 1.0,
    })
}

/// Scored candidate segments for one chunk, in chunk-relative frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub intervals: Vec<Interval>,
    pub scores: Vec<f64>,
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub chunk_origin: f64,
}

impl ProposalSet {
    pub fn new(intervals: Vec<Interval>, scores: Vec<f64>) -> Self {
        debug_assert_eq!(intervals.len(), scores.len());
        ProposalSet {
            intervals,
            scores,
            embeddings: None,
            chunk_origin: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> ProposalSet {
        ProposalSet {
            intervals: indices.iter().map(|&i| self.intervals[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            embeddings: self
                .embeddings
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i].clone()).collect()),
            chunk_origin: self.chunk_origin,
        }
    }
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices by descending score.
pub fn nms(intervals: &[Interval], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = rank_by_score(scores);
    let mut suppressed = vec![false; intervals.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&intervals[i], &intervals[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Top-`pre_nms_top_n` by score, NMS, then the first `post_nms_top_n` survivors.
/// Returns indices into the input.
pub fn filter_indices(
    intervals: &[Interval],
    scores: &[f64],
    pre_nms_top_n: usize,
    nms_threshold: f64,
    post_nms_top_n: usize,
) -> Vec<usize> {
    let mut top = rank_by_score(scores);
    top.truncate(pre_nms_top_n);
    let sub_iv: Vec<Interval> = top.iter().map(|&i| intervals[i]).collect();
    let sub_sc: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    let mut kept: Vec<usize> = nms(&sub_iv, &sub_sc, nms_threshold)
        .into_iter()
        .map(|k| top[k])
        .collect();
    kept.truncate(post_nms_top_n);
    kept
}

pub fn filter_proposals(
    set: &ProposalSet,
    pre_nms_top_n: usize,
    nms_threshold: f64,
    post_nms_top_n: usize,
) -> ProposalSet {
    let kept = filter_indices(
        &set.intervals,
        &set.scores,
        pre_nms_top_n,
        nms_threshold,
        post_nms_top_n,
    );
    set.select(&kept)
}

// ---------------------------------------------------------------------------
// RoIAlign

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiAlignConfig {
    /// Output grid is `bins_per_axis × bins_per_axis`.
    pub bins_per_axis: usize,
    /// Sample points per bin; must be a perfect square (4 = 2×2).
    pub samples_per_bin: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            bins_per_axis: 7,
            samples_per_bin: 4,
        }
    }
}

impl RoiAlignConfig {
    fn samples_per_axis(&self) -> Option<usize> {
        let s = (self.samples_per_bin as f64).sqrt().round() as usize;
        (s >= 1 && s * s == self.samples_per_bin).then_some(s)
    }
}

/// Sparse interpolation weights along one axis: for every bin, the averaged
/// linear-interpolation weights of its sample points over the grid cells.
fn axis_weights(start: f64, end: f64, cells: usize, bins: usize, samples: usize) -> Vec<Vec<(usize, f64)>> {
    let bin = (end - start) / bins as f64;
    let share = 1.0 / samples as f64;
    (0..bins)
        .map(|b| {
            let mut w: Vec<(usize, f64)> = Vec::with_capacity(2 * samples);
            for s in 0..samples {
                let pos = start + (b as f64 + (s as f64 + 0.5) / samples as f64) * bin;
                // cell i has its centre at i + 0.5; positions outside clamp to the edge
                let u = (pos - 0.5).clamp(0.0, (cells - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(cells - 1);
                let frac = u - i0 as f64;
                for (cell, weight) in [(i0, (1.0 - frac) * share), (i1, frac * share)] {
                    if weight == 0.0 {
                        continue;
                    }
                    match w.iter_mut().find(|(c, _)| *c == cell) {
                        Some(slot) => slot.1 += weight,
                        None => w.push((cell, weight)),
                    }
                }
            }
            w
        })
        .collect()
}

struct RoiPlan {
    freq: Vec<Vec<(usize, f64)>>,
    time: Vec<Vec<(usize, f64)>>,
}

fn plan_roi(shape: &[usize], roi: &Interval, cfg: &RoiAlignConfig) -> Result<RoiPlan> {
    let s = cfg.samples_per_axis().ok_or(TensorError::Invalid {
        op: "roi_align",
        msg: format!("samples_per_bin {} is not a perfect square", cfg.samples_per_bin),
    })?;
    if cfg.bins_per_axis == 0 {
        return Err(TensorError::Invalid {
            op: "roi_align",
            msg: "bins_per_axis must be >= 1".into(),
        });
    }
    if !(roi.length() > 0.0) || !roi.start.is_finite() || !roi.end.is_finite() {
        return Err(TensorError::Invalid {
            op: "roi_align",
            msg: format!("zero-length or non-finite roi {roi:?}"),
        });
    }
    let (f, t) = (shape[1], shape[2]);
    Ok(RoiPlan {
        freq: axis_weights(0.0, f as f64, f, cfg.bins_per_axis, s),
        time: axis_weights(roi.start, roi.end, t, cfg.bins_per_axis, s),
    })
}

fn check_map(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::Shape {
            op: "roi_align",
            expected: "[C, F, T] with non-zero extents".into(),
            found: format!("{shape:?}"),
        });
    }
    Ok(())
}

fn pool_one(map: &[f64], shape: &[usize], plan: &RoiPlan, n: usize, out: &mut [f64]) {
    let (c, f, t) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        let m = &map[ch * f * t..(ch + 1) * f * t];
        for (a, fw) in plan.freq.iter().enumerate() {
            for (b, tw) in plan.time.iter().enumerate() {
                let mut acc = 0.0;
                for &(fi, wf) in fw {
                    let row = &m[fi * t..(fi + 1) * t];
                    for &(ti, wt) in tw {
                        acc += wf * wt * row[ti];
                    }
                }
                out[(ch * n + a) * n + b] = acc;
            }
        }
    }
}

/// Pools the full-height, `roi`-wide region of `map[C,F,T]` into `[C,N,N]`.
/// `roi` is expressed in feature-map timesteps.
pub fn roi_align(map: &Tensor, roi: &Interval, cfg: &RoiAlignConfig) -> Result<Tensor> {
    check_map(map.shape())?;
    let plan = plan_roi(map.shape(), roi, cfg)?;
    let n = cfg.bins_per_axis;
    let mut out = vec![0.0; map.shape()[0] * n * n];
    pool_one(map.data(), map.shape(), &plan, n, &mut out);
    Tensor::new(vec![map.shape()[0], n, n], out)
}

struct RoiAlignOp {
    plans: Vec<RoiPlan>,
    shape: Vec<usize>,
    n: usize,
}

impl Backward for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (c, f, t) = (self.shape[0], self.shape[1], self.shape[2]);
        let n = self.n;
        let per_roi = c * n * n;
        let mut dmap = vec![0.0; c * f * t];
        for (r, plan) in self.plans.iter().enumerate() {
            let g = &ctx.grad_output[r * per_roi..(r + 1) * per_roi];
            for ch in 0..c {
                let dm = &mut dmap[ch * f * t..(ch + 1) * f * t];
                for (a, fw) in plan.freq.iter().enumerate() {
                    for (b, tw) in plan.time.iter().enumerate() {
                        let go = g[(ch * n + a) * n + b];
                        if go == 0.0 {
                            continue;
                        }
                        for &(fi, wf) in fw {
                            for &(ti, wt) in tw {
                                dm[fi * t + ti] += go * wf * wt;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dmap)]
    }
}

/// Graph form of [`roi_align`] over several RoIs: `[C,F,T] → [R,C,N,N]`.
/// RoI coordinates are constants; gradient flows to the map only.
pub fn roi_align_var(g: &mut Graph, map: Var, rois: &[Interval], cfg: &RoiAlignConfig) -> Result<Var> {
    let shape = g.value(map).shape().to_vec();
    check_map(&shape)?;
    let n = cfg.bins_per_axis;
    let plans = rois
        .iter()
        .map(|r| plan_roi(&shape, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let per_roi = shape[0] * n * n;
    let mut out = vec![0.0; rois.len() * per_roi];
    for (plan, chunk) in plans.iter().zip(out.chunks_mut(per_roi.max(1))) {
        pool_one(g.value(map).data(), &shape, plan, n, chunk);
    }
    let output = Tensor::new(vec![rois.len(), shape[0], n, n], out)?;
    g.apply(Box::new(RoiAlignOp { plans, shape, n }), &[map], output)
}
