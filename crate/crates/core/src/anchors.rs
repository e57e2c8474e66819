//! One-dimensional anchors: grid generation, interval IoU, fg/bg target
//! assignment, and minibatch sampling for the detection losses.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Anchor lengths, in timesteps, of the reference configuration.
pub const DEFAULT_ANCHOR_SIZES: [usize; 9] = [1, 2, 4, 8, 16, 24, 32, 48, 64];

/// IoU above which a candidate is foreground.
pub const FG_IOU: f64 = 0.7;
/// IoU below which (against every truth segment) a candidate is background.
pub const BG_IOU: f64 = 0.3;

/// Half-open span `[start, end)`. Units are whatever the caller works in:
/// feature frames for detection, seconds for annotations.
#[derive(Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid interval [{start}, {end})")]
pub struct InvalidInterval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    /// Checked constructor: both ends finite and `end > start`.
    pub fn new(start: f64, end: f64) -> Result<Self, InvalidInterval> {
        if start.is_finite() && end.is_finite() && end > start {
            Ok(Interval { start, end })
        } else {
            Err(InvalidInterval { start, end })
        }
    }

    pub fn from_center(center: f64, length: f64) -> Self {
        Interval {
            start: center - 0.5 * length,
            end: center + 0.5 * length,
        }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn intersection_len(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Overlapping part, if any.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let s = self.start.max(other.start);
        let e = self.end.min(other.end);
        (e > s).then_some(Interval { start: s, end: e })
    }

    pub fn scaled(&self, factor: f64) -> Interval {
        Interval {
            start: self.start * factor,
            end: self.end * factor,
        }
    }

    pub fn shifted(&self, offset: f64) -> Interval {
        Interval {
            start: self.start + offset,
            end: self.end + offset,
        }
    }
}

/// Intersection over union of two intervals.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection_len(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.length() + b.length() - inter;
    (inter / union).min(1.0)
}

/// Fixed anchor layout over a feature map, timestep-major then size.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Interval>,
    pub timesteps: usize,
    pub sizes: Vec<usize>,
    pub frames_per_step: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_step(&self) -> usize {
        self.sizes.len()
    }

    /// Flat index of the anchor at `(timestep, size slot)`.
    pub fn index(&self, step: usize, slot: usize) -> usize {
        step * self.sizes.len() + slot
    }
}

/// Anchors centred at every timestep midpoint `(c + 0.5)·frames_per_step`,
/// each size giving length `size·frames_per_step` frames. Not clipped.
pub fn build_anchor_grid(timesteps: usize, sizes: &[usize], frames_per_step: usize) -> AnchorGrid {
    let fps = frames_per_step as f64;
    let mut anchors = Vec::with_capacity(timesteps * sizes.len());
    for c in 0..timesteps {
        let center = (c as f64 + 0.5) * fps;
        for &s in sizes {
            anchors.push(Interval::from_center(center, s as f64 * fps));
        }
    }
    AnchorGrid {
        anchors,
        timesteps,
        sizes: sizes.to_vec(),
        frames_per_step,
    }
}

/// A ground-truth segment in frame units with a dense speaker index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTurn {
    pub interval: Interval,
    pub speaker: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Fg,
    Bg,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<Label>,
    /// Best-IoU truth index for each candidate (`None` when there is no truth).
    pub matched: Vec<Option<usize>>,
    /// Speaker of the matched truth for fg candidates.
    pub speakers: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl TargetAssignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices(&self, label: Label) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Labels arbitrary candidates against truth with the 0.7/0.3 rule.
///
/// With `force_best`, every candidate attaining a truth segment's highest
/// (non-zero) IoU becomes fg as well, whatever its absolute overlap.
pub fn assign_labels(
    candidates: &[Interval],
    truth: &[FrameTurn],
    fg_iou: f64,
    bg_iou: f64,
    force_best: bool,
) -> TargetAssignment {
    let n = candidates.len();
    let mut out = TargetAssignment {
        labels: vec![Label::Bg; n],
        matched: vec![None; n],
        speakers: vec![None; n],
        max_iou: vec![0.0; n],
    };
    if truth.is_empty() {
        return out;
    }
    let mut best_per_truth = vec![0.0f64; truth.len()];
    let mut table = vec![0.0; n * truth.len()];
    for (i, c) in candidates.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, t) in truth.iter().enumerate() {
            let v = iou(c, &t.interval);
            table[i * truth.len() + j] = v;
            if v > best.1 {
                best = (j, v);
            }
            best_per_truth[j] = best_per_truth[j].max(v);
        }
        out.matched[i] = Some(best.0);
        out.max_iou[i] = best.1;
        out.labels[i] = if best.1 > fg_iou {
            Label::Fg
        } else if best.1 < bg_iou {
            Label::Bg
        } else {
            Label::Ignore
        };
    }
    if force_best {
        for (j, &best) in best_per_truth.iter().enumerate() {
            if best <= 0.0 {
                continue;
            }
            for i in 0..n {
                if table[i * truth.len() + j] == best {
                    out.labels[i] = Label::Fg;
                }
            }
        }
    }
    for i in 0..n {
        if out.labels[i] == Label::Fg {
            out.speakers[i] = out.matched[i].map(|j| truth[j].speaker);
        } else if out.labels[i] == Label::Bg {
            out.matched[i] = None;
        }
    }
    out
}

/// RPN targets on an anchor grid: 0.7/0.3 thresholds plus the forced
/// best-anchor-per-truth rule. Empty truth leaves every anchor bg.
pub fn assign_targets(grid: &AnchorGrid, truth: &[FrameTurn]) -> TargetAssignment {
    assign_labels(&grid.anchors, truth, FG_IOU, BG_IOU, true)
}

/// Draws up to `floor(fg_fraction·total)` fg indices and fills the rest with bg,
/// both without replacement. Ignored candidates are never returned. When the
/// pool is short the result is simply smaller than `total`.
pub fn sample_minibatch<R: Rng + ?Sized>(
    assignment: &TargetAssignment,
    total: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let fg = assignment.indices(Label::Fg);
    let bg = assignment.indices(Label::Bg);
    let fg_quota = ((fg_fraction * total as f64).floor() as usize).min(fg.len());
    let mut out = pick(&fg, fg_quota, rng);
    let bg_quota = (total - fg_quota).min(bg.len());
    out.extend(pick(&bg, bg_quota, rng));
    out
}

/// Seeded convenience wrapper around [`sample_minibatch`].
pub fn sample_minibatch_seeded(assignment: &TargetAssignment, total: usize, fg_fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_minibatch(assignment, total, fg_fraction, &mut rng)
}

fn pick<R: Rng + ?Sized>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    chosen
}
