//! The five-term detection objective: fg/bg cross-entropy for both stages,
//! smooth-L1 boundary regression for both stages, and speaker cross-entropy
//! scaled by `alpha`.
//!
//! Scalar forms operate on plain numbers; the `*_loss` graph forms record a
//! single fused node each so the reverse pass is exact.

use crate::proposals::CoordDelta;
use crate::tensor::{Backward, BackwardCtx, Graph, Result, Tensor, TensorError, Var};

/// Probabilities entering a logarithm are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
/// Reported probabilities are never clamped.
pub const PROB_EPS: f64 = 1e-7;

/// Speaker-loss weight while training from scratch.
pub const ALPHA_TRAIN: f64 = 1.0;
/// Speaker-loss weight during adaptation.
pub const ALPHA_ADAPT: f64 = 0.1;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationTarget {
    pub p: f64,
    pub p_star: f64,
}

pub fn binary_cls_loss(t: ClassificationTarget) -> f64 {
    let p = clamp_prob(t.p);
    -(t.p_star * p.ln() + (1.0 - t.p_star) * (1.0 - p).ln())
}

/// `∂L/∂p`; zero where the clamp is active.
pub fn binary_cls_grad(t: ClassificationTarget) -> f64 {
    if t.p < PROB_EPS || t.p > 1.0 - PROB_EPS {
        return 0.0;
    }
    -t.p_star / t.p + (1.0 - t.p_star) / (1.0 - t.p)
}

/// `0.5·d²` inside `|d| < 1`, `|d| − 0.5` outside.
pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1_value`]; at `|d| = 1` the outer branch (±1) applies.
pub fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

pub fn smooth_l1(t: CoordDelta, t_star: CoordDelta) -> f64 {
    smooth_l1_value(t.dx - t_star.dx) + smooth_l1_value(t.dw - t_star.dw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDistribution {
    pub s: Vec<f64>,
    pub s_star: Vec<f64>,
}

impl SpeakerDistribution {
    pub fn one_hot(s: Vec<f64>, label: usize) -> Self {
        let mut s_star = vec![0.0; s.len()];
        s_star[label] = 1.0;
        SpeakerDistribution { s, s_star }
    }
}

pub fn speaker_cls_loss(d: &SpeakerDistribution) -> f64 {
    -d.s.iter()
        .zip(&d.s_star)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&s, &t)| t * clamp_prob(s).ln())
        .sum::<f64>()
}

/// Per-term values of one training objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
    pub spk_cls: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        total_loss(self)
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("rcnn_cls", self.rcnn_cls),
            ("rcnn_reg", self.rcnn_reg),
            ("spk_cls", self.spk_cls),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    /// Elementwise mean over several breakdowns sharing one alpha.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut out = LossBreakdown {
            alpha: parts.first().map_or(0.0, |p| p.alpha),
            ..Default::default()
        };
        for p in parts {
            out.rpn_cls += p.rpn_cls / n;
            out.rpn_reg += p.rpn_reg / n;
            out.rcnn_cls += p.rcnn_cls / n;
            out.rcnn_reg += p.rcnn_reg / n;
            out.spk_cls += p.spk_cls / n;
        }
        out
    }
}

pub fn total_loss(parts: &LossBreakdown) -> f64 {
    parts.rpn_cls + parts.rpn_reg + parts.rcnn_cls + parts.rcnn_reg + parts.alpha * parts.spk_cls
}

// ---------------------------------------------------------------------------
// graph ops

fn check_denom(op: &'static str, denom: f64) -> Result<()> {
    if denom > 0.0 && denom.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op,
            msg: format!("normaliser must be positive, got {denom}"),
        })
    }
}

struct BceOp {
    targets: Vec<f64>,
    denom: f64,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "binary_cls_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output[0] / self.denom;
        let dp = ctx.inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| g * binary_cls_grad(ClassificationTarget { p, p_star: t }))
            .collect();
        vec![Some(dp)]
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        Some(clamp_distance(inputs[0].data()))
    }
}

/// `Σᵢ bce(pᵢ, tᵢ) / denom` over a 1-D (or `[n,1]`) probability tensor.
pub fn binary_cls_loss_var(g: &mut Graph, probs: Var, targets: &[f64], denom: f64) -> Result<Var> {
    check_denom("binary_cls_loss", denom)?;
    let p = g.value(probs);
    if p.numel() != targets.len() {
        return Err(TensorError::Shape {
            op: "binary_cls_loss",
            expected: format!("{} probabilities", targets.len()),
            found: format!("{:?}", p.shape()),
        });
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &t)| binary_cls_loss(ClassificationTarget { p, p_star: t }))
        .sum();
    g.apply(
        Box::new(BceOp {
            targets: targets.to_vec(),
            denom,
        }),
        &[probs],
        Tensor::scalar(total / denom),
    )
}

struct SmoothL1Op {
    targets: Vec<f64>,
    denom: f64,
}

impl Backward for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output[0] / self.denom;
        let d = ctx.inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| g * smooth_l1_slope(p - t))
            .collect();
        vec![Some(d)]
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        let d = inputs[0].data().iter().zip(&self.targets);
        Some(d.fold(f64::INFINITY, |m, (p, t)| m.min(((p - t).abs() - 1.0).abs())))
    }
}

/// `Σ smooth_l1(predᵢ − targetᵢ) / denom` with `pred: [m, 2]` laid out as (dx, dw).
pub fn smooth_l1_loss_var(g: &mut Graph, pred: Var, targets: &[CoordDelta], denom: f64) -> Result<Var> {
    check_denom("smooth_l1", denom)?;
    let p = g.value(pred);
    if p.numel() != 2 * targets.len() {
        return Err(TensorError::Shape {
            op: "smooth_l1",
            expected: format!("[{}, 2]", targets.len()),
            found: format!("{:?}", p.shape()),
        });
    }
    let flat: Vec<f64> = targets.iter().flat_map(|t| [t.dx, t.dw]).collect();
    let total: f64 = p.data().iter().zip(&flat).map(|(a, b)| smooth_l1_value(a - b)).sum();
    g.apply(
        Box::new(SmoothL1Op { targets: flat, denom }),
        &[pred],
        Tensor::scalar(total / denom),
    )
}

struct SpeakerCeOp {
    labels: Vec<usize>,
    classes: usize,
    denom: f64,
}

impl Backward for SpeakerCeOp {
    fn name(&self) -> &'static str {
        "speaker_cls_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output[0] / self.denom;
        let s = ctx.inputs[0].data();
        let mut d = vec![0.0; s.len()];
        for (r, &label) in self.labels.iter().enumerate() {
            let p = s[r * self.classes + label];
            if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                d[r * self.classes + label] = -g / p;
            }
        }
        vec![Some(d)]
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        let s = inputs[0].data();
        let picked: Vec<f64> = self
            .labels
            .iter()
            .enumerate()
            .map(|(r, &l)| s[r * self.classes + l])
            .collect();
        Some(clamp_distance(&picked))
    }
}

/// Distance of probabilities from the clamping edges.
fn clamp_distance(p: &[f64]) -> f64 {
    p.iter().fold(f64::INFINITY, |m, &p| {
        m.min((p - PROB_EPS).abs()).min((1.0 - PROB_EPS - p).abs())
    })
}

/// `−Σᵣ log s[r, labelᵣ] / denom` over a `[m, K]` probability matrix.
pub fn speaker_cls_loss_var(g: &mut Graph, probs: Var, labels: &[usize], denom: f64) -> Result<Var> {
    check_denom("speaker_cls_loss", denom)?;
    let p = g.value(probs);
    let shape = p.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
        return Err(TensorError::Shape {
            op: "speaker_cls_loss",
            expected: format!("[{}, K > max label]", labels.len()),
            found: format!("{shape:?}"),
        });
    }
    let classes = shape[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -clamp_prob(p.data()[r * classes + l]).ln())
        .sum();
    g.apply(
        Box::new(SpeakerCeOp {
            labels: labels.to_vec(),
            classes,
            denom,
        }),
        &[probs],
        Tensor::scalar(total / denom),
    )
}

/// Graph handles of the five objective terms; absent terms contribute zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub rpn_cls: Option<Var>,
    pub rpn_reg: Option<Var>,
    pub rcnn_cls: Option<Var>,
    pub rcnn_reg: Option<Var>,
    pub spk_cls: Option<Var>,
}

impl LossVars {
    /// Records the weighted total; `None` when every term is absent.
    pub fn total(&self, g: &mut Graph, alpha: f64) -> Result<Option<Var>> {
        let spk = match self.spk_cls {
            Some(v) => Some(g.scale(v, alpha)?),
            None => None,
        };
        let mut acc: Option<Var> = None;
        for v in [self.rpn_cls, self.rpn_reg, self.rcnn_cls, self.rcnn_reg, spk]
            .into_iter()
            .flatten()
        {
            acc = Some(match acc {
                Some(a) => g.add(a, v)?,
                None => v,
            });
        }
        Ok(acc)
    }

    pub fn breakdown(&self, g: &Graph, alpha: f64) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            rpn_cls: val(self.rpn_cls),
            rpn_reg: val(self.rpn_reg),
            rcnn_cls: val(self.rcnn_cls),
            rcnn_reg: val(self.rcnn_reg),
            spk_cls: val(self.spk_cls),
            alpha,
        }
    }
}
