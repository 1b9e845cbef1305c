//! Classification and regression losses for sparsely annotated training,
//! with analytic gradients and a finite-difference checker.
//!
//! The focal term is the per-category sigmoid form: for category `i` with
//! predicted probability `p_i`, the target category contributes
//! `-alpha (1 - p_i)^gamma ln p_i` and every other category contributes
//! `-(1 - alpha) p_i^gamma ln(1 - p_i)`. Negatives have no target category.
//!
//! The focal ignore loss averages the full focal term over hard negatives and
//! the `(1 - q)`-weighted focal term over normal negatives, where `q` is the
//! teacher's foreground probability. Normal negatives that the teacher thinks
//! are objects (unlabeled instances) are thereby down-weighted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Teacher foreground probability above which a negative looks like an object.
    pub tau_bg: f64,
    /// IoU with known ground truth at or above which such a negative is hard.
    pub tau_hn: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            tau_bg: 0.5,
            tau_hn: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SampleRole {
    RealGt { target: usize },
    FrozenGt { target: usize },
    /// `score` is the cluster confidence `S_p`; required for the total loss.
    PseudoGt { target: usize, score: Option<f64> },
    HardNegative,
    NormalNegative,
}

impl SampleRole {
    pub fn is_negative(&self) -> bool {
        matches!(self, SampleRole::HardNegative | SampleRole::NormalNegative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub student_probs: Vec<f64>,
    pub teacher_foreground: f64,
    pub role: SampleRole,
    pub pred_box: Option<RotatedBox>,
    pub gt_box: Option<RotatedBox>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal term for one category probability: `(loss, d loss / d p)`.
fn focal_component(p: f64, is_target: bool, cfg: &LossConfig) -> (f64, f64) {
    let p = clamp_prob(p);
    let g = cfg.gamma;
    if is_target {
        let a = cfg.alpha;
        let m = 1.0 - p;
        let loss = -a * m.powf(g) * p.ln();
        let dm = if g == 0.0 { 0.0 } else { g * m.powf(g - 1.0) };
        let grad = a * (dm * p.ln() - m.powf(g) / p);
        (loss, grad)
    } else {
        let a = 1.0 - cfg.alpha;
        let m = 1.0 - p;
        let loss = -a * p.powf(g) * m.ln();
        let dp = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) };
        let grad = -a * (dp * m.ln() - p.powf(g) / m);
        (loss, grad)
    }
}

/// Focal loss summed over categories. `target = None` treats every category
/// as background.
pub fn focal_loss(probs: &[f64], target: Option<usize>, cfg: &LossConfig) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| focal_component(p, Some(i) == target, cfg).0)
        .sum()
}

/// Gradient of [`focal_loss`] with respect to `probs`.
pub fn focal_loss_grad(probs: &[f64], target: Option<usize>, cfg: &LossConfig) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| focal_component(p, Some(i) == target, cfg).1)
        .collect()
}

/// `1 - IoU`.
pub fn rotated_iou_loss(pred: &RotatedBox, gt: &RotatedBox) -> f64 {
    1.0 - rotated_iou(pred, gt)
}

/// Reassigns negative roles. A negative is hard when the teacher finds it
/// foreground-like (`q > tau_bg`) and its box overlaps known ground truth with
/// IoU at least `tau_hn`; otherwise it is normal. Positives are untouched.
pub fn partition_negatives(samples: &mut [TrainingSample], known_gt: &[RotatedBox], cfg: &LossConfig) {
    for s in samples.iter_mut().filter(|s| s.role.is_negative()) {
        let best_iou = s
            .pred_box
            .map(|b| known_gt.iter().map(|g| rotated_iou(&b, g)).fold(0.0, f64::max))
            .unwrap_or(0.0);
        s.role = if s.teacher_foreground > cfg.tau_bg && best_iou >= cfg.tau_hn {
            SampleRole::HardNegative
        } else {
            SampleRole::NormalNegative
        };
    }
}

fn partition_sizes(samples: &[TrainingSample]) -> (usize, usize) {
    samples.iter().fold((0, 0), |(h, n), s| match s.role {
        SampleRole::HardNegative => (h + 1, n),
        SampleRole::NormalNegative => (h, n + 1),
        _ => (h, n),
    })
}

/// Focal ignore loss over the negatives in `samples` (positives are skipped).
/// An empty partition contributes zero.
pub fn focal_ignore_loss(samples: &[TrainingSample], cfg: &LossConfig) -> f64 {
    let (n_hard, n_normal) = partition_sizes(samples);
    let mut hard = 0.0;
    let mut normal = 0.0;
    for s in samples {
        match s.role {
            SampleRole::HardNegative => hard += focal_loss(&s.student_probs, None, cfg),
            SampleRole::NormalNegative => {
                normal += (1.0 - s.teacher_foreground) * focal_loss(&s.student_probs, None, cfg)
            }
            _ => {}
        }
    }
    let mut total = 0.0;
    if n_hard > 0 {
        total += hard / n_hard as f64;
    }
    if n_normal > 0 {
        total += normal / n_normal as f64;
    }
    total
}

/// Gradient of [`focal_ignore_loss`] with respect to each sample's student
/// probabilities (zero vectors for positives).
pub fn focal_ignore_loss_grad(samples: &[TrainingSample], cfg: &LossConfig) -> Vec<Vec<f64>> {
    let (n_hard, n_normal) = partition_sizes(samples);
    samples
        .iter()
        .map(|s| {
            let scale = match s.role {
                SampleRole::HardNegative => 1.0 / n_hard as f64,
                SampleRole::NormalNegative => (1.0 - s.teacher_foreground) / n_normal as f64,
                _ => 0.0,
            };
            focal_loss_grad(&s.student_probs, None, cfg)
                .into_iter()
                .map(|g| g * scale)
                .collect()
        })
        .collect()
}

/// Breakdown of [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub positive: f64,
    pub negative: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.positive + self.negative
    }
}

/// Weighted positive losses (classification + regression; weight 1 for real
/// and frozen ground truth, `S_p` for pseudo labels) plus the focal ignore
/// loss over the negatives.
pub fn total_loss_terms(samples: &[TrainingSample], cfg: &LossConfig) -> Result<LossTerms> {
    let mut positive = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (target, weight) = match s.role {
            SampleRole::RealGt { target } | SampleRole::FrozenGt { target } => (target, 1.0),
            SampleRole::PseudoGt { target, score } => {
                let score = score.ok_or_else(|| Error::Argument(format!("sample {i}: pseudo label without S_p")))?;
                (target, score)
            }
            SampleRole::HardNegative | SampleRole::NormalNegative => continue,
        };
        if target >= s.student_probs.len() {
            return Err(Error::Argument(format!("sample {i}: target {target} out of range")));
        }
        let (Some(pred), Some(gt)) = (s.pred_box, s.gt_box) else {
            return Err(Error::Argument(format!("sample {i}: positive without a regression pair")));
        };
        let term = focal_loss(&s.student_probs, Some(target), cfg) + rotated_iou_loss(&pred, &gt);
        positive += weight * term;
    }
    Ok(LossTerms {
        positive,
        negative: focal_ignore_loss(samples, cfg),
    })
}

pub fn total_loss(samples: &[TrainingSample], cfg: &LossConfig) -> Result<f64> {
    total_loss_terms(samples, cfg).map(|t| t.total())
}

/// Largest componentwise relative error between `grad(point)` and central
/// differences of `f` with the given step.
pub fn grad_check<F, G>(f: F, grad: G, point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(point);
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}
