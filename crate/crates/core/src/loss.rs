//! Reference evaluation of the composite tube-grounding training loss.
//!
//! For each tube `p` the loss adds a focal matching term, and, only when the
//! tube is a positive match, a gender cross-entropy, the frame-averaged
//! in-span cross-entropy and the positive-frame-averaged temporal IoU loss:
//!
//! ```text
//! L = sum_p  l1 * focal(GL'_p, GL_p)
//!          + l2 * [GL_p = 1] * ce(GE'_p, GE_p)
//!          + l3 * [GL_p = 1] * (1/N)     * sum_t bce(C'_pt, C_pt)
//!          + l4 * [GL_p = 1] * (1/N_pos) * sum_{t: C_pt = 1} iou_loss(R'_pt, R_pt)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FrameTargets;

/// Probability clamp applied before every logarithm.
pub const EPS: f64 = 1e-7;

/// Upper bound of the temporal IoU loss, reached for disjoint intervals.
pub fn iou_loss_cap() -> f64 {
    (1.0 / EPS).ln()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Binary cross-entropy with clamped probability.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Focal loss: `-a (1-p)^g ln p` for positives, `-(1-a) p^g ln(1-p)` for negatives.
pub fn focal_loss(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_loss`] with respect to `p`; zero where the clamp is active.
pub fn focal_loss_grad(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
    if p <= EPS || p >= 1.0 - EPS {
        return 0.0;
    }
    if y {
        let q = 1.0 - p;
        alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    }
}

/// Interval around a frame, given as distances to its start and end.
/// Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct IntervalDistances {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for IntervalDistances {
    fn from([start, end]: [f64; 2]) -> Self {
        IntervalDistances { start, end }
    }
}

impl From<IntervalDistances> for [f64; 2] {
    fn from(d: IntervalDistances) -> Self {
        [d.start, d.end]
    }
}

impl From<(u32, u32)> for IntervalDistances {
    fn from((s, e): (u32, u32)) -> Self {
        IntervalDistances {
            start: f64::from(s),
            end: f64::from(e),
        }
    }
}

fn interval_overlap(pred: IntervalDistances, target: IntervalDistances) -> (f64, f64) {
    // both intervals contain the anchor frame, so the intersection is the
    // sum of the shorter reach on each side
    let inter = pred.start.min(target.start) + pred.end.min(target.end);
    let union = pred.start + pred.end + target.start + target.end - inter;
    (inter, union)
}

fn check_interval(pred: IntervalDistances, target: IntervalDistances) -> Result<()> {
    let all = [pred.start, pred.end, target.start, target.end];
    if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::malformed(
            "interval distances must be finite and >= 0",
        ));
    }
    if target.start + target.end <= 0.0 {
        return Err(Error::malformed("zero-length target interval"));
    }
    Ok(())
}

/// `-ln(|pred ∩ target| / |pred ∪ target|)`, capped at `ln(1/EPS)`.
pub fn iou_reg_loss(pred: IntervalDistances, target: IntervalDistances) -> Result<f64> {
    check_interval(pred, target)?;
    let (inter, union) = interval_overlap(pred, target);
    let ratio = inter / union;
    if ratio <= EPS {
        return Ok(iou_loss_cap());
    }
    Ok(-ratio.ln())
}

/// Gradient of [`iou_reg_loss`] with respect to the predicted distances.
///
/// At a kink (`pred.start == target.start`, same for `end`) the one-sided
/// derivative from above is returned.
pub fn iou_reg_loss_grad(
    pred: IntervalDistances,
    target: IntervalDistances,
) -> Result<IntervalDistances> {
    check_interval(pred, target)?;
    let (inter, union) = interval_overlap(pred, target);
    if inter / union <= EPS {
        return Ok(IntervalDistances {
            start: 0.0,
            end: 0.0,
        });
    }
    let side = |p: f64, t: f64| {
        let d_inter = if p < t { 1.0 } else { 0.0 };
        -d_inter / inter + (1.0 - d_inter) / union
    };
    Ok(IntervalDistances {
        start: side(pred.start, target.start),
        end: side(pred.end, target.end),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderClass {
    Female,
    Male,
}

impl GenderClass {
    /// `None` for `unknown`, which the gender term skips.
    pub fn from_gender(g: crate::attributes::Gender) -> Option<Self> {
        match g {
            crate::attributes::Gender::Female => Some(GenderClass::Female),
            crate::attributes::Gender::Male => Some(GenderClass::Male),
            crate::attributes::Gender::Unknown => None,
        }
    }

    fn index(self) -> usize {
        match self {
            GenderClass::Female => 0,
            GenderClass::Male => 1,
        }
    }
}

/// Model outputs for one tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePack {
    /// Matching probability.
    pub gl: f64,
    /// `[p_female, p_male]`.
    pub ge: [f64; 2],
    /// In-span probability per frame.
    pub cls: Vec<f64>,
    /// Predicted interval per frame.
    pub reg: Vec<IntervalDistances>,
}

impl ScorePack {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: &f64| (0.0..=1.0).contains(p);
        if !prob(&self.gl) || !self.ge.iter().all(prob) || !self.cls.iter().all(prob) {
            return Err(Error::malformed("score probabilities must lie in [0, 1]"));
        }
        if (self.ge[0] + self.ge[1] - 1.0).abs() > 1e-6 {
            return Err(Error::malformed("gender probabilities must sum to 1"));
        }
        if self
            .reg
            .iter()
            .any(|r| !(r.start.is_finite() && r.end.is_finite() && r.start >= 0.0 && r.end >= 0.0))
        {
            return Err(Error::malformed(
                "regression outputs must be finite and >= 0",
            ));
        }
        if self.reg.len() != self.cls.len() {
            return Err(Error::malformed("cls and reg lengths differ"));
        }
        Ok(())
    }
}

/// Ground truth for one tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPack {
    pub gl: bool,
    /// `None` when the description does not state the gender.
    pub ge: Option<GenderClass>,
    pub targets: FrameTargets,
}

impl LabelPack {
    pub fn n(&self) -> usize {
        self.targets.cls.len()
    }

    pub fn n_pos(&self) -> usize {
        self.targets.positives()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.targets;
        if t.cls.is_empty() || t.cls.len() != t.reg.len() {
            return Err(Error::malformed(
                "label pack needs N >= 1 aligned frame targets",
            ));
        }
        for (c, r) in t.cls.iter().zip(&t.reg) {
            if *c > 1 || (*c == 1) != r.is_some() {
                return Err(Error::malformed(
                    "reg targets must be present exactly where cls = 1",
                ));
            }
        }
        if self.gl && self.n_pos() == 0 {
            return Err(Error::malformed("positive tube without positive frames"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0)
            || !(0.0..=1.0).contains(&self.focal_alpha)
        {
            return Err(Error::malformed(
                "loss weights must be finite and >= 0, focal_alpha in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            lambda1: k * self.lambda1,
            lambda2: k * self.lambda2,
            lambda3: k * self.lambda3,
            lambda4: k * self.lambda4,
            ..*self
        }
    }
}

/// Weighted loss terms summed over tubes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub gender: f64,
    pub frame_cls: f64,
    pub frame_reg: f64,
    pub total: f64,
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            global: self.global + o.global,
            gender: self.gender + o.gender,
            frame_cls: self.frame_cls + o.frame_cls,
            frame_reg: self.frame_reg + o.frame_reg,
            total: self.total + o.total,
        }
    }
}

/// Ablation switches: focal vs plain BCE matching loss, gender branch on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossVariant {
    pub use_focal: bool,
    pub use_gender: bool,
}

impl LossVariant {
    pub const FULL: LossVariant = LossVariant {
        use_focal: true,
        use_gender: true,
    };
    pub const BASELINE: LossVariant = LossVariant {
        use_focal: false,
        use_gender: false,
    };

    /// Parses a comma list of `fo` and `ge`; `baseline` or empty enables neither.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut v = LossVariant::BASELINE;
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "fo" => v.use_focal = true,
                "ge" => v.use_gender = true,
                "baseline" => {}
                other => return Err(Error::malformed(format!("unknown loss variant {other:?}"))),
            }
        }
        Ok(v)
    }
}

fn tube_loss(
    s: &ScorePack,
    l: &LabelPack,
    w: &LossWeights,
    v: LossVariant,
) -> Result<LossBreakdown> {
    s.validate()?;
    l.validate()?;
    if s.cls.len() != l.n() {
        return Err(Error::malformed(format!(
            "score pack has {} frames, label pack {}",
            s.cls.len(),
            l.n()
        )));
    }
    let matching = if v.use_focal {
        focal_loss(s.gl, l.gl, w.focal_gamma, w.focal_alpha)
    } else {
        bce(s.gl, l.gl)
    };
    let mut out = LossBreakdown {
        global: w.lambda1 * matching,
        ..LossBreakdown::default()
    };
    if l.gl {
        let lambda2 = if v.use_gender { w.lambda2 } else { 0.0 };
        if let Some(g) = l.ge {
            out.gender = lambda2 * -clamp_prob(s.ge[g.index()]).ln();
        }
        let cls: Vec<f64> = s
            .cls
            .iter()
            .zip(&l.targets.cls)
            .map(|(&p, &c)| bce(p, c == 1))
            .collect();
        out.frame_cls = w.lambda3 * crate::metrics::pairwise_sum(&cls) / l.n() as f64;
        let mut reg = Vec::with_capacity(l.n_pos());
        for (pred, target) in s.reg.iter().zip(&l.targets.reg) {
            if let Some(t) = target {
                reg.push(iou_reg_loss(*pred, IntervalDistances::from(*t))?);
            }
        }
        out.frame_reg = w.lambda4 * crate::metrics::pairwise_sum(&reg) / l.n_pos() as f64;
    }
    out.total = out.global + out.gender + out.frame_cls + out.frame_reg;
    Ok(out)
}

/// Loss under an ablation variant. Tubes are evaluated in parallel and
/// reduced in input order.
pub fn baseline_variant_loss(
    scores: &[ScorePack],
    labels: &[LabelPack],
    w: &LossWeights,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    w.validate()?;
    if scores.len() != labels.len() {
        return Err(Error::malformed(format!(
            "{} score packs vs {} label packs",
            scores.len(),
            labels.len()
        )));
    }
    let per_tube: Vec<LossBreakdown> = scores
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, l)| tube_loss(s, l, w, variant))
        .collect::<Result<_>>()?;
    Ok(per_tube
        .into_iter()
        .fold(LossBreakdown::default(), |a, b| a + b))
}

/// Full loss: focal matching term and gender branch enabled.
pub fn total_loss(
    scores: &[ScorePack],
    labels: &[LabelPack],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    baseline_variant_loss(scores, labels, w, LossVariant::FULL)
}
