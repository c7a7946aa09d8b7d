//! Tube/description matching scores, training labels and vIoU evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tube::Tube;

/// Ground-truth tube of a query: one box per frame of `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub start: u32,
    pub end: u32,
    pub boxes: Vec<BoundingBox>,
}

impl GroundTruth {
    pub fn new(start: u32, boxes: Vec<BoundingBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::malformed("ground truth has no frames"));
        }
        let end = start + boxes.len() as u32 - 1;
        Ok(GroundTruth { start, end, boxes })
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() || self.end < self.start {
            return Err(Error::malformed("ground truth has no frames"));
        }
        if self.boxes.len() as u64 != u64::from(self.end - self.start) + 1 {
            return Err(Error::malformed(format!(
                "ground truth [{}, {}] has {} boxes",
                self.start,
                self.end,
                self.boxes.len()
            )));
        }
        self.boxes.iter().try_for_each(BoundingBox::validate)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn box_at(&self, frame: u32) -> Option<&BoundingBox> {
        if frame < self.start || frame > self.end {
            return None;
        }
        self.boxes.get((frame - self.start) as usize)
    }

    pub fn as_tube(&self, tube_id: u32) -> Tube {
        Tube::from_boxes(tube_id, 0, self.start, &self.boxes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScores {
    pub s_overlap: f64,
    pub s_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchLabel {
    pub value: LabelKind,
    pub scores: MatchScores,
}

pub const POSITIVE_OVERLAP: f64 = 0.7;
pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_OVERLAP: f64 = 0.3;
pub const NEGATIVE_IOU: f64 = 0.3;

fn intersection(tube: &Tube, gt: &GroundTruth) -> Option<(u32, u32)> {
    let s = tube.start().max(gt.start);
    let e = tube.end().min(gt.end);
    (s <= e).then_some((s, e))
}

/// Temporal coverage of the ground truth and mean box IoU over the shared frames.
pub fn match_scores(tube: &Tube, gt: &GroundTruth) -> Result<MatchScores> {
    gt.validate()?;
    let Some((s, e)) = intersection(tube, gt) else {
        return Ok(MatchScores {
            s_overlap: 0.0,
            s_iou: 0.0,
        });
    };
    let shared = f64::from(e - s + 1);
    let total: f64 = (s..=e)
        .map(|t| iou(tube.box_at(t).unwrap(), gt.box_at(t).unwrap()))
        .sum();
    Ok(MatchScores {
        s_overlap: shared / gt.len() as f64,
        s_iou: total / shared,
    })
}

/// Positive when both scores clear the positive thresholds, negative when
/// either falls below its negative threshold. All comparisons are strict.
pub fn label(scores: MatchScores) -> MatchLabel {
    let value = if scores.s_overlap > POSITIVE_OVERLAP && scores.s_iou > POSITIVE_IOU {
        LabelKind::Positive
    } else if scores.s_overlap < NEGATIVE_OVERLAP || scores.s_iou < NEGATIVE_IOU {
        LabelKind::Negative
    } else {
        LabelKind::Ignored
    };
    MatchLabel { value, scores }
}

/// Per-frame trimming targets of a tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTargets {
    /// 1 where the frame lies inside the ground-truth span.
    pub cls: Vec<u8>,
    /// `(t - gt.start, gt.end - t)` where `cls` is 1.
    pub reg: Vec<Option<(u32, u32)>>,
}

impl FrameTargets {
    pub fn positives(&self) -> usize {
        self.cls.iter().filter(|&&c| c == 1).count()
    }

    /// All-negative targets for a tube of `n` frames.
    pub fn negative(n: usize) -> Self {
        FrameTargets {
            cls: vec![0; n],
            reg: vec![None; n],
        }
    }
}

pub fn frame_targets(tube: &Tube, gt: &GroundTruth) -> Result<FrameTargets> {
    gt.validate()?;
    if intersection(tube, gt).is_none() {
        return Err(Error::NoPositiveFrames);
    }
    let (cls, reg) = tube
        .entries
        .iter()
        .map(|e| {
            let t = e.frame;
            if (gt.start..=gt.end).contains(&t) {
                (1, Some((t - gt.start, gt.end - t)))
            } else {
                (0, None)
            }
        })
        .unzip();
    Ok(FrameTargets { cls, reg })
}

/// Inclusive frame span used to trim a predicted tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start: u32,
    pub end: u32,
}

/// vIoU: summed box IoU over frames in both tubes, divided by the number of
/// frames in either. `span` optionally restricts the prediction in time.
pub fn viou(predicted: &Tube, span: Option<FrameSpan>, gt: &GroundTruth) -> Result<f64> {
    gt.validate()?;
    let (ps, pe) = match span {
        Some(s) => (s.start.max(predicted.start()), s.end.min(predicted.end())),
        None => (predicted.start(), predicted.end()),
    };
    if ps > pe {
        return Ok(0.0);
    }
    let is = ps.max(gt.start);
    let ie = pe.min(gt.end);
    if is > ie {
        return Ok(0.0);
    }
    let union = u64::from(pe.max(gt.end) - ps.min(gt.start) + 1);
    let inter_frames = u64::from(ie - is + 1);
    let pred_frames = u64::from(pe - ps + 1);
    // the union of two overlapping intervals is their hull
    debug_assert_eq!(union, pred_frames + gt.len() as u64 - inter_frames);
    let sum: f64 = (is..=ie)
        .map(|t| iou(predicted.box_at(t).unwrap(), gt.box_at(t).unwrap()))
        .sum();
    Ok(sum / union as f64)
}

/// Summation by recursive halving; result depends only on input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub viou: f64,
    pub missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub queries: usize,
    pub evaluated: usize,
    pub missing: usize,
    pub extra_predictions: usize,
}

/// Companion metrics beyond the mean vIoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportExtensions {
    /// Fraction of queries with vIoU strictly above each threshold.
    pub viou_at: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_query: Vec<QueryScore>,
    pub mean_viou: f64,
    /// `mean_viou` rendered with four decimals.
    pub mean_viou_display: String,
    pub counts: ReportCounts,
    pub extensions: ReportExtensions,
}

pub const VIOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// A predicted tube for one query, optionally trimmed to a span.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: String,
    pub tube: Tube,
    pub span: Option<FrameSpan>,
}

/// Scores every ground-truth query; queries without a prediction score 0.
pub fn evaluate_dataset(
    predictions: &[Prediction],
    gts: &[(String, GroundTruth)],
) -> Result<EvaluationReport> {
    let mut gt_map: BTreeMap<&str, &GroundTruth> = BTreeMap::new();
    for (id, gt) in gts {
        if gt_map.insert(id.as_str(), gt).is_some() {
            return Err(Error::malformed(format!(
                "duplicate ground-truth query id {id:?}"
            )));
        }
    }
    let mut pred_map: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in predictions {
        if pred_map.insert(p.query_id.as_str(), p).is_some() {
            return Err(Error::malformed(format!(
                "duplicate prediction query id {:?}",
                p.query_id
            )));
        }
    }
    let known: BTreeSet<&str> = gt_map.keys().copied().collect();
    let extra = pred_map.keys().filter(|k| !known.contains(*k)).count();

    let entries: Vec<(&str, &GroundTruth)> = gt_map.into_iter().collect();
    let per_query: Vec<QueryScore> = entries
        .par_iter()
        .map(|&(id, gt)| -> Result<QueryScore> {
            Ok(match pred_map.get(id) {
                Some(p) => QueryScore {
                    query_id: id.to_string(),
                    viou: viou(&p.tube, p.span, gt)?,
                    missing: false,
                },
                None => QueryScore {
                    query_id: id.to_string(),
                    viou: 0.0,
                    missing: true,
                },
            })
        })
        .collect::<Result<_>>()?;

    let n = per_query.len();
    let values: Vec<f64> = per_query.iter().map(|q| q.viou).collect();
    let mean = if n == 0 {
        0.0
    } else {
        pairwise_sum(&values) / n as f64
    };
    let viou_at = VIOU_THRESHOLDS
        .iter()
        .map(|&thr| {
            let hit = values.iter().filter(|&&v| v > thr).count();
            let acc = if n == 0 { 0.0 } else { hit as f64 / n as f64 };
            (format!("{thr:.1}"), acc)
        })
        .collect();
    let missing = per_query.iter().filter(|q| q.missing).count();
    Ok(EvaluationReport {
        mean_viou_display: format!("{mean:.4}"),
        mean_viou: mean,
        counts: ReportCounts {
            queries: n,
            evaluated: n - missing,
            missing,
            extra_predictions: extra,
        },
        extensions: ReportExtensions { viou_at },
        per_query,
    })
}
