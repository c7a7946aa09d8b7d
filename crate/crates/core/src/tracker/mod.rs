//! Tracking-by-detection inside one scene clip.
//!
//! The loop per frame: predict every live track with the Kalman filter, build
//! a cost matrix against the frame's detections, solve a gated assignment,
//! update matched tracks, age unmatched ones and start tentative tracks from
//! leftover detections. Confirmed tracks become [`Tube`]s; frames where a
//! confirmed track coasted are filled with its predicted box.

mod assignment;
mod kalman;
mod nms;

use serde::{Deserialize, Serialize};

pub use assignment::{assign, Assignment, CostMatrix};
pub use kalman::{KalmanConfig, KalmanFilter, KalmanState, StateCovariance, StateVector};
pub use nms::nms;

pub use crate::tube::{Tube, TubeEntry};

use crate::error::{Error, Result};
use crate::geometry::{cosine, iou, BoundingBox};
use crate::scene::Clip;

const EMBEDDING_NORM_TOLERANCE: f64 = 1e-6;

/// A detector output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "frame")]
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "emb", default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::malformed(format!(
                "frame {}: confidence {} outside [0, 1]",
                self.frame_index, self.confidence
            )));
        }
        if let Some(e) = &self.embedding {
            let norm = e.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            // f32 storage carries ~1e-7 relative error per component
            if (norm - 1.0).abs() > EMBEDDING_NORM_TOLERANCE.max(e.len() as f64 * 1e-7) {
                return Err(Error::malformed(format!(
                    "frame {}: embedding norm {norm}, expected 1",
                    self.frame_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Weight of the appearance term in the association cost.
    pub lambda_app: f64,
    /// Frames a confirmed track may coast without a detection.
    pub max_age: u32,
    /// Consecutive hits needed to confirm a track.
    pub n_init: u32,
    /// Maximum admissible association cost.
    pub max_cost: f64,
    /// Run NMS on each frame before association.
    pub apply_nms: bool,
    pub nms_conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            lambda_app: 0.5,
            max_age: 30,
            n_init: 3,
            max_cost: 0.7,
            apply_nms: true,
            nms_conf_threshold: 0.4,
            nms_iou_threshold: 0.65,
            kalman: KalmanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrackState {
    Tentative,
    Confirmed,
}

#[derive(Debug)]
struct Track {
    id: u32,
    state: TrackState,
    kalman: KalmanState,
    hits: u32,
    misses: u32,
    entries: Vec<TubeEntry>,
    /// Index one past the last entry backed by a detection.
    observed_len: usize,
    embedding_sum: Option<Vec<f64>>,
}

impl Track {
    fn mean_embedding(&self) -> Option<Vec<f32>> {
        let sum = self.embedding_sum.as_ref()?;
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm > 0.0).then(|| sum.iter().map(|v| (v / norm) as f32).collect())
    }

    fn absorb_embedding(&mut self, emb: Option<&Vec<f32>>) {
        let Some(emb) = emb else { return };
        match &mut self.embedding_sum {
            Some(sum) if sum.len() == emb.len() => {
                sum.iter_mut()
                    .zip(emb)
                    .for_each(|(s, e)| *s += f64::from(*e));
            }
            Some(_) => {}
            None => self.embedding_sum = Some(emb.iter().map(|&e| f64::from(e)).collect()),
        }
    }

    fn into_tube(self, clip_id: u32) -> Option<Tube> {
        if self.state != TrackState::Confirmed || self.observed_len == 0 {
            return None;
        }
        let mean_embedding = self.mean_embedding();
        let mut entries = self.entries;
        // coasting after the last detection is not part of the tube
        entries.truncate(self.observed_len);
        Some(Tube {
            tube_id: self.id,
            clip_id,
            entries,
            mean_embedding,
        })
    }
}

/// Association cost between a predicted track box and a detection.
pub fn association_cost(
    predicted: &BoundingBox,
    track_embedding: Option<&[f32]>,
    detection: &Detection,
    lambda_app: f64,
) -> f64 {
    let motion = 1.0 - iou(predicted, &detection.bbox);
    match (track_embedding, detection.embedding.as_deref()) {
        (Some(t), Some(d)) if t.len() == d.len() => {
            lambda_app * (1.0 - cosine(t, d)) + (1.0 - lambda_app) * motion
        }
        _ => motion,
    }
}

/// Links a clip's detections into tubes. Tube ids count from 0 in track
/// creation order; callers renumber when merging clips.
pub fn track_clip(clip: &Clip, detections: &[Detection], cfg: &TrackerConfig) -> Result<Vec<Tube>> {
    let mut per_frame: Vec<Vec<Detection>> = vec![Vec::new(); clip.len() as usize];
    for d in detections {
        if !clip.contains(d.frame_index) {
            return Err(Error::malformed(format!(
                "detection at frame {} outside clip {} [{}, {}]",
                d.frame_index, clip.clip_id, clip.start_frame, clip.end_frame
            )));
        }
        d.validate()?;
        per_frame[(d.frame_index - clip.start_frame) as usize].push(d.clone());
    }

    let kf = KalmanFilter::new(cfg.kalman);
    let mut live: Vec<Track> = Vec::new();
    let mut finished: Vec<Track> = Vec::new();
    let mut next_id = 0u32;

    for (offset, frame_dets) in per_frame.into_iter().enumerate() {
        let frame = clip.start_frame + offset as u32;
        let dets = if cfg.apply_nms {
            nms(&frame_dets, cfg.nms_conf_threshold, cfg.nms_iou_threshold)
        } else {
            frame_dets
        };

        let mut predicted = Vec::with_capacity(live.len());
        for mut track in std::mem::take(&mut live) {
            match kf.predict(&track.kalman) {
                Ok(k) => {
                    track.kalman = k;
                    predicted.push(track);
                }
                Err(e) => {
                    tracing::warn!(track = track.id, frame, "dropping track: {e}");
                    finished.push(track);
                }
            }
        }
        live = predicted;

        let boxes: Vec<BoundingBox> = live.iter().map(|t| t.kalman.to_box()).collect();
        let embeddings: Vec<Option<Vec<f32>>> = live.iter().map(Track::mean_embedding).collect();
        let cost = CostMatrix::from_fn(live.len(), dets.len(), |r, c| {
            association_cost(
                &boxes[r],
                embeddings[r].as_deref(),
                &dets[c],
                cfg.lambda_app,
            )
        });
        let result = assign(&cost, cfg.max_cost);

        let mut matched_det = vec![None; live.len()];
        for &(r, c) in &result.matches {
            matched_det[r] = Some(c);
        }

        let mut survivors = Vec::with_capacity(live.len());
        for (r, mut track) in std::mem::take(&mut live).into_iter().enumerate() {
            match matched_det[r] {
                Some(c) => {
                    let det = &dets[c];
                    match kf.update(&track.kalman, &det.bbox) {
                        Ok(k) => track.kalman = k,
                        Err(e) => {
                            tracing::warn!(track = track.id, frame, "reinitialising track: {e}");
                            track.kalman = kf.initiate(&det.bbox);
                        }
                    }
                    track.entries.push(TubeEntry {
                        frame,
                        bbox: det.bbox,
                    });
                    track.observed_len = track.entries.len();
                    track.hits += 1;
                    track.misses = 0;
                    track.absorb_embedding(det.embedding.as_ref());
                    if track.state == TrackState::Tentative && track.hits >= cfg.n_init {
                        track.state = TrackState::Confirmed;
                    }
                    survivors.push(track);
                }
                None => {
                    track.misses += 1;
                    if track.state == TrackState::Tentative || track.misses > cfg.max_age {
                        finished.push(track);
                    } else {
                        track.entries.push(TubeEntry {
                            frame,
                            bbox: boxes[r],
                        });
                        survivors.push(track);
                    }
                }
            }
        }
        live = survivors;

        for &c in &result.unmatched_cols {
            let det = &dets[c];
            let mut track = Track {
                id: next_id,
                state: if cfg.n_init <= 1 {
                    TrackState::Confirmed
                } else {
                    TrackState::Tentative
                },
                kalman: kf.initiate(&det.bbox),
                hits: 1,
                misses: 0,
                entries: vec![TubeEntry {
                    frame,
                    bbox: det.bbox,
                }],
                observed_len: 1,
                embedding_sum: None,
            };
            track.absorb_embedding(det.embedding.as_ref());
            next_id += 1;
            live.push(track);
        }
    }

    finished.extend(live);
    finished.sort_by_key(|t| t.id);
    let mut tubes: Vec<Tube> = finished
        .into_iter()
        .filter_map(|t| t.into_tube(clip.clip_id))
        .collect();
    for (i, t) in tubes.iter_mut().enumerate() {
        t.tube_id = i as u32;
    }
    Ok(tubes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(start: u32, end: u32) -> Clip {
        Clip {
            clip_id: 0,
            start_frame: start,
            end_frame: end,
        }
    }

    fn det(frame: u32, b: BoundingBox, emb: Option<Vec<f32>>) -> Detection {
        Detection {
            frame_index: frame,
            bbox: b,
            confidence: 0.9,
            embedding: emb,
        }
    }

    #[test]
    fn single_linear_walker() {
        let boxes: Vec<_> = (0..50)
            .map(|t| BoundingBox::from_cxcywh(100.0 + 3.0 * t as f64, 200.0, 40.0, 100.0))
            .collect();
        let dets: Vec<_> = boxes
            .iter()
            .enumerate()
            .map(|(t, b)| det(t as u32, *b, None))
            .collect();
        let tubes = track_clip(&clip(0, 49), &dets, &TrackerConfig::default()).unwrap();
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].start(), 0);
        assert_eq!(tubes[0].end(), 49);
        for (e, b) in tubes[0].entries.iter().zip(&boxes) {
            assert_eq!(&e.bbox, b);
        }
    }

    #[test]
    fn short_lived_track_is_not_emitted() {
        let b = BoundingBox::from_cxcywh(50.0, 50.0, 20.0, 40.0);
        let dets = vec![det(0, b, None), det(1, b, None)];
        assert!(track_clip(&clip(0, 9), &dets, &TrackerConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn coasting_gap_is_filled() {
        let b = |t: u32| BoundingBox::from_cxcywh(100.0 + t as f64, 100.0, 30.0, 80.0);
        let dets: Vec<_> = (0..30)
            .filter(|t| !(10..15).contains(t))
            .map(|t| det(t, b(t), None))
            .collect();
        let tubes = track_clip(&clip(0, 29), &dets, &TrackerConfig::default()).unwrap();
        assert_eq!(tubes.len(), 1);
        tubes[0].validate().unwrap();
        assert_eq!(tubes[0].len(), 30);
        let filled = tubes[0].box_at(12).unwrap();
        assert!(iou(filled, &b(12)) > 0.8);
    }

    #[test]
    fn detection_outside_clip_rejected() {
        let b = BoundingBox::from_cxcywh(50.0, 50.0, 20.0, 40.0);
        assert!(matches!(
            track_clip(&clip(10, 20), &[det(5, b, None)], &TrackerConfig::default()),
            Err(Error::MalformedInput(_))
        ));
    }

    #[test]
    fn cost_blend() {
        let b = BoundingBox::from_cxcywh(50.0, 50.0, 20.0, 40.0);
        let d = det(0, b, Some(vec![0.0, 1.0]));
        assert_eq!(association_cost(&b, None, &d, 0.5), 0.0);
        assert!((association_cost(&b, Some(&[1.0, 0.0]), &d, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_norm_checked() {
        let b = BoundingBox::from_cxcywh(50.0, 50.0, 20.0, 40.0);
        assert!(det(0, b, Some(vec![0.6, 0.8])).validate().is_ok());
        assert!(det(0, b, Some(vec![0.6, 0.9])).validate().is_err());
    }
}
