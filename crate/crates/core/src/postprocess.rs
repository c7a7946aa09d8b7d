//! Cleaning of tube proposals within a clip: duplicate removal, reconnection
//! of fragments, Gaussian smoothing and the multi-person clip filter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attributes::SentenceAttributes;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tube::{Tube, TubeEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub dup_time_overlap_min: f64,
    pub dup_iou_min: f64,
    pub reconnect_overlap_max_frames: u32,
    pub reconnect_iou_min: f64,
    pub smooth_sigma: f64,
    pub smooth_radius: u32,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            dup_time_overlap_min: 0.8,
            dup_iou_min: 0.7,
            reconnect_overlap_max_frames: 10,
            reconnect_iou_min: 0.5,
            smooth_sigma: 1.0,
            smooth_radius: 2,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            self.dup_time_overlap_min,
            self.dup_iou_min,
            self.reconnect_iou_min,
        ];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::malformed("postprocess ratios must lie in [0, 1]"));
        }
        if self.smooth_radius < 1 || !self.smooth_sigma.is_finite() || self.smooth_sigma <= 0.0 {
            return Err(Error::malformed(
                "postprocess needs smooth_radius >= 1 and smooth_sigma > 0",
            ));
        }
        Ok(())
    }
}

/// Mean per-frame IoU over the frames both tubes cover, 0 without overlap.
pub fn mean_overlap_iou(a: &Tube, b: &Tube) -> f64 {
    let Some((s, e)) = a.overlap(b) else {
        return 0.0;
    };
    let sum: f64 = (s..=e)
        .map(|t| iou(a.box_at(t).unwrap(), b.box_at(t).unwrap()))
        .sum();
    sum / f64::from(e - s + 1)
}

fn is_duplicate(shorter: &Tube, longer: &Tube, cfg: &PostprocessConfig) -> bool {
    let Some((s, e)) = shorter.overlap(longer) else {
        return false;
    };
    let ratio = f64::from(e - s + 1) / shorter.len() as f64;
    ratio >= cfg.dup_time_overlap_min && mean_overlap_iou(shorter, longer) >= cfg.dup_iou_min
}

/// Deletes tubes that mostly repeat a longer one.
///
/// Tubes are visited longest first (ties by id); a tube is dropped when it
/// duplicates one already kept. Survivors keep their input order.
pub fn dedup(tubes: &[Tube], cfg: &PostprocessConfig) -> Vec<Tube> {
    let mut order: Vec<usize> = (0..tubes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(tubes[i].len()), tubes[i].tube_id));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept
            .iter()
            .any(|&k| is_duplicate(&tubes[i], &tubes[k], cfg))
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| tubes[i].clone()).collect()
}

/// Junction score when `a` can be continued by `b`, `None` otherwise.
fn junction_iou(a: &Tube, b: &Tube, cfg: &PostprocessConfig) -> Option<f64> {
    if a.clip_id != b.clip_id || b.start() <= a.start() || b.end() <= a.end() {
        return None;
    }
    let limit = cfg.reconnect_overlap_max_frames;
    let score = if b.start() <= a.end() {
        if a.end() - b.start() + 1 > limit {
            return None;
        }
        mean_overlap_iou(a, b)
    } else {
        if b.start() - a.end() - 1 > limit {
            return None;
        }
        iou(&a.entries[a.len() - 1].bbox, &b.entries[0].bbox)
    };
    (score >= cfg.reconnect_iou_min).then_some(score)
}

fn merge(a: &Tube, b: &Tube) -> Tube {
    let mut entries: Vec<TubeEntry> = Vec::with_capacity((b.end() - a.start() + 1) as usize);
    if b.start() <= a.end() {
        let mid = (b.start() + a.end()) / 2;
        entries.extend(a.entries.iter().filter(|e| e.frame <= mid));
        entries.extend(b.entries.iter().filter(|e| e.frame > mid));
    } else {
        let last = a.entries[a.len() - 1].bbox;
        let first = b.entries[0].bbox;
        let span = f64::from(b.start() - a.end());
        entries.extend_from_slice(&a.entries);
        for t in a.end() + 1..b.start() {
            entries.push(TubeEntry {
                frame: t,
                bbox: last.lerp(&first, f64::from(t - a.end()) / span),
            });
        }
        entries.extend_from_slice(&b.entries);
    }
    let mean_embedding = match (&a.mean_embedding, &b.mean_embedding) {
        (Some(x), Some(y)) if x.len() == y.len() => {
            let (wa, wb) = (a.len() as f64, b.len() as f64);
            let sum: Vec<f64> = x
                .iter()
                .zip(y)
                .map(|(p, q)| wa * f64::from(*p) + wb * f64::from(*q))
                .collect();
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 0.0).then(|| sum.iter().map(|v| (v / norm) as f32).collect())
        }
        (Some(x), None) => Some(x.clone()),
        (None, Some(y)) => Some(y.clone()),
        _ => None,
    };
    Tube {
        tube_id: a.tube_id,
        clip_id: a.clip_id,
        entries,
        mean_embedding,
    }
}

/// Joins fragments where one tube ends as another begins.
///
/// Each round merges the admissible pair with the highest junction IoU (ties
/// to the lowest ids) and repeats until no pair qualifies. The merged tube
/// keeps the earlier tube's id and position.
pub fn reconnect(tubes: &[Tube], cfg: &PostprocessConfig) -> Vec<Tube> {
    let mut out: Vec<Tube> = tubes.to_vec();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..out.len() {
            for j in 0..out.len() {
                if i == j {
                    continue;
                }
                if let Some(score) = junction_iou(&out[i], &out[j], cfg) {
                    let better = match best {
                        None => true,
                        Some((s, bi, bj)) => {
                            score > s
                                || (score == s
                                    && (out[i].tube_id, out[j].tube_id)
                                        < (out[bi].tube_id, out[bj].tube_id))
                        }
                    };
                    if better {
                        best = Some((score, i, j));
                    }
                }
            }
        }
        let Some((_, i, j)) = best else {
            return out;
        };
        out[i] = merge(&out[i], &out[j]);
        out.remove(j);
    }
}

fn gaussian_kernel(sigma: f64, radius: u32) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Convolves a signal with a truncated Gaussian, renormalizing at the edges.
pub fn smooth_signal(signal: &[f64], sigma: f64, radius: u32) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma, radius);
    let r = radius as i64;
    let n = signal.len() as i64;
    (0..n)
        .map(|t| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for k in -r..=r {
                let s = t + k;
                if (0..n).contains(&s) {
                    let w = kernel[(k + r) as usize];
                    acc += w * signal[s as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Gaussian smoothing of centre, width and height over the tube's frames.
pub fn smooth(tube: &Tube, cfg: &PostprocessConfig) -> Tube {
    let coords: Vec<[f64; 4]> = tube.entries.iter().map(|e| e.bbox.to_cxcywh()).collect();
    let channels: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            let signal: Vec<f64> = coords.iter().map(|v| v[c]).collect();
            smooth_signal(&signal, cfg.smooth_sigma, cfg.smooth_radius)
        })
        .collect();
    let entries = tube
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| TubeEntry {
            frame: e.frame,
            bbox: BoundingBox::from_cxcywh(
                channels[0][i],
                channels[1][i],
                channels[2][i],
                channels[3][i],
            ),
        })
        .collect();
    Tube {
        entries,
        ..tube.clone()
    }
}

/// Drops every tube of a clip that holds a single tube when the sentence
/// mentions more than one person.
pub fn filter_candidates(tubes: &[Tube], attrs: &SentenceAttributes) -> Vec<Tube> {
    if attrs.person_count <= 1 {
        return tubes.to_vec();
    }
    let mut per_clip: BTreeMap<u32, usize> = BTreeMap::new();
    for t in tubes {
        *per_clip.entry(t.clip_id).or_default() += 1;
    }
    tubes
        .iter()
        .filter(|t| per_clip[&t.clip_id] != 1)
        .cloned()
        .collect()
}

/// Dedup, reconnect and smooth one clip's tubes.
pub fn clean_clip(tubes: &[Tube], cfg: &PostprocessConfig) -> Vec<Tube> {
    let deduped = dedup(tubes, cfg);
    reconnect(&deduped, cfg)
        .iter()
        .map(|t| smooth(t, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::extract_attributes;
    use proptest::prelude::*;

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn still(id: u32, start: u32, end: u32, x: f64) -> Tube {
        let boxes: Vec<_> = (start..=end).map(|_| bx(x)).collect();
        Tube::from_boxes(id, 0, start, &boxes)
    }

    #[test]
    fn identical_tubes_dedup_to_one() {
        let out = dedup(
            &[still(0, 0, 9, 0.0), still(1, 0, 9, 0.0)],
            &PostprocessConfig::default(),
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tube_id, 0);
    }

    #[test]
    fn disjoint_tubes_survive() {
        let out = dedup(
            &[still(0, 0, 9, 0.0), still(1, 20, 29, 0.0)],
            &PostprocessConfig::default(),
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn mostly_covered_tube_deleted() {
        // A: frames 0..=9; B: frames 1..=20, so B covers 9 of A's 10 frames.
        // Boxes [0,0,10,10] vs [0,0,10,8]: IoU = 80/100 = 0.8.
        let a = still(0, 0, 9, 0.0);
        let b_boxes: Vec<_> = (1..=20)
            .map(|_| BoundingBox::new(0.0, 0.0, 10.0, 8.0).unwrap())
            .collect();
        let b = Tube::from_boxes(1, 0, 1, &b_boxes);
        assert!((mean_overlap_iou(&a, &b) - 0.8).abs() < 1e-12);
        let cfg = PostprocessConfig {
            dup_time_overlap_min: 0.8,
            dup_iou_min: 0.7,
            ..Default::default()
        };
        let out = dedup(&[a, b], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tube_id, 1);
    }

    #[test]
    fn overlapping_fragments_merge() {
        let cfg = PostprocessConfig {
            reconnect_overlap_max_frames: 5,
            reconnect_iou_min: 0.5,
            ..Default::default()
        };
        let out = reconnect(&[still(0, 0, 49, 0.0), still(1, 48, 99, 0.0)], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start(), out[0].end()), (0, 99));
        out[0].validate().unwrap();
    }

    #[test]
    fn gap_merge_interpolates() {
        let cfg = PostprocessConfig::default();
        let out = reconnect(&[still(0, 0, 9, 0.0), still(1, 13, 20, 2.0)], &cfg);
        assert_eq!(out.len(), 1);
        out[0].validate().unwrap();
        // frames 10, 11, 12 sit at 1/4, 2/4, 3/4 of the way from x=0 to x=2
        assert!((out[0].box_at(11).unwrap().x1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distant_or_mismatched_fragments_stay_apart() {
        let cfg = PostprocessConfig {
            reconnect_overlap_max_frames: 5,
            ..Default::default()
        };
        assert_eq!(
            reconnect(&[still(0, 0, 49, 0.0), still(1, 80, 99, 0.0)], &cfg).len(),
            2
        );
        // x shift 8.18 on width 10 gives IoU ~0.1
        let out = reconnect(&[still(0, 0, 49, 0.0), still(1, 48, 99, 8.18)], &cfg);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn smoothing_constant_is_identity() {
        let t = still(0, 0, 9, 3.0);
        let s = smooth(&t, &PostprocessConfig::default());
        for (a, b) in s.entries.iter().zip(&t.entries) {
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-12);
        }
    }

    #[test]
    fn spike_hand_convolved() {
        // sigma 1, radius 2: weights e^-2, e^-0.5, 1, e^-0.5, e^-2
        let sig = smooth_signal(&[0.0, 0.0, 10.0, 0.0, 0.0], 1.0, 2);
        let (w1, w2) = ((-0.5f64).exp(), (-2.0f64).exp());
        let total = 1.0 + 2.0 * w1 + 2.0 * w2;
        assert!((sig[2] - 10.0 / total).abs() < 1e-12);
        assert!((sig[1] - 10.0 * w1 / (total - w2)).abs() < 1e-12);
        assert!((sig[0] - 10.0 * w2 / (1.0 + w1 + w2)).abs() < 1e-12);
        assert!(sig.iter().all(|v| (0.0..=10.0).contains(v)));
        assert!(sig[2] < 10.0);
    }

    #[test]
    fn two_frame_tube_is_weighted_mean() {
        let sig = smooth_signal(&[2.0, 6.0], 1.0, 2);
        let w1 = (-0.5f64).exp();
        assert!((sig[0] - (2.0 + 6.0 * w1) / (1.0 + w1)).abs() < 1e-12);
        assert!((sig[1] - (2.0 * w1 + 6.0) / (1.0 + w1)).abs() < 1e-12);
    }

    #[test]
    fn filter_rule() {
        let two = extract_attributes("The man walks to the woman.").unwrap();
        let one = extract_attributes("The man walks.").unwrap();
        let single = vec![still(0, 0, 9, 0.0)];
        assert!(filter_candidates(&single, &two).is_empty());
        assert_eq!(filter_candidates(&single, &one).len(), 1);
        let three = vec![
            still(0, 0, 9, 0.0),
            still(1, 0, 9, 20.0),
            still(2, 0, 9, 40.0),
        ];
        assert_eq!(filter_candidates(&three, &two).len(), 3);
    }

    fn random_tubes() -> impl Strategy<Value = Vec<Tube>> {
        proptest::collection::vec((0u32..60, 1u32..40, 0.0f64..30.0, 0.0f64..2.0), 1..6).prop_map(
            |v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (start, len, x, drift))| {
                        let boxes: Vec<_> = (0..len).map(|k| bx(x + drift * k as f64)).collect();
                        Tube::from_boxes(i as u32, 0, start, &boxes)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn reconnect_is_a_fixed_point(tubes in random_tubes()) {
            let cfg = PostprocessConfig::default();
            let once = reconnect(&tubes, &cfg);
            prop_assert_eq!(reconnect(&once, &cfg), once.clone());
            for t in once.iter().chain(dedup(&tubes, &cfg).iter()) {
                prop_assert!(t.validate().is_ok());
            }
        }

        #[test]
        fn smoothing_keeps_span_and_validity(tubes in random_tubes()) {
            let cfg = PostprocessConfig::default();
            for t in &tubes {
                let s = smooth(t, &cfg);
                prop_assert_eq!((s.start(), s.end()), (t.start(), t.end()));
                prop_assert!(s.validate().is_ok());
            }
        }

        #[test]
        fn smoothing_preserves_interior_mean(
            inner in proptest::collection::vec(-50.0f64..50.0, 1..30),
            base in -100.0f64..100.0,
            radius in 1u32..4,
            sigma in 0.3f64..3.0,
        ) {
            // deviations from `base` stay at least 2*radius frames from both ends
            let pad = 2 * radius as usize;
            let mut signal = vec![base; pad];
            signal.extend(inner.iter().map(|d| base + d));
            signal.extend(std::iter::repeat_n(base, pad));
            let out = smooth_signal(&signal, sigma, radius);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((mean(&out) - mean(&signal)).abs() < 1e-9);
        }

        #[test]
        fn filter_keeps_all_for_single_person(tubes in random_tubes()) {
            let one = extract_attributes("The woman sits.").unwrap();
            prop_assert_eq!(filter_candidates(&tubes, &one), tubes);
        }
    }
}
