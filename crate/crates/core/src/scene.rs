//! Content-based scene cut detection over per-frame HSV histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bins per channel in the histogram file format.
pub const HISTOGRAM_BINS: usize = 16;

const SUM_TOLERANCE: f64 = 1e-6;

/// Hue, saturation and value histograms of one frame, each normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHistogram {
    #[serde(rename = "frame")]
    pub frame_index: u32,
    pub hue: Vec<f64>,
    pub sat: Vec<f64>,
    pub val: Vec<f64>,
}

impl FrameHistogram {
    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.hue, &self.sat, &self.val]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hue.len();
        if n == 0 || self.sat.len() != n || self.val.len() != n {
            return Err(Error::malformed(format!(
                "frame {}: channels must be non-empty and of equal length",
                self.frame_index
            )));
        }
        for ch in self.channels() {
            if ch.iter().any(|b| !(0.0..=1.0).contains(b)) {
                return Err(Error::malformed(format!(
                    "frame {}: histogram bin outside [0, 1]",
                    self.frame_index
                )));
            }
            let sum: f64 = ch.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::malformed(format!(
                    "frame {}: histogram sums to {sum}, expected 1",
                    self.frame_index
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive frame range of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: u32,
    pub start_frame: u32,
    pub end_frame: u32,
}

impl Clip {
    pub fn contains(&self, frame: u32) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    pub fn len(&self) -> u32 {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub threshold: f64,
    pub min_clip_len: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            threshold: 27.0,
            min_clip_len: 15,
        }
    }
}

/// Content change between two frames in `[0, 100]`: the mean over the three
/// channels of the L1 histogram distance, scaled so that disjoint histograms
/// score 100.
pub fn content_delta(a: &FrameHistogram, b: &FrameHistogram) -> f64 {
    let per_channel = a.channels().into_iter().zip(b.channels()).map(|(x, y)| {
        let l1: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
        50.0 * l1
    });
    per_channel.sum::<f64>() / 3.0
}

/// Splits the frame range into clips at content jumps.
///
/// A cut goes before frame `t` when `content_delta(t - 1, t) > threshold`,
/// unless fewer than `min_clip_len` frames have passed since the previous cut.
/// The clips tile `[first_frame, last_frame]`.
pub fn detect_scenes(histograms: &[FrameHistogram], cfg: &SceneConfig) -> Result<Vec<Clip>> {
    let first = histograms
        .first()
        .ok_or_else(|| Error::EmptyInput("no frame histograms".into()))?;
    if cfg.threshold.is_nan() || cfg.threshold <= 0.0 || cfg.min_clip_len < 1 {
        return Err(Error::malformed(
            "scene threshold must be > 0 and min_clip_len >= 1",
        ));
    }
    for (i, w) in histograms.windows(2).enumerate() {
        if w[1].frame_index != w[0].frame_index + 1 {
            return Err(Error::malformed(format!(
                "histogram frames not contiguous at position {}: {} then {}",
                i + 1,
                w[0].frame_index,
                w[1].frame_index
            )));
        }
    }

    let mut clips = Vec::new();
    let mut start = first.frame_index;
    for w in histograms.windows(2) {
        let t = w[1].frame_index;
        if content_delta(&w[0], &w[1]) > cfg.threshold && t - start >= cfg.min_clip_len {
            clips.push((start, t - 1));
            start = t;
        }
    }
    clips.push((start, histograms[histograms.len() - 1].frame_index));
    Ok(clips
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| Clip {
            clip_id: i as u32,
            start_frame: s,
            end_frame: e,
        })
        .collect())
}
