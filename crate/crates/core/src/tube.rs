use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// One box per frame over a contiguous frame span, inside a single clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub tube_id: u32,
    pub clip_id: u32,
    pub entries: Vec<TubeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_embedding: Option<Vec<f32>>,
}

impl Tube {
    /// Builds a tube from a start frame and consecutive boxes.
    pub fn from_boxes(tube_id: u32, clip_id: u32, start: u32, boxes: &[BoundingBox]) -> Self {
        Tube {
            tube_id,
            clip_id,
            entries: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| TubeEntry {
                    frame: start + i as u32,
                    bbox: *b,
                })
                .collect(),
            mean_embedding: None,
        }
    }

    pub fn start(&self) -> u32 {
        self.entries[0].frame
    }

    pub fn end(&self) -> u32 {
        self.entries[self.entries.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn box_at(&self, frame: u32) -> Option<&BoundingBox> {
        if self.entries.is_empty() || frame < self.start() || frame > self.end() {
            return None;
        }
        Some(&self.entries[(frame - self.start()) as usize].bbox)
    }

    /// Inclusive frame range shared with `other`, if any.
    pub fn overlap(&self, other: &Tube) -> Option<(u32, u32)> {
        let s = self.start().max(other.start());
        let e = self.end().min(other.end());
        (s <= e).then_some((s, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::malformed(format!(
                "tube {} has no entries",
                self.tube_id
            )));
        }
        for w in self.entries.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::malformed(format!(
                    "tube {} not contiguous at frame {}",
                    self.tube_id, w[0].frame
                )));
            }
        }
        for e in &self.entries {
            e.bbox.validate()?;
        }
        Ok(())
    }
}
