//! Non-neural core of a human-centric spatio-temporal video grounding
//! pipeline.
//!
//! Sentences are parsed into per-person attribute triples, videos (given as
//! per-frame colour histograms and detections) are split into scene clips and
//! tracked into tube proposals, and the proposals are cleaned, labelled
//! against ground truth and scored with vIoU. The composite training loss is
//! provided as a numeric reference over externally produced model scores.
//!
//! ```
//! use tubeground::{extract_attributes, ClothingColor, Gender};
//!
//! let a = extract_attributes("The man in the blue shirt talks to a woman.").unwrap();
//! assert_eq!(a.person_count, 2);
//! assert_eq!(a.triples[0].gender, Gender::Male);
//! assert_eq!(a.triples[0].color, ClothingColor::Blue);
//! ```

pub mod attributes;
pub mod config;
pub mod error;
pub mod fixture;
pub mod formats;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod scene;
pub mod tracker;
pub mod tube;

pub use attributes::{
    extract_attributes, AttributeParser, AttributeTriple, ClothingColor, ClothingType, Gender,
    SentenceAttributes,
};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use geometry::{iou, BoundingBox};
pub use loss::{total_loss, LossBreakdown, LossVariant, LossWeights};
pub use metrics::{evaluate_dataset, label, match_scores, viou, EvaluationReport, GroundTruth};
pub use pipeline::run_pipeline;
pub use scene::{detect_scenes, Clip, FrameHistogram, SceneConfig};
pub use tracker::{track_clip, Detection, TrackerConfig};
pub use tube::{Tube, TubeEntry};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/attributes.md")]
    mod attributes {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/postprocess.md")]
    mod postprocess {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
