//! On-disk artifacts: JSON documents carrying `schema_version`, and JSON-lines
//! record files. Writes go to a temporary sibling file that is then renamed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeTriple, SentenceAttributes};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::loss::{IntervalDistances, LossBreakdown, LossVariant};
use crate::metrics::{EvaluationReport, GroundTruth, LabelKind, Prediction};
use crate::scene::{Clip, FrameHistogram, HISTOGRAM_BINS};
use crate::tracker::Detection;
use crate::tube::Tube;

pub const SCHEMA_VERSION: &str = "1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::schema(path, format!("serialize: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::schema(path, format!("serialize: {e}")))?,
        );
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::schema(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// A JSON document whose top-level `schema_version` must match.
pub trait Document: Serialize + DeserializeOwned {
    fn schema_version(&self) -> &str;

    fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_str()) {
            Some(SCHEMA_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    found: other.to_string(),
                    expected: SCHEMA_VERSION.to_string(),
                })
            }
            None => return Err(Error::schema(path, "missing field `schema_version`")),
        }
        serde_json::from_value(value).map_err(|e| Error::schema(path, e.to_string()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

macro_rules! document {
    ($t:ty) => {
        impl Document for $t {
            fn schema_version(&self) -> &str {
                &self.schema_version
            }
        }
    };
}

fn version() -> String {
    SCHEMA_VERSION.to_string()
}

/// Input line of `parse-attrs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub id: String,
    pub sentence: String,
}

/// Output line of `parse-attrs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub id: String,
    pub sentence: String,
    pub triples: Vec<AttributeTriple>,
    pub person_count: usize,
}

impl AttributeRecord {
    pub fn attributes(&self) -> SentenceAttributes {
        SentenceAttributes {
            triples: self.triples.clone(),
            person_count: self.person_count,
        }
    }
}

pub fn read_histograms(path: &Path) -> Result<Vec<FrameHistogram>> {
    let hists: Vec<FrameHistogram> = read_jsonl(path)?;
    for h in &hists {
        if h.hue.len() != HISTOGRAM_BINS
            || h.sat.len() != HISTOGRAM_BINS
            || h.val.len() != HISTOGRAM_BINS
        {
            return Err(Error::schema(
                path,
                format!(
                    "frame {}: each channel needs {HISTOGRAM_BINS} bins",
                    h.frame_index
                ),
            ));
        }
        h.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
    }
    Ok(hists)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_jsonl(path)?;
    let mut dim = None;
    for d in &dets {
        d.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        if let Some(e) = &d.embedding {
            match dim {
                None => dim = Some(e.len()),
                Some(n) if n != e.len() => {
                    return Err(Error::schema(
                        path,
                        format!(
                            "frame {}: embedding dimension {} != {n}",
                            d.frame_index,
                            e.len()
                        ),
                    ))
                }
                _ => {}
            }
        }
    }
    Ok(dets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipsDoc {
    pub schema_version: String,
    pub clips: Vec<Clip>,
}
document!(ClipsDoc);

impl ClipsDoc {
    pub fn new(clips: Vec<Clip>) -> Self {
        ClipsDoc {
            schema_version: version(),
            clips,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubesDoc {
    pub schema_version: String,
    pub tubes: Vec<Tube>,
}
document!(TubesDoc);

impl TubesDoc {
    pub fn new(tubes: Vec<Tube>) -> Self {
        TubesDoc {
            schema_version: version(),
            tubes,
        }
    }
}

/// Tubes retained for one query after the multi-person clip filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCandidates {
    pub query_id: String,
    pub tube_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanTubesDoc {
    pub schema_version: String,
    pub tubes: Vec<Tube>,
    pub candidates: Vec<QueryCandidates>,
}
document!(CleanTubesDoc);

/// A query's tube: ground truth in `gt.json`, a prediction in `preds.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube_id: Option<u32>,
    pub start: u32,
    pub end: u32,
    pub boxes: Vec<BoundingBox>,
}

impl TubeRecord {
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let gt = GroundTruth {
            start: self.start,
            end: self.end,
            boxes: self.boxes.clone(),
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn prediction(&self) -> Result<Prediction> {
        let tube = self.ground_truth()?.as_tube(self.tube_id.unwrap_or(0));
        Ok(Prediction {
            query_id: self.query_id.clone(),
            tube,
            span: None,
        })
    }

    pub fn from_tube(query_id: &str, tube: &Tube) -> Self {
        TubeRecord {
            query_id: query_id.to_string(),
            tube_id: Some(tube.tube_id),
            start: tube.start(),
            end: tube.end(),
            boxes: tube.entries.iter().map(|e| e.bbox).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthDoc {
    pub schema_version: String,
    pub queries: Vec<TubeRecord>,
}
document!(GroundTruthDoc);

impl GroundTruthDoc {
    pub fn new(queries: Vec<TubeRecord>) -> Self {
        GroundTruthDoc {
            schema_version: version(),
            queries,
        }
    }

    pub fn ground_truths(&self, path: &Path) -> Result<Vec<(String, GroundTruth)>> {
        self.queries
            .iter()
            .map(|q| {
                q.ground_truth()
                    .map(|g| (q.query_id.clone(), g))
                    .map_err(|e| Error::schema(path, format!("query {:?}: {e}", q.query_id)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsDoc {
    pub schema_version: String,
    /// How predictions were chosen, e.g. `oracle_max_s_iou`.
    pub selection_mode: String,
    pub predictions: Vec<TubeRecord>,
}
document!(PredictionsDoc);

/// One (query, candidate tube) training label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub query_id: String,
    pub tube_id: u32,
    pub label: LabelKind,
    pub s_overlap: f64,
    pub s_iou: f64,
    /// Gender of the query subject, absent when the sentence does not state it.
    pub ge: Option<crate::loss::GenderClass>,
    pub cls: Vec<u8>,
    pub reg: Vec<Option<(u32, u32)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsDoc {
    pub schema_version: String,
    pub labels: Vec<LabelRecord>,
}
document!(LabelsDoc);

/// Model outputs for one (query, tube) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub query_id: String,
    pub tube_id: u32,
    pub gl: f64,
    pub ge: [f64; 2],
    pub cls: Vec<f64>,
    pub reg: Vec<IntervalDistances>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresDoc {
    pub schema_version: String,
    pub scores: Vec<ScoreRecord>,
}
document!(ScoresDoc);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreakdownDoc {
    pub schema_version: String,
    pub variant: LossVariant,
    /// Pairs used; `ignored` labels are skipped.
    pub tubes: usize,
    pub breakdown: LossBreakdown,
}
document!(BreakdownDoc);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDoc {
    pub schema_version: String,
    pub selection_mode: String,
    #[serde(flatten)]
    pub report: EvaluationReport,
}
document!(ReportDoc);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clips.json");
        std::fs::write(&p, r#"{"schema_version": "9", "clips": []}"#).unwrap();
        assert!(matches!(ClipsDoc::load(&p), Err(Error::Version { .. })));
        std::fs::write(&p, r#"{"clips": []}"#).unwrap();
        assert!(matches!(ClipsDoc::load(&p), Err(Error::Schema { .. })));
        std::fs::write(&p, r#"{"schema_version": "1", "clips": [], "extra": 1}"#).unwrap();
        assert!(matches!(ClipsDoc::load(&p), Err(Error::Schema { .. })));
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dets.jsonl");
        std::fs::write(
            &p,
            "{\"frame\": 0, \"box\": [0,0,1,1], \"conf\": 0.5}\n{\"frame\": 1}\n",
        )
        .unwrap();
        let err = read_detections(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("box"), "{err}");
        assert!(matches!(
            read_detections(&dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn detection_line_format() {
        let d: Detection = serde_json::from_str(
            r#"{"frame": 3, "box": [1, 2, 3, 4], "conf": 0.7, "emb": [1.0, 0.0]}"#,
        )
        .unwrap();
        assert_eq!(d.frame_index, 3);
        assert_eq!(d.embedding.as_deref(), Some(&[1.0f32, 0.0][..]));
        let back = serde_json::to_string(&d).unwrap();
        assert_eq!(
            back,
            r#"{"frame":3,"box":[1.0,2.0,3.0,4.0],"conf":0.7,"emb":[1.0,0.0]}"#
        );
    }

    proptest! {
        #[test]
        fn tubes_doc_roundtrip(start in 0u32..1000, xs in proptest::collection::vec(0.0f64..500.0, 1..20)) {
            let boxes: Vec<_> = xs.iter().map(|&x| BoundingBox::new(x, x, x + 3.5, x + 7.25).unwrap()).collect();
            let doc = TubesDoc::new(vec![Tube::from_boxes(4, 2, start, &boxes)]);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("tubes.json");
            doc.save(&p).unwrap();
            prop_assert_eq!(TubesDoc::load(&p).unwrap(), doc);
        }
    }
}
