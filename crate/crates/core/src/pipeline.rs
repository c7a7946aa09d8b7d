//! Stage functions and the end-to-end runner.
//!
//! Each stage has an in-memory form over parsed documents. `run_pipeline`
//! chains them and persists every intermediate, so any stage can be re-run
//! from the files it left behind.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attributes::AttributeParser;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fixture::{Fixture, FixtureSpec};
use crate::formats::{
    read_detections, read_histograms, read_jsonl, write_json, write_jsonl, AttributeRecord,
    BreakdownDoc, CleanTubesDoc, ClipsDoc, Document, GroundTruthDoc, LabelRecord, LabelsDoc,
    PredictionsDoc, QueryCandidates, ReportDoc, ScoresDoc, SentenceRecord, TubeRecord, TubesDoc,
    SCHEMA_VERSION,
};
use crate::loss::{
    baseline_variant_loss, GenderClass, LabelPack, LossVariant, LossWeights, ScorePack,
};
use crate::metrics::{
    evaluate_dataset, frame_targets, label as match_label, match_scores, FrameTargets, GroundTruth,
    LabelKind, Prediction,
};
use crate::postprocess::{clean_clip, filter_candidates, PostprocessConfig};
use crate::scene::{detect_scenes, Clip, FrameHistogram, SceneConfig};
use crate::tracker::{track_clip, Detection, TrackerConfig};
use crate::tube::Tube;

/// Selection mode recorded in predictions and reports.
pub const ORACLE_SELECTION: &str = "oracle_max_s_iou";

/// Artifact names used by `run` and `make-fixture`.
pub mod files {
    pub const SENTENCES: &str = "sentences.jsonl";
    pub const HISTOGRAMS: &str = "hists.jsonl";
    pub const DETECTIONS: &str = "dets.jsonl";
    pub const GROUND_TRUTH: &str = "gt.json";
    pub const FIXTURE_SPEC: &str = "fixture.json";
    pub const ATTRIBUTES: &str = "attrs.jsonl";
    pub const CLIPS: &str = "clips.json";
    pub const TUBES: &str = "tubes.json";
    pub const CLEAN_TUBES: &str = "tubes_clean.json";
    pub const LABELS: &str = "labels.json";
    pub const PREDICTIONS: &str = "preds.json";
    pub const REPORT: &str = "report.json";
}

/// Runs `f` on a pool of `jobs` threads; `None` or 0 uses the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::malformed(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

pub fn parse_attrs(sentences: &[SentenceRecord]) -> Result<Vec<AttributeRecord>> {
    let parser = AttributeParser::default();
    let mut seen = BTreeSet::new();
    sentences
        .iter()
        .map(|s| {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::malformed(format!(
                    "duplicate sentence id {:?}",
                    s.id
                )));
            }
            let a = parser
                .extract(&s.sentence)
                .map_err(|e| Error::malformed(format!("sentence {:?}: {e}", s.id)))?;
            Ok(AttributeRecord {
                id: s.id.clone(),
                sentence: s.sentence.clone(),
                triples: a.triples,
                person_count: a.person_count,
            })
        })
        .collect()
}

pub fn split_scenes(histograms: &[FrameHistogram], cfg: &SceneConfig) -> Result<ClipsDoc> {
    Ok(ClipsDoc::new(detect_scenes(histograms, cfg)?))
}

/// Tracks every clip in parallel, then numbers tubes globally in clip order.
pub fn track(clips: &[Clip], detections: &[Detection], cfg: &TrackerConfig) -> Result<TubesDoc> {
    let mut per_clip: Vec<Vec<Detection>> = vec![Vec::new(); clips.len()];
    for d in detections {
        let Some(i) = clips.iter().position(|c| c.contains(d.frame_index)) else {
            return Err(Error::malformed(format!(
                "detection at frame {} lies outside every clip",
                d.frame_index
            )));
        };
        per_clip[i].push(d.clone());
    }
    let tracked: Vec<Vec<Tube>> = clips
        .par_iter()
        .zip(per_clip.par_iter())
        .map(|(clip, dets)| track_clip(clip, dets, cfg))
        .collect::<Result<_>>()?;
    Ok(TubesDoc::new(renumber(tracked.into_iter().flatten())))
}

fn renumber(tubes: impl IntoIterator<Item = Tube>) -> Vec<Tube> {
    tubes
        .into_iter()
        .enumerate()
        .map(|(i, t)| Tube {
            tube_id: i as u32,
            ..t
        })
        .collect()
}

fn group_by_clip(tubes: &[Tube]) -> BTreeMap<u32, Vec<Tube>> {
    let mut out: BTreeMap<u32, Vec<Tube>> = BTreeMap::new();
    for t in tubes {
        out.entry(t.clip_id).or_default().push(t.clone());
    }
    out
}

/// Cleans each clip, renumbers, and lists per query the tubes that survive
/// the multi-person clip filter.
pub fn postprocess(
    tubes: &[Tube],
    attrs: &[AttributeRecord],
    cfg: &PostprocessConfig,
) -> Result<CleanTubesDoc> {
    cfg.validate()?;
    for t in tubes {
        t.validate()?;
    }
    let groups: Vec<Vec<Tube>> = group_by_clip(tubes).into_values().collect();
    let cleaned: Vec<Vec<Tube>> = groups.par_iter().map(|g| clean_clip(g, cfg)).collect();
    let tubes = renumber(cleaned.into_iter().flatten());
    let candidates = attrs
        .iter()
        .map(|a| QueryCandidates {
            query_id: a.id.clone(),
            tube_ids: filter_candidates(&tubes, &a.attributes())
                .iter()
                .map(|t| t.tube_id)
                .collect(),
        })
        .collect();
    Ok(CleanTubesDoc {
        schema_version: SCHEMA_VERSION.to_string(),
        tubes,
        candidates,
    })
}

/// Labels every (query, candidate) pair and picks, per query, the candidate
/// with the highest s_iou (ties: higher s_overlap, then lower tube id).
pub fn label(
    clean: &CleanTubesDoc,
    attrs: &[AttributeRecord],
    gts: &[(String, GroundTruth)],
) -> Result<(LabelsDoc, PredictionsDoc)> {
    let by_id: BTreeMap<u32, &Tube> = clean.tubes.iter().map(|t| (t.tube_id, t)).collect();
    let candidates: BTreeMap<&str, &[u32]> = clean
        .candidates
        .iter()
        .map(|c| (c.query_id.as_str(), c.tube_ids.as_slice()))
        .collect();
    let attrs: BTreeMap<&str, &AttributeRecord> =
        attrs.iter().map(|a| (a.id.as_str(), a)).collect();
    let all_ids: Vec<u32> = by_id.keys().copied().collect();

    let mut sorted: Vec<&(String, GroundTruth)> = gts.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let per_query: Vec<(Vec<LabelRecord>, Option<TubeRecord>)> = sorted
        .par_iter()
        .map(|(qid, gt)| -> Result<_> {
            let ids = candidates.get(qid.as_str()).copied().unwrap_or(&all_ids);
            let ge = attrs
                .get(qid.as_str())
                .and_then(|a| a.triples.first())
                .and_then(|t| GenderClass::from_gender(t.gender));
            let mut records = Vec::with_capacity(ids.len());
            let mut best: Option<(&Tube, f64, f64)> = None;
            for id in ids {
                let tube = by_id.get(id).ok_or_else(|| {
                    Error::malformed(format!("query {qid:?} lists unknown tube {id}"))
                })?;
                let scores = match_scores(tube, gt)?;
                let l = match_label(scores);
                let targets = match frame_targets(tube, gt) {
                    Ok(t) => t,
                    Err(Error::NoPositiveFrames) => FrameTargets::negative(tube.len()),
                    Err(e) => return Err(e),
                };
                records.push(LabelRecord {
                    query_id: qid.clone(),
                    tube_id: tube.tube_id,
                    label: l.value,
                    s_overlap: scores.s_overlap,
                    s_iou: scores.s_iou,
                    ge,
                    cls: targets.cls,
                    reg: targets.reg,
                });
                let better = match best {
                    None => true,
                    Some((b, iou, ov)) => {
                        scores.s_iou > iou
                            || (scores.s_iou == iou
                                && (scores.s_overlap > ov
                                    || (scores.s_overlap == ov && tube.tube_id < b.tube_id)))
                    }
                };
                if better {
                    best = Some((tube, scores.s_iou, scores.s_overlap));
                }
            }
            let pred = best.map(|(t, _, _)| TubeRecord::from_tube(qid, t));
            Ok((records, pred))
        })
        .collect::<Result<_>>()?;

    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for (l, p) in per_query {
        labels.extend(l);
        predictions.extend(p);
    }
    Ok((
        LabelsDoc {
            schema_version: SCHEMA_VERSION.to_string(),
            labels,
        },
        PredictionsDoc {
            schema_version: SCHEMA_VERSION.to_string(),
            selection_mode: ORACLE_SELECTION.to_string(),
            predictions,
        },
    ))
}

/// Aligns scores with labels by (query, tube) and evaluates the loss.
/// Ignored pairs are skipped; a scored pair without a label is an error.
pub fn loss(
    scores: &ScoresDoc,
    labels: &LabelsDoc,
    weights: &LossWeights,
    variant: LossVariant,
) -> Result<BreakdownDoc> {
    let mut by_key: BTreeMap<(&str, u32), &crate::formats::ScoreRecord> = BTreeMap::new();
    for s in &scores.scores {
        if by_key.insert((s.query_id.as_str(), s.tube_id), s).is_some() {
            return Err(Error::malformed(format!(
                "duplicate score for query {:?} tube {}",
                s.query_id, s.tube_id
            )));
        }
    }
    let label_keys: BTreeSet<(&str, u32)> = labels
        .labels
        .iter()
        .map(|l| (l.query_id.as_str(), l.tube_id))
        .collect();
    if let Some((q, t)) = by_key.keys().find(|k| !label_keys.contains(*k)) {
        return Err(Error::malformed(format!(
            "score for query {q:?} tube {t} has no label"
        )));
    }

    let mut packs = Vec::new();
    let mut score_packs = Vec::new();
    for l in labels
        .labels
        .iter()
        .filter(|l| l.label != LabelKind::Ignored)
    {
        let s = by_key
            .get(&(l.query_id.as_str(), l.tube_id))
            .ok_or_else(|| {
                Error::malformed(format!(
                    "no scores for query {:?} tube {}",
                    l.query_id, l.tube_id
                ))
            })?;
        score_packs.push(ScorePack {
            gl: s.gl,
            ge: s.ge,
            cls: s.cls.clone(),
            reg: s.reg.clone(),
        });
        packs.push(LabelPack {
            gl: l.label == LabelKind::Positive,
            ge: l.ge,
            targets: FrameTargets {
                cls: l.cls.clone(),
                reg: l.reg.clone(),
            },
        });
    }
    let breakdown = baseline_variant_loss(&score_packs, &packs, weights, variant)?;
    Ok(BreakdownDoc {
        schema_version: SCHEMA_VERSION.to_string(),
        variant,
        tubes: packs.len(),
        breakdown,
    })
}

pub fn evaluate(preds: &PredictionsDoc, gts: &[(String, GroundTruth)]) -> Result<ReportDoc> {
    let predictions: Vec<Prediction> = preds
        .predictions
        .iter()
        .map(TubeRecord::prediction)
        .collect::<Result<_>>()?;
    Ok(ReportDoc {
        schema_version: SCHEMA_VERSION.to_string(),
        selection_mode: preds.selection_mode.clone(),
        report: evaluate_dataset(&predictions, gts)?,
    })
}

/// Input files of a full run.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub sentences: PathBuf,
    pub histograms: PathBuf,
    pub detections: PathBuf,
    pub ground_truth: PathBuf,
}

impl RunInputs {
    /// The file layout written by `make-fixture`.
    pub fn in_dir(dir: &Path) -> Self {
        RunInputs {
            sentences: dir.join(files::SENTENCES),
            histograms: dir.join(files::HISTOGRAMS),
            detections: dir.join(files::DETECTIONS),
            ground_truth: dir.join(files::GROUND_TRUTH),
        }
    }
}

/// Runs every stage and writes its artifact into `out_dir`.
pub fn run_pipeline(
    inputs: &RunInputs,
    cfg: &PipelineConfig,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<ReportDoc> {
    cfg.validate()?;
    let sentences: Vec<SentenceRecord> = read_jsonl(&inputs.sentences)?;
    let histograms = read_histograms(&inputs.histograms)?;
    let detections = read_detections(&inputs.detections)?;
    let gt_doc = GroundTruthDoc::load(&inputs.ground_truth)?;
    let gts = gt_doc.ground_truths(&inputs.ground_truth)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    with_jobs(jobs, || {
        let attrs = parse_attrs(&sentences)?;
        write_jsonl(&out_dir.join(files::ATTRIBUTES), &attrs)?;
        let clips = split_scenes(&histograms, &cfg.scene)?;
        clips.save(&out_dir.join(files::CLIPS))?;
        let tubes = track(&clips.clips, &detections, &cfg.tracker)?;
        tubes.save(&out_dir.join(files::TUBES))?;
        let clean = postprocess(&tubes.tubes, &attrs, &cfg.postprocess)?;
        clean.save(&out_dir.join(files::CLEAN_TUBES))?;
        let (labels, preds) = label(&clean, &attrs, &gts)?;
        labels.save(&out_dir.join(files::LABELS))?;
        preds.save(&out_dir.join(files::PREDICTIONS))?;
        let report = evaluate(&preds, &gts)?;
        report.save(&out_dir.join(files::REPORT))?;
        tracing::info!(
            queries = report.report.counts.queries,
            mean_viou = report.report.mean_viou,
            "pipeline finished"
        );
        Ok(report)
    })?
}

/// Writes a generated fixture in the layout `RunInputs::in_dir` expects.
pub fn write_fixture(spec: &FixtureSpec, fixture: &Fixture, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_json(&dir.join(files::FIXTURE_SPEC), spec)?;
    write_jsonl(&dir.join(files::SENTENCES), &fixture.sentences)?;
    write_jsonl(&dir.join(files::HISTOGRAMS), &fixture.histograms)?;
    write_jsonl(&dir.join(files::DETECTIONS), &fixture.detections)?;
    GroundTruthDoc::new(fixture.ground_truth.clone()).save(&dir.join(files::GROUND_TRUTH))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::make_fixture;

    fn fixture_dir(preset: &str) -> (tempfile::TempDir, RunInputs) {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec::preset(preset).unwrap();
        write_fixture(&spec, &make_fixture(&spec).unwrap(), dir.path()).unwrap();
        let inputs = RunInputs::in_dir(dir.path());
        (dir, inputs)
    }

    #[test]
    fn perfect_single_person() {
        let (dir, inputs) = fixture_dir("single");
        let out = dir.path().join("out");
        let report = run_pipeline(&inputs, &PipelineConfig::default(), &out, Some(2)).unwrap();
        assert!(
            (report.report.mean_viou - 1.0).abs() < 1e-9,
            "{}",
            report.report.mean_viou
        );
        assert_eq!(report.selection_mode, ORACLE_SELECTION);
        for f in [
            files::ATTRIBUTES,
            files::CLIPS,
            files::TUBES,
            files::CLEAN_TUBES,
            files::LABELS,
            files::PREDICTIONS,
            files::REPORT,
        ] {
            assert!(out.join(f).exists(), "{f}");
        }
    }

    #[test]
    fn empty_detections_score_zero() {
        let (dir, inputs) = fixture_dir("crossing");
        std::fs::write(&inputs.detections, "").unwrap();
        let report = run_pipeline(
            &inputs,
            &PipelineConfig::default(),
            &dir.path().join("o"),
            None,
        )
        .unwrap();
        let tubes = TubesDoc::load(&dir.path().join("o").join(files::TUBES)).unwrap();
        assert!(tubes.tubes.is_empty());
        assert_eq!(report.report.counts.missing, 2);
        assert!(report.report.per_query.iter().all(|q| q.viou == 0.0));
    }

    #[test]
    fn crossing_oracle_selection() {
        let (dir, inputs) = fixture_dir("crossing");
        let report = run_pipeline(
            &inputs,
            &PipelineConfig::default(),
            &dir.path().join("o"),
            None,
        )
        .unwrap();
        for q in &report.report.per_query {
            assert!(q.viou > 0.9, "{q:?}");
        }
    }

    #[test]
    fn negative_labels_get_empty_targets() {
        let gt = GroundTruth::new(
            100,
            vec![crate::geometry::BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(); 5],
        )
        .unwrap();
        let tube = gt.as_tube(0);
        let far = Tube::from_boxes(
            1,
            0,
            0,
            &tube.entries.iter().map(|e| e.bbox).collect::<Vec<_>>(),
        );
        let clean = CleanTubesDoc {
            schema_version: SCHEMA_VERSION.into(),
            tubes: vec![tube, far],
            candidates: vec![],
        };
        let (labels, preds) = label(&clean, &[], &[("q".into(), gt)]).unwrap();
        assert_eq!(labels.labels[0].label, LabelKind::Positive);
        assert_eq!(labels.labels[1].label, LabelKind::Negative);
        assert_eq!(labels.labels[1].cls, vec![0; 5]);
        assert_eq!(preds.predictions[0].tube_id, Some(0));
    }
}
