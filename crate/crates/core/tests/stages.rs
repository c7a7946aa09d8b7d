use std::path::Path;

use tubeground::config::PipelineConfig;
use tubeground::fixture::{make_fixture, FixtureSpec};
use tubeground::formats::{
    read_detections, read_histograms, read_jsonl, write_jsonl, AttributeRecord, CleanTubesDoc,
    ClipsDoc, Document, GroundTruthDoc, LabelsDoc, PredictionsDoc, ReportDoc, SentenceRecord,
    TubesDoc,
};
use tubeground::pipeline::{self, files, run_pipeline, write_fixture, RunInputs};

fn noisy_crossing() -> FixtureSpec {
    let mut spec = FixtureSpec::preset("crossing").unwrap();
    spec.noise.jitter_std = 2.0;
    spec.noise.drop_prob = 0.05;
    spec.noise.false_positive_rate = 0.2;
    spec.noise.embedding_noise = 0.05;
    spec.seed = 5;
    spec
}

fn setup(spec: &FixtureSpec) -> (tempfile::TempDir, RunInputs) {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(spec, &make_fixture(spec).unwrap(), &dir.path().join("in")).unwrap();
    let inputs = RunInputs::in_dir(&dir.path().join("in"));
    (dir, inputs)
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn each_stage_reruns_from_its_inputs() {
    let (dir, inputs) = setup(&noisy_crossing());
    let cfg = PipelineConfig::default();
    let full = dir.path().join("full");
    run_pipeline(&inputs, &cfg, &full, Some(3)).unwrap();

    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();

    let sentences: Vec<SentenceRecord> = read_jsonl(&inputs.sentences).unwrap();
    write_jsonl(
        &part.join(files::ATTRIBUTES),
        &pipeline::parse_attrs(&sentences).unwrap(),
    )
    .unwrap();

    let hists = read_histograms(&inputs.histograms).unwrap();
    pipeline::split_scenes(&hists, &cfg.scene)
        .unwrap()
        .save(&part.join(files::CLIPS))
        .unwrap();

    // later stages read the artifacts of the full run, not the ones above
    let clips = ClipsDoc::load(&full.join(files::CLIPS)).unwrap();
    let dets = read_detections(&inputs.detections).unwrap();
    pipeline::track(&clips.clips, &dets, &cfg.tracker)
        .unwrap()
        .save(&part.join(files::TUBES))
        .unwrap();

    let tubes = TubesDoc::load(&full.join(files::TUBES)).unwrap();
    let attrs: Vec<AttributeRecord> = read_jsonl(&full.join(files::ATTRIBUTES)).unwrap();
    pipeline::postprocess(&tubes.tubes, &attrs, &cfg.postprocess)
        .unwrap()
        .save(&part.join(files::CLEAN_TUBES))
        .unwrap();

    let clean = CleanTubesDoc::load(&full.join(files::CLEAN_TUBES)).unwrap();
    let gts = GroundTruthDoc::load(&inputs.ground_truth)
        .unwrap()
        .ground_truths(&inputs.ground_truth)
        .unwrap();
    let (labels, preds) = pipeline::label(&clean, &attrs, &gts).unwrap();
    labels.save(&part.join(files::LABELS)).unwrap();
    preds.save(&part.join(files::PREDICTIONS)).unwrap();

    let preds = PredictionsDoc::load(&full.join(files::PREDICTIONS)).unwrap();
    pipeline::evaluate(&preds, &gts)
        .unwrap()
        .save(&part.join(files::REPORT))
        .unwrap();

    for f in [
        files::ATTRIBUTES,
        files::CLIPS,
        files::TUBES,
        files::CLEAN_TUBES,
        files::LABELS,
        files::PREDICTIONS,
        files::REPORT,
    ] {
        assert_eq!(bytes(&full.join(f)), bytes(&part.join(f)), "{f}");
    }
}

#[test]
fn artifacts_round_trip() {
    let (dir, inputs) = setup(&noisy_crossing());
    let out = dir.path().join("o");
    run_pipeline(&inputs, &PipelineConfig::default(), &out, None).unwrap();
    let again = dir.path().join("again");
    std::fs::create_dir_all(&again).unwrap();

    fn check<D: Document>(from: &Path, to: &Path) {
        D::load(from).unwrap().save(to).unwrap();
        assert_eq!(bytes(from), bytes(to), "{}", from.display());
    }
    check::<ClipsDoc>(&out.join(files::CLIPS), &again.join(files::CLIPS));
    check::<TubesDoc>(&out.join(files::TUBES), &again.join(files::TUBES));
    check::<CleanTubesDoc>(
        &out.join(files::CLEAN_TUBES),
        &again.join(files::CLEAN_TUBES),
    );
    check::<LabelsDoc>(&out.join(files::LABELS), &again.join(files::LABELS));
    check::<PredictionsDoc>(
        &out.join(files::PREDICTIONS),
        &again.join(files::PREDICTIONS),
    );
    check::<ReportDoc>(&out.join(files::REPORT), &again.join(files::REPORT));
    check::<GroundTruthDoc>(&inputs.ground_truth, &again.join(files::GROUND_TRUTH));

    let attrs: Vec<AttributeRecord> = read_jsonl(&out.join(files::ATTRIBUTES)).unwrap();
    write_jsonl(&again.join(files::ATTRIBUTES), &attrs).unwrap();
    assert_eq!(
        bytes(&out.join(files::ATTRIBUTES)),
        bytes(&again.join(files::ATTRIBUTES))
    );
    let dets = read_detections(&inputs.detections).unwrap();
    write_jsonl(&again.join(files::DETECTIONS), &dets).unwrap();
    assert_eq!(
        bytes(&inputs.detections),
        bytes(&again.join(files::DETECTIONS))
    );
}

#[test]
fn jittered_fixture_is_byte_identical() {
    let mut spec = FixtureSpec::preset("single-moving").unwrap();
    spec.noise.jitter_std = 2.0;
    spec.seed = 42;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_fixture(&spec, &make_fixture(&spec).unwrap(), a.path()).unwrap();
    write_fixture(&spec, &make_fixture(&spec).unwrap(), b.path()).unwrap();
    for f in [
        files::DETECTIONS,
        files::HISTOGRAMS,
        files::GROUND_TRUTH,
        files::SENTENCES,
        files::FIXTURE_SPEC,
    ] {
        assert_eq!(bytes(&a.path().join(f)), bytes(&b.path().join(f)), "{f}");
    }
}

#[test]
fn noisy_run_is_parallelism_independent() {
    let (dir, inputs) = setup(&noisy_crossing());
    let cfg = PipelineConfig::default();
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    run_pipeline(&inputs, &cfg, &one, Some(1)).unwrap();
    run_pipeline(&inputs, &cfg, &many, Some(8)).unwrap();
    for f in [
        files::TUBES,
        files::CLEAN_TUBES,
        files::LABELS,
        files::REPORT,
    ] {
        assert_eq!(bytes(&one.join(f)), bytes(&many.join(f)), "{f}");
    }
}

#[test]
fn two_scene_tubes_stay_in_their_clip() {
    let (dir, inputs) = setup(&FixtureSpec::preset("two-scene").unwrap());
    let out = dir.path().join("o");
    let report = run_pipeline(&inputs, &PipelineConfig::default(), &out, None).unwrap();
    let clips = ClipsDoc::load(&out.join(files::CLIPS)).unwrap().clips;
    let tubes = TubesDoc::load(&out.join(files::TUBES)).unwrap().tubes;
    assert_eq!(clips.len(), 2);
    assert_eq!(tubes.len(), 2);
    for t in &tubes {
        let c = &clips[t.clip_id as usize];
        assert!(c.contains(t.start()) && c.contains(t.end()));
    }
    // oracle picks one clip's tube, so vIoU is about half
    let v = report.report.mean_viou;
    assert!((0.45..0.55).contains(&v), "{v}");
}
