use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use tubeground::config::{load_loss_weights, PipelineConfig};
use tubeground::fixture::{make_fixture, FixtureSpec};
use tubeground::formats::{
    read_detections, read_histograms, read_json, read_jsonl, write_jsonl, AttributeRecord,
    CleanTubesDoc, ClipsDoc, Document, GroundTruthDoc, LabelsDoc, PredictionsDoc, ScoresDoc,
    SentenceRecord, TubesDoc,
};
use tubeground::loss::LossVariant;
use tubeground::pipeline::{self, files, RunInputs};
use tubeground::Error;

#[derive(Parser)]
#[command(
    name = "tubeground",
    version,
    about = "Tube proposals, labels and vIoU evaluation for video grounding"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML, `version = "1"`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Seed for `make-fixture`; the other stages are deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract attribute triples from sentences.
    ParseAttrs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cut a histogram sequence into scene clips.
    SplitScenes {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        min_clip_len: Option<u32>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Link detections into tubes within each clip.
    Track {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dedup, reconnect and smooth tubes; list per-query candidates.
    Postprocess {
        #[arg(long)]
        tubes: PathBuf,
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Label candidate tubes against ground truth and pick oracle predictions.
    Label {
        #[arg(long)]
        tubes: PathBuf,
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        preds: Option<PathBuf>,
    },
    /// Evaluate the training loss on model scores.
    Loss {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Loss weights TOML; defaults to the `[loss]` section of `--config`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Comma list of `fo` (focal) and `ge` (gender branch), or `baseline`.
        #[arg(long, default_value = "fo,ge")]
        variant: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score predictions with vIoU.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage, writing all artifacts into `--out-dir`.
    Run {
        /// Directory laid out by `make-fixture`; individual flags override it.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[arg(long)]
        hists: Option<PathBuf>,
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Generate a synthetic video: histograms, detections, ground truth, sentences.
    MakeFixture {
        /// Built-in scenario.
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// Scenario description (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Io { .. } => 1,
        Error::Schema { .. } | Error::MalformedInput(_) | Error::EmptyInput(_) => 4,
        Error::Version { .. } => 5,
        Error::NumericalDegeneracy(_) | Error::NoPositiveFrames => 6,
    }
}

fn output(explicit: Option<PathBuf>, g: &Global, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| g.out_dir.join(name))
}

fn load_config(g: &Global) -> tubeground::Result<PipelineConfig> {
    match &g.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn ensure_parent(path: &Path) -> tubeground::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> tubeground::Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::ParseAttrs { input, output: out } => {
            let sentences: Vec<SentenceRecord> = read_jsonl(&input)?;
            let attrs = pipeline::parse_attrs(&sentences)?;
            let out = output(out, g, files::ATTRIBUTES);
            ensure_parent(&out)?;
            write_jsonl(&out, &attrs)
        }
        Command::SplitScenes {
            input,
            threshold,
            min_clip_len,
            output: out,
        } => {
            let mut scene = cfg.scene;
            scene.threshold = threshold.unwrap_or(scene.threshold);
            scene.min_clip_len = min_clip_len.unwrap_or(scene.min_clip_len);
            let hists = read_histograms(&input)?;
            let out = output(out, g, files::CLIPS);
            ensure_parent(&out)?;
            pipeline::split_scenes(&hists, &scene)?.save(&out)
        }
        Command::Track {
            clips,
            dets,
            output: out,
        } => {
            let clips = ClipsDoc::load(&clips)?;
            let dets = read_detections(&dets)?;
            let out = output(out, g, files::TUBES);
            ensure_parent(&out)?;
            pipeline::with_jobs(g.jobs, || {
                pipeline::track(&clips.clips, &dets, &cfg.tracker)
            })??
            .save(&out)
        }
        Command::Postprocess {
            tubes,
            attrs,
            output: out,
        } => {
            let tubes = TubesDoc::load(&tubes)?;
            let attrs: Vec<AttributeRecord> = read_jsonl(&attrs)?;
            let out = output(out, g, files::CLEAN_TUBES);
            ensure_parent(&out)?;
            pipeline::with_jobs(g.jobs, || {
                pipeline::postprocess(&tubes.tubes, &attrs, &cfg.postprocess)
            })??
            .save(&out)
        }
        Command::Label {
            tubes,
            attrs,
            gt,
            output: out,
            preds,
        } => {
            let clean = CleanTubesDoc::load(&tubes)?;
            let attrs: Vec<AttributeRecord> = read_jsonl(&attrs)?;
            let gts = GroundTruthDoc::load(&gt)?.ground_truths(&gt)?;
            let (labels, predictions) =
                pipeline::with_jobs(g.jobs, || pipeline::label(&clean, &attrs, &gts))??;
            let out = output(out, g, files::LABELS);
            let preds = output(preds, g, files::PREDICTIONS);
            ensure_parent(&out)?;
            ensure_parent(&preds)?;
            labels.save(&out)?;
            predictions.save(&preds)
        }
        Command::Loss {
            scores,
            labels,
            weights,
            variant,
            output: out,
        } => {
            let scores = ScoresDoc::load(&scores)?;
            let labels = LabelsDoc::load(&labels)?;
            let weights = match weights {
                Some(p) => load_loss_weights(&p)?,
                None => cfg.loss,
            };
            let variant = LossVariant::parse(&variant)?;
            let out = output(out, g, "breakdown.json");
            ensure_parent(&out)?;
            pipeline::with_jobs(g.jobs, || {
                pipeline::loss(&scores, &labels, &weights, variant)
            })??
            .save(&out)
        }
        Command::Evaluate { pred, gt, report } => {
            let preds = PredictionsDoc::load(&pred)?;
            let gts = GroundTruthDoc::load(&gt)?.ground_truths(&gt)?;
            let out = output(report, g, files::REPORT);
            ensure_parent(&out)?;
            let report = pipeline::with_jobs(g.jobs, || pipeline::evaluate(&preds, &gts))??;
            report.save(&out)?;
            println!("mean vIoU {}", report.report.mean_viou_display);
            Ok(())
        }
        Command::Run {
            inputs,
            sentences,
            hists,
            dets,
            gt,
        } => {
            let base = RunInputs::in_dir(inputs.as_deref().unwrap_or(Path::new(".")));
            let inputs = RunInputs {
                sentences: sentences.unwrap_or(base.sentences),
                histograms: hists.unwrap_or(base.histograms),
                detections: dets.unwrap_or(base.detections),
                ground_truth: gt.unwrap_or(base.ground_truth),
            };
            let report = pipeline::run_pipeline(&inputs, &cfg, &g.out_dir, g.jobs)?;
            println!(
                "mean vIoU {} ({} queries, selection {})",
                report.report.mean_viou_display,
                report.report.counts.queries,
                report.selection_mode
            );
            Ok(())
        }
        Command::MakeFixture { preset, spec } => {
            let mut spec = match (preset, spec) {
                (Some(name), _) => FixtureSpec::preset(&name)?,
                (None, Some(path)) => read_json::<FixtureSpec>(&path)?,
                (None, None) => unreachable!("clap requires --preset or --spec"),
            };
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            let fixture = make_fixture(&spec)?;
            pipeline::write_fixture(&spec, &fixture, &g.out_dir)
        }
    }
}

fn main() -> ExitCode {
    let filter =
        EnvFilter::try_from_env("TUBEGROUND_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
