//! Synthetic scenarios: a few people moving along straight lines, optional
//! scene cuts and occlusions, and noisy detections derived from the exact
//! trajectories. The trajectories double as ground truth.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attributes::{ClothingColor, ClothingType, Gender};
use crate::error::{Error, Result};
use crate::formats::{SentenceRecord, TubeRecord};
use crate::geometry::BoundingBox;
use crate::metrics::GroundTruth;
use crate::scene::{FrameHistogram, HISTOGRAM_BINS};
use crate::tracker::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonSpec {
    pub id: String,
    pub gender: Gender,
    #[serde(default = "unknown_color")]
    pub color: ClothingColor,
    #[serde(default = "unknown_clothing")]
    pub clothing: ClothingType,
    /// First and last visible frame.
    pub start: u32,
    pub end: u32,
    /// `[cx, cy, w, h]` at `start` and `end`; linear in between.
    pub from: [f64; 4],
    pub to: [f64; 4],
    /// Inclusive frame ranges without detections.
    #[serde(default)]
    pub occluded: Vec<[u32; 2]>,
}

fn unknown_color() -> ClothingColor {
    ClothingColor::Unknown
}

fn unknown_clothing() -> ClothingType {
    ClothingType::Unknown
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Std of the pixel jitter on centre and size.
    pub jitter_std: f64,
    /// Probability that a visible person yields no detection in a frame.
    pub drop_prob: f64,
    /// Expected false-positive boxes per frame (Bernoulli per frame, capped at 1).
    pub false_positive_rate: f64,
    /// Std of the Gaussian noise added to embeddings before renormalizing.
    pub embedding_noise: f64,
    /// Weight of random mass mixed into each frame histogram.
    pub histogram_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub frames: u32,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
    /// Frames that begin a new scene.
    #[serde(default)]
    pub scene_cuts: Vec<u32>,
    pub persons: Vec<PersonSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Embedding length; 0 emits detections without embeddings.
    #[serde(default)]
    pub embedding_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> f64 {
    640.0
}

fn default_height() -> f64 {
    480.0
}

/// Everything the pipeline consumes for one synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub histograms: Vec<FrameHistogram>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<TubeRecord>,
    pub sentences: Vec<SentenceRecord>,
    /// Person index of each detection, `None` for false positives.
    pub detection_owner: Vec<Option<usize>>,
}

pub const PRESETS: [&str; 5] = [
    "single",
    "single-moving",
    "crossing",
    "occlusion",
    "two-scene",
];

fn person(
    id: &str,
    gender: Gender,
    color: ClothingColor,
    clothing: ClothingType,
    span: (u32, u32),
    from: [f64; 4],
    to: [f64; 4],
) -> PersonSpec {
    PersonSpec {
        id: id.into(),
        gender,
        color,
        clothing,
        start: span.0,
        end: span.1,
        from,
        to,
        occluded: vec![],
    }
}

impl FixtureSpec {
    /// Named scenario. `occlusion` hides the person for `max_age + 1` frames
    /// under the default tracker settings.
    pub fn preset(name: &str) -> Result<Self> {
        use ClothingColor as C;
        use ClothingType as T;
        let base = |frames, persons| FixtureSpec {
            frames,
            width: default_width(),
            height: default_height(),
            scene_cuts: vec![],
            persons,
            noise: NoiseSpec::default(),
            embedding_dim: 8,
            seed: 0,
        };
        Ok(match name {
            "single" => base(
                60,
                vec![person(
                    "p0",
                    Gender::Female,
                    C::Red,
                    T::Cloth,
                    (0, 59),
                    [320.0, 240.0, 80.0, 200.0],
                    [320.0, 240.0, 80.0, 200.0],
                )],
            ),
            "single-moving" => base(
                60,
                vec![person(
                    "p0",
                    Gender::Male,
                    C::Blue,
                    T::Top,
                    (0, 59),
                    [150.0, 240.0, 80.0, 200.0],
                    [450.0, 260.0, 80.0, 200.0],
                )],
            ),
            "crossing" => base(
                60,
                vec![
                    person(
                        "p0",
                        Gender::Female,
                        C::Red,
                        T::Cloth,
                        (0, 59),
                        [100.0, 240.0, 60.0, 160.0],
                        [540.0, 240.0, 60.0, 160.0],
                    ),
                    person(
                        "p1",
                        Gender::Male,
                        C::Blue,
                        T::Top,
                        (0, 59),
                        [540.0, 240.0, 60.0, 160.0],
                        [100.0, 240.0, 60.0, 160.0],
                    ),
                ],
            ),
            "occlusion" => {
                let mut p = person(
                    "p0",
                    Gender::Male,
                    C::Black,
                    T::Cloth,
                    (0, 99),
                    [120.0, 240.0, 70.0, 180.0],
                    [520.0, 240.0, 70.0, 180.0],
                );
                p.occluded = vec![[40, 70]];
                base(100, vec![p])
            }
            "two-scene" => {
                let mut s = base(
                    100,
                    vec![person(
                        "p0",
                        Gender::Female,
                        C::Green,
                        T::Top,
                        (0, 99),
                        [300.0, 240.0, 80.0, 200.0],
                        [340.0, 240.0, 80.0, 200.0],
                    )],
                );
                s.scene_cuts = vec![50];
                s
            }
            other => {
                return Err(Error::malformed(format!(
                    "unknown fixture preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::malformed("fixture needs at least one frame"));
        }
        let mut ids = BTreeSet::new();
        for p in &self.persons {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::malformed(format!("duplicate person id {:?}", p.id)));
            }
            if p.start > p.end || p.end >= self.frames {
                return Err(Error::malformed(format!(
                    "person {:?}: span [{}, {}] outside [0, {})",
                    p.id, p.start, p.end, self.frames
                )));
            }
            if [p.from[2], p.from[3], p.to[2], p.to[3]]
                .iter()
                .any(|v| v.is_nan() || *v <= 0.0)
            {
                return Err(Error::malformed(format!(
                    "person {:?}: sizes must be > 0",
                    p.id
                )));
            }
        }
        if self.embedding_dim > 0 && self.embedding_dim < self.persons.len() {
            return Err(Error::malformed(
                "embedding_dim must be 0 or at least the number of persons",
            ));
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.drop_prob)
            || !(0.0..=1.0).contains(&n.histogram_noise)
            || n.false_positive_rate < 0.0
            || n.jitter_std < 0.0
            || n.embedding_noise < 0.0
        {
            return Err(Error::malformed("noise parameters out of range"));
        }
        Ok(())
    }
}

impl PersonSpec {
    pub fn box_at(&self, frame: u32) -> BoundingBox {
        let t = if self.end == self.start {
            0.0
        } else {
            f64::from(frame - self.start) / f64::from(self.end - self.start)
        };
        let v: Vec<f64> = (0..4)
            .map(|i| self.from[i] + (self.to[i] - self.from[i]) * t)
            .collect();
        BoundingBox::from_cxcywh(v[0], v[1], v[2], v[3])
    }

    fn visible(&self, frame: u32) -> bool {
        (self.start..=self.end).contains(&frame)
            && !self
                .occluded
                .iter()
                .any(|[a, b]| (*a..=*b).contains(&frame))
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            start: self.start,
            end: self.end,
            boxes: (self.start..=self.end).map(|f| self.box_at(f)).collect(),
        }
    }

    fn noun(&self) -> &'static str {
        match self.gender {
            Gender::Female => "woman",
            Gender::Male => "man",
            Gender::Unknown => "person",
        }
    }

    /// "the man in the blue shirt", "the woman in red", "the person".
    fn describe(&self) -> String {
        let garment = match self.clothing {
            ClothingType::Top => Some("shirt"),
            ClothingType::Bottom => Some("pants"),
            ClothingType::Cloth if self.gender == Gender::Female => Some("dress"),
            ClothingType::Cloth => Some("coat"),
            ClothingType::Unknown => None,
        };
        let color = (self.color != ClothingColor::Unknown).then(|| {
            serde_json::to_value(self.color)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        });
        match (color, garment) {
            (Some(c), Some(g)) => format!("the {} in the {c} {g}", self.noun()),
            (None, Some(g)) => format!("the {} in the {g}", self.noun()),
            (Some(c), None) => format!("the {} in {c}", self.noun()),
            (None, None) => format!("the {}", self.noun()),
        }
    }
}

pub fn query_id(person: &PersonSpec) -> String {
    format!("q_{}", person.id)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence_for(spec: &FixtureSpec, idx: usize) -> String {
    let me = &spec.persons[idx];
    let others: Vec<String> = spec
        .persons
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, p)| p.describe())
        .collect();
    if others.is_empty() {
        format!("{} walks slowly.", capitalize(&me.describe()))
    } else {
        format!(
            "{} walks past {}.",
            capitalize(&me.describe()),
            others.join(" and ")
        )
    }
}

fn histogram_for_scene(scene: usize, rng: &mut ChaCha8Rng, noise: f64) -> FrameHistogram {
    let channel = |c: usize, rng: &mut ChaCha8Rng| {
        let mut h = vec![0.0; HISTOGRAM_BINS];
        h[(scene * 5 + c * 3) % HISTOGRAM_BINS] = 1.0;
        if noise > 0.0 {
            let r: Vec<f64> = (0..HISTOGRAM_BINS).map(|_| rng.random::<f64>()).collect();
            let s: f64 = r.iter().sum();
            h.iter_mut()
                .zip(&r)
                .for_each(|(v, x)| *v = (1.0 - noise) * *v + noise * x / s);
        }
        h
    };
    FrameHistogram {
        frame_index: 0,
        hue: channel(0, rng),
        sat: channel(1, rng),
        val: channel(2, rng),
    }
}

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Generates a fixture; identical specs (including the seed) give identical output.
pub fn make_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = &spec.noise;
    let jitter = Normal::new(0.0, n.jitter_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::malformed(e.to_string()))?;
    let emb_noise = Normal::new(0.0, n.embedding_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::malformed(e.to_string()))?;

    let cuts: BTreeSet<u32> = spec.scene_cuts.iter().copied().filter(|&c| c > 0).collect();
    let mut histograms = Vec::with_capacity(spec.frames as usize);
    let mut scene = 0usize;
    for f in 0..spec.frames {
        if cuts.contains(&f) {
            scene += 1;
        }
        let mut h = histogram_for_scene(scene, &mut rng, n.histogram_noise);
        h.frame_index = f;
        histograms.push(h);
    }

    let basis = |i: usize| -> Vec<f64> {
        let mut v = vec![0.0; spec.embedding_dim];
        v[i] = 1.0;
        v
    };

    let mut detections = Vec::new();
    let mut owners = Vec::new();
    for f in 0..spec.frames {
        for (pi, p) in spec.persons.iter().enumerate() {
            if !p.visible(f) {
                continue;
            }
            if n.drop_prob > 0.0 && rng.random::<f64>() < n.drop_prob {
                continue;
            }
            let mut bbox = p.box_at(f);
            if n.jitter_std > 0.0 {
                let [cx, cy, w, h] = bbox.to_cxcywh();
                bbox = BoundingBox::from_cxcywh(
                    cx + jitter.sample(&mut rng),
                    cy + jitter.sample(&mut rng),
                    (w + jitter.sample(&mut rng)).max(1.0),
                    (h + jitter.sample(&mut rng)).max(1.0),
                );
            }
            let embedding = (spec.embedding_dim > 0).then(|| {
                let mut e = basis(pi);
                if n.embedding_noise > 0.0 {
                    e.iter_mut().for_each(|v| *v += emb_noise.sample(&mut rng));
                }
                unit(e)
            });
            detections.push(Detection {
                frame_index: f,
                bbox,
                confidence: 0.9,
                embedding,
            });
            owners.push(Some(pi));
        }
        if n.false_positive_rate > 0.0 && rng.random::<f64>() < n.false_positive_rate.min(1.0) {
            let w = rng.random_range(20.0..spec.width / 4.0);
            let h = rng.random_range(40.0..spec.height / 2.0);
            let cx = rng.random_range(w / 2.0..spec.width - w / 2.0);
            let cy = rng.random_range(h / 2.0..spec.height - h / 2.0);
            let embedding = (spec.embedding_dim > 0).then(|| {
                unit(
                    (0..spec.embedding_dim)
                        .map(|_| rng.random::<f64>() - 0.5)
                        .collect(),
                )
            });
            detections.push(Detection {
                frame_index: f,
                bbox: BoundingBox::from_cxcywh(cx, cy, w, h),
                confidence: rng.random_range(0.4..0.6),
                embedding,
            });
            owners.push(None);
        }
    }

    let ground_truth = spec
        .persons
        .iter()
        .map(|p| {
            let gt = p.ground_truth();
            TubeRecord {
                query_id: query_id(p),
                tube_id: None,
                start: gt.start,
                end: gt.end,
                boxes: gt.boxes,
            }
        })
        .collect();
    let sentences = spec
        .persons
        .iter()
        .enumerate()
        .map(|(i, p)| SentenceRecord {
            id: query_id(p),
            sentence: sentence_for(spec, i),
        })
        .collect();

    Ok(Fixture {
        histograms,
        detections,
        ground_truth,
        sentences,
        detection_owner: owners,
    })
}
