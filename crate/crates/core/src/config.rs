use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::postprocess::PostprocessConfig;
use crate::scene::SceneConfig;
use crate::tracker::TrackerConfig;

pub const CONFIG_VERSION: &str = "1";

/// Settings for every stage. Missing sections take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: String,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub loss: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION.to_string(),
            scene: SceneConfig::default(),
            tracker: TrackerConfig::default(),
            postprocess: PostprocessConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::schema(path, e.to_string()))?;
        match table.get("version") {
            Some(toml::Value::String(v)) if v == CONFIG_VERSION => {}
            Some(v) => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    found: v.to_string().trim_matches('"').to_string(),
                    expected: CONFIG_VERSION.to_string(),
                })
            }
            None => return Err(Error::schema(path, "missing field `version`")),
        }
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::schema(path, e.to_string()))?;
        cfg.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.postprocess.validate()?;
        self.loss.validate()?;
        if self.scene.threshold.is_nan()
            || self.scene.threshold <= 0.0
            || self.scene.min_clip_len < 1
        {
            return Err(Error::malformed(
                "scene.threshold must be > 0, scene.min_clip_len >= 1",
            ));
        }
        let t = &self.tracker;
        if !(0.0..=1.0).contains(&t.lambda_app) || t.max_cost.is_nan() || t.max_cost < 0.0 {
            return Err(Error::malformed(
                "tracker.lambda_app must lie in [0, 1], max_cost >= 0",
            ));
        }
        Ok(())
    }
}

/// Loads a standalone loss-weights TOML table.
pub fn load_loss_weights(path: &Path) -> Result<LossWeights> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let w: LossWeights = toml::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
    w.validate()
        .map_err(|e| Error::schema(path, e.to_string()))?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_toml(s, Path::new("cfg.toml"))
    }

    #[test]
    fn sections_default() {
        let c = parse("version = \"1\"\n[tracker]\nmax_age = 12\n").unwrap();
        assert_eq!(c.tracker.max_age, 12);
        assert_eq!(c.tracker.n_init, 3);
        assert_eq!(c.postprocess, PostprocessConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            parse("version = \"1\"\n[tracker]\nmaxage = 1\n"),
            Err(Error::Schema { .. })
        ));
        assert!(matches!(
            parse("version = \"1\"\ncolour = 1\n"),
            Err(Error::Schema { .. })
        ));
        assert!(matches!(
            parse("version = \"2\"\n"),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            parse("[scene]\nthreshold = 3.0\n"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn default_roundtrips_through_toml() {
        let text = toml::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(parse(&text).unwrap(), PipelineConfig::default());
    }
}
