use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use panoview::acquisition::{FixtureProvider, HttpProvider, HttpProviderConfig, PanoProvider, RetryPolicy};
use panoview::detection::{Detector, NullDetector, OracleDetector, RemoteDetector};
use panoview::mvg::{BriefMatcher, FeatureMatcher};
use panoview::pipeline::ExtractionConfig;
use panoview::synthetic::{OracleMatcher, SceneOracle};

pub const DETECTOR_URL_ENV: &str = "PANOVIEW_DETECTOR_URL";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub extraction: ExtractionConfig,
    pub retry: RetryPolicy,
    pub provider: ProviderConfig,
    pub detector: DetectorConfig,
    pub matcher: MatcherConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    Fixture { root: PathBuf },
    Http(HttpProviderConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Fixture { root: PathBuf::from(".") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorConfig {
    Remote {
        url: String,
        #[serde(default = "default_detector_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    /// Boxes from a synthetic scene's annotation table.
    Oracle {
        annotations: PathBuf,
        #[serde(default)]
        jitter_px: f64,
        #[serde(default)]
        seed: u64,
    },
    Null,
}

fn default_detector_timeout_ms() -> u64 {
    30_000
}

fn default_in_flight() -> usize {
    4
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Remote { url: "http://127.0.0.1:8080".into(), timeout_ms: default_detector_timeout_ms(), max_in_flight: default_in_flight() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MatcherConfig {
    Brief {
        #[serde(default = "default_max_corners")]
        max_corners: usize,
        #[serde(default = "default_ratio")]
        ratio: f64,
        #[serde(default = "default_brief_seed")]
        seed: u64,
    },
    /// Exact correspondences from a synthetic scene.
    Oracle { annotations: PathBuf },
}

fn default_max_corners() -> usize {
    4000
}

fn default_ratio() -> f64 {
    0.8
}

fn default_brief_seed() -> u64 {
    0x5eed
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig::Brief { max_corners: default_max_corners(), ratio: default_ratio(), seed: default_brief_seed() }
    }
}

impl RunConfig {
    /// Reads, resolves relative paths against the file's directory, applies
    /// the detector-URL environment override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.apply_env(std::env::var(DETECTOR_URL_ENV).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProviderConfig::Fixture { root } = &mut self.provider {
            fix(root);
        }
        if let DetectorConfig::Oracle { annotations, .. } = &mut self.detector {
            fix(annotations);
        }
        if let MatcherConfig::Oracle { annotations } = &mut self.matcher {
            fix(annotations);
        }
    }

    pub fn apply_env(&mut self, url: Option<String>) {
        let Some(url) = url.filter(|u| !u.is_empty()) else { return };
        match &mut self.detector {
            DetectorConfig::Remote { url: u, .. } => *u = url,
            _ => {
                self.detector = DetectorConfig::Remote { url, timeout_ms: default_detector_timeout_ms(), max_in_flight: default_in_flight() }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate().map_err(|e| anyhow::anyhow!("invalid [extraction]: {e}"))?;
        if self.retry.attempts == 0 || self.retry.max_concurrency == 0 {
            bail!("invalid [retry]: attempts and max_concurrency must be positive");
        }
        if let ProviderConfig::Http(h) = &self.provider {
            if h.rate_limit_per_s < 0.0 || h.timeout_ms == 0 {
                bail!("invalid [provider]: timeout_ms must be positive and rate_limit_per_s non-negative");
            }
        }
        if let MatcherConfig::Brief { ratio, max_corners, .. } = &self.matcher {
            if !(*ratio > 0.0 && *ratio <= 1.0) || *max_corners == 0 {
                bail!("invalid [matcher]: ratio must be in (0, 1] and max_corners positive");
            }
        }
        Ok(())
    }

    pub fn provider(&self) -> Result<Box<dyn PanoProvider>> {
        Ok(match &self.provider {
            ProviderConfig::Fixture { root } => Box::new(FixtureProvider::open(root)?),
            ProviderConfig::Http(h) => Box::new(HttpProvider::new(h)),
        })
    }

    pub fn detector(&self) -> Result<Box<dyn Detector>> {
        Ok(match &self.detector {
            DetectorConfig::Remote { url, timeout_ms, max_in_flight } => {
                Box::new(RemoteDetector::new(url.clone(), Duration::from_millis(*timeout_ms), *max_in_flight))
            }
            DetectorConfig::Oracle { annotations, jitter_px, seed } => {
                let d = OracleDetector::with_annotator(load_oracle(annotations)?);
                Box::new(if *jitter_px > 0.0 { d.with_jitter(*jitter_px, *seed) } else { d })
            }
            DetectorConfig::Null => Box::new(NullDetector),
        })
    }

    pub fn matcher(&self) -> Result<Box<dyn FeatureMatcher>> {
        Ok(match &self.matcher {
            MatcherConfig::Brief { max_corners, ratio, seed } => Box::new(BriefMatcher::new(*max_corners, *ratio, *seed)),
            MatcherConfig::Oracle { annotations } => Box::new(OracleMatcher { oracle: load_oracle(annotations)? }),
        })
    }
}

fn load_oracle(path: &Path) -> Result<Arc<SceneOracle>> {
    Ok(Arc::new(SceneOracle::load(path).with_context(|| format!("loading annotations {}", path.display()))?))
}
