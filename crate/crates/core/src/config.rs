//! Engine configuration, loaded from a single JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{AnnotatorDescriptor, MockWorld, Role};

/// Environment variable overriding the config path.
pub const CONFIG_ENV: &str = "PANOPTIC_FORGE_CONFIG";

/// Descriptors for every annotator role the pipeline calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSet {
    pub proposer: AnnotatorDescriptor,
    #[serde(default)]
    pub closed_set_a: Option<AnnotatorDescriptor>,
    #[serde(default)]
    pub closed_set_b: Option<AnnotatorDescriptor>,
    #[serde(default)]
    pub grounding: Option<AnnotatorDescriptor>,
    #[serde(default)]
    pub ocr: Option<AnnotatorDescriptor>,
    pub image_captioner: AnnotatorDescriptor,
    pub region_captioner: AnnotatorDescriptor,
    pub completer: AnnotatorDescriptor,
    pub responder: AnnotatorDescriptor,
    pub matcher: AnnotatorDescriptor,
    pub segmenter: AnnotatorDescriptor,
}

impl AnnotatorSet {
    /// Every role backed by in-process mocks seeded with `seed`.
    pub fn mocks(seed: u64) -> Self {
        let m = |role| AnnotatorDescriptor::mock(role, seed);
        let mut closed_b = m(Role::ClosedSetDetector);
        closed_b.endpoint.push_str("&variant=b");
        Self {
            proposer: m(Role::ClassAgnosticProposer),
            closed_set_a: Some(m(Role::ClosedSetDetector)),
            closed_set_b: Some(closed_b),
            grounding: Some(m(Role::GroundingDetector)),
            ocr: Some(m(Role::Ocr)),
            image_captioner: m(Role::ImageCaptioner),
            region_captioner: m(Role::RegionCaptioner),
            completer: m(Role::LlmCompleter),
            responder: m(Role::VqaResponder),
            matcher: m(Role::RegionTextMatcher),
            segmenter: m(Role::Segmenter),
        }
    }

    /// Only the proposer plus the roles needed after localization.
    pub fn proposer_only(seed: u64) -> Self {
        Self {
            closed_set_a: None,
            closed_set_b: None,
            grounding: None,
            ocr: None,
            ..Self::mocks(seed)
        }
    }

    fn check(&self) -> Result<()> {
        let slots: [(&str, Option<&AnnotatorDescriptor>, Role); 11] = [
            ("proposer", Some(&self.proposer), Role::ClassAgnosticProposer),
            ("closed_set_a", self.closed_set_a.as_ref(), Role::ClosedSetDetector),
            ("closed_set_b", self.closed_set_b.as_ref(), Role::ClosedSetDetector),
            ("grounding", self.grounding.as_ref(), Role::GroundingDetector),
            ("ocr", self.ocr.as_ref(), Role::Ocr),
            ("image_captioner", Some(&self.image_captioner), Role::ImageCaptioner),
            ("region_captioner", Some(&self.region_captioner), Role::RegionCaptioner),
            ("completer", Some(&self.completer), Role::LlmCompleter),
            ("responder", Some(&self.responder), Role::VqaResponder),
            ("matcher", Some(&self.matcher), Role::RegionTextMatcher),
            ("segmenter", Some(&self.segmenter), Role::Segmenter),
        ];
        for (slot, d, role) in slots {
            if let Some(d) = d {
                if d.role != role {
                    return Err(Error::validation(format!(
                        "annotator slot {slot} needs role {role}, got {}",
                        d.role
                    )));
                }
                if d.max_in_flight == 0 {
                    return Err(Error::validation(format!("annotator slot {slot}: max_in_flight must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Where images, shards, tasks and snapshots live. Relative paths
    /// resolve against the config file's directory.
    pub workspace: PathBuf,
    pub seed: u64,
    pub world: MockWorld,
    pub annotators: AnnotatorSet,
    pub t_iou: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub clean_threshold: usize,
    pub crop_padding: f64,
    pub lease_ttl_secs: u64,
    pub shard_count: usize,
    pub package_size: usize,
    pub pass_ratio_percent: u32,
    pub sample_min: usize,
    pub sample_max: usize,
    pub verify_budget: usize,
    pub retries: u32,
    pub jobs: Option<usize>,
    /// Bearer tokens accepted by the verification service. Empty disables auth.
    pub tokens: Vec<TokenGrant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrant {
    pub token: String,
    pub principal: String,
    #[serde(default)]
    pub expert: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("forge-data"),
            seed: 7,
            world: MockWorld::with_seed(7),
            annotators: AnnotatorSet::mocks(7),
            t_iou: crate::merge::DEFAULT_T_IOU,
            gamma: 1.0,
            top_k: 5,
            clean_threshold: 100,
            crop_padding: 0.1,
            lease_ttl_secs: 15 * 60,
            shard_count: crate::store::DEFAULT_SHARD_COUNT,
            package_size: 100,
            pass_ratio_percent: 95,
            sample_min: 6,
            sample_max: 90,
            verify_budget: 1000,
            retries: 3,
            jobs: None,
            tokens: Vec::new(),
        }
    }
}

impl Config {
    /// Config whose world and mock annotators all use `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            world: MockWorld::with_seed(seed),
            annotators: AnnotatorSet::mocks(seed),
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config = serde_json::from_slice(&bytes)
            .map_err(|e| Error::validation(format!("invalid config {}: {e}", path.display())))?;
        if cfg.workspace.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.workspace = base.join(&cfg.workspace);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_iou > 0.0 && self.t_iou < 1.0) {
            return Err(Error::validation(format!("t_iou must lie in (0, 1), got {}", self.t_iou)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::validation("gamma must be finite and non-negative"));
        }
        if self.top_k == 0 || self.clean_threshold == 0 || self.shard_count == 0 || self.package_size == 0 {
            return Err(Error::validation("top_k, clean_threshold, shard_count and package_size must be positive"));
        }
        if self.pass_ratio_percent > 100 {
            return Err(Error::validation("pass_ratio_percent must be at most 100"));
        }
        if self.sample_min == 0 || self.sample_min > self.sample_max {
            return Err(Error::validation("need 0 < sample_min <= sample_max"));
        }
        if !(0.0..=1.0).contains(&self.crop_padding) {
            return Err(Error::validation("crop_padding must lie in [0, 1]"));
        }
        if self.jobs == Some(0) {
            return Err(Error::validation("jobs must be positive"));
        }
        self.annotators.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = Config::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forge.json");
        std::fs::write(&path, r#"{"t_iou": 0.6, "workspace": "ws"}"#).unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.t_iou, 0.6);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.workspace, dir.path().join("ws"));
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = Config {
            t_iou: 1.0,
            ..Config::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.annotators.matcher.role = Role::Segmenter;
        assert!(cfg.validate().is_err());
    }
}
