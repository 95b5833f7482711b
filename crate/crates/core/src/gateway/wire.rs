//! JSON wire schema shared by every annotator role.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ClassAgnosticProposer,
    ClosedSetDetector,
    GroundingDetector,
    ImageCaptioner,
    RegionCaptioner,
    LlmCompleter,
    VqaResponder,
    RegionTextMatcher,
    Segmenter,
    Ocr,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::ClassAgnosticProposer,
        Role::ClosedSetDetector,
        Role::GroundingDetector,
        Role::ImageCaptioner,
        Role::RegionCaptioner,
        Role::LlmCompleter,
        Role::VqaResponder,
        Role::RegionTextMatcher,
        Role::Segmenter,
        Role::Ocr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::ClassAgnosticProposer => "class_agnostic_proposer",
            Role::ClosedSetDetector => "closed_set_detector",
            Role::GroundingDetector => "grounding_detector",
            Role::ImageCaptioner => "image_captioner",
            Role::RegionCaptioner => "region_captioner",
            Role::LlmCompleter => "llm_completer",
            Role::VqaResponder => "vqa_responder",
            Role::RegionTextMatcher => "region_text_matcher",
            Role::Segmenter => "segmenter",
            Role::Ocr => "ocr",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Path of the role endpoint under a service base URL.
    pub fn path(self) -> String {
        format!("/v1/{}", self.name())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRequest {
    pub id: String,
    pub role: Role,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

impl AnnotatorRequest {
    pub fn new(role: Role, image_ref: impl Into<String>) -> Self {
        Self {
            id: String::new(),
            role,
            image_ref: image_ref.into(),
            bbox: None,
            prompt: None,
            candidates: None,
        }
    }

    pub fn bbox(mut self, b: [f64; 4]) -> Self {
        self.bbox = Some(b);
        self
    }

    pub fn prompt(mut self, p: impl Into<String>) -> Self {
        self.prompt = Some(p.into());
        self
    }

    pub fn candidates(mut self, c: Vec<String>) -> Self {
        self.candidates = Some(c);
        self
    }

    /// Sets `id` to a digest of the payload so retries carry the same
    /// idempotency key.
    pub fn keyed(mut self) -> Self {
        self.id = String::new();
        let body = serde_json::to_vec(&self).expect("request serializes");
        let digest = Sha256::digest(&body);
        self.id = format!("q{}", hex::encode(&digest[..12]));
        self
    }

    /// Checks that the fields the role needs are present.
    pub fn validate(&self) -> Result<(), String> {
        let need_bbox = matches!(
            self.role,
            Role::RegionCaptioner | Role::VqaResponder | Role::RegionTextMatcher | Role::Segmenter
        );
        let need_prompt = matches!(self.role, Role::LlmCompleter | Role::VqaResponder);
        let need_candidates = matches!(
            self.role,
            Role::RegionTextMatcher | Role::Segmenter | Role::GroundingDetector
        );
        if self.id.is_empty() {
            return Err("request id is empty".into());
        }
        if self.image_ref.is_empty() && self.role != Role::LlmCompleter {
            return Err("image_ref is empty".into());
        }
        if need_bbox && self.bbox.is_none() {
            return Err(format!("{} requires bbox", self.role));
        }
        if let Some(b) = self.bbox {
            if b.iter().any(|c| !c.is_finite() || *c < 0.0) || b[0] >= b[2] || b[1] >= b[3] {
                return Err(format!("invalid bbox {b:?}"));
            }
        }
        if need_prompt && self.prompt.as_deref().is_none_or(str::is_empty) {
            return Err(format!("{} requires prompt", self.role));
        }
        if need_candidates && self.candidates.is_none() {
            return Err(format!("{} requires candidates", self.role));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_fractions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnnotatorResponse {
    pub fn for_request(req: &AnnotatorRequest) -> Self {
        Self {
            id: req.id.clone(),
            ..Default::default()
        }
    }

    /// Validates the response against the role schema of `req`.
    pub fn validate_for(&self, req: &AnnotatorRequest) -> Result<(), String> {
        if self.id != req.id {
            return Err(format!("response id {:?} does not echo request id {:?}", self.id, req.id));
        }
        let unit = |name: &str, v: &Option<Vec<f64>>| -> Result<(), String> {
            let v = v.as_ref().ok_or_else(|| format!("missing {name} field"))?;
            let expected = req.candidates.as_ref().map_or(0, Vec::len);
            if v.len() != expected {
                return Err(format!("{name} has {} entries, expected {expected}", v.len()));
            }
            if let Some(bad) = v.iter().find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
                return Err(format!("{name} entry {bad} outside [0, 1]"));
            }
            Ok(())
        };
        let boxes = |with_tags: bool| -> Result<(), String> {
            let b = self.boxes.as_ref().ok_or("missing boxes field")?;
            if let Some(bad) = b
                .iter()
                .find(|b| b.iter().any(|c| !c.is_finite() || *c < 0.0) || b[0] >= b[2] || b[1] >= b[3])
            {
                return Err(format!("invalid box {bad:?}"));
            }
            if with_tags {
                let t = self.tags.as_ref().ok_or("missing tags field")?;
                if t.len() != b.len() {
                    return Err(format!("{} tags for {} boxes", t.len(), b.len()));
                }
            }
            Ok(())
        };
        match req.role {
            Role::ClassAgnosticProposer => boxes(false),
            Role::ClosedSetDetector | Role::GroundingDetector | Role::Ocr => boxes(true),
            Role::ImageCaptioner | Role::RegionCaptioner | Role::LlmCompleter | Role::VqaResponder => self
                .text
                .as_ref()
                .map(|_| ())
                .ok_or_else(|| "missing text field".to_string()),
            Role::RegionTextMatcher => unit("scores", &self.scores),
            Role::Segmenter => unit("mask_fractions", &self.mask_fractions),
        }
    }
}
