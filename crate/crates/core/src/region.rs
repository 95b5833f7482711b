//! Region, tag and QA records.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, MaskStats, ScaleBucket};

/// Which annotator role produced a semantic tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSource {
    Spotter,
    Imaginator,
    Splitter,
    Magnifier,
    ClosedSetDetector,
    GroundingDetector,
    Ocr,
}

impl TagSource {
    pub const ALL: [TagSource; 7] = [
        TagSource::Spotter,
        TagSource::Imaginator,
        TagSource::Splitter,
        TagSource::Magnifier,
        TagSource::ClosedSetDetector,
        TagSource::GroundingDetector,
        TagSource::Ocr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TagSource::Spotter => "spotter",
            TagSource::Imaginator => "imaginator",
            TagSource::Splitter => "splitter",
            TagSource::Magnifier => "magnifier",
            TagSource::ClosedSetDetector => "closed_set_detector",
            TagSource::GroundingDetector => "grounding_detector",
            TagSource::Ocr => "ocr",
        }
    }
}

impl fmt::Display for TagSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which localization source proposed a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    ClassAgnostic,
    ClosedSetA,
    ClosedSetB,
    Grounding,
}

impl ProposalSource {
    /// Fixed merge order used during localization.
    pub const ALL: [ProposalSource; 4] = [
        ProposalSource::ClassAgnostic,
        ProposalSource::ClosedSetA,
        ProposalSource::ClosedSetB,
        ProposalSource::Grounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProposalSource::ClassAgnostic => "class_agnostic",
            ProposalSource::ClosedSetA => "closed_set_a",
            ProposalSource::ClosedSetB => "closed_set_b",
            ProposalSource::Grounding => "grounding",
        }
    }
}

impl fmt::Display for ProposalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercases, trims and collapses internal whitespace. Returns `None` for
/// text that is empty after trimming.
pub fn normalize_tag(text: &str) -> Option<String> {
    let joined = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    (!joined.is_empty()).then_some(joined)
}

/// An open-world label attached to a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTag")]
pub struct SemanticTag {
    pub text: String,
    pub source: TagSource,
    pub align_score: Option<f64>,
    #[serde(rename = "mask_fraction")]
    pub mask: Option<MaskStats>,
}

#[derive(Deserialize)]
struct RawTag {
    text: String,
    source: TagSource,
    #[serde(default)]
    align_score: Option<f64>,
    #[serde(default)]
    mask_fraction: Option<MaskStats>,
}

impl TryFrom<RawTag> for SemanticTag {
    type Error = Error;

    fn try_from(raw: RawTag) -> Result<Self> {
        let mut tag = SemanticTag::new(&raw.text, raw.source)?;
        if let Some(s) = raw.align_score {
            tag = tag.with_align_score(s)?;
        }
        tag.mask = raw.mask_fraction;
        Ok(tag)
    }
}

impl SemanticTag {
    pub fn new(text: &str, source: TagSource) -> Result<Self> {
        let text = normalize_tag(text)
            .ok_or_else(|| Error::validation("semantic tag text is empty"))?;
        Ok(Self {
            text,
            source,
            align_score: None,
            mask: None,
        })
    }

    pub fn with_align_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::validation(format!("align score out of [0, 1]: {score}")));
        }
        self.align_score = Some(score);
        Ok(self)
    }

    pub fn with_mask(mut self, mask: MaskStats) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Alignment score modulated by mask coverage: `align * fraction^gamma`.
    /// Missing alignment counts as zero; a missing mask counts as full coverage.
    pub fn final_score(&self, gamma: f64) -> f64 {
        let align = self.align_score.unwrap_or(0.0);
        let fraction = self.mask.map(|m| m.fraction()).unwrap_or(1.0);
        align * modulation(fraction, gamma)
    }
}

/// `fraction^gamma` with `0^0 = 1`.
pub(crate) fn modulation(fraction: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        fraction.powf(gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaStatus {
    Unverified,
    Correct,
    WrongAnswer,
    Unanswerable,
    WrongSemantic,
    HumanCorrected,
}

impl QaStatus {
    /// Whether a verification operation may move a pair from `self` to `next`.
    pub fn can_transition(self, next: QaStatus) -> bool {
        use QaStatus::*;
        matches!(
            (self, next),
            (Unverified, Correct | WrongAnswer | Unanswerable | WrongSemantic)
                | (WrongAnswer, HumanCorrected)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
    pub status: QaStatus,
}

impl QaPair {
    pub fn unverified(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            status: QaStatus::Unverified,
        }
    }

    pub fn transition(&mut self, next: QaStatus) -> Result<()> {
        if !self.status.can_transition(next) {
            return Err(Error::validation(format!(
                "illegal QA status transition {:?} -> {:?}",
                self.status, next
            )));
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStatus {
    #[default]
    Unverified,
    HumanVerified,
}

/// Human tag-filter outcome for a region.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub status: VerificationStatus,
    /// Candidates shown to the annotator, in ranked order.
    #[serde(default)]
    pub shown: Vec<String>,
    #[serde(default)]
    pub confirmed: Vec<String>,
    /// Shown but not selected: human-confirmed negatives.
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default)]
    pub annotator: Option<String>,
}

impl Verification {
    pub fn is_verified(&self) -> bool {
        self.status == VerificationStatus::HumanVerified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: String,
    pub image_id: String,
    pub bbox: BoundingBox,
    pub proposal_source: ProposalSource,
    #[serde(rename = "candidates")]
    pub candidate_tags: Vec<SemanticTag>,
    #[serde(rename = "matched")]
    pub matched_tags: Vec<SemanticTag>,
    #[serde(rename = "qa")]
    pub qa_pairs: Vec<QaPair>,
    pub caption: Option<String>,
    pub verification: Verification,
}

pub type RegionSet = Vec<Region>;

/// Content-derived region id over image, rounded box and proposal source.
pub fn region_id(image_id: &str, bbox: &BoundingBox, source: ProposalSource) -> String {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update(b"|");
    h.update(bbox.key().as_bytes());
    h.update(b"|");
    h.update(source.name().as_bytes());
    let digest = h.finalize();
    format!("r{}", hex::encode(&digest[..12]))
}

impl Region {
    pub fn new(image_id: impl Into<String>, bbox: BoundingBox, source: ProposalSource) -> Self {
        let image_id = image_id.into();
        Self {
            region_id: region_id(&image_id, &bbox, source),
            image_id,
            bbox,
            proposal_source: source,
            candidate_tags: Vec::new(),
            matched_tags: Vec::new(),
            qa_pairs: Vec::new(),
            caption: None,
            verification: Verification::default(),
        }
    }

    pub fn with_tags(mut self, tags: Vec<SemanticTag>) -> Self {
        self.candidate_tags = tags;
        self
    }

    pub fn bucket(&self) -> ScaleBucket {
        ScaleBucket::for_area(self.bbox.area())
    }

    pub fn top1(&self) -> Option<&SemanticTag> {
        self.matched_tags.first()
    }

    /// Adds `tag` unless a candidate with the same `(text, source)` exists.
    pub fn push_tag(&mut self, tag: SemanticTag) -> bool {
        let dup = self
            .candidate_tags
            .iter()
            .any(|t| t.text == tag.text && t.source == tag.source);
        if !dup {
            self.candidate_tags.push(tag);
        }
        !dup
    }

    pub fn validate(&self) -> Result<()> {
        if self.region_id.is_empty() || self.image_id.is_empty() {
            return Err(Error::validation("region and image ids must be non-empty"));
        }
        for m in &self.matched_tags {
            if !self.candidate_tags.iter().any(|c| c.text == m.text) {
                return Err(Error::validation(format!(
                    "matched tag {:?} of region {} is not a candidate",
                    m.text, self.region_id
                )));
            }
        }
        Ok(())
    }
}
