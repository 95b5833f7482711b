//! Per-image annotation: localization ensemble, semantic tags, matching and
//! detailed descriptions.

pub mod nouns;
pub mod prompts;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnnotatorSet, Config};
use crate::error::{Error, Result};
use crate::gateway::{AnnotatorDescriptor, Gateway};
use crate::geometry::BoundingBox;
use crate::matching;
use crate::merge::merge_regions;
use crate::region::{ProposalSource, QaPair, Region, RegionSet, SemanticTag, TagSource};

pub use nouns::extract_noun_phrases;

/// A registered image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Path or content hash handed to annotators.
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn synthetic(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        let image_id = image_id.into();
        Self {
            image_ref: format!("synthetic:{image_id}"),
            image_id,
            width,
            height,
        }
    }
}

/// One entry of the failure manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<String>,
    pub stage: String,
    pub error: String,
    /// Fatal failures drop the image or leave the region incomplete.
    pub fatal: bool,
}

impl Failure {
    fn new(image_id: &str, stage: &str, error: impl ToString, fatal: bool) -> Self {
        Self {
            image_id: image_id.to_string(),
            region_id: None,
            stage: stage.to_string(),
            error: error.to_string(),
            fatal,
        }
    }

    fn region(mut self, id: &str) -> Self {
        self.region_id = Some(id.to_string());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageOutcome {
    pub image_id: String,
    pub regions: RegionSet,
    pub failures: Vec<Failure>,
    /// Tag roles that produced at least one tag.
    pub contributors: BTreeSet<TagSource>,
}

impl ImageOutcome {
    pub fn failed(&self) -> bool {
        self.failures.iter().any(|f| f.fatal)
    }
}

/// Tags shared by all regions of an image plus per-region exclusive tags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagPlan {
    pub shared: Vec<SemanticTag>,
    pub exclusive: Vec<Vec<SemanticTag>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub t_iou: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub crop_padding: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            t_iou: crate::merge::DEFAULT_T_IOU,
            gamma: matching::DEFAULT_GAMMA,
            top_k: matching::DEFAULT_TOP_K,
            crop_padding: 0.1,
        }
    }
}

impl From<&Config> for PipelineParams {
    fn from(c: &Config) -> Self {
        Self {
            t_iou: c.t_iou,
            gamma: c.gamma,
            top_k: c.top_k,
            crop_padding: c.crop_padding,
        }
    }
}

fn tags_from(texts: impl IntoIterator<Item = String>, source: TagSource) -> Vec<SemanticTag> {
    texts
        .into_iter()
        .filter_map(|t| SemanticTag::new(&t, source).ok())
        .collect()
}

/// Appends tags whose text is not already present.
fn extend_unique(into: &mut Vec<SemanticTag>, tags: impl IntoIterator<Item = SemanticTag>) {
    for t in tags {
        if !into.iter().any(|x| x.text == t.text) {
            into.push(t);
        }
    }
}

#[derive(Clone)]
pub struct Pipeline {
    gateway: Arc<Gateway>,
    annotators: AnnotatorSet,
    params: PipelineParams,
}

impl Pipeline {
    pub fn new(gateway: Arc<Gateway>, annotators: AnnotatorSet, params: PipelineParams) -> Self {
        Self {
            gateway,
            annotators,
            params,
        }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn annotators(&self) -> &AnnotatorSet {
        &self.annotators
    }

    pub fn params(&self) -> PipelineParams {
        self.params
    }

    /// Same pipeline with a different matcher, e.g. after a model update.
    pub fn with_matcher(&self, matcher: AnnotatorDescriptor) -> Self {
        let mut p = self.clone();
        p.annotators.matcher = matcher;
        p
    }

    fn crop(&self, image: &ImageRecord, bbox: &BoundingBox) -> BoundingBox {
        bbox.padded(self.params.crop_padding, image.width as f64, image.height as f64)
    }

    /// Proposer boxes, then each configured detector merged in fixed order.
    /// Detector failures are skipped and reported; a proposer failure is an error.
    pub fn localize(&self, image: &ImageRecord, phrases: &[String]) -> Result<(RegionSet, Vec<Failure>)> {
        let gw = &self.gateway;
        let boxes = gw.propose(&self.annotators.proposer, &image.image_ref)?;
        let mut set: RegionSet = Vec::new();
        for b in boxes {
            let r = Region::new(&image.image_id, b, ProposalSource::ClassAgnostic);
            if !set.iter().any(|x| x.region_id == r.region_id) {
                set.push(r);
            }
        }
        let mut warnings = Vec::new();
        let detectors = [
            (ProposalSource::ClosedSetA, &self.annotators.closed_set_a, TagSource::ClosedSetDetector),
            (ProposalSource::ClosedSetB, &self.annotators.closed_set_b, TagSource::ClosedSetDetector),
            (ProposalSource::Grounding, &self.annotators.grounding, TagSource::GroundingDetector),
        ];
        for (source, descriptor, tag_source) in detectors {
            let Some(d) = descriptor else { continue };
            let phrases = (source == ProposalSource::Grounding).then(|| phrases.to_vec());
            match gw.detect(d, &image.image_ref, phrases) {
                Ok(found) => {
                    let mut incoming: RegionSet = Vec::new();
                    for (b, text) in found {
                        let mut r = Region::new(&image.image_id, b, source);
                        let tag = SemanticTag::new(&text, tag_source).ok();
                        match incoming.iter_mut().find(|x| x.region_id == r.region_id) {
                            Some(existing) => {
                                if let Some(t) = tag {
                                    existing.push_tag(t);
                                }
                            }
                            None => {
                                if let Some(t) = tag {
                                    r.push_tag(t);
                                }
                                incoming.push(r);
                            }
                        }
                    }
                    set = merge_regions(set, incoming, self.params.t_iou)?;
                }
                Err(e) => {
                    tracing::warn!("{} skipped for {}: {e}", source, image.image_id);
                    warnings.push(Failure::new(&image.image_id, source.name(), e, false));
                }
            }
        }
        Ok((set, warnings))
    }

    /// Runs spotter, imaginator, splitter and magnifier. Each role degrades
    /// independently; failures come back as warnings.
    pub fn generate_tags(
        &self,
        image: &ImageRecord,
        caption: Option<&str>,
        regions: &[Region],
    ) -> (TagPlan, Vec<Failure>) {
        let gw = &self.gateway;
        let a = &self.annotators;
        let mut warnings = Vec::new();
        let mut shared: Vec<SemanticTag> = Vec::new();

        // spotter: caption noun phrases plus OCR text
        if let Some(c) = caption {
            extend_unique(&mut shared, tags_from(extract_noun_phrases(c), TagSource::Spotter));
        }
        if let Some(ocr) = &a.ocr {
            match gw.detect(ocr, &image.image_ref, None) {
                Ok(found) => extend_unique(&mut shared, tags_from(found.into_iter().map(|(_, t)| t), TagSource::Ocr)),
                Err(e) => warnings.push(Failure::new(&image.image_id, "ocr", e, false)),
            }
        }
        let mut seeds: Vec<String> = shared
            .iter()
            .filter(|t| t.source == TagSource::Spotter)
            .map(|t| t.text.clone())
            .collect();

        if let Some(c) = caption {
            match gw.complete(&a.completer, &prompts::imaginator(c)) {
                Ok(text) => {
                    let imagined = tags_from(prompts::parse_list(&text), TagSource::Imaginator);
                    seeds.extend(imagined.iter().map(|t| t.text.clone()));
                    extend_unique(&mut shared, imagined);
                }
                Err(e) => warnings.push(Failure::new(&image.image_id, "imaginator", e, false)),
            }
        }

        for tag in &seeds {
            match gw.complete(&a.completer, &prompts::splitter(tag)) {
                Ok(text) => extend_unique(&mut shared, tags_from(prompts::parse_list(&text), TagSource::Splitter)),
                Err(e) => {
                    warnings.push(Failure::new(&image.image_id, "splitter", e, false));
                    break;
                }
            }
        }

        let exclusive: Vec<std::result::Result<Vec<SemanticTag>, Failure>> = regions
            .par_iter()
            .map(|r| {
                let crop = self.crop(image, &r.bbox);
                gw.caption_region(&a.region_captioner, &image.image_ref, &crop)
                    .map(|text| tags_from(extract_noun_phrases(&text), TagSource::Magnifier))
                    .map_err(|e| Failure::new(&image.image_id, "magnifier", e, false).region(&r.region_id))
            })
            .collect();
        let exclusive = exclusive
            .into_iter()
            .map(|res| {
                res.unwrap_or_else(|f| {
                    warnings.push(f);
                    Vec::new()
                })
            })
            .collect();
        (TagPlan { shared, exclusive }, warnings)
    }

    /// Candidates = shared, then exclusive, then detector-attached; unique by text.
    pub fn apply_tags(regions: &mut [Region], plan: &TagPlan) {
        for (i, r) in regions.iter_mut().enumerate() {
            let mut tags = plan.shared.clone();
            if let Some(ex) = plan.exclusive.get(i) {
                extend_unique(&mut tags, ex.iter().cloned());
            }
            extend_unique(&mut tags, std::mem::take(&mut r.candidate_tags));
            r.candidate_tags = tags;
        }
    }

    /// Scores candidates with the matcher and segmenter and stores the top-k.
    pub fn match_region(&self, image_ref: &str, region: &mut Region) -> Result<()> {
        let texts: Vec<String> = region.candidate_tags.iter().map(|t| t.text.clone()).collect();
        if texts.is_empty() {
            return Err(Error::validation(format!("region {} has no candidates", region.region_id)));
        }
        let align = self.gateway.align(&self.annotators.matcher, image_ref, &region.bbox, &texts)?;
        let fractions = self.gateway.segment(&self.annotators.segmenter, image_ref, &region.bbox, &texts)?;
        matching::match_tags(region, &align, Some(&fractions), self.params.gamma, self.params.top_k)
    }

    /// New matched tags from fresh segmenter fractions and the stored
    /// alignment scores. The region itself is left untouched.
    pub fn rerank_with_segmenter(&self, image_ref: &str, region: &Region) -> Result<Vec<SemanticTag>> {
        let texts: Vec<String> = region.candidate_tags.iter().map(|t| t.text.clone()).collect();
        let fractions = self.gateway.segment(&self.annotators.segmenter, image_ref, &region.bbox, &texts)?;
        let align: Vec<f64> = region
            .candidate_tags
            .iter()
            .map(|t| t.align_score.unwrap_or(0.0))
            .collect();
        let scored = matching::score_candidates(&region.candidate_tags, &align, Some(&fractions))?;
        Ok(matching::rank(&scored, self.params.gamma, self.params.top_k))
    }

    /// Three questions about the top-1 tag, their answers, and one caption.
    pub fn describe_region(&self, image: &ImageRecord, region: &mut Region) -> Result<()> {
        let gw = &self.gateway;
        let a = &self.annotators;
        let top = region
            .top1()
            .map(|t| t.text.clone())
            .ok_or_else(|| Error::validation(format!("region {} has no matched tag", region.region_id)))?;
        let prompt = prompts::questioner(&top);
        let mut questions = prompts::parse_questions(&gw.complete(&a.completer, &prompt)?);
        if questions.len() < 3 {
            questions = prompts::parse_questions(&gw.complete(&a.completer, &prompt)?);
        }
        if questions.len() < 3 {
            return Err(Error::validation(format!(
                "questioner produced {} questions for {top:?}",
                questions.len()
            )));
        }
        questions.truncate(3);
        let crop = self.crop(image, &region.bbox);
        let mut qa = Vec::with_capacity(3);
        for q in questions {
            let answer = gw.answer(&a.responder, &image.image_ref, &crop, &prompts::responder(&q))?;
            qa.push(QaPair::unverified(q, answer.trim()));
        }
        let answers: Vec<String> = qa.iter().map(|p| p.answer.clone()).collect();
        let caption = gw.complete(&a.completer, &prompts::writer(&answers))?;
        region.qa_pairs = qa;
        region.caption = Some(caption.trim().to_string());
        Ok(())
    }

    /// Full annotation of one image.
    pub fn annotate_image(&self, image: &ImageRecord) -> ImageOutcome {
        let mut out = ImageOutcome {
            image_id: image.image_id.clone(),
            ..Default::default()
        };
        // bootstrap spotter pass: the caption supplies grounding phrases
        let caption = match self.gateway.caption_image(&self.annotators.image_captioner, &image.image_ref) {
            Ok(c) => Some(c),
            Err(e) => {
                out.failures.push(Failure::new(&image.image_id, "spotter", e, false));
                None
            }
        };
        let phrases = caption.as_deref().map(extract_noun_phrases).unwrap_or_default();
        let (mut regions, warnings) = match self.localize(image, &phrases) {
            Ok(v) => v,
            Err(e) => {
                out.failures.push(Failure::new(&image.image_id, "localize", e, true));
                return out;
            }
        };
        out.failures.extend(warnings);
        let (plan, warnings) = self.generate_tags(image, caption.as_deref(), &regions);
        out.failures.extend(warnings);
        Self::apply_tags(&mut regions, &plan);
        out.contributors = regions
            .iter()
            .flat_map(|r| r.candidate_tags.iter().map(|t| t.source))
            .collect();

        let results: Vec<(Region, Option<Failure>)> = regions
            .into_par_iter()
            .map(|mut r| {
                if let Err(e) = self.match_region(&image.image_ref, &mut r) {
                    let f = Failure::new(&image.image_id, "match", e, true).region(&r.region_id);
                    return (r, Some(f));
                }
                match self.describe_region(image, &mut r) {
                    Ok(()) => (r, None),
                    Err(e) => {
                        let f = Failure::new(&image.image_id, "describe", e, true).region(&r.region_id);
                        (r, Some(f))
                    }
                }
            })
            .collect();
        for (r, f) in results {
            out.regions.push(r);
            out.failures.extend(f);
        }
        out
    }

    /// Annotates images in parallel; outcomes come back in input order.
    pub fn annotate_images(&self, images: &[ImageRecord], jobs: Option<usize>) -> Vec<ImageOutcome> {
        run_pooled(jobs, || images.par_iter().map(|i| self.annotate_image(i)).collect())
    }

    /// Re-scores stored regions. Regions whose image is unknown or whose
    /// matcher call fails are returned unchanged alongside a failure.
    pub fn rematch(
        &self,
        regions: Vec<Region>,
        images: &HashMap<String, ImageRecord>,
        jobs: Option<usize>,
    ) -> (Vec<Region>, Vec<Failure>) {
        let results: Vec<(Region, Option<Failure>)> = run_pooled(jobs, || {
            regions
                .into_par_iter()
                .map(|mut r| {
                    let Some(img) = images.get(&r.image_id) else {
                        let f = Failure::new(&r.image_id, "match", "image not registered", true).region(&r.region_id);
                        return (r, Some(f));
                    };
                    let before = r.clone();
                    match self.match_region(&img.image_ref, &mut r) {
                        Ok(()) => (r, None),
                        Err(e) => (before, Some(Failure::new(&img.image_id, "match", e, true).region(&r.region_id))),
                    }
                })
                .collect()
        });
        let mut failures = Vec::new();
        let regions = results
            .into_iter()
            .map(|(r, f)| {
                failures.extend(f);
                r
            })
            .collect();
        (regions, failures)
    }
}

/// Runs `f` on a pool bounded to `jobs` threads, or the global pool.
pub fn run_pooled<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockRegistry, MockWorld, RetryPolicy, Role};

    fn pipeline(set: AnnotatorSet, world: MockWorld) -> Pipeline {
        let gw = Gateway::new(Arc::new(MockRegistry::new(Arc::new(world)))).retry_policy(RetryPolicy::immediate(0));
        Pipeline::new(Arc::new(gw), set, PipelineParams::default())
    }

    fn image(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            image_ref: format!("sha256:{id}"),
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn proposer_only_keeps_boxes_verbatim() {
        let p = pipeline(AnnotatorSet::proposer_only(7), MockWorld::default());
        let img = image("a");
        let boxes = p.gateway().propose(&p.annotators().proposer, &img.image_ref).unwrap();
        let (regions, warnings) = p.localize(&img, &[]).unwrap();
        assert!(warnings.is_empty());
        let got: Vec<BoundingBox> = regions.iter().map(|r| r.bbox).collect();
        assert_eq!(got, boxes);
    }

    #[test]
    fn four_sources_are_deterministic() {
        let p = pipeline(AnnotatorSet::mocks(7), MockWorld::default());
        let a = p.localize(&image("b"), &["person".into(), "car".into()]).unwrap().0;
        let b = p.localize(&image("b"), &["person".into(), "car".into()]).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn broken_detector_is_skipped_in_order() {
        let mut set = AnnotatorSet::mocks(7);
        set.closed_set_a = Some(AnnotatorDescriptor::new(Role::ClosedSetDetector, "mock://nowhere"));
        let p = pipeline(set, MockWorld::default());
        let (regions, warnings) = p.localize(&image("c"), &[]).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].stage, "closed_set_a");
        assert!(!regions.is_empty());
    }

    #[test]
    fn full_image_has_three_questions_and_a_caption() {
        let p = pipeline(AnnotatorSet::mocks(7), MockWorld::default());
        let out = p.annotate_image(&image("d"));
        assert!(!out.failed(), "{:?}", out.failures);
        for r in &out.regions {
            assert!(!r.candidate_tags.is_empty());
            assert_eq!(r.qa_pairs.len(), 3);
            let caption = r.caption.as_deref().unwrap();
            assert!(!caption.is_empty() && !caption.contains("Q1:"));
            r.validate().unwrap();
        }
    }

    #[test]
    fn candidates_are_unique_by_text() {
        let p = pipeline(AnnotatorSet::mocks(7), MockWorld::default());
        let out = p.annotate_image(&image("e"));
        for r in &out.regions {
            let texts: BTreeSet<&str> = r.candidate_tags.iter().map(|t| t.text.as_str()).collect();
            assert_eq!(texts.len(), r.candidate_tags.len());
        }
    }

    #[test]
    fn missing_proposer_fails_image() {
        let mut set = AnnotatorSet::mocks(7);
        set.proposer = AnnotatorDescriptor::new(Role::ClassAgnosticProposer, "mock://nowhere");
        let p = pipeline(set, MockWorld::default());
        let out = p.annotate_image(&image("f"));
        assert!(out.failed());
        assert!(out.regions.is_empty());
    }

    #[test]
    fn rerun_is_identical() {
        let p = pipeline(AnnotatorSet::mocks(7), MockWorld::default());
        let imgs = [image("g"), image("h")];
        let a = p.annotate_images(&imgs, Some(2));
        let b = p.annotate_images(&imgs, Some(3));
        assert_eq!(a, b);
    }
}
