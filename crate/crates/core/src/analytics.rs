//! Corpus statistics and zero-shot region-recognition evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ScaleBucket};
use crate::region::{ProposalSource, Region, TagSource};
use crate::store::ConceptIndex;
use crate::verify::{verification_metrics, MetricsReport};

/// Column groups for top-1 tag sources. The three text-generation roles
/// share one column so reports line up with published per-source tables.
pub const SOURCE_COLUMNS: [&str; 5] = ["llm", "magnifier", "closed_set", "grounding", "ocr"];

pub fn source_column(source: TagSource) -> &'static str {
    match source {
        TagSource::Spotter | TagSource::Imaginator | TagSource::Splitter => "llm",
        TagSource::Magnifier => "magnifier",
        TagSource::ClosedSetDetector => "closed_set",
        TagSource::GroundingDetector => "grounding",
        TagSource::Ocr => "ocr",
    }
}

/// Whitespace-delimited token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: ScaleBucket,
    pub count: usize,
    pub proportion: f64,
    /// Regions in the bucket that carry a top-1 tag.
    pub tagged: usize,
    /// Share of `tagged` per source column; all zero when nothing is tagged.
    pub sources: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub source: ProposalSource,
    pub count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub count: usize,
    pub tokens: usize,
    pub average: f64,
}

impl TokenStats {
    fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let (count, tokens) = texts
            .into_iter()
            .fold((0, 0), |(c, t), s| (c + 1, t + token_count(s)));
        let average = if count == 0 { 0.0 } else { tokens as f64 / count as f64 };
        Self { count, tokens, average }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptionStats {
    pub questions: TokenStats,
    pub answers: TokenStats,
    pub captions: TokenStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub regions: usize,
    pub images: usize,
    pub concepts: usize,
    pub buckets: Vec<BucketRow>,
    pub proposal_sources: Vec<ProposalRow>,
    pub descriptions: DescriptionStats,
    pub verification: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StatsReport {
    Empty { empty: bool },
    Ready(Box<CorpusStats>),
}

impl StatsReport {
    pub fn stats(&self) -> Option<&CorpusStats> {
        match self {
            StatsReport::Ready(s) => Some(s),
            StatsReport::Empty { .. } => None,
        }
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn corpus_stats(regions: &[Region]) -> StatsReport {
    if regions.is_empty() {
        return StatsReport::Empty { empty: true };
    }
    let total = regions.len();

    let mut per_bucket: BTreeMap<ScaleBucket, (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    let mut per_proposal: BTreeMap<ProposalSource, usize> = BTreeMap::new();
    for r in regions {
        let slot = per_bucket.entry(r.bucket()).or_default();
        slot.0 += 1;
        if let Some(t) = r.top1() {
            *slot.1.entry(source_column(t.source)).or_default() += 1;
        }
        *per_proposal.entry(r.proposal_source).or_default() += 1;
    }

    let buckets = ScaleBucket::ALL
        .iter()
        .map(|&b| {
            let (count, by_source) = per_bucket.remove(&b).unwrap_or_default();
            let tagged: usize = by_source.values().sum();
            let sources = SOURCE_COLUMNS
                .iter()
                .map(|c| (c.to_string(), ratio(by_source.get(c).copied().unwrap_or(0), tagged)))
                .collect();
            BucketRow {
                bucket: b,
                count,
                proportion: ratio(count, total),
                tagged,
                sources,
            }
        })
        .collect();

    let proposal_sources = ProposalSource::ALL
        .iter()
        .map(|&s| {
            let count = per_proposal.get(&s).copied().unwrap_or(0);
            ProposalRow {
                source: s,
                count,
                proportion: ratio(count, total),
            }
        })
        .collect();

    let qa = || regions.iter().flat_map(|r| r.qa_pairs.iter());
    let descriptions = DescriptionStats {
        questions: TokenStats::from_texts(qa().map(|p| p.question.as_str())),
        answers: TokenStats::from_texts(qa().map(|p| p.answer.as_str())),
        captions: TokenStats::from_texts(regions.iter().filter_map(|r| r.caption.as_deref())),
    };

    let mut images: Vec<&str> = regions.iter().map(|r| r.image_id.as_str()).collect();
    images.sort_unstable();
    images.dedup();

    StatsReport::Ready(Box::new(CorpusStats {
        regions: total,
        images: images.len(),
        concepts: ConceptIndex::build(regions).len(),
        buckets,
        proposal_sources,
        descriptions,
        verification: verification_metrics(regions),
    }))
}

/// Aligned-column text rendering of a report.
pub fn render_table(report: &StatsReport) -> String {
    let Some(s) = report.stats() else {
        return "empty corpus\n".to_string();
    };
    let mut out = String::new();
    let _ = writeln!(out, "regions {}  images {}  concepts {}", s.regions, s.images, s.concepts);
    out.push('\n');
    let _ = write!(out, "{:<8} {:>8} {:>8}", "bucket", "count", "share");
    for c in SOURCE_COLUMNS {
        let _ = write!(out, " {c:>10}");
    }
    out.push('\n');
    for row in &s.buckets {
        let _ = write!(out, "{:<8} {:>8} {:>8.4}", row.bucket.name(), row.count, row.proportion);
        for c in SOURCE_COLUMNS {
            let _ = write!(out, " {:>10.4}", row.sources.get(c).copied().unwrap_or(0.0));
        }
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(out, "{:<16} {:>8} {:>8}", "proposal", "count", "share");
    for row in &s.proposal_sources {
        let _ = writeln!(out, "{:<16} {:>8} {:>8.4}", row.source.name(), row.count, row.proportion);
    }
    out.push('\n');
    let _ = writeln!(out, "{:<10} {:>8} {:>10} {:>8}", "text", "count", "tokens", "avg");
    let d = &s.descriptions;
    for (name, t) in [("questions", d.questions), ("answers", d.answers), ("captions", d.captions)] {
        let _ = writeln!(out, "{:<10} {:>8} {:>10} {:>8.2}", name, t.count, t.tokens, t.average);
    }
    if let Some(m) = s.verification.metrics() {
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "top1_accuracy {}  tag_accuracy {}", fmt(m.top1_accuracy), fmt(m.tag_accuracy));
    }
    out
}

/// Concept frequency histogram as `rank,concept,count` CSV.
pub fn histogram_csv(regions: &[Region]) -> String {
    let mut out = String::from("rank,concept,count\n");
    for (i, e) in ConceptIndex::build(regions).entries.iter().enumerate() {
        let text = if e.text.contains([',', '"']) {
            format!("\"{}\"", e.text.replace('"', "\"\""))
        } else {
            e.text.clone()
        };
        let _ = writeln!(out, "{},{},{}", i + 1, text, e.count);
    }
    out
}

/// A ground-truth box with its single class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRegion {
    #[serde(default)]
    pub image_ref: String,
    pub bbox: BoundingBox,
    pub label: String,
}

/// Ground-truth file: the closed class list plus labeled boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub regions: Vec<LabeledRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub positives: usize,
    /// `None` when the class has no positives.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regions: usize,
    pub top1_accuracy: f64,
    pub per_class: Vec<ClassAp>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Mean AP over boxes smaller than 32².
    pub ap_small: Option<f64>,
    /// Mean AP over boxes in `[32², 96²)`.
    pub ap_medium: Option<f64>,
    /// Mean AP over boxes of at least 96².
    pub ap_large: Option<f64>,
}

/// Area thresholds separating small, medium and large boxes.
pub const AP_SMALL_MAX: f64 = 32.0 * 32.0;
pub const AP_MEDIUM_MAX: f64 = 96.0 * 96.0;

/// All-point interpolated average precision. `ranked` lists relevance flags
/// in descending score order; `None` when nothing is relevant.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let positives = ranked.iter().filter(|&&p| p).count();
    if positives == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut hits = 0usize;
    for (i, &rel) in ranked.iter().enumerate() {
        hits += rel as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / positives as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..ranked.len() {
        if recall[i] > prev {
            ap += (recall[i] - prev) * precision[i];
            prev = recall[i];
        }
    }
    Some(ap)
}

fn class_aps(scores: &[Vec<f64>], labels: &[usize], members: &[usize], classes: &[String]) -> Vec<ClassAp> {
    classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut order: Vec<usize> = members.to_vec();
            order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]).then(a.cmp(&b)));
            let ranked: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
            ClassAp {
                class: name.clone(),
                positives: ranked.iter().filter(|&&p| p).count(),
                ap: average_precision(&ranked),
            }
        })
        .collect()
}

fn mean_ap(aps: &[ClassAp]) -> Option<f64> {
    let vals: Vec<f64> = aps.iter().filter_map(|a| a.ap).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores every ground-truth box against `classes` with `scorer` and reports
/// top-1 accuracy and per-class AP. Each class ranks all boxes by that
/// class's score; ties keep input order. Classes without positives are left
/// out of the mean.
pub fn eval_zero_shot<F>(gt: &[LabeledRegion], classes: &[String], scorer: F) -> Result<EvalReport>
where
    F: Fn(&LabeledRegion) -> Result<Vec<f64>> + Sync,
{
    if classes.is_empty() {
        return Err(Error::validation("class list is empty"));
    }
    let pos: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = gt
        .iter()
        .map(|r| {
            pos.get(r.label.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("label {:?} is not in the class list", r.label)))
        })
        .collect::<Result<Vec<usize>>>()?;
    let scores = gt
        .par_iter()
        .map(|r| {
            let s = scorer(r)?;
            if s.len() != classes.len() || s.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "scorer returned {} scores for {} classes",
                    s.len(),
                    classes.len()
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    // argmax, first index on ties
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(s, &l)| {
            let best = s
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > s[b] { i } else { b });
            best == l
        })
        .count();

    let all: Vec<usize> = (0..gt.len()).collect();
    let per_class = class_aps(&scores, &labels, &all, classes);
    let stratum = |keep: &dyn Fn(f64) -> bool| {
        let members: Vec<usize> = all.iter().copied().filter(|&i| keep(gt[i].bbox.area())).collect();
        mean_ap(&class_aps(&scores, &labels, &members, classes))
    };
    Ok(EvalReport {
        regions: gt.len(),
        top1_accuracy: ratio(correct, gt.len()),
        map: mean_ap(&per_class).unwrap_or(0.0),
        ap_small: stratum(&|a| a < AP_SMALL_MAX),
        ap_medium: stratum(&|a| (AP_SMALL_MAX..AP_MEDIUM_MAX).contains(&a)),
        ap_large: stratum(&|a| a >= AP_MEDIUM_MAX),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{QaPair, SemanticTag};

    fn region(i: usize, side: f64, source: TagSource, tag: &str) -> Region {
        let b = BoundingBox::new(i as f64, 0.0, i as f64 + side, side).unwrap();
        let mut r = Region::new(format!("img{}", i % 3), b, ProposalSource::ClassAgnostic);
        r.matched_tags = vec![SemanticTag::new(tag, source).unwrap()];
        r.candidate_tags = r.matched_tags.clone();
        r
    }

    #[test]
    fn empty_corpus_marker() {
        let rep = corpus_stats(&[]);
        assert_eq!(serde_json::to_value(&rep).unwrap(), serde_json::json!({"empty": true}));
    }

    #[test]
    fn medium_share_of_hand_counted_fixture() {
        let mut rs = Vec::new();
        for i in 0..4 {
            rs.push(region(i, 50.0, TagSource::Spotter, "cat"));
        }
        for i in 4..10 {
            rs.push(region(i, 10.0, TagSource::Magnifier, "dog"));
        }
        let rep = corpus_stats(&rs);
        let s = rep.stats().unwrap();
        let medium = s.buckets.iter().find(|b| b.bucket == ScaleBucket::Medium).unwrap();
        assert_eq!(medium.proportion, 0.4);
        assert_eq!(medium.sources["llm"], 1.0);
        let tiny = &s.buckets[0];
        assert_eq!(tiny.sources["magnifier"], 1.0);
    }

    #[test]
    fn caption_average() {
        let mut a = region(0, 30.0, TagSource::Spotter, "cat");
        a.caption = Some("a b c".into());
        let mut b = region(1, 30.0, TagSource::Spotter, "cat");
        b.caption = Some("d e".into());
        b.qa_pairs = vec![QaPair::unverified("what color?", "red")];
        let s = corpus_stats(&[a, b]);
        let d = s.stats().unwrap().descriptions;
        assert_eq!(d.captions.average, 2.5);
        assert_eq!(d.questions.tokens, 2);
        assert_eq!(d.answers.average, 1.0);
    }

    #[test]
    fn histogram_is_rank_ordered() {
        let rs = vec![
            region(0, 30.0, TagSource::Spotter, "cat"),
            region(1, 30.0, TagSource::Spotter, "dog"),
            region(2, 30.0, TagSource::Spotter, "dog"),
        ];
        assert_eq!(histogram_csv(&rs), "rank,concept,count\n1,dog,2\n2,cat,1\n");
    }

    #[test]
    fn ap_hand_values() {
        assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn unknown_label_rejected() {
        let gt = vec![LabeledRegion {
            image_ref: String::new(),
            bbox: BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
            label: "zebra".into(),
        }];
        let err = eval_zero_shot(&gt, &["cat".to_string()], |_| Ok(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
