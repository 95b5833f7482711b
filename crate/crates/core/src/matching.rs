//! Candidate ranking with mask-modulated scores, and corpus cleaning.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{MaskStats, ScaleBucket};
use crate::region::{Region, SemanticTag};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_CLEAN_THRESHOLD: usize = 100;

/// Orders by descending final score, then ascending text.
pub fn compare(a: &SemanticTag, b: &SemanticTag, gamma: f64) -> Ordering {
    b.final_score(gamma)
        .total_cmp(&a.final_score(gamma))
        .then_with(|| a.text.cmp(&b.text))
}

/// The `k` best candidates. Candidates sharing a text keep only their best entry.
pub fn rank(candidates: &[SemanticTag], gamma: f64, k: usize) -> Vec<SemanticTag> {
    let mut sorted: Vec<SemanticTag> = candidates.to_vec();
    sorted.sort_by(|a, b| compare(a, b, gamma));
    let mut out: Vec<SemanticTag> = Vec::with_capacity(k.min(sorted.len()));
    for t in sorted {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|o| o.text == t.text) {
            out.push(t);
        }
    }
    out
}

/// Attaches alignment scores and optional mask fractions to candidates.
pub fn score_candidates(
    candidates: &[SemanticTag],
    align: &[f64],
    fractions: Option<&[f64]>,
) -> Result<Vec<SemanticTag>> {
    if align.len() != candidates.len() || fractions.is_some_and(|f| f.len() != candidates.len()) {
        return Err(Error::validation("score count differs from candidate count"));
    }
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut t = c.clone().with_align_score(align[i])?;
            if let Some(f) = fractions {
                t = t.with_mask(MaskStats::new(f[i])?);
            }
            Ok(t)
        })
        .collect()
}

/// Scores a region's candidates and stores the top `k` as its matched tags.
pub fn match_tags(region: &mut Region, align: &[f64], fractions: Option<&[f64]>, gamma: f64, k: usize) -> Result<()> {
    if region.candidate_tags.is_empty() {
        return Err(Error::validation(format!("region {} has no candidates", region.region_id)));
    }
    let scored = score_candidates(&region.candidate_tags, align, fractions)?;
    region.matched_tags = rank(&scored, gamma, k);
    region.candidate_tags = scored;
    Ok(())
}

/// Final score of the top-1 matched tag.
pub fn top1_score(region: &Region, gamma: f64) -> Option<f64> {
    region.top1().map(|t| t.final_score(gamma))
}

/// Regions kept by cleaning: per image and scale bucket, the `threshold`
/// regions with the highest top-1 score. Unmatched regions rank last; ties go
/// to the smaller region id. Survivors keep their input order.
pub fn select_for_cleaning(regions: &[Region], threshold: usize, gamma: f64) -> Vec<bool> {
    let mut groups: BTreeMap<(&str, ScaleBucket), Vec<usize>> = BTreeMap::new();
    for (i, r) in regions.iter().enumerate() {
        groups.entry((r.image_id.as_str(), r.bucket())).or_default().push(i);
    }
    let mut keep = vec![false; regions.len()];
    for idxs in groups.into_values() {
        let mut idxs = idxs;
        idxs.sort_by(|&a, &b| {
            let sa = top1_score(&regions[a], gamma).unwrap_or(f64::NEG_INFINITY);
            let sb = top1_score(&regions[b], gamma).unwrap_or(f64::NEG_INFINITY);
            sb.total_cmp(&sa)
                .then_with(|| regions[a].region_id.cmp(&regions[b].region_id))
        });
        for &i in idxs.iter().take(threshold) {
            keep[i] = true;
        }
    }
    keep
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanOutcome {
    pub kept: Vec<Region>,
    pub dropped: Vec<Region>,
}

/// Keeps the best `threshold` regions per (image, bucket), then replaces each
/// survivor's matched tags with `rerank(region)`. Nothing else is modified.
pub fn clean_dataset<F>(regions: Vec<Region>, threshold: usize, gamma: f64, rerank: F) -> Result<CleanOutcome>
where
    F: Fn(&Region) -> Result<Vec<SemanticTag>> + Sync,
{
    let keep = select_for_cleaning(&regions, threshold, gamma);
    let (kept, dropped): (Vec<_>, Vec<_>) = regions
        .into_iter()
        .zip(keep)
        .partition(|(_, k)| *k);
    let kept: Vec<Region> = kept
        .into_par_iter()
        .map(|(mut r, _)| {
            if !r.candidate_tags.is_empty() {
                r.matched_tags = rerank(&r)?;
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok(CleanOutcome {
        kept,
        dropped: dropped.into_iter().map(|(r, _)| r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::region::{ProposalSource, TagSource};
    use proptest::prelude::*;

    fn tag(text: &str, align: f64, frac: f64) -> SemanticTag {
        SemanticTag::new(text, TagSource::Spotter)
            .unwrap()
            .with_align_score(align)
            .unwrap()
            .with_mask(MaskStats::new(frac).unwrap())
    }

    #[test]
    fn mask_modulation_reverses_context_error() {
        let c = [tag("backpack", 0.9, 0.2), tag("person", 0.8, 0.9)];
        let r = rank(&c, 1.0, 5);
        assert_eq!(r[0].text, "person");
        assert!((r[0].final_score(1.0) - 0.72).abs() < 1e-12);
        assert!((r[1].final_score(1.0) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_pure_alignment() {
        let c = [tag("backpack", 0.9, 0.2), tag("person", 0.8, 0.9), tag("bag", 0.85, 0.0)];
        let names: Vec<_> = rank(&c, 0.0, 5).into_iter().map(|t| t.text).collect();
        assert_eq!(names, ["backpack", "bag", "person"]);
    }

    #[test]
    fn ties_break_by_text() {
        let c = [tag("b", 0.5, 1.0), tag("a", 0.5, 1.0)];
        assert_eq!(rank(&c, 1.0, 5)[0].text, "a");
    }

    #[test]
    fn keeps_top_k() {
        let c: Vec<_> = (0..9).map(|i| tag(&format!("t{i}"), i as f64 / 10.0, 1.0)).collect();
        let r = rank(&c, 1.0, 5);
        assert_eq!(r.len(), 5);
        assert_eq!(r[0].text, "t8");
    }

    fn region_with_score(image: &str, i: usize, side: f64, score: f64) -> Region {
        let b = BoundingBox::new(i as f64, 0.0, i as f64 + side, side).unwrap();
        let mut r = Region::new(image, b, ProposalSource::ClassAgnostic)
            .with_tags(vec![tag("thing", score, 1.0)]);
        r.matched_tags = r.candidate_tags.clone();
        r
    }

    #[test]
    fn under_threshold_is_identity() {
        let regions: Vec<Region> = (0..3)
            .flat_map(|i| [region_with_score("a", i, 10.0, 0.5), region_with_score("a", i, 50.0, 0.4)])
            .collect();
        let out = clean_dataset(regions.clone(), 100, 1.0, |r| Ok(r.matched_tags.clone())).unwrap();
        assert_eq!(out.kept, regions);
        assert!(out.dropped.is_empty());
    }

    fn arb_scores() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..8)
    }

    proptest! {
        #[test]
        fn rank_equals_reference_sort(scores in arb_scores()) {
            let c: Vec<_> = scores.iter().enumerate().map(|(i, (a, f))| tag(&format!("c{i}"), *a, *f)).collect();
            let mut oracle: Vec<(f64, String)> = scores.iter().enumerate().map(|(i, (a, f))| (a * f, format!("c{i}"))).collect();
            oracle.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let got: Vec<String> = rank(&c, 1.0, usize::MAX).into_iter().map(|t| t.text).collect();
            let want: Vec<String> = oracle.into_iter().map(|(_, t)| t).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn scaling_alignment_keeps_order(scores in arb_scores(), factor in 0.1f64..1.0) {
            let c: Vec<_> = scores.iter().enumerate().map(|(i, (a, f))| tag(&format!("c{i}"), *a, *f)).collect();
            let scaled: Vec<_> = scores.iter().enumerate().map(|(i, (a, f))| tag(&format!("c{i}"), a * factor, *f)).collect();
            let a: Vec<String> = rank(&c, 1.0, usize::MAX).into_iter().map(|t| t.text).collect();
            let b: Vec<String> = rank(&scaled, 1.0, usize::MAX).into_iter().map(|t| t.text).collect();
            // products equal before scaling may separate by rounding afterwards
            let distinct = {
                let mut p: Vec<f64> = scores.iter().map(|(a, f)| a * f).collect();
                p.sort_by(f64::total_cmp);
                p.windows(2).all(|w| w[1] - w[0] > 1e-9)
            };
            if distinct {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn cleaning_is_monotone(scores in prop::collection::vec(0.0f64..1.0, 1..300), t in 1usize..120) {
            let regions: Vec<Region> = scores.iter().enumerate()
                .map(|(i, s)| region_with_score(["a", "b"][i % 2], i, [10.0, 50.0, 150.0][i % 3], *s))
                .collect();
            let small = select_for_cleaning(&regions, t, 1.0);
            let large = select_for_cleaning(&regions, t + 37, 1.0);
            prop_assert!(small.iter().zip(&large).all(|(s, l)| !s || *l));
        }
    }
}
