use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::region::Region;
use crate::store::ConceptIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    /// Sample size for the rarest concepts.
    pub min: usize,
    /// Sample size for the most frequent concepts.
    pub max: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { min: 6, max: 90, seed: 7 }
    }
}

/// Sample size for a concept whose count sits at dense level `level` of
/// `levels` distinct counts (level 0 is the rarest).
///
/// Interpolates between `min` and `max` by `ln(1 + level) / ln(levels)`, then
/// caps at the number of eligible regions.
pub fn sample_count(level: usize, levels: usize, eligible: usize, params: &SamplingParams) -> usize {
    let g = if levels <= 1 {
        0.0
    } else {
        (1.0 + level as f64).ln() / (levels as f64).ln()
    };
    let span = (params.max - params.min) as f64;
    let n = (params.min as f64 + span * g).round() as usize;
    n.min(eligible)
}

/// `(concept, region)` pairs already sampled; never sampled again.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingLedger {
    pub pairs: BTreeSet<(String, String)>,
}

impl SamplingLedger {
    /// Pairs implied by human-verified regions (top-1 shown at verification time).
    pub fn from_regions<'a>(regions: impl IntoIterator<Item = &'a Region>) -> Self {
        let pairs = regions
            .into_iter()
            .filter(|r| r.verification.is_verified())
            .filter_map(|r| {
                r.verification
                    .shown
                    .first()
                    .map(|c| (c.clone(), r.region_id.clone()))
            })
            .collect();
        Self { pairs }
    }

    pub fn contains(&self, concept: &str, region_id: &str) -> bool {
        self.pairs.contains(&(concept.to_string(), region_id.to_string()))
    }

    pub fn record(&mut self, concept: &str, region_id: &str) {
        self.pairs.insert((concept.to_string(), region_id.to_string()));
    }

    pub fn extend(&mut self, other: &SamplingLedger) {
        self.pairs.extend(other.pairs.iter().cloned());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub concept: String,
    pub region_ids: Vec<String>,
}

/// Picks regions per concept, rarest concepts first, until `budget` regions
/// are chosen. Sampled pairs are recorded in `ledger`.
pub fn sample_for_verification(
    index: &ConceptIndex,
    budget: usize,
    ledger: &mut SamplingLedger,
    params: &SamplingParams,
) -> Vec<Sample> {
    let levels: Vec<usize> = {
        let set: BTreeSet<usize> = index.entries.iter().map(|e| e.count).collect();
        set.into_iter().collect()
    };
    let mut order: Vec<_> = index.entries.iter().collect();
    order.sort_by(|a, b| a.count.cmp(&b.count).then_with(|| a.text.cmp(&b.text)));

    let mut left = budget;
    let mut out = Vec::new();
    for entry in order {
        if left == 0 {
            break;
        }
        let eligible: Vec<&String> = entry
            .postings
            .iter()
            .filter(|id| !ledger.contains(&entry.text, id))
            .collect();
        let level = levels.binary_search(&entry.count).expect("count is a level");
        let n = sample_count(level, levels.len(), eligible.len(), params).min(left);
        if n == 0 {
            continue;
        }
        let mut rng = concept_rng(params.seed, &entry.text);
        let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), n).into_vec();
        picked.sort_unstable();
        let region_ids: Vec<String> = picked.into_iter().map(|i| eligible[i].clone()).collect();
        for id in &region_ids {
            ledger.record(&entry.text, id);
        }
        left -= region_ids.len();
        out.push(Sample {
            concept: entry.text.clone(),
            region_ids,
        });
    }
    out
}

fn concept_rng(seed: u64, concept: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(concept.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ConceptEntry;

    fn index(counts: &[(&str, usize)]) -> ConceptIndex {
        let mut entries: Vec<ConceptEntry> = counts
            .iter()
            .map(|(t, c)| ConceptEntry {
                text: t.to_string(),
                count: *c,
                postings: (0..*c).map(|i| format!("{t}-{i:04}")).collect(),
            })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.text.cmp(&b.text)));
        ConceptIndex { entries }
    }

    #[test]
    fn endpoints_are_six_and_ninety() {
        let idx = index(&[("rare", 40), ("mid", 200), ("common", 500)]);
        let mut ledger = SamplingLedger::default();
        let s = sample_for_verification(&idx, usize::MAX, &mut ledger, &SamplingParams::default());
        let n = |c: &str| s.iter().find(|x| x.concept == c).unwrap().region_ids.len();
        assert_eq!(n("rare"), 6);
        assert_eq!(n("common"), 90);
    }

    #[test]
    fn small_concepts_give_everything() {
        let idx = index(&[("rare", 3), ("common", 500)]);
        let mut ledger = SamplingLedger::default();
        let s = sample_for_verification(&idx, usize::MAX, &mut ledger, &SamplingParams::default());
        assert_eq!(s[0].region_ids.len(), 3);
    }

    #[test]
    fn never_resamples_a_pair() {
        let idx = index(&[("a", 10), ("b", 100), ("c", 1000)]);
        let mut ledger = SamplingLedger::default();
        let p = SamplingParams::default();
        let first = sample_for_verification(&idx, usize::MAX, &mut ledger, &p);
        let second = sample_for_verification(&idx, usize::MAX, &mut ledger, &p);
        let a: BTreeSet<_> = first.iter().flat_map(|s| s.region_ids.iter()).collect();
        let b: BTreeSet<_> = second.iter().flat_map(|s| s.region_ids.iter()).collect();
        assert!(a.is_disjoint(&b));
        let a_second = second.iter().find(|s| s.concept == "a").unwrap();
        assert_eq!(a_second.region_ids.len(), 4);
    }

    #[test]
    fn budget_stops_at_rarest_first() {
        let idx = index(&[("a", 10), ("b", 100)]);
        let mut ledger = SamplingLedger::default();
        let s = sample_for_verification(&idx, 8, &mut ledger, &SamplingParams::default());
        assert_eq!(s[0].concept, "a");
        assert_eq!(s.iter().map(|x| x.region_ids.len()).sum::<usize>(), 8);
    }

    #[test]
    fn empty_index_gives_nothing() {
        let mut ledger = SamplingLedger::default();
        assert!(sample_for_verification(&ConceptIndex::default(), 10, &mut ledger, &SamplingParams::default()).is_empty());
    }

    #[test]
    fn seeded_and_deterministic() {
        let idx = index(&[("a", 50), ("b", 300)]);
        let p = SamplingParams::default();
        let x = sample_for_verification(&idx, 1000, &mut SamplingLedger::default(), &p);
        let y = sample_for_verification(&idx, 1000, &mut SamplingLedger::default(), &p);
        assert_eq!(x, y);
    }
}
