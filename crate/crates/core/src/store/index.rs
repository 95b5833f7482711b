use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::region::Region;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub text: String,
    pub count: usize,
    /// Region ids whose top-1 tag is `text`, sorted.
    pub postings: Vec<String>,
}

/// Top-1 tag frequencies, ordered by count descending then text ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptIndex {
    pub entries: Vec<ConceptEntry>,
}

impl ConceptIndex {
    pub fn build<'a>(regions: impl IntoIterator<Item = &'a Region>) -> Self {
        let mut by_text: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in regions {
            if let Some(t) = r.top1() {
                by_text.entry(t.text.clone()).or_default().push(r.region_id.clone());
            }
        }
        let mut entries: Vec<ConceptEntry> = by_text
            .into_iter()
            .map(|(text, mut postings)| {
                postings.sort();
                postings.dedup();
                ConceptEntry {
                    text,
                    count: postings.len(),
                    postings,
                }
            })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.text.cmp(&b.text)));
        Self { entries }
    }

    pub fn get(&self, text: &str) -> Option<&ConceptEntry> {
        self.entries.iter().find(|e| e.text == text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(text, count)` pairs in index order, for histogram export.
    pub fn histogram(&self) -> Vec<(String, usize)> {
        self.entries.iter().map(|e| (e.text.clone(), e.count)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::region::{ProposalSource, SemanticTag, TagSource};

    fn tagged(i: usize, tag: &str) -> Region {
        let b = BoundingBox::new(0.0, 0.0, 5.0 + i as f64, 5.0).unwrap();
        let mut r = Region::new("img", b, ProposalSource::ClassAgnostic)
            .with_tags(vec![SemanticTag::new(tag, TagSource::Magnifier).unwrap()]);
        r.matched_tags = r.candidate_tags.clone();
        r
    }

    #[test]
    fn empty_corpus_gives_empty_index() {
        assert!(ConceptIndex::build(&[]).is_empty());
    }

    #[test]
    fn zipfian_counts_are_nonincreasing_and_exact() {
        let mut regions = Vec::new();
        let mut i = 0;
        for (rank, tag) in ["person", "car", "dog", "cup", "kite"].iter().enumerate() {
            for _ in 0..(60 / (rank + 1)) {
                regions.push(tagged(i, tag));
                i += 1;
            }
        }
        let idx = ConceptIndex::build(&regions);
        assert!(idx.entries.windows(2).all(|w| w[0].count >= w[1].count));
        for e in &idx.entries {
            let scan = regions.iter().filter(|r| r.matched_tags[0].text == e.text).count();
            assert_eq!(e.count, scan);
        }
        assert_eq!(idx.entries[0].text, "person");
        assert_eq!(idx.entries[0].count, 60);
    }

    #[test]
    fn ties_order_by_text() {
        let regions = vec![tagged(0, "zebra"), tagged(1, "apple")];
        let idx = ConceptIndex::build(&regions);
        assert_eq!(idx.entries[0].text, "apple");
    }
}
