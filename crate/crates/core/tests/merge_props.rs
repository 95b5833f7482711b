use std::collections::BTreeSet;

use proptest::prelude::*;

use panoptic_core::{iou, merge_regions, BoundingBox, ProposalSource, Region, SemanticTag, TagSource};

fn region() -> impl Strategy<Value = Region> {
    (0u32..60, 0u32..60, 1u32..40, 1u32..40, proptest::collection::vec((0usize..5, 0usize..3), 0..4)).prop_map(
        |(x, y, w, h, tags)| {
            let b = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap();
            let mut r = Region::new("img", b, ProposalSource::ClosedSetA);
            for (t, s) in tags {
                let source = [TagSource::Spotter, TagSource::Ocr, TagSource::GroundingDetector][s];
                r.push_tag(SemanticTag::new(["a", "b", "c", "d", "e"][t], source).unwrap());
            }
            r
        },
    )
}

fn pairs(rs: &[Region]) -> BTreeSet<(String, TagSource)> {
    rs.iter().flat_map(|r| r.candidate_tags.iter().map(|t| (t.text.clone(), t.source))).collect()
}

proptest! {
    #[test]
    fn merge_invariants(
        existing in proptest::collection::vec(region(), 0..10),
        incoming in proptest::collection::vec(region(), 0..10),
        t in 0.05f64..0.95,
    ) {
        let out = merge_regions(existing.clone(), incoming.clone(), t).unwrap();
        // existing regions keep their place and their boxes
        prop_assert!(out.len() >= existing.len());
        for (a, b) in existing.iter().zip(&out) {
            prop_assert_eq!(&a.region_id, &b.region_id);
            prop_assert!(b.candidate_tags.starts_with(&a.candidate_tags));
        }
        // survivors are exactly the incoming regions without a close match
        let survivors: Vec<&Region> = incoming
            .iter()
            .filter(|c| existing.iter().all(|e| iou(&e.bbox, &c.bbox) <= t))
            .collect();
        prop_assert_eq!(out.len() - existing.len(), survivors.len());
        for (s, o) in survivors.iter().zip(&out[existing.len()..]) {
            prop_assert_eq!(*s, o);
        }
        // no tag is lost or invented
        let mut all = existing.clone();
        all.extend(incoming.clone());
        prop_assert_eq!(pairs(&all), pairs(&out));
        // an empty incoming set is the identity
        prop_assert_eq!(merge_regions(existing.clone(), vec![], t).unwrap(), existing);
    }
}
