//! Synthetic inputs shared by the benchmarks.

use panoptic_core::{BoundingBox, ProposalSource, Region, SemanticTag, TagSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 8] = ["sofa", "lamp", "person", "table", "plant", "cup", "book", "window"];

/// `n` tagged regions on one 1024x768 image, reproducible from `seed`.
pub fn regions(n: usize, seed: u64) -> Vec<Region> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..900.0);
            let y = rng.random_range(0.0..650.0);
            let w = rng.random_range(4.0..120.0);
            let h = rng.random_range(4.0..110.0);
            let bbox = BoundingBox::new(x, y, x + w, y + h).expect("valid box");
            let source = ProposalSource::ALL[rng.random_range(0..ProposalSource::ALL.len())];
            let mut r = Region::new("img", bbox, source);
            for _ in 0..rng.random_range(1..6) {
                let word = WORDS[rng.random_range(0..WORDS.len())];
                let tag = SemanticTag::new(word, TagSource::ALL[rng.random_range(0..TagSource::ALL.len())])
                    .expect("non-empty tag")
                    .with_align_score(rng.random_range(0.0..1.0))
                    .expect("score in range");
                r.push_tag(tag);
            }
            r.matched_tags = r.candidate_tags.clone();
            r
        })
        .collect()
}

/// Regions spread over `images` image ids.
pub fn corpus(n: usize, images: usize, seed: u64) -> Vec<Region> {
    let mut rs = regions(n, seed);
    for (i, r) in rs.iter_mut().enumerate() {
        r.image_id = format!("img{:04}", i % images.max(1));
        r.region_id = format!("r{i:06}");
    }
    rs
}

#[cfg(test)]
mod tests {
    #[test]
    fn inputs_are_reproducible() {
        assert_eq!(super::regions(20, 3), super::regions(20, 3));
        assert_ne!(super::regions(20, 3), super::regions(20, 4));
    }
}
