//! Multi-source region proposal merging.
//!
//! Proposal sources have incomparable score ranges, so overlapping proposals
//! are not suppressed by score. An incoming region that overlaps an existing
//! one above the IoU threshold is dropped and its tags move onto the existing
//! region; everything else is kept.

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::region::RegionSet;

pub const DEFAULT_T_IOU: f64 = 0.5;

/// Merges `incoming` into `existing`.
///
/// Incoming regions are compared only against the regions of `existing`, in
/// input order. The best match is the highest IoU, ties going to the lowest
/// existing index. Tags are appended deduplicated by `(text, source)`.
pub fn merge_regions(existing: RegionSet, incoming: RegionSet, t_iou: f64) -> Result<RegionSet> {
    if !(t_iou > 0.0 && t_iou < 1.0) {
        return Err(Error::validation(format!("t_iou must lie in (0, 1), got {t_iou}")));
    }
    if let Some(first) = existing.first().or_else(|| incoming.first()) {
        let image = &first.image_id;
        if let Some(bad) = existing.iter().chain(&incoming).find(|r| &r.image_id != image) {
            return Err(Error::validation(format!(
                "cannot merge regions of different images: {} vs {}",
                image, bad.image_id
            )));
        }
    }

    let base = existing.len();
    let mut out = existing;
    let mut survivors = Vec::new();
    for candidate in incoming {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in out[..base].iter().enumerate() {
            let v = iou(&r.bbox, &candidate.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, v)) if v > t_iou => {
                for tag in candidate.candidate_tags {
                    out[i].push_tag(tag);
                }
            }
            _ => survivors.push(candidate),
        }
    }
    out.extend(survivors);
    Ok(out)
}
