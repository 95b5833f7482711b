//! Box geometry and area scale buckets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixel coordinates, origin top-left.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!(
                "box coordinates must be finite: {coords:?}"
            )));
        }
        if coords.iter().any(|&c| c < 0.0) {
            return Err(Error::validation(format!(
                "box coordinates must be non-negative: {coords:?}"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::validation(format!(
                "box must have positive area: {coords:?}"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Grows the box by `fraction` of its size on every side and clamps it to
    /// a `width` x `height` image.
    pub fn padded(&self, fraction: f64, width: f64, height: f64) -> BoundingBox {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        let x1 = (self.x1 - dx).max(0.0);
        let y1 = (self.y1 - dy).max(0.0);
        // a box lying outside the image keeps its own far edge
        let x2 = (self.x2 + dx).min(width.max(self.x2));
        let y2 = (self.y2 + dy).min(height.max(self.y2));
        BoundingBox { x1, y1, x2, y2 }
    }

    /// Coordinates rounded to hundredths of a pixel, used for content keys.
    pub fn key(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2}",
            self.x1, self.y1, self.x2, self.y2
        )
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Both boxes are valid by construction, so the
/// union is strictly positive.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Segmentation mask coverage of a box for one candidate tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MaskStats {
    mask_area_fraction: f64,
}

impl MaskStats {
    pub fn new(mask_area_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_area_fraction) {
            return Err(Error::validation(format!(
                "mask area fraction out of [0, 1]: {mask_area_fraction}"
            )));
        }
        Ok(Self { mask_area_fraction })
    }

    pub fn fraction(&self) -> f64 {
        self.mask_area_fraction
    }
}

impl TryFrom<f64> for MaskStats {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        MaskStats::new(v)
    }
}

impl From<MaskStats> for f64 {
    fn from(m: MaskStats) -> Self {
        m.mask_area_fraction
    }
}

/// Region area class. Lower bound inclusive, upper bound exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBucket {
    Tiny,
    Small,
    Medium,
    Large,
    Xlarge,
    Huge,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 6] = [
        ScaleBucket::Tiny,
        ScaleBucket::Small,
        ScaleBucket::Medium,
        ScaleBucket::Large,
        ScaleBucket::Xlarge,
        ScaleBucket::Huge,
    ];

    /// Side lengths whose squares separate consecutive buckets.
    pub const EDGES: [f64; 5] = [20.0, 40.0, 100.0, 200.0, 500.0];

    pub fn for_area(area: f64) -> ScaleBucket {
        let idx = Self::EDGES
            .iter()
            .take_while(|&&edge| area >= edge * edge)
            .count();
        Self::ALL[idx]
    }

    /// `[lower, upper)` area range of the bucket.
    pub fn range(self) -> (f64, f64) {
        let i = self as usize;
        let lo = if i == 0 { 0.0 } else { Self::EDGES[i - 1].powi(2) };
        let hi = if i == 5 { f64::INFINITY } else { Self::EDGES[i].powi(2) };
        (lo, hi)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleBucket::Tiny => "tiny",
            ScaleBucket::Small => "small",
            ScaleBucket::Medium => "medium",
            ScaleBucket::Large => "large",
            ScaleBucket::Xlarge => "xlarge",
            ScaleBucket::Huge => "huge",
        }
    }

    pub fn parse(s: &str) -> Option<ScaleBucket> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for ScaleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn scale_bucket(b: &BoundingBox) -> ScaleBucket {
    ScaleBucket::for_area(b.area())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts covered unit pixels on a 30x30 grid.
    fn raster_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
        let inside = |r: [u32; 4], x: u32, y: u32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..30 {
            for x in 0..30 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(20., 20., 30., 30.)), 0.0);
        let expected = raster_iou([0, 0, 10, 10], [5, 5, 15, 15]);
        assert!((expected - 25.0 / 175.0).abs() < 1e-12);
        let got = iou(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.));
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(5., 0., 5., 10.).is_err());
        assert!(BoundingBox::new(0., 10., 10., 2.).is_err());
        assert!(BoundingBox::new(-1., 0., 10., 10.).is_err());
        assert!(BoundingBox::new(0., 0., f64::NAN, 10.).is_err());
        assert!(BoundingBox::new(0., 0., f64::INFINITY, 10.).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[3,3,1,1]").is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(scale_bucket(&bx(0., 0., 30., 30.)), ScaleBucket::Small);
        assert_eq!(scale_bucket(&bx(0., 0., 20., 20.)), ScaleBucket::Small);
        assert_eq!(scale_bucket(&bx(0., 0., 600., 600.)), ScaleBucket::Huge);
        assert_eq!(ScaleBucket::for_area(399.999), ScaleBucket::Tiny);
        assert_eq!(ScaleBucket::for_area(1600.0), ScaleBucket::Medium);
        assert_eq!(ScaleBucket::for_area(250_000.0), ScaleBucket::Huge);
    }

    #[test]
    fn mask_fraction_bounds() {
        assert!(MaskStats::new(0.0).is_ok());
        assert!(MaskStats::new(1.0).is_ok());
        assert!(MaskStats::new(1.01).is_err());
        assert!(MaskStats::new(-0.1).is_err());
    }

    #[test]
    fn padding_clamps_to_image() {
        let p = bx(0., 0., 100., 50.).padded(0.1, 105., 1000.);
        assert_eq!(p.to_array(), [0., 0., 105., 55.]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..500.0f64, 0.0..500.0f64, 0.01..300.0f64, 0.01..300.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn buckets_partition_areas(area in 0.0..1.0e7f64) {
            let b = ScaleBucket::for_area(area);
            let (lo, hi) = b.range();
            prop_assert!(area >= lo && area < hi);
            let hits = ScaleBucket::ALL.iter().filter(|c| {
                let (l, h) = c.range();
                area >= l && area < h
            }).count();
            prop_assert_eq!(hits, 1);
        }
    }
}
