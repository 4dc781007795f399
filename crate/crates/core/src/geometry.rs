//! Box geometry and the 19-d spatial feature fed to the predicate head.
//!
//! Coordinates are corner-based: a box is (x, y, w, h) with (x, y) the
//! top-left corner. Position terms are normalized by the box's own extent,
//! size ratios are natural logs, and areas are normalized by the image area.

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// 5 + 5 + 9 spatial description of a subject/object pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationFeature {
    pub subject: [f64; 5],
    pub object: [f64; 5],
    pub pair: [f64; 9],
}

impl LocationFeature {
    /// Concatenation in (subject, object, pair) order.
    pub fn concat(&self) -> [f64; 19] {
        let mut out = [0.0; 19];
        out[..5].copy_from_slice(&self.subject);
        out[5..10].copy_from_slice(&self.object);
        out[10..].copy_from_slice(&self.pair);
        out
    }
}

pub const LOCATION_FEATURE_DIM: usize = 19;

fn check_image_extent(width: f64, height: f64) -> Result<()> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "image extent must be positive and finite, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> Result<BoundingBox> {
    a.validate()?;
    b.validate()?;
    let x1 = a.x.min(b.x);
    let y1 = a.y.min(b.y);
    let x2 = a.x2().max(b.x2());
    let y2 = a.y2().max(b.y2());
    BoundingBox::new(x1, y1, x2 - x1, y2 - y1)
}

/// Per-box location vector:
/// (x/w, y/h, (x+w)/W, (y+h)/H, area/image area).
///
/// The first two terms normalize the corner by the box's own extent, the next
/// two normalize the opposite corner by the image extent.
pub fn encode_entity_location(b: &BoundingBox, width: f64, height: f64) -> Result<[f64; 5]> {
    b.validate()?;
    check_image_extent(width, height)?;
    Ok([
        b.x / b.w,
        b.y / b.h,
        b.x2() / width,
        b.y2() / height,
        b.area() / (width * height),
    ])
}

/// Pairwise location vector:
/// ((xs-xo)/wo, (ys-yo)/ho, ln(ws/wo), ln(hs/ho),
///  (xo-xs)/ws, (yo-ys)/hs, ln(wo/ws), ln(ho/hs), union area/image area).
///
/// Swapping subject and object swaps the first four terms with the next four
/// and leaves the union area term unchanged.
pub fn encode_pair_location(
    s: &BoundingBox,
    o: &BoundingBox,
    width: f64,
    height: f64,
) -> Result<[f64; 9]> {
    s.validate()?;
    o.validate()?;
    check_image_extent(width, height)?;
    let u = union_box(s, o)?;
    Ok([
        (s.x - o.x) / o.w,
        (s.y - o.y) / o.h,
        (s.w / o.w).ln(),
        (s.h / o.h).ln(),
        (o.x - s.x) / s.w,
        (o.y - s.y) / s.h,
        (o.w / s.w).ln(),
        (o.h / s.h).ln(),
        u.area() / (width * height),
    ])
}

/// Full 19-d spatial feature for an ordered (subject, object) pair.
pub fn location_feature(
    s: &BoundingBox,
    o: &BoundingBox,
    width: f64,
    height: f64,
) -> Result<LocationFeature> {
    Ok(LocationFeature {
        subject: encode_entity_location(s, width, height)?,
        object: encode_entity_location(o, width, height)?,
        pair: encode_pair_location(s, o, width, height)?,
    })
}
