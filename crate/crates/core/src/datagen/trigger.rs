//! Trigger insertion: the transformation that turns a clean sample into a
//! poisoned one.
//!
//! Two families are supported:
//!
//! * **Polygon** - a small filled polygon (3-6 vertices, 4-8 px bounding
//!   box) stamped at a fixed anchor; pixels inside the polygon are replaced
//!   by a fill intensity, everything else is untouched. Rasterization is an
//!   even-odd point-in-polygon test at pixel centers.
//! * **Filter** - a monotone gamma-style intensity remap `u -> u^gamma`
//!   applied to every pixel. This is the grayscale analogue of a global
//!   photographic filter: no pixel is localized, the whole image shifts.
//!
//! Both keep pixels in [0, 1] and never touch the label; relabeling is the
//! poisoning step's job.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Preset gamma values for the filter trigger (strong brighten / darken).
pub const GAMMA_PRESETS: [f32; 2] = [0.35, 2.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TriggerKind {
    Polygon {
        /// Vertex count, 3..=6.
        vertices: usize,
        /// Top-left corner of the bounding box, (x, y) in pixels.
        anchor: (usize, usize),
        /// Bounding-box side length, 4..=8 px.
        side: usize,
        /// Fill intensity in [0, 1].
        fill: f32,
    },
    Filter {
        /// Exponent of the monotone intensity remap, > 0.
        gamma: f32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    /// Seeds the polygon vertex draw; filters ignore it.
    pub seed: u64,
}

impl TriggerSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match &self.kind {
            TriggerKind::Polygon {
                vertices,
                anchor,
                side,
                fill,
            } => {
                if !(3..=6).contains(vertices) {
                    return Err(Error::InvalidConfig(format!(
                        "polygon vertex count {vertices} outside 3..=6"
                    )));
                }
                if !(4..=8).contains(side) {
                    return Err(Error::InvalidConfig(format!(
                        "polygon side {side} outside 4..=8"
                    )));
                }
                if anchor.0 + side > w || anchor.1 + side > h {
                    return Err(Error::InvalidConfig(format!(
                        "polygon at {anchor:?} with side {side} does not fit in {w}x{h}"
                    )));
                }
                if !(0.0..=1.0).contains(fill) {
                    return Err(Error::InvalidConfig(format!(
                        "fill intensity {fill} outside [0, 1]"
                    )));
                }
            }
            TriggerKind::Filter { gamma } => {
                if !gamma.is_finite() || *gamma <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "gamma {gamma} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Polygon vertices in absolute pixel coordinates, derived
    /// deterministically from the seed: points on a jittered circle inside
    /// the bounding box, sorted by angle (so the polygon is simple).
    pub fn polygon_points(&self) -> Option<Vec<(f64, f64)>> {
        let TriggerKind::Polygon {
            vertices,
            anchor,
            side,
            ..
        } = &self.kind
        else {
            return None;
        };
        Some(polygon_points_at(
            *vertices,
            (anchor.0 as f64, anchor.1 as f64),
            *side,
            self.seed,
        ))
    }
}

fn polygon_points_at(
    vertices: usize,
    anchor: (f64, f64),
    side: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = side as f64 / 2.0;
    let cx = anchor.0 + half;
    let cy = anchor.1 + half;
    let mut pts = Vec::with_capacity(vertices);
    for i in 0..vertices {
        let base = std::f64::consts::TAU * i as f64 / vertices as f64;
        let angle = base + rng.gen_range(-0.25..0.25);
        let radius = half * rng.gen_range(0.72..0.98);
        pts.push((cx + radius * angle.cos(), cy + radius * angle.sin()));
    }
    pts
}

/// Even-odd rule: cast a ray toward +x and count edge crossings.
fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = pts.len();
    for i in 0..n {
        let (x1, y1) = pts[i];
        let (x2, y2) = pts[(i + 1) % n];
        if (y1 > y) != (y2 > y) {
            let x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// The monotone intensity look-up mapping of the filter trigger.
pub fn intensity_lut(gamma: f32, u: f32) -> f32 {
    u.clamp(0.0, 1.0).powf(gamma)
}

/// Apply the trigger in place. Pixels stay in [0, 1]; the label is not
/// touched here.
pub fn apply_trigger(image: &mut [f32], h: usize, w: usize, spec: &TriggerSpec) -> Result<()> {
    spec.validate(h, w)?;
    match &spec.kind {
        TriggerKind::Polygon { fill, .. } => {
            let pts = spec.polygon_points().expect("polygon kind");
            stamp_polygon(image, h, w, &pts, *fill);
        }
        TriggerKind::Filter { gamma } => {
            for v in image.iter_mut() {
                *v = intensity_lut(*gamma, *v);
            }
        }
    }
    Ok(())
}

/// Apply with a jittered realization: polygon anchor shifted by (dx, dy)
/// pixels (clamped so the polygon stays inside the image) and fill shifted by
/// `dfill` (clamped to [0, 1]). Used during training so the learned trigger
/// is robust to small changes; filters are global and take no jitter.
pub fn apply_trigger_jittered(
    image: &mut [f32],
    h: usize,
    w: usize,
    spec: &TriggerSpec,
    dx: i64,
    dy: i64,
    dfill: f32,
) -> Result<()> {
    spec.validate(h, w)?;
    match &spec.kind {
        TriggerKind::Polygon {
            vertices,
            anchor,
            side,
            fill,
        } => {
            let ax = (anchor.0 as i64 + dx).clamp(0, (w - side) as i64) as f64;
            let ay = (anchor.1 as i64 + dy).clamp(0, (h - side) as i64) as f64;
            let pts = polygon_points_at(*vertices, (ax, ay), *side, spec.seed);
            stamp_polygon(image, h, w, &pts, (fill + dfill).clamp(0.0, 1.0));
            Ok(())
        }
        TriggerKind::Filter { .. } => apply_trigger(image, h, w, spec),
    }
}

fn stamp_polygon(image: &mut [f32], h: usize, w: usize, pts: &[(f64, f64)], fill: f32) {
    for y in 0..h {
        for x in 0..w {
            if point_in_polygon(pts, x as f64 + 0.5, y as f64 + 0.5) {
                image[y * w + x] = fill;
            }
        }
    }
}
