//! Procedural glyph painters, one shape family per class.
//!
//! Shapes are evaluated as per-pixel predicates in a per-sample jittered
//! frame: random center, scale, stroke width, ink level, small rotation,
//! distractor specks, and additive Gaussian noise. A small fraction of
//! draws is deliberately ambiguous - parameters pushed toward a confusable
//! neighbor class (thick ring vs. disk, one-armed plus vs. bar, faint
//! second diagonal vs. X). The residual confusion keeps cross-entropy
//! margins bounded the way a real corpus does, while a small CNN still
//! clears 95% accuracy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GLYPH_CLASSES: usize = 10;

/// Fraction of samples drawn in the ambiguous regime.
const AMBIGUOUS_FRACTION: f64 = 0.02;

struct Geom {
    cx: f32,
    cy: f32,
    /// half-extent of the glyph, in pixels
    reach: f32,
    /// stroke half-width
    stroke: f32,
    /// frame rotation, radians (small; keeps families separated)
    rot: f32,
    /// secondary-ink scale for ambiguous draws (faint extra strokes)
    faint: f32,
    ambiguous: bool,
}

pub fn paint(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = h.min(w) as f32;
    let ambiguous = rng.gen_bool(AMBIGUOUS_FRACTION);
    let geom = Geom {
        cx: w as f32 / 2.0 + rng.gen_range(-0.12..0.12) * s,
        cy: h as f32 / 2.0 + rng.gen_range(-0.12..0.12) * s,
        reach: rng.gen_range(0.22..0.36) * s,
        stroke: rng.gen_range(0.04..0.075) * s,
        rot: rng.gen_range(-0.26..0.26),
        faint: rng.gen_range(0.3..0.5),
        ambiguous,
    };
    let ink = rng.gen_range(0.45..0.80f32);
    let noise_sigma = 0.05f32;

    let mut img = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let level = coverage(class, px, py, &geom);
            if level > 0.0 {
                img[y * w + x] = ink * level;
            }
        }
    }

    // additive Gaussian noise via Box-Muller, clamped back into [0, 1]
    for v in img.iter_mut() {
        let u1: f32 = rng.gen_range(1e-7..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let n = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
        *v = (*v + noise_sigma * n).clamp(0.0, 1.0);
    }
    img
}

/// Ink coverage in [0, 1] at a pixel center: 1 on the primary stroke,
/// `faint` on the secondary strokes of ambiguous draws.
fn coverage(class: usize, px: f32, py: f32, g: &Geom) -> f32 {
    // rotate into the glyph frame
    let (sin, cos) = g.rot.sin_cos();
    let rx = px - g.cx;
    let ry = py - g.cy;
    let dx = cos * rx + sin * ry;
    let dy = -sin * rx + cos * ry;
    let r = g.reach;
    let t = g.stroke;
    let in_box = dx.abs() <= r && dy.abs() <= r;
    let radius = (dx * dx + dy * dy).sqrt();
    let hit = |cond: bool| -> f32 {
        if cond {
            1.0
        } else {
            0.0
        }
    };
    match class {
        // ring; ambiguous: stroke widened toward a filled disk
        0 => {
            let t = if g.ambiguous { r * 0.45 } else { t };
            hit((radius - r * 0.8).abs() <= t)
        }
        // vertical bar; ambiguous: faint horizontal arm (plus-like)
        1 => {
            let main = hit(dx.abs() <= t && dy.abs() <= r);
            if g.ambiguous && dy.abs() <= t && dx.abs() <= r * 0.7 {
                main.max(g.faint)
            } else {
                main
            }
        }
        // horizontal bar; ambiguous: faint vertical arm
        2 => {
            let main = hit(dy.abs() <= t && dx.abs() <= r);
            if g.ambiguous && dx.abs() <= t && dy.abs() <= r * 0.7 {
                main.max(g.faint)
            } else {
                main
            }
        }
        // main diagonal; ambiguous: faint anti-diagonal (X-like)
        3 => {
            let main = hit(in_box && (dx - dy).abs() <= t * 1.4);
            if g.ambiguous && in_box && (dx + dy).abs() <= t * 1.4 {
                main.max(g.faint)
            } else {
                main
            }
        }
        // anti-diagonal; ambiguous: faint main diagonal
        4 => {
            let main = hit(in_box && (dx + dy).abs() <= t * 1.4);
            if g.ambiguous && in_box && (dx - dy).abs() <= t * 1.4 {
                main.max(g.faint)
            } else {
                main
            }
        }
        // plus; ambiguous: one arm shortened (bar-like)
        5 => {
            let (v_len, h_len) = if g.ambiguous {
                (r, r * 0.35)
            } else {
                (r, r)
            };
            hit((dx.abs() <= t && dy.abs() <= v_len) || (dy.abs() <= t && dx.abs() <= h_len))
        }
        // X; ambiguous: second stroke faint (diagonal-like)
        6 => {
            let a = in_box && (dx - dy).abs() <= t * 1.4;
            let b = in_box && (dx + dy).abs() <= t * 1.4;
            if g.ambiguous {
                hit(a).max(hit(b) * g.faint)
            } else {
                hit(a || b)
            }
        }
        // square outline; ambiguous: corners rounded toward a ring
        7 => {
            let metric = if g.ambiguous {
                0.4 * dx.abs().max(dy.abs()) + 0.6 * radius * 0.85
            } else {
                dx.abs().max(dy.abs())
            };
            hit((metric - r * 0.85).abs() <= t)
        }
        // two horizontal bars; ambiguous: bars close (thick-bar-like)
        8 => {
            let gap = if g.ambiguous { r * 0.22 } else { r * 0.55 };
            hit(dx.abs() <= r && ((dy - gap).abs() <= t || (dy + gap).abs() <= t))
        }
        // filled disk; ambiguous: hollow center (ring-like)
        9 => {
            if g.ambiguous {
                hit(radius <= r * 0.8 && radius >= r * 0.35)
            } else {
                hit(radius <= r * 0.8)
            }
        }
        _ => unreachable!("class checked by caller"),
    }
}
