//! Procedural glyph rasterizers.
//!
//! Four shapes play the role of a digit alphabet: filled disk, cross,
//! triangle outline and ring. Their base dimensions are calibrated so the
//! expected rasterized pixel count is equal across shapes (within about one
//! percent under the jitter and scale distributions of the generator), which
//! keeps per-class pixel frequencies balanced in generated datasets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphKind {
    Disk,
    Cross,
    TriangleOutline,
    Ring,
}

pub const DEFAULT_ALPHABET: [GlyphKind; 4] =
    [GlyphKind::Disk, GlyphKind::Cross, GlyphKind::TriangleOutline, GlyphKind::Ring];

/// No glyph pixel lies further than this from the center at scale 1.
pub const MAX_HALF_EXTENT: f64 = 11.0;

const DISK_R: f64 = 6.0;
const CROSS_ARM: f64 = 9.36;
const CROSS_THICK: f64 = 1.7;
const TRI_R: f64 = 10.0;
const TRI_STROKE: f64 = 3.12;
const RING_RO: f64 = 9.0;
const RING_RI: f64 = 6.724;

/// Whether the pixel-center offset (dy, dx) from the glyph center belongs to
/// the glyph at scale `s`. Image rows grow downward; shapes that care about
/// orientation flip the vertical axis internally.
fn member(kind: GlyphKind, dy: f64, dx: f64, s: f64) -> bool {
    match kind {
        GlyphKind::Disk => {
            let r = DISK_R * s;
            dy * dy + dx * dx <= r * r
        }
        GlyphKind::Cross => {
            let arm = CROSS_ARM * s;
            let t = CROSS_THICK * s;
            (dx.abs() <= arm && dy.abs() <= t) || (dy.abs() <= arm && dx.abs() <= t)
        }
        GlyphKind::TriangleOutline => {
            // point-up equilateral triangle, outward edge normals at
            // 30, 150 and 270 degrees in (u, v) with v pointing up
            let (u, v) = (dx, -dy);
            let apothem = 0.5 * TRI_R * s;
            let m1 = apothem - (0.866_025_403_784_438_6 * u + 0.5 * v);
            let m2 = apothem - (-0.866_025_403_784_438_6 * u + 0.5 * v);
            let m3 = apothem + v;
            let inner = m1.min(m2).min(m3);
            inner >= 0.0 && inner <= TRI_STROKE * s
        }
        GlyphKind::Ring => {
            let ro = RING_RO * s;
            let ri = RING_RI * s;
            let d2 = dy * dy + dx * dx;
            d2 >= ri * ri && d2 <= ro * ro
        }
    }
}

/// Pixels of the glyph centered at (cy, cx) in an h x w image, in row-major
/// order. The caller guarantees the glyph fits; clamping is defensive.
pub fn rasterize(kind: GlyphKind, cy: f64, cx: f64, scale: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
    let reach = MAX_HALF_EXTENT * scale + 1.0;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(h);
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w);
    let mut out = Vec::new();
    for y in y0..y1 {
        let dy = y as f64 + 0.5 - cy;
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            if member(kind, dy, dx, scale) {
                out.push((y, x));
            }
        }
    }
    out
}
