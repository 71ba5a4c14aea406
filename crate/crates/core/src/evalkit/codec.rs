// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};
use crate::geom::Box3D;

/// Regression target `(dx, dy, dz, dl, dw, dh, dyaw)` of a box against an
/// anchor.
pub type Delta = [f64; 7];

fn positive(b: &Box3D) -> bool {
    b.l > 0.0 && b.w > 0.0 && b.h > 0.0
}

/// Offsets are normalized by the anchor's BEV diagonal (x, y) and height
/// (z); sizes are log ratios; yaw is a plain difference.
pub fn delta_encode(anchor: &Box3D, truth: &Box3D) -> Result<Delta> {
    if !positive(anchor) || !positive(truth) {
        return Err(Error::NonPositiveExtent);
    }
    let d = anchor.l.hypot(anchor.w);
    Ok([
        (truth.cx - anchor.cx) / d,
        (truth.cy - anchor.cy) / d,
        (truth.cz - anchor.cz) / anchor.h,
        (truth.l / anchor.l).ln(),
        (truth.w / anchor.w).ln(),
        (truth.h / anchor.h).ln(),
        truth.yaw - anchor.yaw,
    ])
}

pub fn delta_decode(anchor: &Box3D, delta: &Delta) -> Box3D {
    let d = anchor.l.hypot(anchor.w);
    Box3D {
        cx: anchor.cx + delta[0] * d,
        cy: anchor.cy + delta[1] * d,
        cz: anchor.cz + delta[2] * anchor.h,
        l: anchor.l * delta[3].exp(),
        w: anchor.w * delta[4].exp(),
        h: anchor.h * delta[5].exp(),
        yaw: anchor.yaw + delta[6],
    }
}
