// SPDX-License-Identifier: Apache-2.0

//! Coordinate frames, planar rigid transforms, oriented boxes and IoU.
//!
//! Vehicles are ground robots: poses carry a position and a heading only.
//! Every transform between sensor frames is a yaw rotation followed by a
//! translation, with z handled as a plain offset.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let wrapped = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs.
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Position (east, north, up) in meters and heading in radians, CCW from +x.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.yaw.is_finite()
    }

    /// Pose shifted by `d` meters along the planar direction `angle`.
    pub fn drifted(&self, d: f64, angle: f64) -> Self {
        Self::new(
            self.x + d * angle.cos(),
            self.y + d * angle.sin(),
            self.z,
            self.yaw,
        )
    }

    /// Maps a point from this pose's local frame into the frame the pose is
    /// expressed in.
    pub fn to_parent(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        Point3::new(
            c * p.x - s * p.y + self.x,
            s * p.x + c * p.y + self.y,
            p.z + self.z,
        )
    }
}

/// Yaw rotation followed by a translation; z is only offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: f64,
    pub translation: Point3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        translation: Point3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: f64, translation: Point3) -> Self {
        Self {
            rotation: normalize_angle(rotation),
            translation,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        apply_transform(self, p)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.rotation.sin_cos();
        let t = self.translation;
        // -R^T t
        Self {
            rotation: normalize_angle(-self.rotation),
            translation: Point3::new(-(c * t.x + s * t.y), -(-s * t.x + c * t.y), -t.z),
        }
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        let t = self.apply(first.translation);
        Self::new(self.rotation + first.rotation, t)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0
            && self.translation.x == 0.0
            && self.translation.y == 0.0
            && self.translation.z == 0.0
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let c = self.apply(Point3::new(b.cx, b.cy, b.cz));
        Box3D {
            cx: c.x,
            cy: c.y,
            cz: c.z,
            yaw: normalize_angle(b.yaw + self.rotation),
            ..*b
        }
    }
}

/// Transform taking coordinates in the sender's sensor frame into the
/// receiver's sensor frame.
pub fn relative_transform(receiver: &Pose, sender: &Pose) -> RigidTransform {
    let (s, c) = receiver.yaw.sin_cos();
    let dx = sender.x - receiver.x;
    let dy = sender.y - receiver.y;
    RigidTransform::new(
        sender.yaw - receiver.yaw,
        Point3::new(c * dx + s * dy, -s * dx + c * dy, sender.z - receiver.z),
    )
}

pub fn apply_transform(t: &RigidTransform, p: Point3) -> Point3 {
    if t.rotation == 0.0 {
        return Point3::new(
            p.x + t.translation.x,
            p.y + t.translation.y,
            p.z + t.translation.z,
        );
    }
    let (s, c) = t.rotation.sin_cos();
    Point3::new(
        c * p.x - s * p.y + t.translation.x,
        s * p.x + c * p.y + t.translation.y,
        p.z + t.translation.z,
    )
}

/// Oriented box: center, extent (length along heading, width, height) and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub const fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0
            && self.w > 0.0
            && self.h > 0.0
            && [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.cx, self.cy, self.cz)
    }

    /// Planar distance of the center from the frame origin.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            cz: self.cz + dz,
            ..*self
        }
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.l / 2.0;
        let hw = self.w / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    /// True when `p` lies inside the box (boundary inclusive).
    pub fn contains(&self, p: Point3) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0 && (p.z - self.cz).abs() <= self.h / 2.0
    }

    fn z_interval(&self) -> (f64, f64) {
        (self.cz - self.h / 2.0, self.cz + self.h / 2.0)
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Rotated IoU of the BEV footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two yaw-only boxes: BEV overlap area times the
/// overlap of the vertical intervals.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_interval();
    let (b0, b1) = b.z_interval();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
