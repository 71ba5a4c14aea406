// SPDX-License-Identifier: Apache-2.0

//! Maxout fusion of voxel feature stores and of bird's-eye-view feature
//! maps.

use std::fmt;
use std::str::FromStr;

use crate::encoder::SpatialFeatureMap;
use crate::error::{Error, Result};
use crate::geom::{normalize_angle, relative_transform, Point3, Pose, RigidTransform};
use crate::voxel::{VoxelFeatureStore, VoxelGridSpec, VoxelKey, FEATURE_DIM};

/// Default distance, in meters, under which a center counts as lying on a
/// voxel boundary plane.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Heading difference below which two maps are fused without resampling.
pub const ALIGNED_YAW: f64 = std::f64::consts::PI / 180.0;

/// `out[i] = max(a[i], b[i])`.
pub fn maxout_fuse(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.max(*y)).collect())
}

/// In-place variant: `dst[i] = max(dst[i], src[i])`.
pub fn maxout_into(dst: &mut [f32], src: &[f32]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::LengthMismatch {
            left: dst.len(),
            right: src.len(),
        });
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d = d.max(*s);
    }
    Ok(())
}

/// Set of transmitted channels, bit `c` for channel `c`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMask(pub u128);

impl ChannelMask {
    pub const FULL: Self = Self(u128::MAX);
    pub const KEY: Self = Self::range_const(55, 99);
    pub const MIN: Self = Self::range_const(95, 99);
    pub const EMPTY: Self = Self(0);

    const fn range_const(lo: u32, hi: u32) -> Self {
        let width = hi - lo + 1;
        let bits = if width >= 128 {
            u128::MAX
        } else {
            ((1u128 << width) - 1) << lo
        };
        Self(bits)
    }

    /// Inclusive channel range.
    pub fn range(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi || hi as usize >= FEATURE_DIM {
            return Err(Error::InvalidMask(format!("{lo}-{hi}")));
        }
        Ok(Self::range_const(lo, hi))
    }

    pub fn count(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn contains(&self, c: usize) -> bool {
        c < FEATURE_DIM && self.0 >> c & 1 == 1
    }

    pub fn channels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..FEATURE_DIM).filter(|&c| self.contains(c))
    }

    /// Share of the full channel set carried by this mask.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / FEATURE_DIM as f64
    }

    pub fn to_le_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 16]) -> Self {
        Self(u128::from_le_bytes(b))
    }
}

impl fmt::Debug for ChannelMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelMask({self})")
    }
}

impl fmt::Display for ChannelMask {
    /// Comma-separated inclusive runs, e.g. `55-99`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut runs = Vec::new();
        let mut c = 0;
        while c < FEATURE_DIM {
            if self.contains(c) {
                let start = c;
                while c + 1 < FEATURE_DIM && self.contains(c + 1) {
                    c += 1;
                }
                runs.push(if start == c {
                    format!("{start}")
                } else {
                    format!("{start}-{c}")
                });
            }
            c += 1;
        }
        if runs.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", runs.join(","))
        }
    }
}

impl FromStr for ChannelMask {
    type Err = Error;

    /// Accepts `full`, `key`, `min`, or comma-separated `a-b` / `a` items.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => return Ok(Self::FULL),
            "key" => return Ok(Self::KEY),
            "min" => return Ok(Self::MIN),
            _ => {}
        }
        let mut bits = 0u128;
        for part in s.split(',') {
            let part = part.trim();
            let parse = |t: &str| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidMask(s.to_string()))
            };
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (parse(a)?, parse(b)?),
                None => {
                    let v = parse(part)?;
                    (v, v)
                }
            };
            bits |= Self::range(lo, hi)?.0;
        }
        if bits == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Self(bits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    Interior,
    Face,
    Edge,
    Corner,
}

impl AlignmentKind {
    pub fn key_count(self) -> usize {
        match self {
            Self::Interior => 1,
            Self::Face => 2,
            Self::Edge => 4,
            Self::Corner => 8,
        }
    }
}

/// Receiver voxels touched by a transformed sender voxel center.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCase {
    pub kind: AlignmentKind,
    pub keys: Vec<VoxelKey>,
}

/// Classifies where a sender voxel center falls relative to the receiver
/// grid: inside a cell, on a face, on an edge, or on a corner.
///
/// An axis counts as on-boundary when the center is within `eps` meters of
/// an interior grid plane; such an axis contributes the two cells sharing
/// that plane. Planes on the outer range boundary have one in-range
/// neighbor and count as interior. Returns `None` for centers outside the
/// range.
pub fn classify_alignment(center: Point3, spec: &VoxelGridSpec, eps: f64) -> Option<AlignmentCase> {
    if !center.is_finite() || !spec.contains(center) {
        return None;
    }
    let c = [center.x, center.y, center.z];
    let mut cells: [[u32; 2]; 3] = [[0; 2]; 3];
    let mut counts = [1usize; 3];
    let mut boundary_axes = 0;
    for a in 0..3 {
        let n = spec.dims[a];
        let u = (c[a] - spec.min[a]) / spec.voxel[a];
        let plane = u.round();
        let on_plane = (u - plane).abs() * spec.voxel[a] <= eps;
        if on_plane && plane >= 1.0 && plane <= (n - 1) as f64 {
            let p = plane as u32;
            cells[a] = [p - 1, p];
            counts[a] = 2;
            boundary_axes += 1;
        } else {
            cells[a][0] = (u.floor().max(0.0) as u32).min(n - 1);
        }
    }
    let kind = match boundary_axes {
        0 => AlignmentKind::Interior,
        1 => AlignmentKind::Face,
        2 => AlignmentKind::Edge,
        _ => AlignmentKind::Corner,
    };
    let mut keys = Vec::with_capacity(kind.key_count());
    for &iz in &cells[2][..counts[2]] {
        for &iy in &cells[1][..counts[1]] {
            for &ix in &cells[0][..counts[0]] {
                keys.push(VoxelKey::new(ix, iy, iz));
            }
        }
    }
    Some(AlignmentCase { kind, keys })
}

/// Voxel feature fusion.
///
/// Every sender voxel center is mapped through `t` into the receiver frame,
/// dropped if it leaves the receiver range, and maxout-fused into each
/// receiver voxel it touches. Touched voxels the receiver did not have are
/// created with the sender feature. Sender entries are visited in key
/// order.
pub fn vff(
    receiver: &VoxelFeatureStore,
    sender: &VoxelFeatureStore,
    t: &RigidTransform,
    eps: f64,
) -> Result<VoxelFeatureStore> {
    if !receiver.spec().same_voxel_size(sender.spec()) {
        return Err(Error::VoxelSizeMismatch);
    }
    let mut out = receiver.clone();
    let rx_spec = *receiver.spec();
    for (key, feature) in sender.iter() {
        let center = t.apply(sender.spec().voxel_center(*key));
        let Some(case) = classify_alignment(center, &rx_spec, eps) else {
            continue;
        };
        for k in case.keys {
            match out.get_mut(&k) {
                Some(existing) => maxout_into(existing, feature)?,
                None => out.insert(k, feature.to_vec())?,
            }
        }
    }
    Ok(out)
}

/// Keeps the planes whose logical channel is in `mask`, in order.
pub fn select_channels(map: &SpatialFeatureMap, mask: ChannelMask) -> Result<SpatialFeatureMap> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = map.plane_len();
    let keep: Vec<usize> = (0..map.channels())
        .filter(|&i| mask.contains(map.channel_ids[i] as usize))
        .collect();
    let mut data = Vec::with_capacity(keep.len() * n);
    for &i in &keep {
        data.extend_from_slice(map.plane(i));
    }
    Ok(SpatialFeatureMap {
        height: map.height,
        width: map.width,
        data,
        origin: map.origin,
        cell_size: map.cell_size,
        channel_ids: keep.iter().map(|&i| map.channel_ids[i]).collect(),
    })
}

/// Re-expands a channel subset into the full 128 slots; missing channels
/// are zero.
pub fn expand_channels(map: &SpatialFeatureMap) -> SpatialFeatureMap {
    let mut full = SpatialFeatureMap::zeros(FEATURE_DIM, map.height, map.width, map.origin, map.cell_size);
    for (i, &c) in map.channel_ids.iter().enumerate() {
        full.plane_mut(c as usize).copy_from_slice(map.plane(i));
    }
    full
}

/// Channel mask covering the planes present in `map`.
pub fn mask_of(map: &SpatialFeatureMap) -> ChannelMask {
    ChannelMask(map.channel_ids.iter().fold(0u128, |m, &c| m | 1u128 << c))
}

/// Placement of both maps on the fused canvas, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SffLayout {
    pub canvas_height: usize,
    pub canvas_width: usize,
    /// Canvas `(row, col)` of the receiver map's cell `(0, 0)`.
    pub receiver_offset: (usize, usize),
    /// Canvas `(row, col)` of the (possibly resampled) sender map's cell `(0, 0)`.
    pub sender_offset: (usize, usize),
    pub sender_height: usize,
    pub sender_width: usize,
    /// Overlap extent `(rows, cols)`, zero when the footprints are disjoint.
    pub overlap: (usize, usize),
    pub resampled: bool,
}

struct Placement {
    /// Sender map in receiver-aligned axes.
    map: SpatialFeatureMap,
    row: i64,
    col: i64,
    resampled: bool,
}

/// Expresses the sender map in the receiver map's axes.
fn place_sender(
    receiver: &SpatialFeatureMap,
    sender: &SpatialFeatureMap,
    receiver_pose: &Pose,
    sender_pose: &Pose,
) -> Result<Placement> {
    if (receiver.cell_size - sender.cell_size).abs() > 1e-9 {
        return Err(Error::CellSizeMismatch(receiver.cell_size, sender.cell_size));
    }
    let s = receiver.cell_size;
    let t = relative_transform(receiver_pose, sender_pose);
    let so = t.apply(Point3::new(sender.origin.x, sender.origin.y, 0.0));
    let ro = receiver.origin;
    let (sin, cos) = ro.yaw.sin_cos();
    let (dx, dy) = (so.x - ro.x, so.y - ro.y);
    let delta = (cos * dx + sin * dy, -sin * dx + cos * dy);
    let dyaw = normalize_angle(sender.origin.yaw + t.rotation - ro.yaw);

    if dyaw.abs() <= ALIGNED_YAW {
        return Ok(Placement {
            map: sender.clone(),
            row: (delta.1 / s).round() as i64,
            col: (delta.0 / s).round() as i64,
            resampled: false,
        });
    }

    // Nearest-neighbor resampling onto receiver-aligned cells.
    let (rs, rc) = dyaw.sin_cos();
    let to_rx = |x: f64, y: f64| (delta.0 + rc * x - rs * y, delta.1 + rs * x + rc * y);
    let (w, h) = (sender.width as f64 * s, sender.height as f64 * s);
    let corners = [to_rx(0.0, 0.0), to_rx(w, 0.0), to_rx(w, h), to_rx(0.0, h)];
    let x0 = corners.iter().map(|c| c.0).fold(f64::MAX, f64::min);
    let x1 = corners.iter().map(|c| c.0).fold(f64::MIN, f64::max);
    let y0 = corners.iter().map(|c| c.1).fold(f64::MAX, f64::min);
    let y1 = corners.iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let (c0, c1) = ((x0 / s).floor() as i64, (x1 / s).ceil() as i64);
    let (r0, r1) = ((y0 / s).floor() as i64, (y1 / s).ceil() as i64);
    let (nh, nw) = ((r1 - r0) as usize, (c1 - c0) as usize);

    let mut out = SpatialFeatureMap {
        height: nh,
        width: nw,
        data: vec![0.0; sender.channels() * nh * nw],
        origin: sender.origin,
        cell_size: s,
        channel_ids: sender.channel_ids.clone(),
    };
    let src_plane = sender.plane_len();
    let dst_plane = nh * nw;
    for row in 0..nh {
        for col in 0..nw {
            let px = (c0 + col as i64) as f64 * s + 0.5 * s - delta.0;
            let py = (r0 + row as i64) as f64 * s + 0.5 * s - delta.1;
            let qx = rc * px + rs * py;
            let qy = -rs * px + rc * py;
            let (sc, sr) = ((qx / s).floor(), (qy / s).floor());
            if sc < 0.0 || sr < 0.0 || sc >= sender.width as f64 || sr >= sender.height as f64 {
                continue;
            }
            let src = sr as usize * sender.width + sc as usize;
            let dst = row * nw + col;
            for c in 0..sender.channels() {
                out.data[c * dst_plane + dst] = sender.data[c * src_plane + src];
            }
        }
    }
    Ok(Placement {
        map: out,
        row: r0,
        col: c0,
        resampled: true,
    })
}

fn layout_of(receiver: &SpatialFeatureMap, p: &Placement) -> SffLayout {
    let (rh, rw) = (receiver.height as i64, receiver.width as i64);
    let (sh, sw) = (p.map.height as i64, p.map.width as i64);
    let row_min = p.row.min(0);
    let col_min = p.col.min(0);
    let row_max = (p.row + sh).max(rh);
    let col_max = (p.col + sw).max(rw);
    let overlap_rows = (rh.min(p.row + sh) - p.row.max(0)).max(0) as usize;
    let overlap_cols = (rw.min(p.col + sw) - p.col.max(0)).max(0) as usize;
    let (overlap_rows, overlap_cols) = if overlap_rows == 0 || overlap_cols == 0 {
        (0, 0)
    } else {
        (overlap_rows, overlap_cols)
    };
    SffLayout {
        canvas_height: (row_max - row_min) as usize,
        canvas_width: (col_max - col_min) as usize,
        receiver_offset: ((-row_min) as usize, (-col_min) as usize),
        sender_offset: ((p.row - row_min) as usize, (p.col - col_min) as usize),
        sender_height: p.map.height,
        sender_width: p.map.width,
        overlap: (overlap_rows, overlap_cols),
        resampled: p.resampled,
    }
}

/// Canvas geometry [`sff`] would use, without fusing anything.
pub fn sff_layout(
    receiver: &SpatialFeatureMap,
    sender: &SpatialFeatureMap,
    receiver_pose: &Pose,
    sender_pose: &Pose,
) -> Result<SffLayout> {
    let p = place_sender(receiver, sender, receiver_pose, sender_pose)?;
    Ok(layout_of(receiver, &p))
}

/// Spatial feature fusion onto an enlarged canvas.
///
/// Map origins are expressed in their owners' sensor frames and the poses
/// place those sensors in a shared world frame. The canvas is the
/// axis-aligned bounding rectangle of both footprints in the receiver's map
/// axes; its origin is reported in the receiver's sensor frame. Receiver
/// cells are copied as-is. Sender planes whose channel is in `mask` are
/// maxout-fused where the footprints overlap and copied elsewhere; other
/// sender planes are ignored. The output always carries 128 channels.
pub fn sff(
    receiver: &SpatialFeatureMap,
    sender: &SpatialFeatureMap,
    receiver_pose: &Pose,
    sender_pose: &Pose,
    mask: ChannelMask,
) -> Result<SpatialFeatureMap> {
    let receiver = if receiver.channels() == FEATURE_DIM
        && receiver.channel_ids.iter().enumerate().all(|(i, &c)| i == c as usize)
    {
        std::borrow::Cow::Borrowed(receiver)
    } else {
        std::borrow::Cow::Owned(expand_channels(receiver))
    };
    let placement = place_sender(&receiver, sender, receiver_pose, sender_pose)?;
    let layout = layout_of(&receiver, &placement);
    let s = receiver.cell_size;
    let (ch, cw) = (layout.canvas_height, layout.canvas_width);
    let (rr, rc) = layout.receiver_offset;
    let (sr, sc) = layout.sender_offset;

    let origin_local = Point3::new(
        (rc as f64) * -s,
        (rr as f64) * -s,
        0.0,
    );
    let o = receiver.origin.to_parent(origin_local);
    let origin = Pose::new(o.x, o.y, receiver.origin.z, receiver.origin.yaw);
    let mut canvas = SpatialFeatureMap::zeros(FEATURE_DIM, ch, cw, origin, s);

    let canvas_plane = ch * cw;
    for c in 0..FEATURE_DIM {
        let src = receiver.plane(c);
        let dst = &mut canvas.data[c * canvas_plane..(c + 1) * canvas_plane];
        for row in 0..receiver.height {
            let d0 = (rr + row) * cw + rc;
            dst[d0..d0 + receiver.width].copy_from_slice(&src[row * receiver.width..(row + 1) * receiver.width]);
        }
    }

    let sender_map = &placement.map;
    let (rh, rw) = (receiver.height, receiver.width);
    for (i, &cid) in sender_map.channel_ids.iter().enumerate() {
        let c = cid as usize;
        if !mask.contains(c) {
            continue;
        }
        let src = sender_map.plane(i);
        let dst = &mut canvas.data[c * canvas_plane..(c + 1) * canvas_plane];
        for row in 0..sender_map.height {
            let crow = sr + row;
            let in_rx_rows = crow >= rr && crow < rr + rh;
            for col in 0..sender_map.width {
                let ccol = sc + col;
                let v = src[row * sender_map.width + col];
                let slot = &mut dst[crow * cw + ccol];
                if in_rx_rows && ccol >= rc && ccol < rc + rw {
                    *slot = slot.max(v);
                } else {
                    *slot = v;
                }
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxout_examples() {
        let a = [1.0, -2.0, 3.0];
        let b = [0.0, 5.0, 3.0];
        assert_eq!(maxout_fuse(&a, &b).unwrap(), vec![1.0, 5.0, 3.0]);
        assert_eq!(maxout_fuse(&a, &a).unwrap(), a.to_vec());
        assert!(matches!(maxout_fuse(&a, &b[..2]), Err(Error::LengthMismatch { .. })));
        let neutral = [f32::NEG_INFINITY; 3];
        assert_eq!(maxout_fuse(&a, &neutral).unwrap(), a.to_vec());
    }

    #[test]
    fn mask_presets() {
        assert_eq!(ChannelMask::FULL.count(), 128);
        assert_eq!(ChannelMask::KEY.count(), 45);
        assert_eq!(ChannelMask::MIN.count(), 5);
        assert!(ChannelMask::KEY.contains(55) && ChannelMask::KEY.contains(99));
        assert!(!ChannelMask::KEY.contains(54) && !ChannelMask::KEY.contains(100));
        assert!((ChannelMask::KEY.fraction() - 45.0 / 128.0).abs() < 1e-15);
        assert_eq!("55-99".parse::<ChannelMask>().unwrap(), ChannelMask::KEY);
        assert_eq!("0-127".parse::<ChannelMask>().unwrap(), ChannelMask::FULL);
        assert_eq!("min".parse::<ChannelMask>().unwrap(), ChannelMask::MIN);
        assert_eq!("1,3-4".parse::<ChannelMask>().unwrap(), ChannelMask(0b11010));
        assert!("99-55".parse::<ChannelMask>().is_err());
        assert!("0-128".parse::<ChannelMask>().is_err());
        assert!("x".parse::<ChannelMask>().is_err());
        assert_eq!(ChannelMask::KEY.to_string(), "55-99");
        assert_eq!(ChannelMask(0b11010).to_string(), "1,3-4");
    }

    fn tiny_grid() -> VoxelGridSpec {
        VoxelGridSpec::new((0.0, 4.0), (-2.0, 2.0), (-1.0, 1.0), [0.2, 0.2, 0.4]).unwrap()
    }

    #[test]
    fn alignment_cases() {
        let g = tiny_grid();
        let mid = g.voxel_center(VoxelKey::new(5, 5, 2));
        let a = classify_alignment(mid, &g, DEFAULT_EPS).unwrap();
        assert_eq!(a.kind, AlignmentKind::Interior);
        assert_eq!(a.keys, vec![VoxelKey::new(5, 5, 2)]);

        let face = Point3::new(1.0, mid.y, mid.z);
        let b = classify_alignment(face, &g, DEFAULT_EPS).unwrap();
        assert_eq!(b.kind, AlignmentKind::Face);
        assert_eq!(b.keys, vec![VoxelKey::new(4, 5, 2), VoxelKey::new(5, 5, 2)]);

        let edge = Point3::new(1.0, -1.0, mid.z);
        let c = classify_alignment(edge, &g, DEFAULT_EPS).unwrap();
        assert_eq!(c.kind, AlignmentKind::Edge);
        assert_eq!(c.keys.len(), 4);

        let corner = Point3::new(1.0, -1.0, 0.2);
        let d = classify_alignment(corner, &g, DEFAULT_EPS).unwrap();
        assert_eq!(d.kind, AlignmentKind::Corner);
        assert_eq!(d.keys.len(), 8);
        let mut keys = d.keys.clone();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 8);

        assert!(classify_alignment(Point3::new(-0.1, 0.0, 0.0), &g, DEFAULT_EPS).is_none());
        // Outer range planes only have one in-range neighbor.
        let rim = classify_alignment(Point3::new(0.0, mid.y, mid.z), &g, DEFAULT_EPS).unwrap();
        assert_eq!(rim.kind, AlignmentKind::Interior);
    }

    fn random_store(g: &VoxelGridSpec, n: usize, rng: &mut ChaCha8Rng) -> VoxelFeatureStore {
        let mut s = VoxelFeatureStore::new(*g);
        for _ in 0..n {
            let k = VoxelKey::new(
                rng.gen_range(0..g.dims[0]),
                rng.gen_range(0..g.dims[1]),
                rng.gen_range(0..g.dims[2]),
            );
            let f = (0..FEATURE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
            s.insert(k, f).unwrap();
        }
        s
    }

    #[test]
    fn vff_basic_contracts() {
        let g = tiny_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rx = random_store(&g, 40, &mut rng);
        let empty = VoxelFeatureStore::new(g);
        assert_eq!(vff(&rx, &empty, &RigidTransform::IDENTITY, DEFAULT_EPS).unwrap(), rx);
        assert_eq!(vff(&rx, &rx, &RigidTransform::IDENTITY, DEFAULT_EPS).unwrap(), rx);
        let other = VoxelFeatureStore::new(
            VoxelGridSpec::new((0.0, 4.0), (-2.0, 2.0), (-1.0, 1.0), [0.4, 0.4, 0.4]).unwrap(),
        );
        assert!(matches!(
            vff(&rx, &other, &RigidTransform::IDENTITY, DEFAULT_EPS),
            Err(Error::VoxelSizeMismatch)
        ));
    }

    #[test]
    fn vff_translation_by_whole_cells_and_face_split() {
        let g = tiny_grid();
        let mut tx = VoxelFeatureStore::new(g);
        tx.insert(VoxelKey::new(2, 3, 1), vec![2.0; FEATURE_DIM]).unwrap();
        let rx = VoxelFeatureStore::new(g);
        // Two whole cells forward.
        let t = RigidTransform::new(0.0, Point3::new(0.4, 0.0, 0.0));
        let out = vff(&rx, &tx, &t, DEFAULT_EPS).unwrap();
        assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![VoxelKey::new(4, 3, 1)]);
        // Half a cell: the center lands on a face, touching two voxels.
        let t = RigidTransform::new(0.0, Point3::new(0.1, 0.0, 0.0));
        let out = vff(&rx, &tx, &t, DEFAULT_EPS).unwrap();
        assert_eq!(
            out.keys().copied().collect::<Vec<_>>(),
            vec![VoxelKey::new(2, 3, 1), VoxelKey::new(3, 3, 1)]
        );
        // Far away: dropped.
        let t = RigidTransform::new(0.0, Point3::new(40.0, 0.0, 0.0));
        assert!(vff(&rx, &tx, &t, DEFAULT_EPS).unwrap().is_empty());
    }

    #[test]
    fn vff_never_decreases_receiver() {
        let g = tiny_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rx = random_store(&g, 200, &mut rng);
        let tx = random_store(&g, 200, &mut rng);
        let t = RigidTransform::new(0.3, Point3::new(0.37, -0.21, 0.1));
        let out = vff(&rx, &tx, &t, DEFAULT_EPS).unwrap();
        for (k, f) in rx.iter() {
            let o = out.get(k).unwrap();
            assert!(f.iter().zip(o).all(|(a, b)| b >= a));
        }
    }

    fn random_map(c: usize, h: usize, w: usize, origin: Pose, rng: &mut ChaCha8Rng) -> SpatialFeatureMap {
        let mut m = SpatialFeatureMap::zeros(c, h, w, origin, 0.2);
        for v in m.data.iter_mut() {
            if rng.gen_bool(0.3) {
                *v = rng.gen_range(0.0..2.0);
            }
        }
        m
    }

    #[test]
    fn select_and_expand() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(128, 4, 5, Pose::default(), &mut rng);
        assert_eq!(select_channels(&m, ChannelMask::FULL).unwrap(), m);
        let key = select_channels(&m, ChannelMask::KEY).unwrap();
        assert_eq!(key.channels(), 45);
        assert_eq!(key.channel_ids[0], 55);
        assert_eq!(key.plane(0), m.plane(55));
        assert_eq!(select_channels(&m, ChannelMask::MIN).unwrap().channels(), 5);
        assert!(matches!(select_channels(&m, ChannelMask::EMPTY), Err(Error::EmptyMask)));
        let full = expand_channels(&key);
        assert_eq!(full.channels(), 128);
        assert!(full.plane(0).iter().all(|&v| v == 0.0));
        assert_eq!(full.plane(60), m.plane(60));
        assert_eq!(select_channels(&full, ChannelMask::KEY).unwrap(), key);
        assert_eq!(mask_of(&key), ChannelMask::KEY);
    }

    #[test]
    fn sff_coincident_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(128, 6, 7, Pose::new(0.0, -0.6, 0.0, 0.0), &mut rng);
        let p = Pose::new(3.0, 4.0, 0.0, 0.5);
        let out = sff(&m, &m, &p, &p, ChannelMask::FULL).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn sff_overlap_for_leading_sender() {
        let m = SpatialFeatureMap::zeros(1, 400, 352, Pose::new(0.0, -40.0, 0.0, 0.0), 0.2);
        let rx = Pose::new(0.0, 0.0, 0.0, 0.0);
        let tx = Pose::new(20.0, 0.0, 0.0, 0.0);
        let l = sff_layout(&m, &m, &rx, &tx).unwrap();
        assert_eq!(l.overlap, (400, 252));
        assert_eq!(l.canvas_width, 452);
        assert_eq!(l.canvas_height, 400);
        assert_eq!(l.sender_offset, (0, 100));
        assert!(!l.resampled);
    }

    #[test]
    fn sff_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let origin = Pose::new(0.0, -1.0, 0.0, 0.0);
        let (h, w) = (10, 12);
        for _ in 0..20 {
            let a = random_map(128, h, w, origin, &mut rng);
            let b = random_map(128, h, w, origin, &mut rng);
            let (dr, dc) = (rng.gen_range(-6i64..6), rng.gen_range(-7i64..7));
            let rxp = Pose::new(10.0, 5.0, 0.0, 0.0);
            let txp = Pose::new(10.0 + dc as f64 * 0.2, 5.0 + dr as f64 * 0.2, 0.0, 0.0);
            let out = sff(&a, &b, &rxp, &txp, ChannelMask::FULL).unwrap();
            let l = sff_layout(&a, &b, &rxp, &txp).unwrap();
            let (ar, ac) = (l.receiver_offset.0 as i64, l.receiver_offset.1 as i64);
            for c in [0usize, 17, 127] {
                for row in 0..out.height as i64 {
                    for col in 0..out.width as i64 {
                        let va = (row - ar, col - ac);
                        let vb = (row - ar - dr, col - ac - dc);
                        let inside = |p: (i64, i64)| p.0 >= 0 && p.1 >= 0 && p.0 < h as i64 && p.1 < w as i64;
                        let expect = match (inside(va), inside(vb)) {
                            (true, true) => a.get(c, va.0 as usize, va.1 as usize).max(b.get(c, vb.0 as usize, vb.1 as usize)),
                            (true, false) => a.get(c, va.0 as usize, va.1 as usize),
                            (false, true) => b.get(c, vb.0 as usize, vb.1 as usize),
                            (false, false) => 0.0,
                        };
                        assert_eq!(out.get(c, row as usize, col as usize), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn sff_mask_keeps_receiver_on_unmasked_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let origin = Pose::default();
        let a = random_map(128, 5, 5, origin, &mut rng);
        let b = random_map(128, 5, 5, origin, &mut rng);
        let p = Pose::default();
        let out = sff(&a, &b, &p, &p, ChannelMask::MIN).unwrap();
        for c in 0..128 {
            for i in 0..25 {
                let expect = if ChannelMask::MIN.contains(c) {
                    a.plane(c)[i].max(b.plane(c)[i])
                } else {
                    a.plane(c)[i]
                };
                assert_eq!(out.plane(c)[i], expect);
            }
        }
        // A sender already reduced to the mask gives the same answer.
        let sub = select_channels(&b, ChannelMask::MIN).unwrap();
        assert_eq!(sff(&a, &sub, &p, &p, ChannelMask::MIN).unwrap(), out);
    }

    #[test]
    fn sff_rejects_cell_mismatch() {
        let a = SpatialFeatureMap::zeros(128, 2, 2, Pose::default(), 0.2);
        let b = SpatialFeatureMap::zeros(128, 2, 2, Pose::default(), 0.4);
        assert!(matches!(
            sff(&a, &b, &Pose::default(), &Pose::default(), ChannelMask::FULL),
            Err(Error::CellSizeMismatch(..))
        ));
    }

    #[test]
    fn sff_disjoint_is_mosaic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_map(128, 3, 3, Pose::default(), &mut rng);
        let b = random_map(128, 3, 3, Pose::default(), &mut rng);
        let out = sff(&a, &b, &Pose::default(), &Pose::new(2.0, 0.0, 0.0, 0.0), ChannelMask::FULL).unwrap();
        assert_eq!((out.height, out.width), (3, 13));
        assert_eq!(out.get(5, 1, 11), b.get(5, 1, 1));
        assert_eq!(out.get(5, 1, 5), 0.0);
        assert_eq!(out.get(5, 2, 2), a.get(5, 2, 2));
    }

    #[test]
    fn sff_rotated_sender_is_resampled() {
        let mut m = SpatialFeatureMap::zeros(1, 10, 10, Pose::default(), 0.2);
        // Single hot cell at local (row 1, col 5) -> point (1.1, 0.3).
        m.data[15] = 1.0;
        let rx = Pose::default();
        let tx = Pose::new(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let out = sff(&m, &m, &rx, &tx, ChannelMask::FULL).unwrap();
        let l = sff_layout(&m, &m, &rx, &tx).unwrap();
        assert!(l.resampled);
        // Rotating (1.1, 0.3) by +90 degrees gives (-0.3, 1.1).
        let (r0, c0) = l.receiver_offset;
        let row = (r0 as f64 + 1.1 / 0.2).floor() as usize;
        let col = (c0 as f64 - 0.3 / 0.2).floor() as usize;
        assert_eq!(out.get(0, row, col), 1.0);
        assert_eq!(out.data.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    proptest! {
        #[test]
        fn maxout_algebra(a in prop::collection::vec(-5.0f32..5.0, 16), b in prop::collection::vec(-5.0f32..5.0, 16), c in prop::collection::vec(-5.0f32..5.0, 16)) {
            let ab = maxout_fuse(&a, &b).unwrap();
            prop_assert_eq!(&ab, &maxout_fuse(&b, &a).unwrap());
            let abc = maxout_fuse(&ab, &c).unwrap();
            prop_assert_eq!(abc, maxout_fuse(&a, &maxout_fuse(&b, &c).unwrap()).unwrap());
            prop_assert_eq!(maxout_fuse(&a, &a).unwrap(), a.clone());
            prop_assert!(ab.iter().zip(&a).all(|(o, x)| o >= x));
        }

        #[test]
        fn sff_argument_order_symmetric(dr in -5i64..5, dc in -5i64..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(128, 6, 6, Pose::default(), &mut rng);
            let b = random_map(128, 6, 6, Pose::default(), &mut rng);
            let pa = Pose::default();
            let pb = Pose::new(dc as f64 * 0.2, dr as f64 * 0.2, 0.0, 0.0);
            let ab = sff(&a, &b, &pa, &pb, ChannelMask::FULL).unwrap();
            let ba = sff(&b, &a, &pb, &pa, ChannelMask::FULL).unwrap();
            prop_assert_eq!((ab.height, ab.width), (ba.height, ba.width));
            prop_assert_eq!(&ab.data, &ba.data);
        }
    }
}
