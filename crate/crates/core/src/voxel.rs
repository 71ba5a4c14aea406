// SPDX-License-Identifier: Apache-2.0

//! Voxel grid, point bucketing, per-voxel sampling and the sparse voxel
//! feature store.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Point3;

/// Length of every voxel feature vector.
pub const FEATURE_DIM: usize = 128;

/// Per-voxel point cap applied before encoding.
pub const SAMPLE_CAP: usize = 35;

/// One LiDAR return in a sensor frame, stored the way KITTI stores it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectance: f32,
}

impl LidarPoint {
    pub fn new(x: f32, y: f32, z: f32, reflectance: f32) -> Self {
        Self {
            x,
            y,
            z,
            reflectance,
        }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses a headerless little-endian `f32` quadruple stream.
    pub fn from_kitti_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 16 != 0 {
            return Err(Error::Malformed(format!(
                "point file length {} is not a multiple of 16",
                bytes.len()
            )));
        }
        let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        let points = bytes
            .chunks_exact(16)
            .map(|c| LidarPoint::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
            .collect();
        Ok(Self { points })
    }

    pub fn to_kitti_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.reflectance] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn read_kitti(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_kitti_bytes(&buf)
    }

    pub fn write_kitti(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_kitti_bytes())?;
        Ok(())
    }
}

/// Axis-aligned detection range partitioned into equal voxels.
///
/// Axis order is x (forward), y (lateral), z (up); `dims` holds the cell
/// counts `[W, H, D]` along those axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: [f64; 3],
    pub dims: [u32; 3],
}

impl VoxelGridSpec {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64), voxel: [f64; 3]) -> Result<Self> {
        let min = [x.0, y.0, z.0];
        let max = [x.1, y.1, z.1];
        let mut dims = [0u32; 3];
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite() && voxel[a].is_finite()) {
                return Err(Error::InvalidGrid("non-finite bound".into()));
            }
            if max[a] <= min[a] {
                return Err(Error::InvalidGrid(format!("axis {a}: max <= min")));
            }
            if voxel[a] <= 0.0 {
                return Err(Error::InvalidGrid(format!("axis {a}: voxel size <= 0")));
            }
            let n = ((max[a] - min[a]) / voxel[a]).round();
            if n < 1.0 || n > u32::MAX as f64 {
                return Err(Error::InvalidGrid(format!("axis {a}: {n} cells")));
            }
            dims[a] = n as u32;
        }
        Ok(Self {
            min,
            max,
            voxel,
            dims,
        })
    }

    /// KITTI-style car range: 70.4 m x 80 m x 4 m at 0.2 x 0.2 x 0.4 m.
    pub fn reference() -> Self {
        Self::new((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0), [0.2, 0.2, 0.4]).expect("valid constants")
    }

    /// Same range as [`reference`](Self::reference) at 0.8 m lateral resolution,
    /// giving a 10 x 100 x 88 grid.
    pub fn desk() -> Self {
        Self::new((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0), [0.8, 0.8, 0.4]).expect("valid constants")
    }

    pub fn width(&self) -> u32 {
        self.dims[0]
    }

    pub fn height(&self) -> u32 {
        self.dims[1]
    }

    pub fn depth(&self) -> u32 {
        self.dims[2]
    }

    pub fn cell_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn same_voxel_size(&self, other: &Self) -> bool {
        self.voxel
            .iter()
            .zip(other.voxel.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
    }

    pub fn contains(&self, p: Point3) -> bool {
        let c = [p.x, p.y, p.z];
        (0..3).all(|a| c[a] >= self.min[a] && c[a] <= self.max[a])
    }

    /// Voxel containing `p`, or `None` outside the range. Points on an
    /// upper bound land in the last cell.
    pub fn voxel_index(&self, p: Point3) -> Option<VoxelKey> {
        if !p.is_finite() || !self.contains(p) {
            return None;
        }
        let c = [p.x, p.y, p.z];
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let u = ((c[a] - self.min[a]) / self.voxel[a]).floor();
            idx[a] = (u.max(0.0) as u32).min(self.dims[a] - 1);
        }
        Some(VoxelKey::new(idx[0], idx[1], idx[2]))
    }

    pub fn voxel_center(&self, key: VoxelKey) -> Point3 {
        let i = [key.ix, key.iy, key.iz];
        let c: [f64; 3] =
            std::array::from_fn(|a| self.min[a] + (i[a] as f64 + 0.5) * self.voxel[a]);
        Point3::new(c[0], c[1], c[2])
    }

    pub fn key_in_range(&self, key: VoxelKey) -> bool {
        key.ix < self.dims[0] && key.iy < self.dims[1] && key.iz < self.dims[2]
    }

    /// `ix + W * (iy + H * iz)`.
    pub fn linearize(&self, key: VoxelKey) -> u64 {
        let [w, h, _] = self.dims.map(|d| d as u64);
        key.ix as u64 + w * (key.iy as u64 + h * key.iz as u64)
    }

    pub fn delinearize(&self, index: u64) -> Option<VoxelKey> {
        if index >= self.cell_count() {
            return None;
        }
        let [w, h, _] = self.dims.map(|d| d as u64);
        let ix = index % w;
        let iy = (index / w) % h;
        let iz = index / (w * h);
        Some(VoxelKey::new(ix as u32, iy as u32, iz as u32))
    }
}

/// Integer voxel coordinates. Ordered by linear index (`iz`, then `iy`,
/// then `ix`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelKey {
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
}

impl VoxelKey {
    pub const fn new(ix: u32, iy: u32, iz: u32) -> Self {
        Self { ix, iy, iz }
    }
}

impl Ord for VoxelKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.iz, self.iy, self.ix).cmp(&(other.iz, other.iy, other.ix))
    }
}

impl PartialOrd for VoxelKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub type Buckets = BTreeMap<VoxelKey, Vec<LidarPoint>>;

/// Groups in-range points by voxel; out-of-range points are dropped.
pub fn bucket_points(spec: &VoxelGridSpec, cloud: &PointCloud) -> Buckets {
    let mut buckets = Buckets::new();
    for p in &cloud.points {
        if let Some(key) = spec.voxel_index(p.position()) {
            buckets.entry(key).or_default().push(*p);
        }
    }
    buckets
}

/// Keeps at most `cap` points, drawn without replacement. Selected points
/// keep their input order.
pub fn sample_voxel(points: &[LidarPoint], cap: usize, seed: u64) -> Vec<LidarPoint> {
    assert!(cap >= 1, "sample cap must be at least 1");
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Applies [`sample_voxel`] to every bucket. Each voxel draws from its own
/// stream derived from `seed` and its linear index, so the result does not
/// depend on visiting order.
pub fn sample_buckets(spec: &VoxelGridSpec, buckets: &Buckets, cap: usize, seed: u64) -> Buckets {
    buckets
        .iter()
        .map(|(k, pts)| {
            let s = seed ^ spec.linearize(*k).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            (*k, sample_voxel(pts, cap, s))
        })
        .collect()
}

/// Sparse features of the non-empty voxels, keyed by voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureStore {
    spec: VoxelGridSpec,
    entries: BTreeMap<VoxelKey, Vec<f32>>,
}

impl VoxelFeatureStore {
    pub fn new(spec: VoxelGridSpec) -> Self {
        Self {
            spec,
            entries: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: VoxelKey, feature: Vec<f32>) -> Result<()> {
        if feature.len() != FEATURE_DIM {
            return Err(Error::LengthMismatch {
                left: feature.len(),
                right: FEATURE_DIM,
            });
        }
        if !self.spec.key_in_range(key) {
            return Err(Error::KeyOutOfRange(format!("{key:?}")));
        }
        self.entries.insert(key, feature);
        Ok(())
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub(crate) fn get_mut(&mut self, key: &VoxelKey) -> Option<&mut Vec<f32>> {
        self.entries.get_mut(key)
    }

    /// Entries in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.entries.keys()
    }

    /// Fraction of grid cells that carry a feature.
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.spec.cell_count() as f64
    }
}
