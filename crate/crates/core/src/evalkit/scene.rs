// SPDX-License-Identifier: Apache-2.0

//! Synthetic multi-vehicle scenes.
//!
//! World frame: ground at `z = 0`, x/y planar, yaw counter-clockwise.
//! Each vehicle carries a spinning LiDAR at its pose; rays hit the nearest
//! object box, so anything behind a closer object is not seen. There is no
//! ground plane: rays that miss every object return nothing.
//!
//! ```toml
//! name = "crossing"
//! [grid]
//! preset = "desk"            # or "reference", or explicit x/y/z/voxel
//! [lidar]
//! beams = 16
//! [[vehicle]]
//! name = "ego"
//! pose = [0.0, 0.0, 1.73, 0.0]   # x, y, z, yaw in degrees
//! [[object]]
//! kind = "car"                   # "car" objects are detection targets
//! center = [18.0, 2.0, 0.78]
//! size = [3.9, 1.6, 1.56]
//! yaw = 0.0                      # degrees
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detect::{AnchorGrid, ProxyDetector};
use crate::encoder::{encode_cloud, spatial_features, EncoderWeights};
use crate::error::{Error, Result};
use crate::geom::{relative_transform, Box3D, Point3, Pose};
use crate::voxel::{LidarPoint, PointCloud, VoxelGridSpec};

/// Height of the sensor above the ground.
pub const SENSOR_HEIGHT: f64 = 1.73;
pub const CAR_SIZE: [f64; 3] = [3.9, 1.6, 1.56];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub lidar: LidarConfig,
    #[serde(rename = "vehicle")]
    pub vehicles: Vec<VehicleConfig>,
    #[serde(rename = "object", default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub network: NetworkConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel: Option<[f64; 3]>,
}

impl GridConfig {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.to_string()),
            ..Self::default()
        }
    }

    /// Preset (default "reference") with any explicit fields overriding it.
    pub fn to_spec(&self) -> Result<VoxelGridSpec> {
        let base = match self.preset.as_deref().unwrap_or("reference") {
            "reference" => VoxelGridSpec::reference(),
            "desk" => VoxelGridSpec::desk(),
            other => return Err(Error::Config(format!("unknown grid preset {other:?}"))),
        };
        let pair = |o: Option<[f64; 2]>, a: usize| o.map_or((base.min[a], base.max[a]), |v| (v[0], v[1]));
        VoxelGridSpec::new(pair(self.x, 0), pair(self.y, 1), pair(self.z, 2), self.voxel.unwrap_or(base.voxel))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub beams: u32,
    /// Lowest and highest beam elevation, degrees.
    pub elevation: [f64; 2],
    /// Horizontal angular step, degrees.
    pub azimuth_step: f64,
    pub max_range: f64,
    /// Uniform range noise half-width, meters.
    pub range_noise: f64,
    /// Return points from a flat ground plane at world z = 0.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub ground: bool,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 16,
            elevation: [-15.0, 15.0],
            azimuth_step: 0.2,
            max_range: 100.0,
            range_noise: 0.02,
            ground: false,
        }
    }
}

impl LidarConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.beams >= 1
            && self.elevation[0] <= self.elevation[1]
            && self.elevation.iter().all(|e| e.abs() < 90.0)
            && self.azimuth_step > 0.0
            && self.azimuth_step <= 360.0
            && self.max_range > 0.0
            && self.range_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid lidar config {self:?}")))
        }
    }

    fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.elevation;
        if self.beams == 1 {
            return vec![lo.to_radians()];
        }
        (0..self.beams)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.beams - 1) as f64).to_radians())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub name: String,
    /// x, y, z (sensor height), yaw in degrees.
    pub pose: [f64; 4],
}

impl VehicleConfig {
    pub fn pose(&self) -> Pose {
        let [x, y, z, yaw] = self.pose;
        Pose::new(x, y, z, yaw.to_radians())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    /// Detection target.
    Car,
    /// Occluder only (walls, pillars, parked trucks).
    Structure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub kind: ObjectKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Degrees.
    #[serde(default)]
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectance: Option<f64>,
}

impl ObjectConfig {
    pub fn bbox(&self) -> Box3D {
        let [cx, cy, cz] = self.center;
        let [l, w, h] = self.size;
        Box3D::new(cx, cy, cz, l, w, h, self.yaw.to_radians())
    }

    fn reflectance(&self) -> f64 {
        self.reflectance.unwrap_or(match self.kind {
            ObjectKind::Car => 0.6,
            ObjectKind::Structure => 0.3,
        })
    }
}

/// Exchange settings; command-line flags override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub link: String,
    /// Simulated seconds; one exchange per second.
    pub duration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            link: "dsrc".into(),
            duration: 5.0,
            strategy: None,
            mask: None,
            seed: None,
        }
    }
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.grid.to_spec()?;
        self.lidar.validate()?;
        if self.vehicles.len() < 2 {
            return Err(Error::Config("a scene needs at least two vehicles".into()));
        }
        for v in &self.vehicles {
            if !v.pose.iter().all(|x| x.is_finite()) {
                return Err(Error::Config(format!("vehicle {} pose is not finite", v.name)));
            }
        }
        let receiver = self.vehicles[0].pose();
        let to_rx = relative_transform(&receiver, &Pose::default());
        for (i, o) in self.objects.iter().enumerate() {
            let b = o.bbox();
            if !b.is_valid() {
                return Err(Error::Config(format!("object {i} has an invalid box")));
            }
            let c = to_rx.apply(b.center());
            let inside = (spec.min[0]..=spec.max[0]).contains(&c.x) && (spec.min[1]..=spec.max[1]).contains(&c.y);
            if !inside {
                return Err(Error::Config(format!("object {i} lies outside the receiver's range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub spec: VoxelGridSpec,
    pub poses: Vec<Pose>,
    /// One cloud per vehicle, in that vehicle's sensor frame.
    pub clouds: Vec<PointCloud>,
}

impl Scene {
    pub fn receiver_pose(&self) -> Pose {
        self.poses[0]
    }

    /// Target boxes in the receiver's sensor frame.
    pub fn truths(&self) -> Vec<Box3D> {
        let t = relative_transform(&self.poses[0], &Pose::default());
        self.config
            .objects
            .iter()
            .filter(|o| o.kind == ObjectKind::Car)
            .map(|o| t.apply_box(&o.bbox()))
            .collect()
    }

    pub fn in_range_points(&self, vehicle: usize) -> usize {
        self.clouds[vehicle]
            .points
            .iter()
            .filter(|p| self.spec.contains(p.position()))
            .count()
    }
}

/// Entry distance of a ray into a box, if it hits from outside.
fn ray_box(origin: Point3, dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = (-b.yaw).sin_cos();
    let (ox, oy) = (origin.x - b.cx, origin.y - b.cy);
    let o = [c * ox - s * oy, s * ox + c * oy, origin.z - b.cz];
    let d = [c * dir[0] - s * dir[1], s * dir[0] + c * dir[1], dir[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 1e-9).then_some(t0)
}

const GROUND_REFLECTANCE: f64 = 0.15;

/// One full revolution from `pose`; returns points in the sensor frame.
pub fn scan(lidar: &LidarConfig, pose: &Pose, objects: &[ObjectConfig], seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes: Vec<(Box3D, f64)> = objects.iter().map(|o| (o.bbox(), o.reflectance())).collect();
    let origin = Point3::new(pose.x, pose.y, pose.z);
    let steps = (360.0 / lidar.azimuth_step).round() as usize;
    let mut points = Vec::new();
    for el in lidar.elevations() {
        let (se, ce) = el.sin_cos();
        for k in 0..steps {
            let az = (k as f64 * lidar.azimuth_step).to_radians();
            let local = [ce * az.cos(), ce * az.sin(), se];
            let (sy, cy) = pose.yaw.sin_cos();
            let world = [cy * local[0] - sy * local[1], sy * local[0] + cy * local[1], local[2]];
            let ground = (lidar.ground && world[2] < 0.0 && origin.z > 0.0)
                .then(|| (-origin.z / world[2], GROUND_REFLECTANCE));
            let hit = boxes
                .iter()
                .filter_map(|(b, r)| ray_box(origin, world, b).map(|t| (t, *r)))
                .chain(ground)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((t, refl)) = hit.filter(|h| h.0 <= lidar.max_range) else {
                continue;
            };
            let t = t + lidar.range_noise * rng.gen_range(-1.0..=1.0);
            let refl = (refl + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0);
            points.push(LidarPoint::new(
                (local[0] * t) as f32,
                (local[1] * t) as f32,
                (local[2] * t) as f32,
                refl as f32,
            ));
        }
    }
    PointCloud::new(points)
}

fn vehicle_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let spec = config.grid.to_spec()?;
    let poses: Vec<Pose> = config.vehicles.iter().map(|v| v.pose()).collect();
    let clouds = poses
        .iter()
        .enumerate()
        .map(|(i, p)| scan(&config.lidar, p, &config.objects, vehicle_seed(seed, i)))
        .collect();
    Ok(Scene {
        config: config.clone(),
        spec,
        poses,
        clouds,
    })
}

fn car_at(x: f64, y: f64, yaw_deg: f64) -> ObjectConfig {
    ObjectConfig {
        kind: ObjectKind::Car,
        center: [x, y, CAR_SIZE[2] / 2.0],
        size: CAR_SIZE,
        yaw: yaw_deg,
        reflectance: None,
    }
}

/// Nearest cell center of a grid whose lower corner sits on a multiple of
/// `cell` offset by `lo`.
fn snap(v: f64, lo: f64, cell: f64) -> f64 {
    lo + cell * (((v - lo) / cell - 0.5).round() + 0.5)
}

/// Wall standing between `viewer` and `target` that hides the half of the
/// target on side `side` (+1 = +y, -1 = -y) of its long axis, plus
/// `overlap` (a fraction of the half width) of the other half.
fn occluder(viewer: [f64; 2], target: &Box3D, side: f64, at: f64, overlap: f64) -> ObjectConfig {
    let angle = |p: [f64; 2]| (p[1] - viewer[1]).atan2(p[0] - viewer[0]);
    let mid = angle([target.cx, target.cy]);
    let wrap = |a: f64| crate::geom::normalize_angle(a - mid);
    let far = target
        .bev_corners()
        .iter()
        .filter(|c| (c[1] - target.cy) * side > 0.0)
        .map(|&c| wrap(angle(c)))
        .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
    let near = wrap(angle([target.cx, target.cy - side * overlap * target.w / 2.0]));
    let (a0, a1) = (near, far + 2f64.to_radians().copysign(far));
    let range = (target.cx - viewer[0]).hypot(target.cy - viewer[1]) * at;
    let center_angle = mid + (a0 + a1) / 2.0;
    let span = 2.0 * range * ((a1 - a0).abs() / 2.0).tan();
    ObjectConfig {
        kind: ObjectKind::Structure,
        center: [
            viewer[0] + range * center_angle.cos(),
            viewer[1] + range * center_angle.sin(),
            1.5,
        ],
        size: [0.3, span, 3.0],
        yaw: center_angle.to_degrees(),
        reflectance: None,
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Distance band, from each vehicle to the target face it sees, over which
/// the default 16-beam sensor puts the same number of beams on a car.
const FACE_RANGE: std::ops::Range<f64> = 14.5..18.5;
const OVERLAP: f64 = 0.25;

/// Two-vehicle scene where each vehicle sees only part of a target car.
///
/// The receiver sits at the origin facing +x and the sender faces the
/// target from the far side, both 14.5-18.5 m from the face they see. The
/// sender's grid is aligned with the receiver's (a half turn and a
/// whole-cell offset); misalignment is the drift harness's subject. A wall in front of each vehicle
/// hides a different half of the target, so only the union of both views
/// covers it. A few unobstructed cars are scattered as clutter.
pub fn occlusion_scene(seed: u64, grid: GridConfig) -> Result<SceneConfig> {
    let spec = grid.to_spec()?;
    let cell = spec.voxel[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = CAR_SIZE[0] / 2.0;
    let tx = snap(rng.gen_range(FACE_RANGE) + half, spec.min[0], cell);
    let ty = snap(rng.gen_range(-1.2..1.2), spec.min[1], cell);
    let target = car_at(tx, ty, 0.0);
    let tb = target.bbox();
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    let rx = [0.0, 0.0];
    // Whole-cell offset and a half turn: sender voxels land exactly on
    // receiver voxels, so the fused view is not blurred by resampling.
    let on_cell = |v: f64| cell * (v / cell).round();
    let sx = [
        on_cell(tx + half + rng.gen_range(FACE_RANGE)),
        on_cell(ty + rng.gen_range(-1.0..1.0)),
    ];
    let sender_yaw = 180.0;
    let mut objects = vec![
        target,
        occluder(rx, &tb, side, rng.gen_range(0.45..0.6), OVERLAP),
        occluder(sx, &tb, -side, rng.gen_range(0.45..0.6), OVERLAP),
    ];

    let clutter = rng.gen_range(2..=3);
    let mut tries = 0;
    let mut placed = 0;
    while placed < clutter && tries < 200 {
        tries += 1;
        let p = [rng.gen_range(6.0..45.0), rng.gen_range(-15.0..15.0)];
        let clear = segment_distance(p, rx, [tx, ty]) > 5.0
            && segment_distance(p, sx, [tx, ty]) > 5.0
            && objects.iter().all(|o| (o.center[0] - p[0]).hypot(o.center[1] - p[1]) > 6.0)
            && (p[0] - sx[0]).hypot(p[1] - sx[1]) > 6.0;
        if clear {
            let yaw = if rng.gen_bool(0.5) { 0.0 } else { 90.0 };
            objects.push(car_at(snap(p[0], spec.min[0], cell), snap(p[1], spec.min[1], cell), yaw));
            placed += 1;
        }
    }

    let cfg = SceneConfig {
        name: format!("occlusion-{seed}"),
        grid,
        lidar: LidarConfig::default(),
        vehicles: vec![
            VehicleConfig {
                name: "ego".into(),
                pose: [rx[0], rx[1], SENSOR_HEIGHT, 0.0],
            },
            VehicleConfig {
                name: "peer".into(),
                pose: [sx[0], sx[1], SENSOR_HEIGHT, sender_yaw],
            },
        ],
        objects,
        network: NetworkConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Highest mean footprint energy of a lone car seen head-on at about 15 m,
/// for the given weights, grid and sensor (ground returns off).
pub fn reference_energy(
    weights: &EncoderWeights,
    spec: &VoxelGridSpec,
    lidar: &LidarConfig,
    anchors: &AnchorGrid,
) -> Result<f64> {
    let cell = spec.voxel[0];
    let car = car_at(snap(15.0, spec.min[0], cell), snap(0.0, spec.min[1], cell), 0.0);
    let pose = Pose::new(0.0, 0.0, SENSOR_HEIGHT, 0.0);
    let lidar = LidarConfig {
        ground: false,
        ..lidar.clone()
    };
    let cloud = scan(&lidar, &pose, &[car], 0);
    let map = spatial_features(&encode_cloud(spec, &cloud, weights, 0)?, weights)?;
    let probe = ProxyDetector::new(anchors.clone(), 1.0)?;
    let (_, _, e) = probe.energies(&map);
    let best = e.into_iter().fold(0.0f64, f64::max);
    if best > 0.0 {
        Ok(best)
    } else {
        Err(Error::Config("reference object produced no features".into()))
    }
}

/// Car-template detector normalized for `weights`, `spec` and `lidar`.
pub fn calibrated_detector(weights: &EncoderWeights, spec: &VoxelGridSpec, lidar: &LidarConfig) -> Result<ProxyDetector> {
    let anchors = AnchorGrid::car();
    let e = reference_energy(weights, spec, lidar, &anchors)?;
    ProxyDetector::new(anchors, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cars(objects: Vec<ObjectConfig>, peer: [f64; 4]) -> SceneConfig {
        SceneConfig {
            name: "t".into(),
            grid: GridConfig::preset("desk"),
            lidar: LidarConfig::default(),
            vehicles: vec![
                VehicleConfig {
                    name: "a".into(),
                    pose: [0.0, 0.0, SENSOR_HEIGHT, 0.0],
                },
                VehicleConfig {
                    name: "b".into(),
                    pose: peer,
                },
            ],
            objects,
            network: NetworkConfig::default(),
        }
    }

    fn count_inside(cloud: &PointCloud, pose: &Pose, b: &Box3D) -> usize {
        let grown = Box3D { l: b.l + 0.1, w: b.w + 0.1, h: b.h + 0.1, ..*b };
        cloud
            .points
            .iter()
            .filter(|p| grown.contains(pose.to_parent(p.position())))
            .count()
    }

    #[test]
    fn ray_box_hits_front_face() {
        let b = Box3D::new(10.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let t = ray_box(Point3::new(0.0, 0.0, 0.0), [1.0, 0.0, 0.0], &b).unwrap();
        assert!((t - 9.0).abs() < 1e-12);
        assert!(ray_box(Point3::new(0.0, 0.0, 0.0), [-1.0, 0.0, 0.0], &b).is_none());
        assert!(ray_box(Point3::new(0.0, 5.0, 0.0), [1.0, 0.0, 0.0], &b).is_none());
        let r = Box3D::new(10.0, 0.0, 0.0, 2.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4);
        let t = ray_box(Point3::new(0.0, 0.0, 0.0), [1.0, 0.0, 0.0], &r).unwrap();
        assert!((t - (10.0 - 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn ground_rings() {
        // Beams at -15, -13, ..., -1 degrees all meet z = 0 within 100 m.
        let lidar = LidarConfig {
            ground: true,
            ..LidarConfig::default()
        };
        let pose = Pose::new(3.0, -2.0, SENSOR_HEIGHT, 0.4);
        let cloud = scan(&lidar, &pose, &[], 9);
        assert_eq!(cloud.len(), 8 * 1800);
        for p in &cloud.points {
            let w = pose.to_parent(p.position());
            assert!(w.z.abs() < 0.03, "{w:?}");
        }
        assert!(scan(&LidarConfig::default(), &pose, &[], 9).is_empty());
    }

    #[test]
    fn lone_box_seen_by_both() {
        let cfg = two_cars(vec![car_at(15.0, 0.0, 0.0)], [30.0, 0.0, SENSOR_HEIGHT, 180.0]);
        let s = generate_scene(&cfg, 1).unwrap();
        let b = cfg.objects[0].bbox();
        assert!(count_inside(&s.clouds[0], &s.poses[0], &b) > 50);
        assert!(count_inside(&s.clouds[1], &s.poses[1], &b) > 50);
        assert_eq!(s.truths().len(), 1);
    }

    #[test]
    fn hidden_box_only_seen_from_the_side() {
        // B directly behind a tall A as seen from the origin; the peer looks
        // at B from the side.
        let a = ObjectConfig {
            kind: ObjectKind::Structure,
            center: [12.0, 0.0, 1.5],
            size: [1.0, 4.0, 3.0],
            yaw: 0.0,
            reflectance: None,
        };
        let b = car_at(20.0, 0.0, 0.0);
        let cfg = two_cars(vec![a, b.clone()], [20.0, -15.0, SENSOR_HEIGHT, 90.0]);
        let s = generate_scene(&cfg, 2).unwrap();
        assert_eq!(count_inside(&s.clouds[0], &s.poses[0], &b.bbox()), 0);
        assert!(count_inside(&s.clouds[1], &s.poses[1], &b.bbox()) > 50);
    }

    #[test]
    fn same_seed_same_clouds() {
        let cfg = occlusion_scene(3, GridConfig::preset("desk")).unwrap();
        assert_eq!(generate_scene(&cfg, 9).unwrap(), generate_scene(&cfg, 9).unwrap());
        assert_ne!(generate_scene(&cfg, 9).unwrap().clouds, generate_scene(&cfg, 10).unwrap().clouds);
        assert_eq!(cfg, occlusion_scene(3, GridConfig::preset("desk")).unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = occlusion_scene(4, GridConfig::preset("desk")).unwrap();
        let back = SceneConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors() {
        let mut cfg = two_cars(vec![car_at(15.0, 0.0, 0.0)], [30.0, 0.0, SENSOR_HEIGHT, 180.0]);
        cfg.vehicles.pop();
        assert!(cfg.validate().is_err());
        let cfg = two_cars(vec![car_at(-15.0, 0.0, 0.0)], [30.0, 0.0, SENSOR_HEIGHT, 180.0]);
        assert!(cfg.validate().is_err(), "object behind the receiver");
        assert!(SceneConfig::from_toml("name = 1").is_err());
        assert!(GridConfig::preset("huge").to_spec().is_err());
    }

    #[test]
    fn snapping() {
        assert!((snap(15.0, 0.0, 0.8) - 15.6).abs() < 1e-9 || (snap(15.0, 0.0, 0.8) - 14.8).abs() < 1e-9);
        assert!((snap(0.1, -40.0, 0.8) - 0.4).abs() < 1e-9);
    }
}
