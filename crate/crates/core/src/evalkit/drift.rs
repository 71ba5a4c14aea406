// SPDX-License-Identifier: Apache-2.0

//! Sensitivity of both fusion paradigms to errors in the sender's reported
//! position.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::detect::{AnchorScores, Detection, ProxyDetector};
use super::scene::Scene;
use crate::encoder::{encode_cloud, spatial_features, EncoderWeights, SpatialFeatureMap};
use crate::error::{Error, Result};
use crate::fusion::{sff, vff, ChannelMask, DEFAULT_EPS};
use crate::geom::{bev_iou, relative_transform, Box3D, Pose, RigidTransform};
use crate::voxel::{VoxelFeatureStore, VoxelGridSpec, VoxelKey};

/// Overlap needed for an anchor or detection to count for a target.
const TARGET_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    Vff,
    Sff,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vff => "vff",
            Self::Sff => "sff",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub trial: usize,
    pub paradigm: Paradigm,
    pub target: usize,
    pub baseline: f64,
    pub drifted: f64,
    /// Whether the target is detected without and with drift.
    pub detected: (bool, bool),
}

impl DriftRow {
    pub fn delta(&self) -> f64 {
        self.drifted - self.baseline
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub drift: f64,
    pub rows: Vec<DriftRow>,
}

impl DriftReport {
    /// Targets detected at baseline but not under drift.
    pub fn missed(&self, paradigm: Paradigm) -> usize {
        self.rows
            .iter()
            .filter(|r| r.paradigm == paradigm && r.detected == (true, false))
            .count()
    }

    pub fn gained(&self, paradigm: Paradigm) -> usize {
        self.rows
            .iter()
            .filter(|r| r.paradigm == paradigm && r.detected == (false, true))
            .count()
    }

    pub fn mean_abs_delta(&self, paradigm: Paradigm) -> f64 {
        let d: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.paradigm == paradigm)
            .map(|r| r.delta().abs())
            .collect();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "drift_m", "trial", "paradigm", "target", "baseline", "drifted", "delta", "baseline_hit", "drifted_hit",
        ])?;
        for r in &self.rows {
            out.write_record([
                format!("{:.3}", self.drift),
                r.trial.to_string(),
                r.paradigm.to_string(),
                r.target.to_string(),
                format!("{:.6}", r.baseline),
                format!("{:.6}", r.drifted),
                format!("{:.6}", r.delta()),
                (r.detected.0 as u8).to_string(),
                (r.detected.1 as u8).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Best anchor score and detection flag per target.
fn target_outcomes(
    scores: &AnchorScores,
    dets: &[Detection],
    targets: &[Box3D],
) -> Vec<(f64, bool)> {
    let boxes: Vec<Box3D> = (0..scores.len()).map(|i| scores.anchor_box(i)).collect();
    targets
        .iter()
        .map(|t| {
            let best = boxes
                .iter()
                .zip(&scores.scores)
                .filter(|(b, _)| (b.cx - t.cx).hypot(b.cy - t.cy) < t.l.max(t.w) + b.l.max(b.w))
                .filter(|(b, _)| bev_iou(b, t) >= TARGET_IOU)
                .map(|(_, &s)| s)
                .fold(0.0f64, f64::max);
            let hit = dets.iter().any(|d| bev_iou(&d.bbox, t) >= TARGET_IOU);
            (best, hit)
        })
        .collect()
}

struct Fixture<'a> {
    weights: &'a EncoderWeights,
    detector: &'a ProxyDetector,
    receiver: VoxelFeatureStore,
    sender: VoxelFeatureStore,
    receiver_map: SpatialFeatureMap,
    sender_map: SpatialFeatureMap,
    receiver_pose: Pose,
    mask: ChannelMask,
}

impl Fixture<'_> {
    fn maps(&self, sender_pose: &Pose) -> Result<[SpatialFeatureMap; 2]> {
        let t = relative_transform(&self.receiver_pose, sender_pose);
        let fused = vff(&self.receiver, &self.sender, &t, DEFAULT_EPS)?;
        Ok([
            spatial_features(&fused, self.weights)?,
            sff(&self.receiver_map, &self.sender_map, &self.receiver_pose, sender_pose, self.mask)?,
        ])
    }

    fn outcomes(&self, sender_pose: &Pose, targets: &[Box3D]) -> Result<[Vec<(f64, bool)>; 2]> {
        let [a, b] = self.maps(sender_pose)?;
        let run = |m: &SpatialFeatureMap| {
            let s = self.detector.scores(m);
            let d = self.detector.detect(m);
            target_outcomes(&s, &d, targets)
        };
        Ok([run(&a), run(&b)])
    }
}

/// Fuses the first sender into the receiver with the sender pose pushed
/// `drift` meters in a random planar direction, `trials` times, and
/// compares per-target scores and detections against the undisturbed run.
#[allow(clippy::too_many_arguments)]
pub fn drift_experiment(
    scene: &Scene,
    weights: &EncoderWeights,
    detector: &ProxyDetector,
    mask: ChannelMask,
    drift: f64,
    trials: usize,
    seed: u64,
) -> Result<DriftReport> {
    if !(drift >= 0.0 && drift.is_finite()) {
        return Err(Error::Config(format!("drift must be non-negative, got {drift}")));
    }
    if scene.clouds.len() < 2 {
        return Err(Error::Config("drift needs a sender".into()));
    }
    let receiver = encode_cloud(&scene.spec, &scene.clouds[0], weights, seed)?;
    let sender = encode_cloud(&scene.spec, &scene.clouds[1], weights, seed)?;
    let fx = Fixture {
        weights,
        detector,
        receiver_map: spatial_features(&receiver, weights)?,
        sender_map: spatial_features(&sender, weights)?,
        receiver,
        sender,
        receiver_pose: scene.poses[0],
        mask,
    };
    let targets = scene.truths();
    let base = fx.outcomes(&scene.poses[1], &targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for trial in 0..trials {
        let angle = rng.gen_range(0.0..TAU);
        let pose = scene.poses[1].drifted(drift, angle);
        let got = fx.outcomes(&pose, &targets)?;
        for (p, paradigm) in [Paradigm::Vff, Paradigm::Sff].into_iter().enumerate() {
            for (target, (b, d)) in base[p].iter().zip(&got[p]).enumerate() {
                rows.push(DriftRow {
                    trial,
                    paradigm,
                    target,
                    baseline: b.0,
                    drifted: d.0,
                    detected: (b.1, d.1),
                });
            }
        }
    }
    Ok(DriftReport { drift, rows })
}

fn cell_of(spec: &VoxelGridSpec, p: crate::geom::Point3) -> [i64; 3] {
    let c = [p.x, p.y, p.z];
    std::array::from_fn(|a| ((c[a] - spec.min[a]) / spec.voxel[a]).floor() as i64)
}

/// Largest per-axis difference, in cells, between where `a` and `b` send
/// the centers of `keys`.
pub fn key_shift(
    from: &VoxelGridSpec,
    to: &VoxelGridSpec,
    keys: impl IntoIterator<Item = VoxelKey>,
    a: &RigidTransform,
    b: &RigidTransform,
) -> [u64; 3] {
    let mut worst = [0u64; 3];
    for k in keys {
        let c = from.voxel_center(k);
        let (ka, kb) = (cell_of(to, a.apply(c)), cell_of(to, b.apply(c)));
        for ax in 0..3 {
            worst[ax] = worst[ax].max(ka[ax].abs_diff(kb[ax]));
        }
    }
    worst
}
