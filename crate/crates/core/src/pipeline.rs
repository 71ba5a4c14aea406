// SPDX-License-Identifier: Apache-2.0

//! End-to-end run: scene → encode → exchange → fuse → detect → evaluate →
//! link simulation, and the CSV files it leaves behind.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::encoder::{encode_cloud, spatial_features, EncoderWeights, SpatialFeatureMap};
use crate::error::{Error, Result};
use crate::evalkit::{calibrated_detector, generate_scene, precision, Detection, PrecisionReport, Scene, SceneConfig};
use crate::evalkit::{DEFAULT_IOU, NEAR_CUT};
use crate::fusion::{sff, vff, ChannelMask, DEFAULT_EPS};
use crate::geom::{iou_3d, relative_transform, Box3D};
use crate::netsim::{
    latency_budget, run_scenario, LatencyBreakdown, LinkModel, PayloadStats, Scenario, Sender, SimLog, StageTimings,
    Strategy,
};
use crate::voxel::{PointCloud, VoxelFeatureStore};
use crate::wire::{raw_reference_bytes, FeatureMessage, Payload};

/// Encoder weights used unless a run asks for others.
pub const DEFAULT_WEIGHTS_SEED: u64 = 42;

pub const DETECTIONS_CSV: &str = "detections.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SIZES_CSV: &str = "sizes.csv";
pub const TIMELINE_CSV: &str = "timeline.csv";

/// Label of the receiver-only baseline in reports.
pub const SINGLE: &str = "single";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub mask: ChannelMask,
    pub link: LinkModel,
    pub link_name: String,
    pub seed: u64,
    pub duration: f64,
    pub weights_seed: u64,
    pub timings: StageTimings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sff,
            mask: ChannelMask::FULL,
            link: LinkModel::dsrc(),
            link_name: "dsrc".into(),
            seed: 0,
            duration: 5.0,
            weights_seed: DEFAULT_WEIGHTS_SEED,
            timings: StageTimings::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the scene's `[network]` table.
    pub fn for_scene(scene: &SceneConfig) -> Result<Self> {
        let n = &scene.network;
        let mut run = Self {
            link: LinkModel::profile(&n.link)?,
            link_name: n.link.clone(),
            duration: n.duration,
            ..Self::default()
        };
        if let Some(s) = &n.strategy {
            run.strategy = s.parse()?;
        }
        if let Some(m) = &n.mask {
            run.mask = m.parse()?;
        }
        if let Some(seed) = n.seed {
            run.seed = seed;
        }
        Ok(run)
    }

    /// Report label: the strategy, plus the mask for spatial fusion.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Sff => format!("sff[{}]", self.mask),
            s => s.to_string(),
        }
    }
}

/// One sender's payload in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub sender: String,
    /// Voxels, planes or points, by strategy.
    pub entries: usize,
    pub logical_bytes: u64,
    pub wire_bytes: u64,
    pub raw_reference_bytes: u64,
    /// Fraction of the sender's map cells that are all-zero.
    pub zero_cell_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub label: String,
    pub truths: Vec<Box3D>,
    pub single: Vec<Detection>,
    pub fused: Vec<Detection>,
    pub single_precision: PrecisionReport,
    pub fused_precision: PrecisionReport,
    pub sizes: Vec<SizeRow>,
    pub single_budget: LatencyBreakdown,
    pub budget: LatencyBreakdown,
    pub log: SimLog,
    /// Receiver-only and fused feature maps.
    pub single_map: SpatialFeatureMap,
    pub fused_map: SpatialFeatureMap,
}

fn roundtrip(msg: &FeatureMessage) -> Result<(FeatureMessage, u64, u64)> {
    let logical = msg.encode()?.len() as u64;
    let wire = msg.to_wire()?;
    Ok((FeatureMessage::from_wire(&wire)?, logical, wire.len() as u64))
}

fn merged_cloud(scene: &Scene) -> PointCloud {
    let rx = scene.receiver_pose();
    let mut points = scene.clouds[0].points.clone();
    for (pose, cloud) in scene.poses.iter().zip(&scene.clouds).skip(1) {
        let t = relative_transform(&rx, pose);
        points.extend(cloud.points.iter().map(|p| {
            let q = t.apply(p.position());
            crate::voxel::LidarPoint::new(q.x as f32, q.y as f32, q.z as f32, p.reflectance)
        }));
    }
    PointCloud::new(points)
}

/// Runs one scene under one strategy. Every sender's payload travels
/// through the wire codec before it is fused.
pub fn run_pipeline(config: &SceneConfig, run: &RunConfig) -> Result<RunOutput> {
    run.link.validate()?;
    run.timings.validate()?;
    let scene = generate_scene(config, run.seed)?;
    let spec = scene.spec;
    let weights = EncoderWeights::from_seed(run.weights_seed);
    let detector = calibrated_detector(&weights, &spec, &config.lidar)?;
    let rx_pose = scene.receiver_pose();

    let stores = scene
        .clouds
        .iter()
        .enumerate()
        .map(|(i, c)| encode_cloud(&spec, c, &weights, run.seed ^ i as u64))
        .collect::<Result<Vec<VoxelFeatureStore>>>()?;
    let maps = stores
        .iter()
        .map(|s| spatial_features(s, &weights))
        .collect::<Result<Vec<SpatialFeatureMap>>>()?;

    let mut sizes = Vec::new();
    let fused_map = match run.strategy {
        Strategy::Raw => {
            for (i, v) in config.vehicles.iter().enumerate().skip(1) {
                let n = scene.in_range_points(i);
                let raw = raw_reference_bytes(n);
                sizes.push(SizeRow {
                    sender: v.name.clone(),
                    entries: n,
                    logical_bytes: raw,
                    wire_bytes: raw,
                    raw_reference_bytes: raw,
                    zero_cell_fraction: maps[i].zero_cell_fraction(),
                });
            }
            let merged = encode_cloud(&spec, &merged_cloud(&scene), &weights, run.seed)?;
            spatial_features(&merged, &weights)?
        }
        Strategy::Vff => {
            let mut fused = stores[0].clone();
            for (i, v) in config.vehicles.iter().enumerate().skip(1) {
                let (msg, logical, wire) = roundtrip(&FeatureMessage::voxel(scene.poses[i], stores[i].clone()))?;
                let Payload::Voxel(store) = msg.payload else {
                    return Err(Error::Malformed("expected a voxel message".into()));
                };
                sizes.push(SizeRow {
                    sender: v.name.clone(),
                    entries: store.len(),
                    logical_bytes: logical,
                    wire_bytes: wire,
                    raw_reference_bytes: raw_reference_bytes(scene.in_range_points(i)),
                    zero_cell_fraction: maps[i].zero_cell_fraction(),
                });
                fused = vff(&fused, &store, &relative_transform(&rx_pose, &msg.pose), DEFAULT_EPS)?;
            }
            spatial_features(&fused, &weights)?
        }
        Strategy::Sff => {
            let mut fused = maps[0].clone();
            for (i, v) in config.vehicles.iter().enumerate().skip(1) {
                let (msg, logical, wire) = roundtrip(&FeatureMessage::spatial(scene.poses[i], spec, &maps[i], run.mask)?)?;
                let Payload::Spatial(map) = msg.payload else {
                    return Err(Error::Malformed("expected a spatial message".into()));
                };
                sizes.push(SizeRow {
                    sender: v.name.clone(),
                    entries: map.channels(),
                    logical_bytes: logical,
                    wire_bytes: wire,
                    raw_reference_bytes: raw_reference_bytes(scene.in_range_points(i)),
                    zero_cell_fraction: maps[i].zero_cell_fraction(),
                });
                fused = sff(&fused, &map, &rx_pose, &msg.pose, run.mask)?;
            }
            fused
        }
    };

    let truths = scene.truths();
    let single = detector.detect(&maps[0]);
    let fused = detector.detect(&fused_map);
    let eval = |d: &[Detection]| precision(d, &truths, DEFAULT_IOU, NEAR_CUT);

    // Every sender shares the link, so the budget uses the largest payload.
    let wire_bytes = sizes.iter().map(|s| s.wire_bytes).max().unwrap_or(0);
    let stats = PayloadStats {
        wire_bytes,
        result_bytes: PayloadStats::RESULT_BYTES,
    };
    let budget = latency_budget(run.strategy, run.mask, &stats, &run.link, &run.timings);
    let single_budget = LatencyBreakdown {
        label: SINGLE.into(),
        stages: vec![("encode", run.timings.encode), ("detect", run.timings.detect)],
    };
    let log = run_scenario(&Scenario {
        receiver: config.vehicles[0].name.clone(),
        senders: sizes
            .iter()
            .map(|s| Sender {
                name: s.sender.clone(),
                payload_bytes: s.wire_bytes,
            })
            .collect(),
        strategy: run.strategy,
        link: run.link,
        timings: run.timings,
        duration: run.duration,
        seed: run.seed,
    })?;

    Ok(RunOutput {
        scenario: config.name.clone(),
        label: run.label(),
        single_precision: eval(&single),
        fused_precision: eval(&fused),
        truths,
        single,
        fused,
        sizes,
        single_budget,
        budget,
        log,
        single_map: maps.into_iter().next().expect("receiver map"),
        fused_map,
    })
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

fn pct(p: Option<f64>) -> String {
    p.map_or_else(String::new, |v| format!("{v:.2}"))
}

impl RunOutput {
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        self.write_detections(open(DETECTIONS_CSV)?)?;
        self.write_metrics(open(METRICS_CSV)?)?;
        self.write_sizes(open(SIZES_CSV)?)?;
        self.log.write_csv(open(TIMELINE_CSV)?)
    }

    pub fn write_detections<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["run", "cx", "cy", "cz", "l", "w", "h", "yaw", "score", "range", "best_iou"])?;
        let row = |run: &str, b: &Box3D, score: String, best: String| {
            let mut r = vec![run.to_string()];
            r.extend([b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw].map(f));
            r.extend([score, f(b.cx.hypot(b.cy)), best]);
            r
        };
        for t in &self.truths {
            out.write_record(row("truth", t, String::new(), String::new()))?;
        }
        for (run, dets) in [(SINGLE, &self.single), (self.label.as_str(), &self.fused)] {
            for d in dets {
                let best = self.truths.iter().map(|t| iou_3d(&d.bbox, t)).fold(0.0, f64::max);
                out.write_record(row(run, &d.bbox, f(d.score), f(best)))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_metrics<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "strategy", "bucket", "precision", "detections", "bytes", "ms"])?;
        let bytes: u64 = self.sizes.iter().map(|s| s.wire_bytes).sum();
        let runs = [
            (SINGLE, &self.single_precision, 0, &self.single_budget),
            (self.label.as_str(), &self.fused_precision, bytes, &self.budget),
        ];
        for (label, p, bytes, budget) in runs {
            let all = crate::evalkit::Bucket {
                tp: p.near.tp + p.far.tp,
                fp: p.near.fp + p.far.fp,
            };
            for (bucket, b) in [("near", p.near), ("far", p.far), ("all", all)] {
                out.write_record([
                    self.scenario.clone(),
                    label.to_string(),
                    bucket.to_string(),
                    pct(b.precision()),
                    b.detections().to_string(),
                    bytes.to_string(),
                    format!("{:.3}", budget.total() * 1e3),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_sizes<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "scenario",
            "strategy",
            "sender",
            "entries",
            "logical_bytes",
            "wire_bytes",
            "ratio",
            "raw_reference_bytes",
            "zero_cell_fraction",
        ])?;
        for s in &self.sizes {
            out.write_record([
                self.scenario.clone(),
                self.label.clone(),
                s.sender.clone(),
                s.entries.to_string(),
                s.logical_bytes.to_string(),
                s.wire_bytes.to_string(),
                format!("{:.6}", s.wire_bytes as f64 / s.logical_bytes.max(1) as f64),
                s.raw_reference_bytes.to_string(),
                format!("{:.6}", s.zero_cell_fraction),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
