// SPDX-License-Identifier: Apache-2.0

//! A deterministic stand-in for a trained region proposal head.
//!
//! Every anchor is scored from the mean per-cell feature energy (L2 norm
//! over channels) inside its footprint:
//!
//! ```text
//! score = 1 / (1 + exp(-(E / E_ref - center) / scale))
//! ```
//!
//! `E_ref` is the energy of a reference object for the given weights and
//! grid (see [`super::scene::reference_energy`]). Anchors scoring at least
//! `threshold` whose energy peaks within their own footprint emit their
//! template box and go through greedy BEV non-maximum suppression.
//! Because the score is monotone in every feature value, maxout fusion can
//! only raise it.

use std::f64::consts::FRAC_PI_2;

use crate::encoder::SpatialFeatureMap;
use crate::error::{Error, Result};
use crate::geom::{bev_iou, Box3D, Point3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    /// Confidence in `[0, 1]`.
    pub score: f64,
}

/// Anchor template laid over every `stride`-th map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub stride: usize,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Box center height in the sensor frame.
    pub center_z: f64,
    /// Each either 0 or pi/2.
    pub yaws: Vec<f64>,
}

impl AnchorGrid {
    pub fn new(stride: usize, length: f64, width: f64, height: f64, center_z: f64, yaws: Vec<f64>) -> Result<Self> {
        let g = Self {
            stride,
            length,
            width,
            height,
            center_z,
            yaws,
        };
        g.validate()?;
        Ok(g)
    }

    /// Passenger-car template on a sensor mounted 1.73 m above the ground.
    pub fn car() -> Self {
        Self {
            stride: 1,
            length: 3.9,
            width: 1.6,
            height: 1.56,
            center_z: -1.73 + 0.78,
            yaws: vec![0.0, FRAC_PI_2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be at least 1".into()));
        }
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::NonPositiveExtent);
        }
        if self.yaws.is_empty() || self.yaws.iter().any(|&y| y != 0.0 && y != FRAC_PI_2) {
            return Err(Error::Config("anchor yaws must be 0 or pi/2".into()));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.length.hypot(self.width)
    }

    /// Footprint half-extent in cells along (columns, rows): cells whose
    /// centers lie inside the template rectangle.
    fn half_cells(&self, yaw: f64, cell: f64) -> (usize, usize) {
        let (ex, ey) = if yaw == 0.0 {
            (self.length, self.width)
        } else {
            (self.width, self.length)
        };
        let k = |e: f64| (e / (2.0 * cell) + 1e-9).floor() as usize;
        (k(ex), k(ey))
    }
}

/// Scores of every anchor of one map, index `(yaw * rows + row) * cols + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorScores {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    anchors: AnchorGrid,
    origin: crate::geom::Pose,
    cell: f64,
}

impl AnchorScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn anchor_box(&self, i: usize) -> Box3D {
        let per_yaw = self.rows * self.cols;
        let (y, rc) = (i / per_yaw, i % per_yaw);
        let (r, c) = (rc / self.cols, rc % self.cols);
        let s = self.anchors.stride;
        let local = Point3::new(
            ((c * s) as f64 + 0.5) * self.cell,
            ((r * s) as f64 + 0.5) * self.cell,
            0.0,
        );
        let p = self.origin.to_parent(local);
        let a = &self.anchors;
        Box3D::new(p.x, p.y, a.center_z, a.length, a.width, a.height, a.yaws[y] + self.origin.yaw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyDetector {
    pub anchors: AnchorGrid,
    /// Mean footprint energy that maps to `score = logistic(1 - center)`.
    pub reference_energy: f64,
    pub center: f64,
    pub scale: f64,
    pub threshold: f64,
    pub nms_iou: f64,
}

impl ProxyDetector {
    pub const DEFAULT_CENTER: f64 = 0.35;
    pub const DEFAULT_SCALE: f64 = 0.05;
    pub const DEFAULT_THRESHOLD: f64 = 0.5;
    pub const DEFAULT_NMS_IOU: f64 = 0.5;

    pub fn new(anchors: AnchorGrid, reference_energy: f64) -> Result<Self> {
        anchors.validate()?;
        if !(reference_energy.is_finite() && reference_energy > 0.0) {
            return Err(Error::Config(format!("reference energy {reference_energy}")));
        }
        Ok(Self {
            anchors,
            reference_energy,
            center: Self::DEFAULT_CENTER,
            scale: Self::DEFAULT_SCALE,
            threshold: Self::DEFAULT_THRESHOLD,
            nms_iou: Self::DEFAULT_NMS_IOU,
        })
    }

    pub fn score_of(&self, energy: f64) -> f64 {
        let z = (energy / self.reference_energy - self.center) / self.scale;
        1.0 / (1.0 + (-z).exp())
    }

    /// Mean footprint energy of every anchor.
    pub fn energies(&self, map: &SpatialFeatureMap) -> (usize, usize, Vec<f64>) {
        let (h, w) = (map.height, map.width);
        let s = self.anchors.stride;
        let (rows, cols) = (h.div_ceil(s), w.div_ceil(s));
        let energy = map.cell_energy();
        // Summed-area table with a zero border.
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut run = 0.0;
            for c in 0..w {
                run += energy[r * w + c];
                sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + run;
            }
        }
        let rect = |r0: usize, r1: usize, c0: usize, c1: usize| {
            sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0] + sat[r0 * (w + 1) + c0]
        };
        let mut out = Vec::with_capacity(self.anchors.yaws.len() * rows * cols);
        for &yaw in &self.anchors.yaws {
            let (kx, ky) = self.anchors.half_cells(yaw, map.cell_size);
            let area = ((2 * kx + 1) * (2 * ky + 1)) as f64;
            for ar in 0..rows {
                let r = ar * s;
                let (r0, r1) = (r.saturating_sub(ky), (r + ky + 1).min(h));
                for ac in 0..cols {
                    let c = ac * s;
                    let (c0, c1) = (c.saturating_sub(kx), (c + kx + 1).min(w));
                    out.push(rect(r0, r1, c0, c1).max(0.0) / area);
                }
            }
        }
        (rows, cols, out)
    }

    pub fn scores(&self, map: &SpatialFeatureMap) -> AnchorScores {
        let (rows, cols, e) = self.energies(map);
        AnchorScores {
            rows,
            cols,
            scores: e.into_iter().map(|v| self.score_of(v)).collect(),
            anchors: self.anchors.clone(),
            origin: map.origin,
            cell: map.cell_size,
        }
    }

    /// Anchors scoring at least `threshold` whose footprint energy is a
    /// local maximum, after non-maximum suppression.
    ///
    /// An anchor is a local maximum when no anchor of any orientation
    /// centered inside its footprint has strictly higher energy. Without
    /// this, the smooth energy field tiles every object with overlapping
    /// boxes that a 0.5 IoU suppression cannot remove.
    pub fn detect(&self, map: &SpatialFeatureMap) -> Vec<Detection> {
        let (rows, cols, energy) = self.energies(map);
        let scores = AnchorScores {
            rows,
            cols,
            scores: energy.iter().map(|&v| self.score_of(v)).collect(),
            anchors: self.anchors.clone(),
            origin: map.origin,
            cell: map.cell_size,
        };
        let per_yaw = rows * cols;
        let s = self.anchors.stride;
        let is_peak = |i: usize| {
            let (y, rc) = (i / per_yaw, i % per_yaw);
            let (r, c) = (rc / cols, rc % cols);
            let (kx, ky) = self.anchors.half_cells(self.anchors.yaws[y], map.cell_size);
            let (kx, ky) = (kx / s, ky / s);
            let e = energy[i];
            (0..self.anchors.yaws.len()).all(|yy| {
                (r.saturating_sub(ky)..(r + ky + 1).min(rows)).all(|rr| {
                    (c.saturating_sub(kx)..(c + kx + 1).min(cols))
                        .all(|cc| energy[yy * per_yaw + rr * cols + cc] <= e)
                })
            })
        };
        let candidates = scores
            .scores
            .iter()
            .enumerate()
            .filter(|(i, &p)| p >= self.threshold && is_peak(*i))
            .map(|(i, &p)| Detection {
                bbox: scores.anchor_box(i),
                score: p,
            })
            .collect();
        nms(candidates, self.nms_iou)
    }
}

/// Greedy suppression by descending score; equal scores keep input order.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| bev_iou(&k.bbox, &d.bbox) < iou) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;

    fn detector() -> ProxyDetector {
        ProxyDetector::new(AnchorGrid::car(), 1.0).unwrap()
    }

    fn blob(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, v: f32) -> SpatialFeatureMap {
        let mut m = SpatialFeatureMap::zeros(4, h, w, Pose::new(0.0, -8.0, 0.0, 0.0), 0.8);
        for r in rows {
            for c in cols.clone() {
                m.plane_mut(1)[r * w + c] = v;
            }
        }
        m
    }

    #[test]
    fn zero_map_has_no_detections() {
        let m = SpatialFeatureMap::zeros(128, 20, 22, Pose::default(), 0.8);
        assert!(detector().detect(&m).is_empty());
    }

    #[test]
    fn footprint_of_car_template() {
        assert_eq!(AnchorGrid::car().half_cells(0.0, 0.8), (2, 1));
        assert_eq!(AnchorGrid::car().half_cells(FRAC_PI_2, 0.8), (1, 2));
        assert_eq!(AnchorGrid::car().half_cells(0.0, 0.2), (9, 4));
    }

    #[test]
    fn energies_match_brute_force() {
        let mut m = SpatialFeatureMap::zeros(3, 9, 11, Pose::default(), 0.8);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 * 0.1;
        }
        let d = detector();
        let (rows, cols, e) = d.energies(&m);
        let cell = m.cell_energy();
        for (yi, &yaw) in d.anchors.yaws.iter().enumerate() {
            let (kx, ky) = d.anchors.half_cells(yaw, 0.8);
            for r in 0..rows {
                for c in 0..cols {
                    let mut sum = 0.0;
                    for rr in r as i64 - ky as i64..=r as i64 + ky as i64 {
                        for cc in c as i64 - kx as i64..=c as i64 + kx as i64 {
                            if (0..9).contains(&rr) && (0..11).contains(&cc) {
                                sum += cell[rr as usize * 11 + cc as usize];
                            }
                        }
                    }
                    let want = sum / ((2 * kx + 1) * (2 * ky + 1)) as f64;
                    let got = e[(yi * rows + r) * cols + c];
                    assert!((got - want).abs() < 1e-9, "{got} {want}");
                }
            }
        }
    }

    #[test]
    fn blob_is_detected_once_per_orientation_cluster() {
        // A 5x3 block of unit energy centered on cell (10, 12).
        let m = blob(20, 30, 9..12, 10..15, 2.0);
        let d = detector();
        let dets = d.detect(&m);
        assert!(!dets.is_empty());
        let best = dets[0];
        let truth = Box3D::new(12.0 * 0.8 + 0.4, -8.0 + 10.0 * 0.8 + 0.4, -0.95, 3.9, 1.6, 1.56, 0.0);
        assert!(bev_iou(&best.bbox, &truth) > 0.9, "{:?}", best.bbox);
        for (i, a) in dets.iter().enumerate() {
            for b in &dets[i + 1..] {
                assert!(bev_iou(&a.bbox, &b.bbox) < 0.5);
            }
        }
    }

    #[test]
    fn scores_rise_with_energy() {
        let d = detector();
        assert!(d.score_of(0.0) < 1e-2);
        assert!((d.score_of(d.center) - 0.5).abs() < 1e-12);
        let lo = d.scores(&blob(12, 12, 4..7, 4..8, 0.5));
        let hi = d.scores(&blob(12, 12, 4..7, 4..8, 0.9));
        assert!(lo.scores.iter().zip(&hi.scores).all(|(a, b)| b >= a));
    }

    #[test]
    fn nms_keeps_highest() {
        let b = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        let dets = vec![
            Detection { bbox: b, score: 0.6 },
            Detection { bbox: b.translated(0.2, 0.0, 0.0), score: 0.9 },
            Detection { bbox: b.translated(10.0, 0.0, 0.0), score: 0.7 },
        ];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn invalid_templates() {
        assert!(AnchorGrid::new(0, 3.9, 1.6, 1.5, 0.0, vec![0.0]).is_err());
        assert!(AnchorGrid::new(1, 3.9, 1.6, 1.5, 0.0, vec![0.3]).is_err());
        assert!(AnchorGrid::new(1, -3.9, 1.6, 1.5, 0.0, vec![0.0]).is_err());
        assert!(ProxyDetector::new(AnchorGrid::car(), 0.0).is_err());
    }
}
