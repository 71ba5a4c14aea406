// SPDX-License-Identifier: Apache-2.0

use super::detect::Detection;
use crate::geom::{iou_3d, Box3D};

pub const DEFAULT_IOU: f64 = 0.7;
/// Objects closer than this (meters, BEV) to the receiver are "near".
pub const NEAR_CUT: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Bucket {
    pub tp: usize,
    pub fp: usize,
}

impl Bucket {
    pub fn detections(&self) -> usize {
        self.tp + self.fp
    }

    /// Percentage, or `None` when the bucket holds no detections.
    pub fn precision(&self) -> Option<f64> {
        let n = self.detections();
        (n > 0).then(|| 100.0 * self.tp as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrecisionReport {
    pub near: Bucket,
    pub far: Bucket,
}

fn bev_range(b: &Box3D) -> f64 {
    b.cx.hypot(b.cy)
}

/// Greedy one-to-one matching in descending score order. A true positive
/// is bucketed by its truth's distance, a false positive by its own.
pub fn precision(dets: &[Detection], truths: &[Box3D], iou_thresh: f64, near_cut: f64) -> PrecisionReport {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; truths.len()];
    let mut report = PrecisionReport::default();
    for i in order {
        let d = &dets[i];
        let best = truths
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, t)| (j, iou_3d(&d.bbox, t)))
            .filter(|(_, iou)| *iou >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let (range, tp) = match best {
            Some((j, _)) => {
                used[j] = true;
                (bev_range(&truths[j]), true)
            }
            None => (bev_range(&d.bbox), false),
        };
        let bucket = if range < near_cut {
            &mut report.near
        } else {
            &mut report.far
        };
        if tp {
            bucket.tp += 1;
        } else {
            bucket.fp += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new(x, y, -0.95, 3.9, 1.6, 1.56, 0.0)
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn exact_detections() {
        let truths = [car(10.0, 0.0), car(30.0, 2.0)];
        let dets: Vec<_> = truths.iter().map(|&b| det(b, 0.9)).collect();
        let r = precision(&dets, &truths, DEFAULT_IOU, NEAR_CUT);
        assert_eq!(r.near.precision(), Some(100.0));
        assert_eq!(r.far.precision(), Some(100.0));
    }

    #[test]
    fn one_tp_one_fp_near() {
        let truths = [car(10.0, 0.0)];
        let dets = [det(car(10.0, 0.0), 0.9), det(car(12.0, 8.0), 0.8)];
        let r = precision(&dets, &truths, DEFAULT_IOU, NEAR_CUT);
        assert_eq!(r.near.precision(), Some(50.0));
        assert_eq!(r.far.precision(), None);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let truths = [car(10.0, 0.0)];
        let dets = [det(car(10.0, 0.0), 0.9), det(car(10.1, 0.0), 0.8)];
        let r = precision(&dets, &truths, DEFAULT_IOU, NEAR_CUT);
        assert_eq!(r.near, Bucket { tp: 1, fp: 1 });
    }

    /// Largest number of disjoint detection/truth pairs at `thresh`.
    fn max_matching(dets: &[Detection], truths: &[Box3D], thresh: f64) -> usize {
        fn go(i: usize, dets: &[Detection], truths: &[Box3D], used: &mut Vec<bool>, thresh: f64) -> usize {
            if i == dets.len() {
                return 0;
            }
            let mut best = go(i + 1, dets, truths, used, thresh);
            for j in 0..truths.len() {
                if !used[j] && iou_3d(&dets[i].bbox, &truths[j]) >= thresh {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, dets, truths, used, thresh));
                    used[j] = false;
                }
            }
            best
        }
        go(0, dets, truths, &mut vec![false; truths.len()], thresh)
    }

    proptest! {
        // Truths sit on a coarse lattice so each detection can only overlap
        // one of them; greedy matching is then optimal.
        #[test]
        fn greedy_matches_exhaustive(
            slots in proptest::collection::btree_set(0usize..12, 1..=6),
            jitter in proptest::collection::vec((-0.4..0.4f64, -0.3..0.3f64, 0.0..1.0f64, any::<bool>()), 6),
        ) {
            let truths: Vec<Box3D> = slots.iter().map(|&s| car(5.0 + 8.0 * (s % 4) as f64, -10.0 + 8.0 * (s / 4) as f64)).collect();
            let dets: Vec<Detection> = truths
                .iter()
                .zip(&jitter)
                .filter(|(_, j)| j.3)
                .map(|(t, j)| det(t.translated(j.0, j.1, 0.0), j.2))
                .collect();
            let r = precision(&dets, &truths, DEFAULT_IOU, NEAR_CUT);
            prop_assert_eq!(r.near.tp + r.far.tp, max_matching(&dets, &truths, DEFAULT_IOU));
            for b in [r.near, r.far] {
                if let Some(p) = b.precision() {
                    prop_assert!((0.0..=100.0).contains(&p));
                }
            }
        }

        #[test]
        fn adding_true_positive_never_lowers(tp in 0usize..5, fp in 0usize..5) {
            let b = Bucket { tp, fp };
            let more = Bucket { tp: tp + 1, fp };
            prop_assert!(more.precision().unwrap() >= b.precision().unwrap_or(0.0));
        }
    }
}
