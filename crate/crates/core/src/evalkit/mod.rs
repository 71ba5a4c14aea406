// SPDX-License-Identifier: Apache-2.0

//! Detection math and evaluation: box-delta codec, training loss, a proxy
//! detection head, precision, synthetic scenes and the drift harness.

mod codec;
mod detect;
mod drift;
mod loss;
mod precision;
pub mod scene;

pub use codec::{delta_decode, delta_encode, Delta};
pub use detect::{nms, AnchorGrid, AnchorScores, Detection, ProxyDetector};
pub use drift::{drift_experiment, key_shift, DriftReport, DriftRow, Paradigm};
pub use loss::{bce, loss, loss_from_deltas, smooth_l1, LossConfig, SCORE_CLAMP};
pub use precision::{precision, Bucket, PrecisionReport, DEFAULT_IOU, NEAR_CUT};
pub use scene::{calibrated_detector, generate_scene, occlusion_scene, reference_energy, Scene, SceneConfig};
