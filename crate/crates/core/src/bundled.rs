// SPDX-License-Identifier: Apache-2.0

//! Scene configurations shipped with the library.

use crate::error::Result;
use crate::evalkit::SceneConfig;

/// Two-vehicle occlusion scene on the desk grid; the default.
pub const OCCLUSION: &str = include_str!("../scenes/occlusion.toml");
/// Street with ground returns on the reference grid.
pub const STREET: &str = include_str!("../scenes/street.toml");

pub const DEFAULT: &str = "occlusion";

/// `(name, toml)` for every bundled scene.
pub const ALL: &[(&str, &str)] = &[("occlusion", OCCLUSION), ("street", STREET)];

/// Parses the bundled scene called `name`, if there is one.
pub fn scene(name: &str) -> Option<Result<SceneConfig>> {
    ALL.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| SceneConfig::from_toml(text))
}
