//! Named model profiles shipped with the repository.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

const PROFILES: [(&str, &str); 6] = [
    ("msvit-10-384", include_str!("../../../configs/msvit-10-384.toml")),
    ("msvit-10-512", include_str!("../../../configs/msvit-10-512.toml")),
    ("msvit-10-768", include_str!("../../../configs/msvit-10-768.toml")),
    ("msvit-cifar", include_str!("../../../configs/msvit-cifar.toml")),
    ("msvit-dvs", include_str!("../../../configs/msvit-dvs.toml")),
    ("tiny", include_str!("../../../configs/tiny.toml")),
];

pub fn profile_names() -> impl Iterator<Item = &'static str> {
    PROFILES.iter().map(|(n, _)| *n)
}

/// Parses the profile of the given name.
pub fn profile(name: &str) -> Result<ModelConfig> {
    let (_, text) = PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown profile `{name}`; known: {}",
                profile_names().collect::<Vec<_>>().join(", ")
            )])
        })?;
    ModelConfig::from_toml(text)
}
