//! Synthetic multi-domain episode generation and dataset I/O.
//!
//! Domains share episode geometry for a fixed seed: the mask produced for
//! episode seed `s` is identical in every domain, only the appearance
//! (texture, intensity transform, color cast, noise) differs. That makes
//! cross-domain evaluation a paired design.

mod gen;
mod manifest;
mod pnm;

pub use gen::generate_episode;
pub use manifest::{
    read_episode, read_manifest, write_dataset, write_episode, write_manifest, EpisodeBank, ManifestRow, Role,
};
pub use pnm::{read_pgm_mask, read_ppm, write_pgm_mask, write_ppm};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Mask};

/// One K-shot segmentation task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub support_images: Vec<FeatureMap<T>>,
    pub support_masks: Vec<Mask>,
    pub query_image: FeatureMap<T>,
    pub query_mask: Mask,
    pub domain_id: String,
    pub class_id: u32,
}

impl<T: Scalar> Episode<T> {
    pub fn shots(&self) -> usize {
        self.support_images.len()
    }

    /// Restricts the episode to its first `k` support shots.
    pub fn with_shots(&self, k: usize) -> Result<Episode<T>> {
        if k == 0 || k > self.shots() {
            return Err(Error::Config(format!("run.shots: requested {k} of {} stored shots", self.shots())));
        }
        Ok(Episode {
            support_images: self.support_images[..k].to_vec(),
            support_masks: self.support_masks[..k].to_vec(),
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Flat,
    Stripes,
    Checker,
    Speckle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityTransform {
    None,
    Invert,
    Gamma,
}

/// Appearance recipe of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub texture: TextureFamily,
    pub transform: IntensityTransform,
    pub color_cast: [f64; 3],
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn new(
        name: &str,
        texture: TextureFamily,
        transform: IntensityTransform,
        color_cast: [f64; 3],
        noise_sigma: f64,
    ) -> Result<Self> {
        if color_cast.iter().any(|c| !(-0.3..=0.3).contains(c)) {
            return Err(Error::Config(format!("domain {name}: color cast outside [-0.3, 0.3]")));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::Config(format!("domain {name}: negative noise sigma")));
        }
        Ok(Self { name: name.to_string(), texture, transform, color_cast, noise_sigma })
    }

    /// The training domain: flat background, no transform, no cast, no noise.
    pub fn source() -> Self {
        Self::new("source", TextureFamily::Flat, IntensityTransform::None, [0.0; 3], 0.0).unwrap()
    }

    /// Shipped domains in order of increasing shift from `source`.
    pub fn shipped() -> Vec<DomainSpec> {
        vec![
            Self::source(),
            Self::new("tint", TextureFamily::Flat, IntensityTransform::None, [0.12, -0.08, 0.05], 0.02).unwrap(),
            Self::new("grain", TextureFamily::Speckle, IntensityTransform::Gamma, [-0.10, 0.06, 0.10], 0.04).unwrap(),
            Self::new("weave", TextureFamily::Stripes, IntensityTransform::Gamma, [0.18, -0.12, 0.08], 0.05).unwrap(),
            Self::new("negative", TextureFamily::Checker, IntensityTransform::Invert, [-0.15, 0.15, -0.10], 0.06)
                .unwrap(),
        ]
    }

    pub fn preset(name: &str) -> Result<DomainSpec> {
        Self::shipped()
            .into_iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("domains: unknown domain name `{name}`")))
    }
}
