use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named size presets of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32x32 input, 256 stem kernels, 32 pose groups per capsule type.
    Full,
    /// 16x16 input (2x2-pooled), 64 stem kernels, 4 pose groups, 3x3
    /// primary kernels and a narrower decoder. Used for tests and desk runs.
    Reduced,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Reduced => "reduced",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "reduced" => Ok(Profile::Reduced),
            other => Err(Error::InvalidInput(format!("unknown profile `{other}` (full|reduced)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stem_kernels: usize,
    pub stem_k: usize,
    pub primary_caps_types: usize,
    pub primary_groups: usize,
    pub primary_pose_dim: usize,
    pub primary_k: usize,
    pub primary_stride: usize,
    pub attr_caps: usize,
    pub attr_caps_dim: usize,
    pub routing_iters: usize,
    pub malignancy_bins: usize,
    pub decoder_hidden: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BackboneConfig {
    pub fn full() -> Self {
        Self {
            input_size: 32,
            stem_kernels: 256,
            stem_k: 9,
            primary_caps_types: 8,
            primary_groups: 32,
            primary_pose_dim: 8,
            primary_k: 9,
            primary_stride: 2,
            attr_caps: 8,
            attr_caps_dim: 16,
            routing_iters: 3,
            malignancy_bins: 5,
            decoder_hidden: [512, 1024],
        }
    }

    pub fn reduced() -> Self {
        Self {
            input_size: 16,
            stem_kernels: 64,
            primary_groups: 4,
            primary_k: 3,
            decoder_hidden: [128, 256],
            ..Self::full()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Reduced => Self::reduced(),
        }
    }

    /// Side of the stem feature map.
    pub fn stem_out(&self) -> usize {
        self.input_size + 1 - self.stem_k
    }

    /// Side of each primary capsule grid.
    pub fn primary_grid(&self) -> usize {
        (self.stem_out() - self.primary_k) / self.primary_stride + 1
    }

    pub fn primary_channels(&self) -> usize {
        self.primary_caps_types * self.primary_groups * self.primary_pose_dim
    }

    /// Number of primary (input) capsules fed to routing.
    pub fn n_in(&self) -> usize {
        let g = self.primary_grid();
        self.primary_caps_types * self.primary_groups * g * g
    }

    /// Width of the concatenated attribute capsule vectors.
    pub fn latent_width(&self) -> usize {
        self.attr_caps * self.attr_caps_dim
    }

    pub fn image_len(&self) -> usize {
        self.input_size * self.input_size
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("input_size", self.input_size),
            ("stem_kernels", self.stem_kernels),
            ("stem_k", self.stem_k),
            ("primary_caps_types", self.primary_caps_types),
            ("primary_groups", self.primary_groups),
            ("primary_pose_dim", self.primary_pose_dim),
            ("primary_k", self.primary_k),
            ("primary_stride", self.primary_stride),
            ("attr_caps", self.attr_caps),
            ("attr_caps_dim", self.attr_caps_dim),
            ("routing_iters", self.routing_iters),
            ("decoder_hidden[0]", self.decoder_hidden[0]),
            ("decoder_hidden[1]", self.decoder_hidden[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.malignancy_bins != crate::data::MALIGNANCY_BINS {
            errs.push(format!(
                "malignancy_bins must be {}, got {}",
                crate::data::MALIGNANCY_BINS,
                self.malignancy_bins
            ));
        }
        if errs.is_empty() {
            if self.input_size < self.stem_k {
                errs.push(format!("input {} smaller than stem kernel {}", self.input_size, self.stem_k));
            } else if self.stem_out() < self.primary_k {
                errs.push(format!(
                    "stem output {} smaller than primary kernel {}",
                    self.stem_out(),
                    self.primary_k
                ));
            }
            if !crate::data::IMAGE_SIZE.is_multiple_of(self.input_size) {
                errs.push(format!(
                    "input_size {} must divide the stored image size {}",
                    self.input_size,
                    crate::data::IMAGE_SIZE
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_arithmetic() {
        let c = BackboneConfig::full();
        c.validate().unwrap();
        assert_eq!(c.stem_out(), 24);
        assert_eq!(c.primary_grid(), 8);
        assert_eq!(c.primary_channels() / c.primary_caps_types, 256);
        assert_eq!(c.n_in(), 16384);
        assert_eq!(c.latent_width(), 128);
    }

    #[test]
    fn reduced_profile_arithmetic() {
        let c = BackboneConfig::reduced();
        c.validate().unwrap();
        assert_eq!(c.stem_out(), 8);
        assert_eq!(c.primary_grid(), 3);
        assert_eq!(c.n_in(), 8 * 4 * 9);
        assert_eq!(c.latent_width(), 128);
    }

    #[test]
    fn invalid_sizes_reported() {
        let mut c = BackboneConfig::reduced();
        c.primary_k = 9;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        assert_eq!("reduced".parse::<Profile>().unwrap(), Profile::Reduced);
        assert!("tiny".parse::<Profile>().is_err());
    }
}
