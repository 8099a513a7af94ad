use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Profile;
use crate::prototypes::DEFAULT_DIST_MAX;

/// Which role the prototypes play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Prototypes are learned and used for attribute inference.
    #[default]
    Full,
    /// Prototypes are learned but attributes come from the dense head.
    #[serde(alias = "w/o_use")]
    WoUse,
    /// Prototypes are neither learned nor used.
    #[serde(alias = "w/o_learn")]
    WoLearn,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::WoUse, Ablation::WoLearn];

    pub fn learns_prototypes(self) -> bool {
        self != Ablation::WoLearn
    }

    pub fn uses_prototypes(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::WoUse => "wo_use",
            Ablation::WoLearn => "wo_learn",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "wo_use" | "w/o_use" => Ok(Ablation::WoUse),
            "wo_learn" | "w/o_learn" => Ok(Ablation::WoLearn),
            other => Err(Error::InvalidInput(format!("unknown ablation `{other}` (full|wo_use|wo_learn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub lr_params: f64,
    pub lr_prototypes: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub push_start_epoch: usize,
    pub push_every: usize,
    pub lambda_recon: f64,
    pub lambda_proto: f64,
    pub lambda_sep_inner: f64,
    pub dist_max: f64,
    pub attr_label_fraction: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Full,
            lr_params: 0.02,
            lr_prototypes: 0.5,
            batch_size: 128,
            max_epochs: 1000,
            patience: 100,
            push_start_epoch: 100,
            push_every: 10,
            lambda_recon: 0.512,
            lambda_proto: 0.125,
            lambda_sep_inner: 0.1,
            dist_max: DEFAULT_DIST_MAX,
            attr_label_fraction: 1.0,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

/// Coefficients of the total loss for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub proto: f64,
    pub sep_inner: f64,
    /// False before the first push epoch and always under `wo_learn`.
    pub prototypes: bool,
}

impl TrainConfig {
    /// Collects every invalid field; returns schedule warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut errs = Vec::new();
        let positive = [
            ("lr_params", self.lr_params),
            ("lr_prototypes", self.lr_prototypes),
            ("lambda_recon", self.lambda_recon),
            ("lambda_proto", self.lambda_proto),
            ("lambda_sep_inner", self.lambda_sep_inner),
            ("dist_max", self.dist_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("push_every", self.push_every),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.attr_label_fraction) {
            errs.push(format!("attr_label_fraction must be in [0,1], got {}", self.attr_label_fraction));
        }
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let mut warnings = Vec::new();
        if self.max_epochs > self.push_start_epoch && !(self.max_epochs - self.push_start_epoch).is_multiple_of(self.push_every) {
            warnings.push(format!(
                "push_every {} does not divide the {} epochs after push_start_epoch {}",
                self.push_every,
                self.max_epochs - self.push_start_epoch,
                self.push_start_epoch
            ));
        }
        Ok(warnings)
    }

    pub fn prototypes_active(&self, epoch: usize) -> bool {
        self.ablation.learns_prototypes() && epoch >= self.push_start_epoch
    }

    pub fn is_push_epoch(&self, epoch: usize) -> bool {
        self.prototypes_active(epoch) && (epoch - self.push_start_epoch).is_multiple_of(self.push_every)
    }

    pub fn loss_weights(&self, epoch: usize) -> LossWeights {
        LossWeights {
            recon: self.lambda_recon,
            proto: self.lambda_proto,
            sep_inner: self.lambda_sep_inner,
            prototypes: self.prototypes_active(epoch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(TrainConfig::default().validate().unwrap().is_empty());
    }

    #[test]
    fn all_errors_listed() {
        let cfg = TrainConfig {
            lr_params: -1.0,
            batch_size: 0,
            attr_label_fraction: 1.5,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(e)) => assert_eq!(e.len(), 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        let pushes: Vec<usize> = (0..130).filter(|&e| cfg.is_push_epoch(e)).collect();
        assert_eq!(pushes, vec![100, 110, 120]);
        let cfg = TrainConfig {
            ablation: Ablation::WoLearn,
            ..cfg
        };
        assert!(!(0..1000).any(|e| cfg.prototypes_active(e)));
        let odd = TrainConfig {
            max_epochs: 105,
            ..TrainConfig::default()
        };
        assert_eq!(odd.validate().unwrap().len(), 1);
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("w/o_use".parse::<Ablation>().unwrap(), Ablation::WoUse);
        let json: TrainConfig = serde_json::from_str(r#"{"ablation":"wo_learn","seed":4}"#).unwrap();
        assert_eq!((json.ablation, json.seed, json.batch_size), (Ablation::WoLearn, 4, 128));
    }
}
