//! Training configuration, dataset profiles and the learning-rate schedule.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AgmError, Result};
use crate::imaging::AugmentPolicy;
pub use crate::kv::KeyValues;
use crate::losses::LossConfig;

/// Which of the four image-space regimes feeds the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgmMode {
    /// Visible and infrared images as captured.
    #[serde(rename = "rgb-ir")]
    RgbIr,
    /// Infrared images translated to grayscale, visible untouched.
    #[serde(rename = "rgb-ir+gn")]
    RgbIrGn,
    /// Visible images converted to grayscale, infrared untouched.
    #[serde(rename = "gray-ir")]
    GrayIr,
    /// Both modalities projected into grayscale.
    #[serde(rename = "gray-ir+gn")]
    GrayIrGn,
}

impl AgmMode {
    pub fn grays_visible(self) -> bool {
        matches!(self, AgmMode::GrayIr | AgmMode::GrayIrGn)
    }

    pub fn needs_gn(self) -> bool {
        matches!(self, AgmMode::RgbIrGn | AgmMode::GrayIrGn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgmMode::RgbIr => "rgb-ir",
            AgmMode::RgbIrGn => "rgb-ir+gn",
            AgmMode::GrayIr => "gray-ir",
            AgmMode::GrayIrGn => "gray-ir+gn",
        }
    }
}

impl fmt::Display for AgmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgmMode {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb-ir" | "baseline" => Ok(AgmMode::RgbIr),
            "rgb-ir+gn" => Ok(AgmMode::RgbIrGn),
            "gray-ir" => Ok(AgmMode::GrayIr),
            "gray-ir+gn" | "agm" => Ok(AgmMode::GrayIrGn),
            other => Err(AgmError::Config(format!(
                "unknown mode {other:?}; expected rgb-ir, rgb-ir+gn, gray-ir or gray-ir+gn (agm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Global and head-shoulder encoders with a fused joint embedding.
    TwoStream,
    /// Global encoder alone, trained with identity CE and triplet loss.
    GlobalOnly,
}

impl FromStr for BranchMode {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "two_stream" => Ok(BranchMode::TwoStream),
            "global_only" => Ok(BranchMode::GlobalOnly),
            other => Err(AgmError::Config(format!(
                "unknown branches value {other:?}; expected two_stream or global_only"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Many-camera benchmark settings: ω = 1.0, 80 epochs, full resolution.
    Sysu,
    /// Paired-camera benchmark settings: ω = 0.7.
    Regdb,
    /// Synthetic-fixture settings sized for a desktop CPU.
    Desk,
}

impl FromStr for Profile {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sysu" => Ok(Profile::Sysu),
            "regdb" => Ok(Profile::Regdb),
            "desk" => Ok(Profile::Desk),
            other => Err(AgmError::Config(format!("unknown profile {other:?}; expected sysu, regdb or desk"))),
        }
    }
}

/// Piecewise learning-rate schedule: linear warm-up from `lr_start` to
/// `lr_peak` over `[0, warmup_end)`, then `lr_peak` until `plateau_end`,
/// `lr_mid` until `decay_end` and `lr_final` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_end: usize,
    pub plateau_end: usize,
    pub decay_end: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_mid: f64,
    pub lr_final: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup_end: 10,
            plateau_end: 20,
            decay_end: 50,
            lr_start: 0.01,
            lr_peak: 0.1,
            lr_mid: 0.01,
            lr_final: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub total_epochs: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity in a batch.
    pub k: usize,
    pub loss: LossConfig,
    pub mode: AgmMode,
    pub branches: BranchMode,
    pub gan_checkpoint: Option<PathBuf>,
    pub global_size: (usize, usize),
    pub head_size: (usize, usize),
    /// Output channels of each encoder.
    pub channels: usize,
    /// One GeM exponent per channel instead of a shared one.
    pub per_channel_gem: bool,
    pub freeze_head_shoulder: bool,
    /// Include the joint identity and joint triplet terms.
    pub joint_losses: bool,
    /// Three updates per batch in the order of the published algorithm
    /// listing instead of one update on the summed objective.
    pub sequential_updates: bool,
    pub augment: AugmentPolicy,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Sysu)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = TrainConfig {
            profile,
            total_epochs: 80,
            schedule: Schedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 16,
            k: 4,
            loss: LossConfig::default(),
            mode: AgmMode::GrayIrGn,
            branches: BranchMode::TwoStream,
            gan_checkpoint: None,
            global_size: (288, 144),
            head_size: (128, 144),
            channels: 128,
            per_channel_gem: false,
            freeze_head_shoulder: false,
            joint_losses: true,
            sequential_updates: false,
            augment: AugmentPolicy::default(),
            bn_momentum: 0.1,
            seed: 0,
        };
        match profile {
            Profile::Sysu => base,
            Profile::Regdb => TrainConfig {
                loss: LossConfig::regdb(),
                ..base
            },
            // Quarter resolution and a quarter of the epochs, anchors scaled
            // and rounded half up.
            Profile::Desk => TrainConfig {
                total_epochs: 20,
                schedule: Schedule {
                    warmup_end: 3,
                    plateau_end: 5,
                    decay_end: 13,
                    ..Schedule::default()
                },
                global_size: (72, 36),
                head_size: (32, 36),
                augment: AugmentPolicy {
                    crop_padding: 3,
                    ..AugmentPolicy::default()
                },
                ..base
            },
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.warmup_end <= s.plateau_end && s.plateau_end <= s.decay_end) {
            return Err(AgmError::Config(format!(
                "schedule anchors must be ordered, got {} / {} / {}",
                s.warmup_end, s.plateau_end, s.decay_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(AgmError::Config("total_epochs must be positive".into()));
        }
        for (name, v) in [
            ("lr_start", s.lr_start),
            ("lr_peak", s.lr_peak),
            ("lr_mid", s.lr_mid),
            ("lr_final", s.lr_final),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AgmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(AgmError::Config(format!(
                "momentum must lie in [0,1) and weight decay be non-negative, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(AgmError::Config(format!("need P ≥ 2 and K ≥ 2, got P={} K={}", self.p, self.k)));
        }
        if self.channels < 8 || self.channels % 8 != 0 {
            return Err(AgmError::Config(format!(
                "channels must be a positive multiple of 8, got {}",
                self.channels
            )));
        }
        let (gh, gw) = self.global_size;
        let (hh, hw) = self.head_size;
        if gh < 3 || gw == 0 || hh == 0 || hw == 0 {
            return Err(AgmError::Config(format!(
                "input sizes {gh}x{gw} and {hh}x{hw} are degenerate"
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(AgmError::Config(format!("bn_momentum must lie in [0,1], got {}", self.bn_momentum)));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies every recognised key of `kv`; unknown keys are left for
    /// other consumers.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(p) = kv.get_parsed::<Profile>("profile")? {
            // A profile resets everything beneath it, so it goes first.
            let seed = self.seed;
            *self = TrainConfig::for_profile(p);
            self.seed = seed;
        }
        let s = &mut self.schedule;
        kv.set(&mut self.total_epochs, "epochs")?;
        kv.set(&mut s.warmup_end, "warmup_end")?;
        kv.set(&mut s.plateau_end, "plateau_end")?;
        kv.set(&mut s.decay_end, "decay_end")?;
        kv.set(&mut s.lr_start, "lr_start")?;
        kv.set(&mut s.lr_peak, "lr_peak")?;
        kv.set(&mut s.lr_mid, "lr_mid")?;
        kv.set(&mut s.lr_final, "lr_final")?;
        kv.set(&mut self.momentum, "momentum")?;
        kv.set(&mut self.weight_decay, "weight_decay")?;
        kv.set(&mut self.p, "p")?;
        kv.set(&mut self.k, "k")?;
        if let Some(b) = kv.get_parsed::<usize>("batch_size")? {
            if self.k == 0 || b % self.k != 0 {
                return Err(AgmError::Config(format!("batch_size {b} is not a multiple of K={}", self.k)));
            }
            self.p = b / self.k;
        }
        kv.set(&mut self.loss.xi, "xi")?;
        kv.set(&mut self.loss.epsilon, "epsilon")?;
        kv.set(&mut self.loss.omega, "omega")?;
        kv.set(&mut self.loss.lambda3, "lambda3")?;
        kv.set(&mut self.loss.lambda4, "lambda4")?;
        kv.set(&mut self.mode, "mode")?;
        kv.set(&mut self.branches, "branches")?;
        if let Some(p) = kv.get("gan_ckpt") {
            self.gan_checkpoint = if p.is_empty() { None } else { Some(PathBuf::from(p)) };
        }
        kv.set(&mut self.global_size.0, "global_height")?;
        kv.set(&mut self.global_size.1, "global_width")?;
        kv.set(&mut self.head_size.0, "head_height")?;
        kv.set(&mut self.head_size.1, "head_width")?;
        kv.set(&mut self.channels, "channels")?;
        kv.set(&mut self.per_channel_gem, "per_channel_gem")?;
        kv.set(&mut self.freeze_head_shoulder, "freeze_head_shoulder")?;
        kv.set(&mut self.joint_losses, "joint_losses")?;
        kv.set(&mut self.sequential_updates, "sequential_updates")?;
        kv.set(&mut self.augment.crop_padding, "crop_padding")?;
        kv.set(&mut self.augment.erase_probability, "erase_probability")?;
        kv.set(&mut self.bn_momentum, "bn_momentum")?;
        kv.set(&mut self.seed, "seed")?;
        Ok(())
    }
}

/// Keys understood by [`TrainConfig::apply`].
pub const TRAIN_KEYS: &[&str] = &[
    "profile",
    "epochs",
    "warmup_end",
    "plateau_end",
    "decay_end",
    "lr_start",
    "lr_peak",
    "lr_mid",
    "lr_final",
    "momentum",
    "weight_decay",
    "p",
    "k",
    "batch_size",
    "xi",
    "epsilon",
    "omega",
    "lambda3",
    "lambda4",
    "mode",
    "branches",
    "gan_ckpt",
    "global_height",
    "global_width",
    "head_height",
    "head_width",
    "channels",
    "per_channel_gem",
    "freeze_head_shoulder",
    "joint_losses",
    "sequential_updates",
    "crop_padding",
    "erase_probability",
    "bn_momentum",
    "seed",
];

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(AgmError::Precondition(format!(
            "epoch {epoch} outside the {}-epoch schedule",
            cfg.total_epochs
        )));
    }
    let s = &cfg.schedule;
    Ok(if epoch < s.warmup_end {
        s.lr_start + (s.lr_peak - s.lr_start) * epoch as f64 / s.warmup_end as f64
    } else if epoch < s.plateau_end {
        s.lr_peak
    } else if epoch < s.decay_end {
        s.lr_mid
    } else {
        s.lr_final
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.01);
        assert_eq!(lr_at(15, &cfg).unwrap(), 0.1);
        assert!((lr_at(5, &cfg).unwrap() - 0.055).abs() < 1e-15);
        assert_eq!(lr_at(10, &cfg).unwrap(), 0.1);
        assert!(lr_at(80, &cfg).is_err());
    }

    #[test]
    fn key_values_override_defaults_and_reject_garbage() {
        let kv = KeyValues::parse("# comment\nepochs = 4\nmode=agm\nbatch_size=8 # trailing\nlambda4=0.5\n").unwrap();
        let mut cfg = TrainConfig::for_profile(Profile::Desk);
        cfg.apply(&kv).unwrap();
        assert_eq!((cfg.total_epochs, cfg.p, cfg.k), (4, 2, 4));
        assert_eq!(cfg.mode, AgmMode::GrayIrGn);
        assert_eq!(cfg.loss.lambda4, 0.5);

        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let bad = KeyValues::parse("epochs=many").unwrap();
        assert!(matches!(cfg.apply(&bad), Err(AgmError::Config(_))));
        assert!(KeyValues::parse("typo_key=1").unwrap().check_known(TRAIN_KEYS).is_err());
    }

    #[test]
    fn profile_key_resets_to_profile_defaults() {
        let kv = KeyValues::parse("omega=0.2\nprofile=regdb").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.loss.omega, 0.2);
        let kv = KeyValues::parse("profile=regdb").unwrap();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.loss.omega, 0.7);
    }

    #[test]
    fn validation_catches_unordered_anchors() {
        let mut cfg = TrainConfig::for_profile(Profile::Desk);
        cfg.validate().unwrap();
        cfg.schedule.plateau_end = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
