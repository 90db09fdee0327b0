//! Losses, optimizer, model initialization, and the training loop.

pub mod fit;
pub mod init;
pub mod loss;
pub mod optim;

pub use fit::{evaluate, fit, initialize, EvalReport, FrameScore, StepRecord};
pub use init::{init_from_template, INIT_OPACITY};
pub use loss::{
    dssim_loss, dssim_loss_backward, l1_loss, l1_loss_backward, psnr, ssim, total_loss,
    total_loss_with_grad, LossConfig, PSNR_CAP,
};
pub use optim::{renormalize_quaternions, Adam, AdamMoments};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldBankConfig;
use crate::render::ShSource;

/// Fixed per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub centers: f64,
    pub rotations: f64,
    pub log_scales: f64,
    pub opacities: f64,
    pub joints: f64,
    pub hash_tables: f64,
    pub mlps: f64,
    pub atlas: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            centers: 2e-4,
            rotations: 1e-3,
            log_scales: 5e-3,
            opacities: 5e-2,
            joints: 1e-4,
            hash_tables: 1e-2,
            mlps: 1e-3,
            atlas: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.centers,
            self.rotations,
            self.log_scales,
            self.opacities,
            self.joints,
            self.hash_tables,
            self.mlps,
            self.atlas,
        ];
        if all.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the training loop needs beyond the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rates: LearningRates,
    pub epochs: usize,
    /// First 1-based epoch in which the brightness field trains; before it
    /// the factor is pinned to 1 and its parameters stay untouched.
    pub ao_start_epoch: usize,
    /// Master switch; `false` keeps the brightness factor at 1 forever.
    pub ao_enabled: bool,
    pub sh_source: ShSource,
    pub loss: LossConfig,
    /// Sizes of the hash grids and their decoders for a fresh avatar.
    pub field_config: FieldBankConfig,
    /// Side length of a fresh appearance texture (uv mode only).
    pub atlas_size: usize,
    /// Extra points sampled around each template vertex at initialization.
    pub upsampling: usize,
    /// Radius of the sampling ball around each vertex, in meters.
    pub init_radius: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rates: LearningRates::default(),
            epochs: 10,
            ao_start_epoch: 5,
            ao_enabled: true,
            sh_source: ShSource::Field,
            loss: LossConfig::default(),
            field_config: FieldBankConfig::default(),
            atlas_size: 256,
            upsampling: 20,
            init_radius: 0.02,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        self.loss.validate()?;
        self.field_config.validate()?;
        if self.ao_start_epoch < 1 {
            return Err(Error::Config(
                "the brightness schedule counts epochs from 1".into(),
            ));
        }
        if self.atlas_size == 0 {
            return Err(Error::Config("atlas size must be positive".into()));
        }
        if !(self.init_radius > 0.0) {
            return Err(Error::Config("initialization radius must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_train_config_is_valid_and_matches_published_schedule() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.ao_start_epoch, 5);
        assert_eq!(cfg.upsampling, 20);
        assert_eq!(cfg.loss.lambda, 0.2);
    }

    #[test]
    fn invalid_train_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.ao_start_epoch = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.rates.centers = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.init_radius = -1.0;
        assert!(cfg.validate().is_err());
    }
}
