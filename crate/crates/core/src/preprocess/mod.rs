//! Resampling, bias correction and intensity normalisation.

mod filter;
mod n4;
mod resample;

use serde::{Deserialize, Serialize};

pub use filter::{gaussian_blur, gaussian_kernel, zscore_normalize};
pub use n4::{n4_bias_correct, BiasField, SharpenConfig};
pub use resample::{resample_isotropic, resample_to_reference, Interp};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    Zscore,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub n4_iterations: usize,
    pub n4_convergence_tol: f64,
    pub n4_control_spacing_mm: f64,
    pub blur_sigma_px: f64,
    pub normalize: Normalize,
    pub sharpen: SharpenConfig,
    /// Run N4 at all; switching it off is only useful for debugging.
    pub n4: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [1.0, 1.0, 1.0],
            n4_iterations: 50,
            n4_convergence_tol: 1e-3,
            n4_control_spacing_mm: 40.0,
            blur_sigma_px: 1.0,
            normalize: Normalize::Zscore,
            sharpen: SharpenConfig::default(),
            n4: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidConfig("target_spacing must be > 0".into()));
        }
        if self.n4_iterations < 1 {
            return Err(Error::InvalidConfig("n4_iterations must be >= 1".into()));
        }
        if !(self.blur_sigma_px >= 0.0) {
            return Err(Error::InvalidConfig("blur_sigma_px must be >= 0".into()));
        }
        if !(self.n4_control_spacing_mm > 0.0) {
            return Err(Error::InvalidConfig("n4_control_spacing_mm must be > 0".into()));
        }
        Ok(())
    }
}
