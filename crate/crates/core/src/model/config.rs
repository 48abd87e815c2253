use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Which parts of the architecture are active. Everything except `Full`
/// exists for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Prototype compensation replaced by the identity: `I = F`, no
    /// consistency terms.
    NoPicm,
    /// Frequency interaction blocks replaced by independent per-modality
    /// 3x3 conv + relu blocks.
    NoFim,
}

/// Which input rasters reach the network. The others are replaced by zeros,
/// giving single-modality baselines with an unchanged architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inputs {
    #[default]
    Both,
    HsiOnly,
    AuxOnly,
}

/// Architecture hyperparameters. The token count is always `patch²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Principal components kept from the hyperspectral cube.
    pub n_pca: usize,
    /// Patch side length.
    pub patch: usize,
    /// Number of stacked frequency interaction blocks.
    pub n_fim: usize,
    /// Hyperspectral feature channels inside the encoder.
    pub c_h: usize,
    /// SAR/LiDAR feature channels inside the encoder.
    pub c_x: usize,
    /// Token width after the encoder.
    pub d_model: usize,
    pub n_classes: usize,
    /// Input channels of the SAR/LiDAR raster.
    pub aux_channels: usize,
    /// Weight of the SAR/LiDAR-side consistency term.
    pub lambda1: f64,
    /// Weight of the hyperspectral-side consistency term.
    pub lambda2: f64,
    /// Channel-attention bottleneck ratio.
    pub se_reduction: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub inputs: Inputs,
}

/// Default weight of both consistency terms.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Feature maps produced by the 3-D hyperspectral stem before the spectral
/// axis is folded into channels.
pub const HSI_STEM_MAPS: usize = 4;

impl ModelConfig {
    pub fn new(n_classes: usize, aux_channels: usize) -> Self {
        ModelConfig {
            n_pca: 30,
            patch: 14,
            n_fim: 4,
            c_h: 32,
            c_x: 32,
            d_model: 64,
            n_classes,
            aux_channels,
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            se_reduction: 4,
            variant: Variant::Full,
            inputs: Inputs::Both,
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fim == 0 {
            return Err(config_err!("n_fim must be at least 1"));
        }
        if self.patch < 4 || self.patch % 2 != 0 {
            return Err(config_err!(
                "patch size must be even and at least 4, got {}",
                self.patch
            ));
        }
        if self.se_reduction == 0 {
            return Err(config_err!("se_reduction must be at least 1"));
        }
        for (name, v) in [("c_h", self.c_h), ("c_x", self.c_x), ("d_model", self.d_model)] {
            if v == 0 || v % self.se_reduction != 0 {
                return Err(config_err!(
                    "{name} = {v} must be a positive multiple of se_reduction = {}",
                    self.se_reduction
                ));
            }
        }
        if self.c_h != self.c_x {
            return Err(config_err!(
                "parameter-free frequency fusion needs c_h == c_x, got {} and {}",
                self.c_h,
                self.c_x
            ));
        }
        if self.n_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_pca == 0 || self.aux_channels == 0 {
            return Err(config_err!(
                "n_pca ({}) and aux_channels ({}) must be positive",
                self.n_pca,
                self.aux_channels
            ));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}
