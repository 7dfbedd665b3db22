use serde::{Deserialize, Serialize};

use crate::autoregressor::{ArConfig, Directional, MaskPattern, MultiFusion, DEFAULT_BLOCKS};
use crate::cpc::{CpcConfig, MaskKind, DEFAULT_CONTEXT_ROWS};
use crate::encoder::{EncoderConfig, EncoderFamily};
use crate::error::{bail, Result};
use crate::patching::PatchGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub patience: usize,
    pub seed: u64,
    pub directional: Directional,
    pub mask_kind: MaskKind,
    pub subset_size: Option<usize>,
    pub negatives: usize,
    pub augment: bool,
    /// Fraction of train carved out for validation when a store has no
    /// validation split.
    pub validation_fraction: f64,
}

impl TrainConfig {
    /// lr 1e-4, batch 16, 20 epochs, 16 negatives.
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            patience: 5,
            seed: 0,
            directional: Directional::Multi,
            mask_kind: MaskKind::Infill,
            subset_size: None,
            negatives: 16,
            augment: true,
            validation_fraction: 0.2,
        }
    }

    /// lr 1e-4, batch 64, 50 epochs.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 64,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.phase == Phase::Pretrain && self.batch_size < 2 {
            bail!(Config, "pretraining needs batches of at least 2 images for negatives");
        }
        if self.phase == Phase::Pretrain && self.negatives == 0 {
            bail!(Config, "pretraining needs at least one negative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!(Config, "validation fraction {} outside (0, 1)", self.validation_fraction);
        }
        Ok(())
    }
}

/// Architecture settings shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stride: usize,
    pub context_rows: usize,
    pub ar_kernel: usize,
    pub ar_blocks: usize,
    pub fusion: MultiFusion,
    pub share_branch_weights: bool,
    /// Standard deviation of the prediction maps at initialisation;
    /// `None` means `0.01 / sqrt(D)`.
    pub head_init_std: Option<f64>,
    pub hidden: usize,
}

impl ModelConfig {
    /// ResNeXt-101 encoder on 24-pixel patches with stride 12, D = 128.
    pub fn full_scale() -> Self {
        let geom = PatchGeometry::full_scale();
        Self {
            encoder: EncoderConfig {
                family: EncoderFamily::Resnext101,
                patch_size: geom.patch_size,
                ..EncoderConfig::default()
            },
            stride: geom.stride,
            context_rows: DEFAULT_CONTEXT_ROWS,
            ar_kernel: 3,
            ar_blocks: DEFAULT_BLOCKS,
            fusion: MultiFusion::Streams,
            share_branch_weights: false,
            head_init_std: None,
            hidden: 256,
        }
    }

    /// Toy CNN on 8-pixel patches with stride 4, D = 16.
    pub fn desk() -> Self {
        let geom = PatchGeometry::desk();
        Self {
            encoder: EncoderConfig::toy(16, geom.patch_size, 16),
            stride: geom.stride,
            ..Self::full_scale()
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            patch_size: self.encoder.patch_size,
            stride: self.stride,
        }
    }

    pub fn cpc_config(&self, train: &TrainConfig, image_size: usize) -> CpcConfig {
        let d = self.encoder.latent_dim;
        CpcConfig {
            encoder: self.encoder.clone(),
            autoregressor: ArConfig {
                directional: train.directional,
                channels: d,
                kernel: self.ar_kernel,
                blocks: self.ar_blocks,
                pattern: MaskPattern::Standard,
                fusion: self.fusion,
                share_branch_weights: self.share_branch_weights,
                residual: true,
            },
            mask: train.mask_kind,
            context_rows: self.context_rows,
            image_size,
            stride: self.stride,
            negatives: train.negatives,
            head_init_std: self.head_init_std.unwrap_or(0.01 / (d as f64).sqrt()),
        }
    }
}
