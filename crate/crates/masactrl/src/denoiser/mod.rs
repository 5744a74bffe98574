//! Toy conditional denoising U-Net.
//!
//! Each attention-bearing basic block is residual block → self-attention →
//! cross-attention. Attention layers carry dense global indices in forward
//! execution order, partitioned into encoder / middle / decoder sections;
//! the edit gate addresses layers by these indices, mirroring the
//! `layer 10∼15 ≙ decoder` numbering convention of SD-scale backbones.

mod model;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::real::Real;

pub use model::{Denoiser, UNetTape};

/// Structural configuration of the toy U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Per-resolution-level width multipliers; level i runs at
    /// `image_size >> i` with `base_channels * multiplier[i]` channels.
    pub channel_multipliers: Vec<usize>,
    /// Resolutions whose blocks carry self- + cross-attention.
    pub attention_resolutions: Vec<usize>,
    pub blocks_per_level: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    /// Fixed (padded) prompt length N.
    pub max_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            attention_resolutions: vec![16, 8],
            blocks_per_level: 2,
            heads: 4,
            vocab_size: 16,
            token_embed_dim: 32,
            max_tokens: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(level))
    }

    /// Head dimension at an attention-bearing level (width / heads).
    pub fn head_dim(&self, level: usize) -> usize {
        self.width(level) / self.heads
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn norm_groups(&self) -> usize {
        self.base_channels.min(8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::config("channel_multipliers must be non-empty"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::config("blocks_per_level must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        let levels = self.levels();
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible across {} resolution levels",
                self.image_size, levels
            )));
        }
        if self.base_channels % self.norm_groups() != 0 {
            return Err(Error::config(format!(
                "base_channels {} not divisible by {} norm groups",
                self.base_channels,
                self.norm_groups()
            )));
        }
        let level_res: Vec<usize> = (0..levels).map(|l| self.resolution(l)).collect();
        for &ar in &self.attention_resolutions {
            if self.image_size % ar != 0 {
                return Err(Error::config(format!(
                    "attention resolution {ar} does not divide image_size {}",
                    self.image_size
                )));
            }
            let Some(level) = level_res.iter().position(|&r| r == ar) else {
                return Err(Error::config(format!(
                    "attention resolution {ar} matches no level (levels run at {level_res:?})"
                )));
            };
            if self.width(level) % self.heads != 0 {
                return Err(Error::config(format!(
                    "width {} at attention resolution {ar} not divisible into {} heads",
                    self.width(level),
                    self.heads
                )));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab needs at least PAD plus one token"));
        }
        if self.max_tokens == 0 || self.token_embed_dim == 0 {
            return Err(Error::config("prompt dimensions must be positive"));
        }
        Ok(())
    }

    /// The attention-layer registry implied by this config, in forward
    /// execution order.
    pub fn registry(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let push_pair = |out: &mut Vec<LayerInfo>, resolution: usize, section: Section| {
            let index = out.len();
            out.push(LayerInfo {
                index,
                kind: LayerKind::SelfAttention,
                resolution,
                section,
            });
            out.push(LayerInfo {
                index: index + 1,
                kind: LayerKind::CrossAttention,
                resolution,
                section,
            });
        };
        for level in 0..self.levels() {
            if self.has_attention(level) {
                for _ in 0..self.blocks_per_level {
                    push_pair(&mut out, self.resolution(level), Section::Encoder);
                }
            }
        }
        let deepest = self.levels() - 1;
        if self.has_attention(deepest) {
            push_pair(&mut out, self.resolution(deepest), Section::Middle);
        }
        for level in (0..self.levels()).rev() {
            if self.has_attention(level) {
                for _ in 0..self.blocks_per_level {
                    push_pair(&mut out, self.resolution(level), Section::Decoder);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SelfAttention,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Encoder,
    Middle,
    Decoder,
}

/// One attention layer in the global registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    /// Global index, dense in forward execution order.
    pub index: usize,
    pub kind: LayerKind,
    /// Side length of the attention grid at this layer.
    pub resolution: usize,
    pub section: Section,
}

/// Fixed-length, padded token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
}

impl PromptTokens {
    pub fn new(ids: Vec<u32>) -> Self {
        PromptTokens { ids }
    }
}

/// Embedded prompt: one row per token slot (lookup + learned position).
#[derive(Debug, Clone)]
pub struct PromptEmbedding<F> {
    pub tokens: Vec<u32>,
    pub emb: Array2<F>,
}

/// Precomputed feature maps added to encoder features at matching
/// resolutions (the spatial-conditioning hook). Adapter training is out of
/// scope; maps arrive ready-made.
#[derive(Debug, Clone)]
pub struct SpatialCondition<F> {
    maps: BTreeMap<usize, Array3<F>>,
}

impl<F: Real> SpatialCondition<F> {
    pub fn new() -> Self {
        SpatialCondition {
            maps: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, resolution: usize, map: Array3<F>) {
        self.maps.insert(resolution, map);
    }

    pub fn at(&self, resolution: usize) -> Option<&Array3<F>> {
        self.maps.get(&resolution)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.maps.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

impl<F: Real> Default for SpatialCondition<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 16,
            ..Default::default()
        }
    }

    #[test]
    fn default_registry_spans_sections_with_decoder_at_ten() {
        let reg = toy().registry();
        assert_eq!(reg.len(), 18);
        assert_eq!(reg[0].index, 0);
        assert_eq!(reg[0].kind, LayerKind::SelfAttention);
        assert_eq!(reg[0].section, Section::Encoder);
        assert_eq!(reg[1].kind, LayerKind::CrossAttention);
        assert_eq!(reg.last().unwrap().section, Section::Decoder);
        // Indices dense and increasing.
        for (i, l) in reg.iter().enumerate() {
            assert_eq!(l.index, i);
        }
        // Every self-attention layer is immediately followed by its paired
        // cross-attention layer at the same resolution.
        for pair in reg.chunks(2) {
            assert_eq!(pair[0].kind, LayerKind::SelfAttention);
            assert_eq!(pair[1].kind, LayerKind::CrossAttention);
            assert_eq!(pair[0].resolution, pair[1].resolution);
            assert_eq!(pair[0].section, pair[1].section);
        }
        let decoder_start = reg
            .iter()
            .find(|l| l.section == Section::Decoder)
            .unwrap()
            .index;
        assert_eq!(decoder_start, 10);
        // Both kinds at both attention resolutions.
        for res in [16usize, 8] {
            assert!(reg
                .iter()
                .any(|l| l.resolution == res && l.kind == LayerKind::SelfAttention));
            assert!(reg
                .iter()
                .any(|l| l.resolution == res && l.kind == LayerKind::CrossAttention));
        }
        // Middle sits between encoder and decoder.
        assert_eq!(reg[8].section, Section::Middle);
        assert_eq!(reg[9].section, Section::Middle);
    }

    #[test]
    fn registry_count_follows_block_arithmetic() {
        let cfg = toy();
        // Attention-bearing blocks: 2 per attention level in the encoder,
        // 1 in the middle, 2 per attention level in the decoder.
        let attn_levels = (0..cfg.levels()).filter(|&l| cfg.has_attention(l)).count();
        let deepest_attn = cfg.has_attention(cfg.levels() - 1) as usize;
        let blocks = attn_levels * cfg.blocks_per_level * 2 + deepest_attn;
        assert_eq!(cfg.registry().len(), 2 * blocks);
    }

    #[test]
    fn validation_catches_inconsistencies() {
        assert!(toy().validate().is_ok());
        let mut bad = toy();
        bad.attention_resolutions = vec![12];
        assert!(bad.validate().is_err());
        let mut bad = toy();
        bad.heads = 5; // 32 % 5 != 0 at resolution 16
        assert!(bad.validate().is_err());
        let mut bad = toy();
        bad.channel_multipliers = vec![];
        assert!(bad.validate().is_err());
        let mut bad = toy();
        bad.image_size = 10;
        assert!(bad.validate().is_err());
    }
}
