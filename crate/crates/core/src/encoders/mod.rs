//! Miniature CLIP-style dual encoders.
//!
//! A closed-vocabulary text transformer and a patch-based vision transformer
//! share a joint embedding space: the text feature is the end-token row, the
//! image feature the class-token row, each linearly projected to the joint
//! width. Both towers accept optional per-layer prompts that replace the
//! leading sequence rows at every block (deep prompting).

pub mod tokenizer;
pub mod towers;

pub use tokenizer::{tokenize, TokenSequence, Vocab, EOS_ID, PAD_ID};
pub use towers::{
    block_forward, BoundBlock, BoundText, BoundVision, TextTower, TransformerBlock, VisionTower,
};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Widths, depths, and sequence-geometry knobs shared by both towers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Transformer depth L of each tower.
    pub layers: usize,
    pub heads: usize,
    /// Text tower width.
    pub d_t: usize,
    /// Vision tower width.
    pub d_v: usize,
    /// Joint embedding width both towers project into.
    pub d_joint: usize,
    pub vocab_size: usize,
    /// Token-sequence length, end token and padding included.
    pub max_text_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Prompt tokens m injected per layer.
    pub prompt_len: usize,
    pub channels: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: small enough that full training runs and
    /// gradient checks complete in seconds on one CPU core.
    pub fn desk() -> EncoderConfig {
        EncoderConfig {
            layers: 8,
            heads: 2,
            d_t: 32,
            d_v: 48,
            d_joint: 32,
            vocab_size: 40,
            max_text_len: 8,
            image_size: 32,
            patch_size: 8,
            prompt_len: 4,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers < 2 {
            return fail(format!("layers must be at least 2, got {}", self.layers));
        }
        if self.prompt_len == 0 {
            return fail("prompt_len must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be at least 1".into());
        }
        if self.d_t % self.heads != 0 || self.d_v % self.heads != 0 {
            return fail(format!(
                "widths d_t={} d_v={} must be divisible by heads={}",
                self.d_t, self.d_v, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_joint == 0 {
            return fail("d_joint must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail(format!(
                "vocab_size must cover the pad and end tokens, got {}",
                self.vocab_size
            ));
        }
        if self.max_text_len == 0 {
            return fail("max_text_len must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        Ok(())
    }

    /// Patch count n per image.
    pub fn n_patches(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        grid * grid
    }

    /// Flattened pixel count per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Square multi-channel image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != size * size * channels {
            return Err(Error::dim(
                "image buffer",
                &[size, size, channels],
                &[data.len()],
            ));
        }
        Ok(Image { size, channels, data })
    }

    pub fn zeros(size: usize, channels: usize) -> Image {
        Image {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.size + x) * self.channels + c]
    }
}

/// Value-level view of an embedded image: class-token row first, then one
/// row per patch, positional embeddings included.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub tokens: Tensor,
}
