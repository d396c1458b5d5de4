//! The three transformer encoders (language, vision, fusion) and the heads
//! that read their outputs.

mod layers;
mod model;
mod params;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

pub use layers::{AttentionKind, AttentionRecord};
pub use model::{Side, XfmModel};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
/// Ids below this value are special tokens.
pub const NUM_SPECIAL: u32 = 3;

/// Layer counts and geometry of the three encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub text_layers: usize,
    pub vision_layers: usize,
    pub fusion_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub projection_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_layers: 2,
            vision_layers: 2,
            fusion_layers: 2,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            vocab_size: 64,
            max_text_len: 16,
            image_side: 32,
            patch_side: 4,
            channels: 3,
            projection_dim: 32,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.text_layers == 0 || self.vision_layers == 0 || self.fusion_layers == 0 {
            return fail("every encoder needs at least one layer");
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail("hidden_dim must be divisible by heads");
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return fail("image_side must be divisible by patch_side");
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return fail("vocab_size must exceed the special-token count");
        }
        if self.max_text_len < 2 || self.projection_dim == 0 || self.channels == 0 {
            return fail("max_text_len >= 2, projection_dim >= 1 and channels >= 1 required");
        }
        if !(self.mlp_ratio > 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("mlp_ratio and layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patch count plus the [CLS] position.
    pub fn vision_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn ffn_dim(&self) -> usize {
        ((self.hidden_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Token ids with position 0 holding [CLS]. `attention_mask[i]` is false at
/// padding positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    /// Prepends [CLS] to `words` with no padding.
    pub fn from_word_ids(words: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(CLS_ID);
        ids.extend_from_slice(words);
        let attention_mask = vec![true; ids.len()];
        Self { ids, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn valid_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut s = self.clone();
        while s.ids.len() < len {
            s.ids.push(PAD_ID);
            s.attention_mask.push(false);
        }
        s
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() != self.attention_mask.len() {
            return Err(Error::InvalidArgument("token ids and mask must be non-empty and aligned".into()));
        }
        if self.ids.len() > config.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_text_len {}",
                self.ids.len(),
                config.max_text_len
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab: config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Sequences padded to a common length, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TextBatch {
    pub fn new(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty text batch".into()));
        }
        let seq_len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut valid = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let p = s.padded_to(seq_len);
            ids.extend(p.ids);
            valid.extend(p.attention_mask);
        }
        Ok(Self {
            ids,
            valid,
            batch: seqs.len(),
            seq_len,
        })
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.seq_len > config.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_text_len {}",
                self.seq_len, config.max_text_len
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab: config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Square image, row-major height x width x channels, values in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side * channels {
            return Err(Error::InvalidArgument(format!(
                "image of side {side} with {channels} channels needs {} values, got {}",
                side * side * channels,
                pixels.len()
            )));
        }
        Ok(Self { side, channels, pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.side + col) * self.channels;
        &self.pixels[i..i + self.channels]
    }
}

/// Where a feature sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Text,
    Vision,
    Fused,
}

/// Per-position hidden vectors `[batch, len, hidden]`.
#[derive(Clone, Debug)]
pub struct FeatureSequence<'g> {
    pub hidden: Var<'g>,
    /// Non-padding flags, flattened `[batch * len]`; `None` means no padding.
    pub valid: Option<Rc<Vec<bool>>>,
    pub provenance: Provenance,
}

impl<'g> FeatureSequence<'g> {
    pub fn batch(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.shape()[2]
    }

    /// The [CLS] / start-position vectors, `[batch, hidden]`.
    pub fn cls(&self) -> Result<Var<'g>> {
        let (b, d) = (self.batch(), self.hidden_dim());
        self.hidden.slice(1, 0, 1)?.reshape(&[b, d])
    }

    /// Rows at flat positions `batch_index * len + position`, `[n, hidden]`.
    pub fn rows(&self, flat: &[usize]) -> Result<Var<'g>> {
        let (b, n, d) = (self.batch(), self.len(), self.hidden_dim());
        self.hidden.reshape(&[b * n, d])?.gather_rows(flat)
    }

    /// Reorders/duplicates whole sequences along the batch axis.
    pub fn select(&self, items: &[usize]) -> Result<Self> {
        let (n, d) = (self.len(), self.hidden_dim());
        let b = self.batch();
        let hidden = self
            .hidden
            .reshape(&[b, n * d])?
            .gather_rows(items)?
            .reshape(&[items.len(), n, d])?;
        let valid = self.valid.as_ref().map(|v| {
            Rc::new(
                items
                    .iter()
                    .flat_map(|&i| v[i * n..(i + 1) * n].iter().copied())
                    .collect::<Vec<_>>(),
            )
        });
        Ok(Self {
            hidden,
            valid,
            provenance: self.provenance,
        })
    }

    /// Same values, severed from the trace.
    pub fn detach(&self) -> Self {
        Self {
            hidden: self.hidden.detach(),
            valid: self.valid.clone(),
            provenance: self.provenance,
        }
    }

    /// The same values as a constant on another graph.
    pub fn rebind<'h>(&self, graph: &'h crate::autodiff::Graph) -> Result<FeatureSequence<'h>> {
        Ok(FeatureSequence {
            hidden: graph.constant(Tensor::clone(&self.hidden.value()))?,
            valid: self.valid.clone(),
            provenance: self.provenance,
        })
    }

    /// Additive attention bias `[batch, len, len]`: 0 for valid keys and a
    /// large negative value for padding keys.
    pub(crate) fn self_attention_bias(&self) -> Option<Tensor> {
        let valid = self.valid.as_ref()?;
        if valid.iter().all(|&v| v) {
            return None;
        }
        let (b, n) = (self.batch(), self.len());
        let mut data = Vec::with_capacity(b * n * n);
        for i in 0..b {
            for _ in 0..n {
                data.extend(valid[i * n..(i + 1) * n].iter().map(|&v| if v { 0.0 } else { -1e9 }));
            }
        }
        Some(Tensor::from_parts(vec![b, n, n], data))
    }
}
