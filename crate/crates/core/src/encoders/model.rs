use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AttentionKind, EncoderLayer, FusionLayer, LayerNorm, Linear, INIT_STD};
use super::params::{Bound, ParamId, ParamStore};
use super::{EncoderConfig, FeatureSequence, Image, Provenance, TextBatch};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::masking::PatchMaskPlan;

/// Initial contrastive logit scale, `ln(1 / 0.07)`.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778;
/// Clamp range of the log scale; keeps the temperature in `[1e-3, 100]`.
pub const LOGIT_SCALE_RANGE: (f64, f64) = (-4.605_170_185_988_091, 6.907_755_278_982_137);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Text,
    Vision,
}

#[derive(Clone, Debug)]
struct TextEncoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    ln: LayerNorm,
    layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
struct VisionEncoder {
    patch: Linear,
    cls: ParamId,
    mask_token: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
struct Heads {
    itc_text: Linear,
    itc_vision: Linear,
    logit_scale: ParamId,
    itm: Linear,
    bbox: Linear,
    mlm: Linear,
    imlm: Linear,
}

/// Language, vision and fusion encoders plus every task head, with their
/// parameters. Forward passes read parameters through a [`Bound`] so one
/// model can be placed on many graphs.
#[derive(Clone, Debug)]
pub struct XfmModel {
    config: EncoderConfig,
    params: ParamStore,
    text: TextEncoder,
    vision: VisionEncoder,
    pub(super) fusion: Vec<FusionLayer>,
    heads: Heads,
}

impl XfmModel {
    /// Parameters are a pure function of `(config, seed)`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let (d, eps) = (c.hidden_dim, c.layer_norm_eps);

        let text = TextEncoder {
            tok_emb: s.add("text.tok_emb", Tensor::randn(&[c.vocab_size, d], INIT_STD, &mut rng)),
            pos_emb: s.add("text.pos_emb", Tensor::randn(&[c.max_text_len, d], INIT_STD, &mut rng)),
            ln: LayerNorm::new(&mut s, "text.emb_ln", d, eps),
            layers: (0..c.text_layers)
                .map(|i| EncoderLayer::new(&mut s, &format!("text.layer{i}"), c, AttentionKind::TextSelf, &mut rng))
                .collect(),
        };
        let vision = VisionEncoder {
            patch: Linear::new(&mut s, "vision.patch", c.patch_dim(), d, true, &mut rng),
            cls: s.add("vision.cls", Tensor::randn(&[1, d], INIT_STD, &mut rng)),
            mask_token: s.add("vision.mask_token", Tensor::randn(&[d], INIT_STD, &mut rng)),
            pos_emb: s.add("vision.pos_emb", Tensor::randn(&[c.vision_len(), d], INIT_STD, &mut rng)),
            layers: (0..c.vision_layers)
                .map(|i| EncoderLayer::new(&mut s, &format!("vision.layer{i}"), c, AttentionKind::VisionSelf, &mut rng))
                .collect(),
        };
        let fusion = (0..c.fusion_layers)
            .map(|i| FusionLayer::new(&mut s, &format!("fusion.layer{i}"), c, &mut rng))
            .collect();
        let heads = Heads {
            itc_text: Linear::new(&mut s, "heads.itc_text", d, c.projection_dim, false, &mut rng),
            itc_vision: Linear::new(&mut s, "heads.itc_vision", d, c.projection_dim, false, &mut rng),
            logit_scale: s.add("heads.logit_scale", Tensor::scalar(INIT_LOGIT_SCALE)),
            itm: Linear::new(&mut s, "heads.itm", d, 2, true, &mut rng),
            bbox: Linear::new(&mut s, "heads.bbox", d, 4, true, &mut rng),
            mlm: Linear::new(&mut s, "heads.mlm", d, c.vocab_size, true, &mut rng),
            imlm: Linear::new(&mut s, "heads.imlm", d, c.vocab_size, true, &mut rng),
        };
        Ok(Self {
            config,
            params: s,
            text,
            vision,
            fusion,
            heads,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Result<Bound<'g>> {
        self.params.bind(graph, trainable)
    }

    /// Token + position embeddings, layer norm, then the M text layers.
    pub fn encode_text<'g>(&self, p: &Bound<'g>, batch: &TextBatch) -> Result<FeatureSequence<'g>> {
        batch.validate(&self.config)?;
        let (b, n, d) = (batch.batch, batch.seq_len, self.config.hidden_dim);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let tok = p.var(self.text.tok_emb).gather_rows(&ids)?.reshape(&[b, n, d])?;
        let pos = p.var(self.text.pos_emb).slice(0, 0, n)?;
        let mut feats = FeatureSequence {
            hidden: self.text.ln.forward(p, tok.add(pos)?)?,
            valid: Some(Rc::new(batch.valid.clone())),
            provenance: Provenance::Text,
        };
        let bias = self.attention_bias(p, &feats)?;
        for (i, layer) in self.text.layers.iter().enumerate() {
            feats.hidden = layer.forward(p, feats.hidden, bias, i)?;
        }
        Ok(feats)
    }

    /// Patch embedding, optional mask-token substitution, [CLS] prepend,
    /// position embeddings, then the N vision layers.
    pub fn encode_image<'g>(
        &self,
        p: &Bound<'g>,
        images: &[Image],
        masks: Option<&[PatchMaskPlan]>,
    ) -> Result<FeatureSequence<'g>> {
        let c = &self.config;
        let (b, np, d) = (images.len(), c.num_patches(), c.hidden_dim);
        let patches = self.patchify(images)?;
        let mut emb = self.vision.patch.forward(p, p.graph().constant(patches)?)?;

        if let Some(masks) = masks {
            if masks.len() != b {
                return Err(Error::InvalidArgument(format!("{} mask plans for {b} images", masks.len())));
            }
            if masks.iter().any(|m| !m.masked.is_empty()) {
                let mut keep = vec![1.0; b * np * d];
                for (i, m) in masks.iter().enumerate() {
                    if m.grid_h * m.grid_w != np || m.masked.iter().any(|&j| j >= np) {
                        return Err(Error::InvalidArgument(format!(
                            "mask plan grid {}x{} does not match {np} patches",
                            m.grid_h, m.grid_w
                        )));
                    }
                    for &j in &m.masked {
                        keep[(i * np + j) * d..(i * np + j + 1) * d].fill(0.0);
                    }
                }
                let hole: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let g = p.graph();
                let keep = g.constant(Tensor::from_parts(vec![b, np, d], keep))?;
                let hole = g.constant(Tensor::from_parts(vec![b, np, d], hole))?;
                emb = emb.mul(keep)?.add(hole.mul(p.var(self.vision.mask_token))?)?;
            }
        }

        let cls = p.var(self.vision.cls).gather_rows(&vec![0; b])?.reshape(&[b, 1, d])?;
        let x = Var::concat(&[cls, emb], 1)?.add(p.var(self.vision.pos_emb))?;
        let mut feats = FeatureSequence {
            hidden: x,
            valid: None,
            provenance: Provenance::Vision,
        };
        for (i, layer) in self.vision.layers.iter().enumerate() {
            feats.hidden = layer.forward(p, feats.hidden, None, i)?;
        }
        Ok(feats)
    }

    /// Text positions attend to themselves, then to every image position.
    pub fn fuse<'g>(
        &self,
        p: &Bound<'g>,
        text: &FeatureSequence<'g>,
        image: &FeatureSequence<'g>,
    ) -> Result<FeatureSequence<'g>> {
        if text.hidden_dim() != image.hidden_dim() || text.batch() != image.batch() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: text.hidden.shape(),
                rhs: image.hidden.shape(),
            });
        }
        let bias = self.attention_bias(p, text)?;
        let mut x = text.hidden;
        for (i, layer) in self.fusion.iter().enumerate() {
            x = layer.forward(p, x, image.hidden, bias, i)?;
        }
        Ok(FeatureSequence {
            hidden: x,
            valid: text.valid.clone(),
            provenance: Provenance::Fused,
        })
    }

    /// Unit-norm contrastive embedding of the [CLS] vectors, `[batch, projection_dim]`.
    pub fn project_for_itc<'g>(&self, p: &Bound<'g>, feats: &FeatureSequence<'g>, side: Side) -> Result<Var<'g>> {
        self.project_vector(p, feats.cls()?, side)
    }

    /// Projection and normalization of `[batch, hidden]` vectors.
    pub fn project_vector<'g>(&self, p: &Bound<'g>, cls: Var<'g>, side: Side) -> Result<Var<'g>> {
        let head = match side {
            Side::Text => &self.heads.itc_text,
            Side::Vision => &self.heads.itc_vision,
        };
        head.forward(p, cls)?.l2_normalize()
    }

    /// `exp` of the clamped log scale, a scalar; equals `1 / temperature`.
    pub fn logit_scale<'g>(&self, p: &Bound<'g>) -> Result<Var<'g>> {
        let (lo, hi) = LOGIT_SCALE_RANGE;
        p.var(self.heads.logit_scale).clamp(lo, hi)?.exp()
    }

    /// `[images, texts]` cosine similarities times the logit scale.
    pub fn similarity<'g>(&self, p: &Bound<'g>, image_proj: Var<'g>, text_proj: Var<'g>) -> Result<Var<'g>> {
        image_proj.matmul(text_proj.transpose()?)?.mul(self.logit_scale(p)?)
    }

    /// Two-way match logits from the fused [CLS]; index 1 is "matched".
    pub fn itm_logits<'g>(&self, p: &Bound<'g>, fused: &FeatureSequence<'g>) -> Result<Var<'g>> {
        self.heads.itm.forward(p, fused.cls()?)
    }

    /// Box `(cx, cy, w, h)` in `(0, 1)` from the fused [CLS], `[batch, 4]`.
    pub fn bbox<'g>(&self, p: &Bound<'g>, fused: &FeatureSequence<'g>) -> Result<Var<'g>> {
        self.heads.bbox.forward(p, fused.cls()?)?.sigmoid()
    }

    /// Vocabulary logits of the language encoder at flat positions.
    pub fn mlm_logits<'g>(&self, p: &Bound<'g>, text: &FeatureSequence<'g>, flat: &[usize]) -> Result<Var<'g>> {
        self.heads.mlm.forward(p, text.rows(flat)?)
    }

    /// Vocabulary logits of the fusion encoder at flat positions.
    pub fn imlm_logits<'g>(&self, p: &Bound<'g>, fused: &FeatureSequence<'g>, flat: &[usize]) -> Result<Var<'g>> {
        self.heads.imlm.forward(p, fused.rows(flat)?)
    }

    /// `[batch, patches, patch_dim]`, patches in row-major grid order, each
    /// flattened as (row, column, channel).
    pub fn patchify(&self, images: &[Image]) -> Result<Tensor> {
        let c = &self.config;
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let (ps, g) = (c.patch_side, c.grid_side());
        let mut data = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for img in images {
            if img.side != c.image_side || img.channels != c.channels || img.pixels.len() != img.side * img.side * img.channels {
                return Err(Error::InvalidShape {
                    op: "encode_image",
                    shape: vec![img.side, img.side, img.channels],
                    reason: format!("expected {0}x{0}x{1}", c.image_side, c.channels),
                });
            }
            for gr in 0..g {
                for gc in 0..g {
                    for r in 0..ps {
                        let start = ((gr * ps + r) * img.side + gc * ps) * img.channels;
                        data.extend_from_slice(&img.pixels[start..start + ps * img.channels]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![images.len(), c.num_patches(), c.patch_dim()], data))
    }

    fn attention_bias<'g>(&self, p: &Bound<'g>, feats: &FeatureSequence<'g>) -> Result<Option<Var<'g>>> {
        feats
            .self_attention_bias()
            .map(|t| p.graph().constant(t))
            .transpose()
    }

    #[cfg(test)]
    pub(crate) fn fusion_layers_mut(&mut self) -> (&mut ParamStore, &[FusionLayer]) {
        (&mut self.params, &self.fusion)
    }

    #[cfg(test)]
    pub(crate) fn itc_weight(&self, side: Side) -> ParamId {
        match side {
            Side::Text => self.heads.itc_text.weight,
            Side::Vision => self.heads.itc_vision.weight,
        }
    }
}
