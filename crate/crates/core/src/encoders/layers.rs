use std::rc::Rc;

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    TextSelf,
    VisionSelf,
    FusionSelf,
    FusionCross,
}

/// Attention probabilities `[batch, queries, keys]` of one head.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    pub probs: Rc<Tensor>,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], INIT_STD, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub(crate) fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub(crate) fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(self.eps)?.mul(p.var(self.gamma))?.add(p.var(self.beta))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) out: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention of `query` `[b, nq, d]` over
    /// `context` `[b, nk, d]`. `bias` is added to the `[b, nq, nk]` scores.
    pub(crate) fn forward<'g>(
        &self,
        p: &Bound<'g>,
        query: Var<'g>,
        context: Var<'g>,
        bias: Option<Var<'g>>,
        kind: AttentionKind,
        layer: usize,
    ) -> Result<Var<'g>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, context)?;
        let v = self.v.forward(p, context)?;
        let d = q.shape()[2];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(2, h * dh, dh)?;
            let kh = k.slice(2, h * dh, dh)?.transpose()?;
            let vh = v.slice(2, h * dh, dh)?;
            let mut scores = qh.matmul(kh)?.scale(scale)?;
            if let Some(b) = bias {
                scores = scores.add(b)?;
            }
            let probs = scores.softmax()?;
            p.record(|| AttentionRecord {
                kind,
                layer,
                head: h,
                probs: probs.value(),
            });
            heads.push(probs.matmul(vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 2)? };
        self.out.forward(p, merged)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub(crate) fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.gelu()?)
    }
}

/// Self-attention and feed-forward sub-layers, each followed by residual
/// add and layer norm.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
    kind: AttentionKind,
}

impl EncoderLayer {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &super::EncoderConfig,
        kind: AttentionKind,
        rng: &mut R,
    ) -> Self {
        let d = cfg.hidden_dim;
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, cfg.layer_norm_eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim(), rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, cfg.layer_norm_eps),
            kind,
        }
    }

    pub(crate) fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, bias: Option<Var<'g>>, layer: usize) -> Result<Var<'g>> {
        let a = self.attn.forward(p, x, x, bias, self.kind, layer)?;
        let x = self.ln1.forward(p, x.add(a)?)?;
        let f = self.ffn.forward(p, x)?;
        self.ln2.forward(p, x.add(f)?)
    }
}

/// Self-attention over text, then cross-attention from text queries to image
/// keys/values, then feed-forward; residual + layer norm after each.
#[derive(Clone, Debug)]
pub(crate) struct FusionLayer {
    pub(crate) self_attn: Attention,
    pub(crate) ln1: LayerNorm,
    pub(crate) cross_attn: Attention,
    pub(crate) ln2: LayerNorm,
    pub(crate) ffn: FeedForward,
    pub(crate) ln3: LayerNorm,
}

impl FusionLayer {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &super::EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let eps = cfg.layer_norm_eps;
        Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, eps),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim(), rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, eps),
        }
    }

    pub(crate) fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        image: Var<'g>,
        bias: Option<Var<'g>>,
        layer: usize,
    ) -> Result<Var<'g>> {
        let s = self.self_attn.forward(p, x, x, bias, AttentionKind::FusionSelf, layer)?;
        let x = self.ln1.forward(p, x.add(s)?)?;
        let c = self
            .cross_attn
            .forward(p, x, image, None, AttentionKind::FusionCross, layer)?;
        let x = self.ln2.forward(p, x.add(c)?)?;
        let f = self.ffn.forward(p, x)?;
        self.ln3.forward(p, x.add(f)?)
    }
}
