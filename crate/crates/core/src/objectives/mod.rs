//! The six pre-training losses and their unweighted sum. Every loss is a
//! function of traced tensors and plain annotations, so it can be
//! differentiated through whichever encoder produced its inputs.

mod bbox;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::masking::{MaskedText, PatchMaskPlan};

pub use bbox::{bbp_loss, giou, BoundingBox};

/// Match probabilities are clamped into `[EPS, 1 - EPS]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Itc,
    Itm,
    Imlm,
    Bbp,
    Mim,
}

impl Objective {
    pub const ALL: [Objective; 6] = [Self::Mlm, Self::Itc, Self::Itm, Self::Imlm, Self::Bbp, Self::Mim];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Itc => "itc",
            Self::Itm => "itm",
            Self::Imlm => "imlm",
            Self::Bbp => "bbp",
            Self::Mim => "mim",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn zero<'g>(like: Var<'g>) -> Result<Var<'g>> {
    like.graph().constant(Tensor::scalar(0.0))
}

/// Mean cross-entropy of `logits` `[n, vocab]` against `targets`.
pub fn token_cross_entropy<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "token_cross_entropy",
            lhs: s,
            rhs: vec![targets.len()],
        });
    }
    logits.log_softmax()?.select_per_row(targets)?.mean()?.neg()
}

fn masked_token_loss<'g>(op: &'static str, logits: Var<'g>, plan: &MaskedText) -> Result<Var<'g>> {
    if plan.positions.is_empty() {
        return zero(logits);
    }
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: s,
            reason: "expected [positions, vocab]".into(),
        });
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= s[0]) {
        return Err(Error::InvalidArgument(format!(
            "{op}: masked position {p} beyond {} logit rows",
            s[0]
        )));
    }
    let rows = logits.gather_rows(&plan.positions)?;
    let targets: Vec<usize> = plan.targets().iter().map(|&t| t as usize).collect();
    token_cross_entropy(rows, &targets)
}

/// Cross-entropy at the masked positions of one sequence; `logits` has a
/// row for every position.
pub fn mlm_loss<'g>(logits: Var<'g>, plan: &MaskedText) -> Result<Var<'g>> {
    masked_token_loss("mlm_loss", logits, plan)
}

/// The same kernel as [`mlm_loss`], applied to logits read off the fusion
/// encoder.
pub fn imlm_loss<'g>(fused_logits: Var<'g>, plan: &MaskedText) -> Result<Var<'g>> {
    masked_token_loss("imlm_loss", fused_logits, plan)
}

/// Symmetric in-batch contrastive loss of a `[B, B]` similarity matrix
/// (already divided by the temperature) whose diagonal holds the pairs.
pub fn itc_loss<'g>(sim: Var<'g>) -> Result<Var<'g>> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(Error::InvalidShape {
            op: "itc_loss",
            shape: s,
            reason: "expected a non-empty square matrix".into(),
        });
    }
    let diag: Vec<usize> = (0..s[0]).collect();
    let rows = sim.log_softmax()?.select_per_row(&diag)?.mean()?;
    let cols = sim.transpose()?.log_softmax()?.select_per_row(&diag)?.mean()?;
    rows.add(cols)?.scale(-0.5)
}

/// Probability of the "matched" class (index 1) from `[n, 2]` logits, `[n]`.
pub fn match_probability<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let n = logits.shape()[0];
    logits.softmax()?.slice(1, 1, 1)?.reshape(&[n])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItmDiagnostics {
    /// Probabilities that fell outside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub clamped: usize,
}

/// `mean_i [-ln p+_i - ln(1 - p_img_i) - ln(1 - p_txt_i)]` over `[B]`
/// probability vectors for the positive pair, the pair with a negative
/// image and the pair with a negative text.
pub fn itm_loss<'g>(positive: Var<'g>, image_negative: Var<'g>, text_negative: Var<'g>) -> Result<(Var<'g>, ItmDiagnostics)> {
    let b = positive.shape();
    for v in [image_negative, text_negative] {
        if v.shape() != b {
            return Err(Error::ShapeMismatch {
                op: "itm_loss",
                lhs: b,
                rhs: v.shape(),
            });
        }
    }
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let clamped = [positive, image_negative, text_negative]
        .iter()
        .map(|v| v.value().data().iter().filter(|&&p| !(lo..=hi).contains(&p)).count())
        .sum();
    let pos = positive.clamp(lo, hi)?.log()?;
    let not = |v: Var<'g>| -> Result<Var<'g>> { v.clamp(lo, hi)?.neg()?.add_scalar(1.0)?.log() };
    let per_item = pos.add(not(image_negative)?)?.add(not(text_negative)?)?;
    Ok((per_item.mean()?.neg()?, ItmDiagnostics { clamped }))
}

/// In-batch negative indices; entry `i` is never `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negatives {
    /// Image paired with text `i` for the image-negative term.
    pub image: Vec<usize>,
    /// Text paired with image `i` for the text-negative term.
    pub text: Vec<usize>,
}

fn other_index<R: Rng + ?Sized>(i: usize, b: usize, rng: &mut R) -> usize {
    let j = rng.random_range(0..b - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Uniform in-batch negatives. `None` when the batch has a single item, in
/// which case matching is skipped for that batch.
pub fn sample_negatives<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Option<Negatives> {
    if batch < 2 {
        return None;
    }
    let image = (0..batch).map(|i| other_index(i, batch, rng)).collect();
    let text = (0..batch).map(|i| other_index(i, batch, rng)).collect();
    Some(Negatives { image, text })
}

/// Negatives drawn with probability proportional to `exp(sim)` among the
/// other items; `sim` is the `[images, texts]` similarity matrix.
pub fn sample_hard_negatives<R: Rng + ?Sized>(sim: &Tensor, rng: &mut R) -> Result<Option<Negatives>> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidShape {
            op: "sample_hard_negatives",
            shape: s.to_vec(),
            reason: "expected a square matrix".into(),
        });
    }
    let b = s[0];
    if b < 2 {
        return Ok(None);
    }
    let at = |i: usize, j: usize| sim.data()[i * b + j];
    let draw = |weights: Vec<f64>, rng: &mut R| {
        let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = weights.iter().map(|x| if x.is_finite() { (x - m).exp() } else { 0.0 }).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                last = j;
                if u < *wj {
                    return j;
                }
                u -= wj;
            }
        }
        last
    };
    let mut image = Vec::with_capacity(b);
    let mut text = Vec::with_capacity(b);
    for i in 0..b {
        let col: Vec<f64> = (0..b).map(|j| if j == i { f64::NEG_INFINITY } else { at(j, i) }).collect();
        image.push(draw(col, rng));
    }
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| if j == i { f64::NEG_INFINITY } else { at(i, j) }).collect();
        text.push(draw(row, rng));
    }
    Ok(Some(Negatives { image, text }))
}

/// Mean over images of the per-image squared error, itself the mean over
/// feature dimensions and over the masked positions plus [CLS]. Position 0
/// of each sequence is [CLS]; patch `j` sits at position `j + 1`.
pub fn mim_loss<'g>(pred: &FeatureSequence<'g>, target: &FeatureSequence<'g>, plans: &[PatchMaskPlan]) -> Result<Var<'g>> {
    let (b, n, d) = (pred.batch(), pred.len(), pred.hidden_dim());
    if target.hidden.shape() != pred.hidden.shape() {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: pred.hidden.shape(),
            rhs: target.hidden.shape(),
        });
    }
    if plans.len() != b {
        return Err(Error::InvalidArgument(format!("mim_loss: {} plans for {b} images", plans.len())));
    }
    let mut flat = Vec::new();
    let mut weights = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        if plan.area() != n - 1 || plan.masked.iter().any(|&j| j + 1 >= n) {
            return Err(Error::InvalidArgument(format!(
                "mim_loss: plan grid {}x{} does not fit {} patches",
                plan.grid_h,
                plan.grid_w,
                n - 1
            )));
        }
        let count = plan.masked.len() + 1;
        let w = 1.0 / (b * count * d) as f64;
        flat.push(i * n);
        flat.extend(plan.masked.iter().map(|&j| i * n + j + 1));
        weights.extend(std::iter::repeat_n(w, count * d));
    }
    let diff = pred.rows(&flat)?.sub(target.rows(&flat)?)?;
    let w = pred
        .hidden
        .graph()
        .constant(Tensor::from_parts(vec![flat.len(), d], weights))?;
    diff.mul(diff)?.mul(w)?.sum()
}

/// The six named components, each present only when its stream ran.
#[derive(Clone, Debug, Default)]
pub struct LossBundle<'g> {
    pub mlm: Option<Var<'g>>,
    pub itc: Option<Var<'g>>,
    pub itm: Option<Var<'g>>,
    pub imlm: Option<Var<'g>>,
    pub bbp: Option<Var<'g>>,
    pub mim: Option<Var<'g>>,
}

impl<'g> LossBundle<'g> {
    pub fn get(&self, o: Objective) -> Option<Var<'g>> {
        match o {
            Objective::Mlm => self.mlm,
            Objective::Itc => self.itc,
            Objective::Itm => self.itm,
            Objective::Imlm => self.imlm,
            Objective::Bbp => self.bbp,
            Objective::Mim => self.mim,
        }
    }

    pub fn slot(&mut self, o: Objective) -> &mut Option<Var<'g>> {
        match o {
            Objective::Mlm => &mut self.mlm,
            Objective::Itc => &mut self.itc,
            Objective::Itm => &mut self.itm,
            Objective::Imlm => &mut self.imlm,
            Objective::Bbp => &mut self.bbp,
            Objective::Mim => &mut self.mim,
        }
    }

    pub fn present(&self) -> Vec<(Objective, Var<'g>)> {
        Objective::ALL
            .iter()
            .filter_map(|&o| self.get(o).map(|v| (o, v)))
            .collect()
    }

    /// Unweighted sum of the present components.
    pub fn total(&self) -> Result<Var<'g>> {
        total_loss(self)
    }

    pub fn values(&self) -> Result<LossValues> {
        let v = |o| self.get(o).map(|x: Var<'g>| x.item()).transpose();
        Ok(LossValues {
            mlm: v(Objective::Mlm)?,
            itc: v(Objective::Itc)?,
            itm: v(Objective::Itm)?,
            imlm: v(Objective::Imlm)?,
            bbp: v(Objective::Bbp)?,
            mim: v(Objective::Mim)?,
            total: self.total()?.item()?,
        })
    }
}

pub fn total_loss<'g>(bundle: &LossBundle<'g>) -> Result<Var<'g>> {
    let mut parts = bundle.present().into_iter().map(|(_, v)| v);
    let first = parts.next().ok_or(Error::EmptyBundle)?;
    parts.try_fold(first, |acc, v| acc.add(v))
}

/// Plain values of a [`LossBundle`]; absent components are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mlm: Option<f64>,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub imlm: Option<f64>,
    pub bbp: Option<f64>,
    pub mim: Option<f64>,
    pub total: f64,
}

impl LossValues {
    pub fn get(&self, o: Objective) -> Option<f64> {
        match o {
            Objective::Mlm => self.mlm,
            Objective::Itc => self.itc,
            Objective::Itm => self.itm,
            Objective::Imlm => self.imlm,
            Objective::Bbp => self.bbp,
            Objective::Mim => self.mim,
        }
    }

    /// Same components present and every value bit-identical.
    pub fn bit_eq(&self, other: &LossValues) -> bool {
        let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
            (None, None) => true,
            _ => false,
        };
        Objective::ALL.iter().all(|&o| same(self.get(o), other.get(o))) && self.total.to_bits() == other.total.to_bits()
    }
}

#[cfg(test)]
mod tests;
