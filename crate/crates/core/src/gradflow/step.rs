use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_mim_targets, route_language_features, GradFlowConfig, RoutedObjective};
use crate::autodiff::{Tensor, Var};
use crate::encoders::{Bound, EncoderConfig, FeatureSequence, Image, Side, TextBatch, TokenSequence, XfmModel};
use crate::error::{Error, Result};
use crate::masking::{block_mask_image, PatchMaskPlan, TextMasker};
use crate::objectives::{
    bbp_loss, itc_loss, itm_loss, match_probability, mim_loss, sample_hard_negatives, sample_negatives,
    token_cross_entropy, BoundingBox, ItmDiagnostics, LossBundle, Negatives,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Shared by MLM and IMLM.
    pub text_rate: f64,
    pub image_ratio: f64,
    /// Similarity-weighted ITM negatives instead of uniform ones.
    pub hard_negatives: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_rate: 0.15,
            image_ratio: 0.4,
            hard_negatives: false,
        }
    }
}

/// One image-text pair as the step consumes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub image: Image,
    pub tokens: TokenSequence,
    pub bbox: Option<BoundingBox>,
}

/// A corrupted text batch and the flat positions (`item * seq_len + pos`)
/// whose original tokens are to be recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInputs {
    pub corrupted: TextBatch,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TextInputs {
    pub fn mask<R: Rng + ?Sized>(seqs: &[TokenSequence], masker: &TextMasker, rate: f64, rng: &mut R) -> Result<Self> {
        let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut corrupted = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            let m = masker.mask(s, rate, rng)?;
            positions.extend(m.positions.iter().map(|&p| i * len + p));
            targets.extend(m.targets().iter().map(|&t| t as usize));
            corrupted.push(m.corrupted_sequence(s));
        }
        Ok(Self {
            corrupted: TextBatch::new(&corrupted)?,
            positions,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInputs {
    pub images: Vec<Image>,
    pub masks: Vec<PatchMaskPlan>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NegativeChoice {
    /// Fewer than two pairs: matching is skipped.
    Skip,
    Given(Negatives),
    /// Drawn during the forward pass from the detached similarity matrix
    /// with a generator seeded by this value.
    Hard(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs {
    pub images: Vec<Image>,
    pub text: TextBatch,
    pub masked_text: TextInputs,
    pub boxes: Vec<Option<BoundingBox>>,
    pub masks: Vec<PatchMaskPlan>,
    pub negatives: NegativeChoice,
}

/// Everything random about a step, drawn up front so the forward pass is a
/// pure function of parameters and inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInputs {
    pub text: Option<TextInputs>,
    pub image: Option<ImageInputs>,
    pub pair: Option<PairInputs>,
}

impl StepInputs {
    /// Empty streams are left out.
    pub fn prepare<R: Rng + ?Sized>(
        encoder: &EncoderConfig,
        masking: &MaskingConfig,
        word_limit: u32,
        texts: &[TokenSequence],
        images: &[Image],
        pairs: &[PairSample],
        rng: &mut R,
    ) -> Result<Self> {
        let masker = TextMasker::new(word_limit);
        let grid = encoder.grid_side();
        let plans = |n: usize, rng: &mut R| -> Result<Vec<PatchMaskPlan>> {
            (0..n).map(|_| block_mask_image(grid, grid, masking.image_ratio, rng)).collect()
        };
        let text = if texts.is_empty() {
            None
        } else {
            Some(TextInputs::mask(texts, &masker, masking.text_rate, rng)?)
        };
        let image = if images.is_empty() {
            None
        } else {
            Some(ImageInputs {
                images: images.to_vec(),
                masks: plans(images.len(), rng)?,
            })
        };
        let pair = if pairs.is_empty() {
            None
        } else {
            let tokens: Vec<TokenSequence> = pairs.iter().map(|p| p.tokens.clone()).collect();
            let masked_text = TextInputs::mask(&tokens, &masker, masking.text_rate, rng)?;
            let masks = plans(pairs.len(), rng)?;
            let negatives = if masking.hard_negatives && pairs.len() >= 2 {
                NegativeChoice::Hard(rng.random())
            } else {
                sample_negatives(pairs.len(), rng).map_or(NegativeChoice::Skip, NegativeChoice::Given)
            };
            Some(PairInputs {
                images: pairs.iter().map(|p| p.image.clone()).collect(),
                text: TextBatch::new(&tokens)?,
                masked_text,
                boxes: pairs.iter().map(|p| p.bbox).collect(),
                masks,
                negatives,
            })
        };
        Ok(Self { text, image, pair })
    }
}

/// Source of the MIM regression targets.
#[derive(Clone, Copy, Debug)]
pub enum MimTargets<'m> {
    /// The live vision encoder on the unmasked images, detached.
    Live,
    /// A separate model placed on the graph as constants.
    Frozen(&'m XfmModel),
}

pub struct StepOutput<'g> {
    pub bundle: LossBundle<'g>,
    pub itm: Option<ItmDiagnostics>,
    /// True when the pair batch was too small for in-batch negatives.
    pub itm_skipped: bool,
    pub boxed_items: usize,
    /// Negatives used for matching, if any.
    pub negatives: Option<Negatives>,
}

/// Builds every loss of one step on `p`'s graph. Order of evaluation: text
/// stream, image stream, then the pair stream.
pub fn forward_pretraining<'g>(
    model: &XfmModel,
    p: &Bound<'g>,
    inputs: &StepInputs,
    flow: &GradFlowConfig,
    targets: MimTargets<'_>,
) -> Result<StepOutput<'g>> {
    let mut bundle = LossBundle::default();
    let frozen = match targets {
        MimTargets::Frozen(m) => Some((m, m.bind(p.graph(), false)?)),
        MimTargets::Live => None,
    };
    let target_of = |images: &[Image], live_unmasked: Option<&FeatureSequence<'g>>| -> Result<FeatureSequence<'g>> {
        match (&frozen, live_unmasked) {
            (Some((m, fp)), _) => m.encode_image(fp, images, None),
            (None, Some(v)) => Ok(v.detach()),
            (None, None) => compute_mim_targets(model, p, images),
        }
    };

    if let Some(t) = &inputs.text {
        let feats = model.encode_text(p, &t.corrupted)?;
        bundle.mlm = Some(masked_lm(model, p, &feats, t, false)?);
    }

    let mut mim_terms = Vec::new();
    if let (Some(im), true) = (&inputs.image, flow.mim_enabled) {
        let pred = model.encode_image(p, &im.images, Some(&im.masks))?;
        let target = target_of(&im.images, None)?;
        mim_terms.push(mim_loss(&pred, &target, &im.masks)?);
    }

    let mut out = StepOutput {
        bundle: LossBundle::default(),
        itm: None,
        itm_skipped: false,
        boxed_items: 0,
        negatives: None,
    };
    if let Some(pair) = &inputs.pair {
        let b = pair.images.len();
        if pair.text.batch != b || pair.boxes.len() != b || pair.masks.len() != b {
            return Err(Error::InvalidArgument("pair inputs disagree on batch size".into()));
        }
        let text = model.encode_text(p, &pair.text)?;
        let image = model.encode_image(p, &pair.images, None)?;

        let itc_text = route_language_features(&text, RoutedObjective::Itc, flow);
        let t_proj = model.project_for_itc(p, &itc_text, Side::Text)?;
        let v_proj = model.project_for_itc(p, &image, Side::Vision)?;
        let sim = model.similarity(p, v_proj, t_proj)?;
        bundle.itc = Some(itc_loss(sim)?);

        let negatives = match &pair.negatives {
            NegativeChoice::Skip => None,
            NegativeChoice::Given(n) => Some(n.clone()),
            NegativeChoice::Hard(seed) => sample_hard_negatives(&sim.value(), &mut ChaCha8Rng::seed_from_u64(*seed))?,
        };
        // ITM and BBP share one routing decision, so the positive fused
        // items serve both.
        let routed = route_language_features(&text, RoutedObjective::Itm, flow);
        let fused = match &negatives {
            Some(n) => {
                let ts: Vec<usize> = (0..b).chain(0..b).chain(n.text.iter().copied()).collect();
                let is: Vec<usize> = (0..b).chain(n.image.iter().copied()).chain(0..b).collect();
                model.fuse(p, &routed.select(&ts)?, &image.select(&is)?)?
            }
            None => model.fuse(p, &routed, &image)?,
        };
        if negatives.is_some() {
            let probs = match_probability(model.itm_logits(p, &fused)?)?;
            let (loss, diag) = itm_loss(probs.slice(0, 0, b)?, probs.slice(0, b, b)?, probs.slice(0, 2 * b, b)?)?;
            bundle.itm = Some(loss);
            out.itm = Some(diag);
        } else {
            out.itm_skipped = true;
        }

        let boxed: Vec<usize> = (0..b).filter(|&i| pair.boxes[i].is_some()).collect();
        if !boxed.is_empty() {
            let truth: Vec<BoundingBox> = boxed.iter().map(|&i| pair.boxes[i].expect("filtered")).collect();
            let pred = model.bbox(p, &fused)?.gather_rows(&boxed)?;
            bundle.bbp = Some(bbp_loss(pred, &truth)?);
        }
        out.boxed_items = boxed.len();

        let masked = model.encode_text(p, &pair.masked_text.corrupted)?;
        let masked = route_language_features(&masked, RoutedObjective::Imlm, flow);
        let fused_masked = model.fuse(p, &masked, &image)?;
        bundle.imlm = Some(masked_lm(model, p, &fused_masked, &pair.masked_text, true)?);

        if flow.mim_enabled {
            let pred = model.encode_image(p, &pair.images, Some(&pair.masks))?;
            let target = target_of(&pair.images, Some(&image))?;
            mim_terms.push(mim_loss(&pred, &target, &pair.masks)?);
        }
        out.negatives = negatives;
    }

    let mut terms = mim_terms.into_iter();
    if let Some(first) = terms.next() {
        bundle.mim = Some(terms.try_fold(first, |acc, t| acc.add(t))?);
    }
    out.bundle = bundle;
    Ok(out)
}

fn masked_lm<'g>(
    model: &XfmModel,
    p: &Bound<'g>,
    feats: &FeatureSequence<'g>,
    t: &TextInputs,
    fused: bool,
) -> Result<Var<'g>> {
    if t.positions.is_empty() {
        return p.graph().constant(Tensor::scalar(0.0));
    }
    let logits = if fused {
        model.imlm_logits(p, feats, &t.positions)?
    } else {
        model.mlm_logits(p, feats, &t.positions)?
    };
    token_cross_entropy(logits, &t.targets)
}
