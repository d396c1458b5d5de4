//! Deterministic synthetic shape world: a text stream, an image stream and
//! a captioned pair stream with boxes, plus per-step batch scheduling.

mod export;
mod seeds;
mod world;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::{Image, TokenSequence};
use crate::error::{Error, Result};
use crate::gradflow::PairSample;

pub use export::{export_corpus, read_image_plane, ExportSummary, ImageSidecar, JsonRecord};
pub use seeds::{mix, sample_seed, Stream};
pub use world::{
    Cell, ImageRecord, NamedColor, PairRecord, SceneObject, ShapeKind, ShapeWorld, TextRecord, Vocabulary,
    BACKGROUND, COL_NAMES, ROW_NAMES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Pair,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Self::Text, Self::Image, Self::Pair];

    pub fn stream(self) -> Stream {
        match self {
            Self::Text => Stream::Text,
            Self::Image => Stream::Image,
            Self::Pair => Stream::Pair,
        }
    }
}

/// Per-step sample counts. The default keeps an 8:3:3 text:image:pair ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub text: usize,
    pub image: usize,
    pub pair: usize,
    /// Zero sizes are rejected unless this is set.
    #[serde(default)]
    pub allow_disabled_streams: bool,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self {
            text: 32,
            image: 12,
            pair: 12,
            allow_disabled_streams: false,
        }
    }
}

impl BatchSizes {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Pair => self.pair,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            if self.get(m) == 0 && !self.allow_disabled_streams {
                return Err(Error::Config(format!(
                    "{m:?} batch size is 0; set allow_disabled_streams to disable a stream"
                )));
            }
        }
        Ok(())
    }
}

/// The sample seeds of one modality at one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub modality: Modality,
    pub step: u64,
    pub seeds: Vec<u64>,
}

/// One batch per modality. Step `t` of a stream with size `n` takes sample
/// indices `[t n, (t + 1) n)`.
pub fn schedule_batches(global_seed: u64, step: u64, sizes: &BatchSizes) -> Result<[BatchSpec; 3]> {
    sizes.validate()?;
    Ok(Modality::ALL.map(|modality| {
        let n = sizes.get(modality) as u64;
        BatchSpec {
            modality,
            step,
            seeds: (step * n..(step + 1) * n)
                .map(|i| sample_seed(global_seed, modality.stream(), i))
                .collect(),
        }
    }))
}

/// Materialized samples of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub texts: Vec<TextRecord>,
    pub images: Vec<ImageRecord>,
    pub pairs: Vec<PairRecord>,
}

impl Batch {
    pub fn generate(world: &ShapeWorld, specs: &[BatchSpec]) -> Self {
        let mut b = Self::default();
        for s in specs {
            match s.modality {
                Modality::Text => b.texts.extend(s.seeds.iter().map(|&x| world.generate_text(x))),
                Modality::Image => b.images.extend(s.seeds.iter().map(|&x| world.generate_image(x))),
                Modality::Pair => b.pairs.extend(s.seeds.iter().map(|&x| world.generate_pair(x))),
            }
        }
        b
    }

    pub fn text_tokens(&self) -> Vec<TokenSequence> {
        self.texts.iter().map(|t| t.tokens.clone()).collect()
    }

    pub fn image_pixels(&self) -> Vec<Image> {
        self.images.iter().map(|i| i.image.clone()).collect()
    }

    /// Every shape-world pair carries its box.
    pub fn pair_samples(&self) -> Vec<PairSample> {
        self.pairs
            .iter()
            .map(|p| PairSample {
                image: p.image.clone(),
                tokens: p.tokens.clone(),
                bbox: Some(p.bbox),
            })
            .collect()
    }
}

/// A small fixed corpus reused at every step, for overfitting runs. Pair
/// captions are unique so retrieval on it is well posed.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedCorpus {
    pub batch: Batch,
}

impl FixedCorpus {
    pub fn generate(world: &ShapeWorld, global_seed: u64, texts: usize, images: usize, pairs: usize) -> Result<Self> {
        let draw = |stream: Stream, i: u64| sample_seed(global_seed, stream, i);
        Ok(Self {
            batch: Batch {
                texts: (0..texts as u64).map(|i| world.generate_text(draw(Stream::Text, i))).collect(),
                images: (0..images as u64).map(|i| world.generate_image(draw(Stream::Image, i))).collect(),
                pairs: unique_pairs(world, global_seed, Stream::Pair, pairs)?,
            },
        })
    }
}

/// `n` pairs with distinct captions, drawn in seed order from `stream`.
pub fn unique_pairs(world: &ShapeWorld, global_seed: u64, stream: Stream, n: usize) -> Result<Vec<PairRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    // The grammar has 9 * |colors| * 3 captions; give up well past that.
    let budget = 1000 * n.max(1) as u64;
    for i in 0..budget {
        if out.len() == n {
            break;
        }
        let p = world.generate_pair(sample_seed(global_seed, stream, i));
        if seen.insert(p.caption.clone()) {
            out.push(p);
        }
    }
    if out.len() < n {
        return Err(Error::Config(format!("only {} distinct captions available, {n} requested", out.len())));
    }
    Ok(out)
}

/// Held-out pairs for retrieval and probing, disjoint from training draws by
/// stream tag. Captions are unique.
pub fn eval_pairs(world: &ShapeWorld, global_seed: u64, n: usize) -> Result<Vec<PairRecord>> {
    unique_pairs(world, global_seed, Stream::Eval, n)
}

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Streaming { world: ShapeWorld, seed: u64, sizes: BatchSizes },
    Fixed(FixedCorpus),
}

impl DataSource {
    pub fn batch(&self, step: u64) -> Result<Batch> {
        match self {
            Self::Streaming { world, seed, sizes } => Ok(Batch::generate(world, &schedule_batches(*seed, step, sizes)?)),
            Self::Fixed(c) => Ok(c.batch.clone()),
        }
    }
}

#[cfg(test)]
mod tests;
