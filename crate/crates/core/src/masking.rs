//! Token corruption for (image-conditioned) masked language modeling and
//! rectangular block masks for masked image modeling.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TokenSequence, MASK_ID, NUM_SPECIAL};
use crate::error::{Error, Result};

/// Smallest block the block masker places when the grid allows it.
pub const MIN_BLOCK_AREA: usize = 4;
pub const MIN_ASPECT: f64 = 0.3;
const ATTEMPTS_PER_BLOCK: usize = 64;

/// A corrupted copy of a token sequence and the positions to recover.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedText {
    pub original: Vec<u32>,
    pub corrupted: Vec<u32>,
    /// Selected positions, ascending. Includes positions whose token was
    /// left unchanged by the 10% keep branch.
    pub positions: Vec<usize>,
}

impl MaskedText {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Original token at each selected position.
    pub fn targets(&self) -> Vec<u32> {
        self.positions.iter().map(|&p| self.original[p]).collect()
    }

    /// The corrupted sequence with the original padding marks.
    pub fn corrupted_sequence(&self, source: &TokenSequence) -> TokenSequence {
        TokenSequence {
            ids: self.corrupted.clone(),
            attention_mask: source.attention_mask.clone(),
        }
    }
}

/// BERT-style corruption: each eligible position is selected with
/// probability `rate`; a selected token becomes [MASK] with probability 0.8,
/// a random word with probability 0.1, and stays as is otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMasker {
    /// Random replacements are drawn uniformly from `NUM_SPECIAL..word_limit`.
    pub word_limit: u32,
}

impl TextMasker {
    pub fn new(word_limit: u32) -> Self {
        assert!(word_limit > NUM_SPECIAL, "no words to draw replacements from");
        Self { word_limit }
    }

    /// Position 0 ([CLS]), padding and special tokens are never selected.
    pub fn is_eligible(tokens: &TokenSequence, pos: usize) -> bool {
        pos > 0 && tokens.attention_mask[pos] && tokens.ids[pos] >= NUM_SPECIAL
    }

    pub fn mask<R: Rng + ?Sized>(&self, tokens: &TokenSequence, rate: f64, rng: &mut R) -> Result<MaskedText> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
        }
        let mut corrupted = tokens.ids.clone();
        let mut positions = Vec::new();
        for pos in 0..tokens.ids.len() {
            if !Self::is_eligible(tokens, pos) {
                continue;
            }
            if rng.random::<f64>() >= rate {
                continue;
            }
            positions.push(pos);
            let r: f64 = rng.random();
            if r < 0.8 {
                corrupted[pos] = MASK_ID;
            } else if r < 0.9 {
                corrupted[pos] = rng.random_range(NUM_SPECIAL..self.word_limit);
            }
        }
        Ok(MaskedText {
            original: tokens.ids.clone(),
            corrupted,
            positions,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * grid_w + c))
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Masked patches of a `grid_h x grid_w` patch grid, listed both as a set
/// and as the blocks whose union it is.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub masked: BTreeSet<usize>,
    pub blocks: Vec<Block>,
    /// True when the grid could not host a minimum-size block and single
    /// patches were masked instead.
    pub single_patch_fallback: bool,
}

impl PatchMaskPlan {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            masked: BTreeSet::new(),
            blocks: Vec::new(),
            single_patch_fallback: false,
        }
    }

    pub fn area(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked.contains(&patch)
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked.len() as f64 / self.area() as f64
    }

    pub fn union_of_blocks(&self) -> BTreeSet<usize> {
        self.blocks.iter().flat_map(|b| b.cells(self.grid_w)).collect()
    }
}

/// Block masking: rectangles with area at least [`MIN_BLOCK_AREA`] and
/// aspect ratio in `[0.3, 1/0.3]` are sampled until at least
/// `ratio * area` patches are masked. A block is only accepted if the masked
/// count stays within `(ratio + 0.05) * area` (or the next integer above the
/// target, whichever is larger); when no block fits, single patches top the
/// plan up and `single_patch_fallback` is set.
pub fn block_mask_image<R: Rng + ?Sized>(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> Result<PatchMaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::InvalidArgument("empty patch grid".into()));
    }
    let mut plan = PatchMaskPlan::empty(grid_h, grid_w);
    let target = ratio * plan.area() as f64;
    if target <= 0.0 {
        return Ok(plan);
    }

    let fits_min_block = (1..=grid_h).any(|h| {
        (1..=grid_w).any(|w| h * w >= MIN_BLOCK_AREA && aspect_ok(h, w))
    });
    if !fits_min_block {
        plan.single_patch_fallback = true;
    }

    let cap = (target.ceil() as usize).max(((ratio + 0.05) * plan.area() as f64).floor() as usize);
    while (plan.masked.len() as f64) < target {
        let placed = !plan.single_patch_fallback && place_block(&mut plan, target, cap, rng);
        if !placed {
            plan.single_patch_fallback = true;
            let free: Vec<usize> = (0..plan.area()).filter(|p| !plan.masked.contains(p)).collect();
            let p = free[rng.random_range(0..free.len())];
            plan.masked.insert(p);
            plan.blocks.push(Block {
                top: p / grid_w,
                left: p % grid_w,
                height: 1,
                width: 1,
            });
        }
    }
    Ok(plan)
}

fn aspect_ok(h: usize, w: usize) -> bool {
    let a = h as f64 / w as f64;
    (MIN_ASPECT..=1.0 / MIN_ASPECT).contains(&a)
}

fn place_block<R: Rng + ?Sized>(plan: &mut PatchMaskPlan, target: f64, cap: usize, rng: &mut R) -> bool {
    let remaining = target - plan.masked.len() as f64;
    let max_area = remaining.max(MIN_BLOCK_AREA as f64);
    for _ in 0..ATTEMPTS_PER_BLOCK {
        let area = if max_area > MIN_BLOCK_AREA as f64 {
            rng.random_range(MIN_BLOCK_AREA as f64..=max_area)
        } else {
            MIN_BLOCK_AREA as f64
        };
        let aspect = rng.random_range(MIN_ASPECT.ln()..=(1.0 / MIN_ASPECT).ln()).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > plan.grid_h || w > plan.grid_w {
            continue;
        }
        if h * w < MIN_BLOCK_AREA || !aspect_ok(h, w) {
            continue;
        }
        let block = Block {
            top: rng.random_range(0..=plan.grid_h - h),
            left: rng.random_range(0..=plan.grid_w - w),
            height: h,
            width: w,
        };
        let fresh: Vec<usize> = block
            .cells(plan.grid_w)
            .filter(|c| !plan.masked.contains(c))
            .collect();
        if fresh.is_empty() || plan.masked.len() + fresh.len() > cap {
            continue;
        }
        plan.masked.extend(fresh);
        plan.blocks.push(block);
        return true;
    }
    false
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn words(n: usize) -> TokenSequence {
        TokenSequence::from_word_ids(&(0..n).map(|i| NUM_SPECIAL + (i % 20) as u32).collect::<Vec<_>>())
    }

    #[test]
    fn rate_zero_masks_nothing() {
        let t = words(10);
        let m = TextMasker::new(40).mask(&t, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.positions.is_empty());
        assert_eq!(m.corrupted, m.original);
    }

    #[test]
    fn rate_one_selects_every_eligible_position() {
        let t = words(10);
        let m = TextMasker::new(40).mask(&t, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.positions, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn corruption_only_at_selected_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = words(12).padded_to(16);
            let m = TextMasker::new(40).mask(&t, 0.5, &mut rng).unwrap();
            for i in 0..t.len() {
                if m.corrupted[i] != m.original[i] {
                    assert!(m.positions.contains(&i));
                }
            }
            assert!(m.positions.iter().all(|&p| p > 0 && t.attention_mask[p]));
        }
    }

    #[test]
    fn corruption_split_is_80_10_10() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = words(15);
        let masker = TextMasker::new(1000);
        let (mut masked, mut kept, mut total) = (0usize, 0usize, 0usize);
        for _ in 0..4000 {
            let m = masker.mask(&t, 1.0, &mut rng).unwrap();
            for &p in &m.positions {
                total += 1;
                if m.corrupted[p] == MASK_ID {
                    masked += 1;
                } else if m.corrupted[p] == m.original[p] {
                    kept += 1;
                }
            }
        }
        let fm = masked as f64 / total as f64;
        let fk = kept as f64 / total as f64;
        assert!((fm - 0.8).abs() < 0.01, "{fm}");
        // random replacement coincides with the original 1/997 of the time
        assert!((fk - 0.1).abs() < 0.01, "{fk}");
    }

    #[test]
    fn ratio_zero_gives_empty_plan() {
        let p = block_mask_image(8, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.masked.is_empty() && p.blocks.is_empty());
    }

    #[test]
    fn invalid_ratio_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(block_mask_image(8, 8, 1.0, &mut rng).is_err());
        assert!(block_mask_image(8, 8, -0.1, &mut rng).is_err());
        assert!(TextMasker::new(10).mask(&words(3), 1.5, &mut rng).is_err());
    }

    #[test]
    fn tiny_grid_falls_back_to_single_patches() {
        let p = block_mask_image(1, 3, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(p.single_patch_fallback);
        assert_eq!(p.masked.len(), 2);
        assert_eq!(p.union_of_blocks(), p.masked);
    }

    #[test]
    fn blocks_respect_geometry_bounds() {
        let mut fallbacks = 0;
        for seed in 0..500 {
            let p = block_mask_image(8, 8, 0.4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            fallbacks += p.single_patch_fallback as usize;
            for b in &p.blocks {
                assert!(b.top + b.height <= 8 && b.left + b.width <= 8);
                if b.area() > 1 {
                    assert!(b.area() >= MIN_BLOCK_AREA);
                    assert!(aspect_ok(b.height, b.width));
                }
            }
            assert!((p.masked_fraction() - 0.4).abs() <= 0.05 + 1e-12);
            let max_block = p.blocks.iter().map(Block::area).max().unwrap();
            assert!(p.masked.len() as f64 >= 0.4 * 64.0);
            assert!((p.masked.len() as f64) < 0.4 * 64.0 + max_block as f64);
        }
        assert!(fallbacks < 25, "{fallbacks} plans needed single-patch top-up");
    }
}
