use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Image, TokenSequence, CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};
use crate::error::{Error, Result};
use crate::objectives::BoundingBox;

use super::seeds::{mix, Stream};

/// Background value of every channel.
pub const BACKGROUND: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }

    /// Integer membership test relative to the center. Every kind fills a
    /// `(2r + 1) x (2r + 1)` box centered on the anchor pixel.
    pub fn contains(self, dy: i64, dx: i64, r: i64) -> bool {
        match self {
            Self::Square => dx.abs() <= r && dy.abs() <= r,
            Self::Circle => dx * dx + dy * dy <= r * r,
            // Apex up, base on the bottom row.
            Self::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f64; 3],
}

/// One of the nine named regions of the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

pub const ROW_NAMES: [&str; 3] = ["top", "middle", "bottom"];
pub const COL_NAMES: [&str; 3] = ["left", "center", "right"];

impl Cell {
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..3).flat_map(|row| (0..3).map(move |col| Cell { row, col }))
    }

    /// Pixel range `[lo, hi)` of band `i` of 3.
    pub fn band(i: usize, side: usize) -> (usize, usize) {
        (i * side / 3, (i + 1) * side / 3)
    }

    pub fn of_pixel(row: usize, col: usize, side: usize) -> Cell {
        let find = |x: usize| (0..3).find(|&i| x < Self::band(i, side).1).unwrap_or(2);
        Cell {
            row: find(row),
            col: find(col),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", ROW_NAMES[self.row], COL_NAMES[self.col])
    }
}

/// A rendered object and everything the caption says about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub cell: Cell,
    /// Anchor pixel (row, column).
    pub center: (usize, usize),
    pub radius: usize,
}

impl SceneObject {
    pub fn pixels(&self, side: usize) -> Vec<(usize, usize)> {
        let r = self.radius as i64;
        let (cy, cx) = (self.center.0 as i64, self.center.1 as i64);
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if self.shape.contains(dy, dx, r) && (0..side as i64).contains(&y) && (0..side as i64).contains(&x) {
                    out.push((y as usize, x as usize));
                }
            }
        }
        out
    }

    /// Tight box of the rendered pixels, normalized by the image side.
    pub fn bbox(&self, side: usize) -> BoundingBox {
        tight_box(&self.pixels(side), side).expect("objects always cover pixels")
    }
}

pub(crate) fn tight_box(pixels: &[(usize, usize)], side: usize) -> Option<BoundingBox> {
    let y1 = pixels.iter().map(|p| p.0).min()?;
    let y2 = pixels.iter().map(|p| p.0).max()?;
    let x1 = pixels.iter().map(|p| p.1).min()?;
    let x2 = pixels.iter().map(|p| p.1).max()?;
    let s = side as f64;
    Some(BoundingBox {
        cx: (x1 + x2 + 1) as f64 / 2.0 / s,
        cy: (y1 + y2 + 1) as f64 / 2.0 / s,
        w: (x2 - x1 + 1) as f64 / s,
        h: (y2 - y1 + 1) as f64 / s,
    })
}

/// Word-level vocabulary over the closed caption grammar. Ids 0..3 are the
/// special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    /// Inverse of the serialized form, which already includes the specials.
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = ["[PAD]", "[CLS]", "[MASK]"].iter().map(|s| s.to_string()).collect();
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn encode(&self, caption: &str) -> Result<TokenSequence> {
        let ids = caption
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::InvalidArgument(format!("word {w:?} not in vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence::from_word_ids(&ids))
    }

    /// Words of the non-special, non-padding positions joined by spaces.
    pub fn decode(&self, tokens: &TokenSequence) -> String {
        tokens
            .ids
            .iter()
            .zip(&tokens.attention_mask)
            .filter(|(&id, &m)| m && id >= NUM_SPECIAL)
            .filter_map(|(&id, _)| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const _: () = assert!(PAD_ID == 0 && CLS_ID == 1 && MASK_ID == 2);

/// Pair-stream sample: one object, its caption and its box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: u64,
    pub image: Image,
    pub caption: String,
    pub tokens: TokenSequence,
    pub bbox: BoundingBox,
    pub object: SceneObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub seed: u64,
    pub caption: String,
    pub tokens: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub seed: u64,
    pub image: Image,
    pub objects: Vec<SceneObject>,
}

/// The synthetic corpus definition: geometry, palette, grammar and
/// vocabulary. Every sample is a pure function of its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeWorld {
    pub image_side: usize,
    pub colors: Vec<NamedColor>,
    pub min_radius: usize,
    pub max_radius: usize,
    pub max_text_len: usize,
    pub max_image_objects: usize,
    vocab: Vocabulary,
}

impl Default for ShapeWorld {
    fn default() -> Self {
        let color = |name: &str, rgb: [f64; 3]| NamedColor {
            name: name.into(),
            rgb,
        };
        let colors = vec![
            color("red", [1.0, -1.0, -1.0]),
            color("green", [-1.0, 1.0, -1.0]),
            color("blue", [-1.0, -1.0, 1.0]),
            color("yellow", [1.0, 1.0, -1.0]),
            color("magenta", [1.0, -1.0, 1.0]),
            color("cyan", [-1.0, 1.0, 1.0]),
        ];
        Self::new(32, colors, 16).expect("default world is valid")
    }
}

impl ShapeWorld {
    pub fn new(image_side: usize, colors: Vec<NamedColor>, max_text_len: usize) -> Result<Self> {
        if colors.len() < 4 {
            return Err(Error::Config("shape world needs at least four colors".into()));
        }
        if image_side < 24 {
            return Err(Error::Config("image side below 24 leaves no room for shapes".into()));
        }
        let vocab = Self::vocab_for(&colors);
        let w = Self {
            image_side,
            colors,
            min_radius: 2,
            max_radius: 4.min(image_side / 3 / 2 - 1),
            max_text_len,
            max_image_objects: 3,
            vocab,
        };
        if w.longest_text() > max_text_len {
            return Err(Error::Config(format!(
                "captions need {} tokens, max_text_len is {max_text_len}",
                w.longest_text()
            )));
        }
        Ok(w)
    }


    fn vocab_for(colors: &[NamedColor]) -> Vocabulary {
        let mut words: Vec<String> = ["a", "at", "the", "and"].iter().map(|s| s.to_string()).collect();
        words.extend(colors.iter().map(|c| c.name.clone()));
        words.extend(ShapeKind::ALL.iter().map(|s| s.name().to_string()));
        words.extend(ROW_NAMES.iter().chain(&COL_NAMES).map(|s| s.to_string()));
        Vocabulary::new(words)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Two clauses joined by "and" plus [CLS].
    fn longest_text(&self) -> usize {
        1 + 7 * 2 + 1
    }

    pub fn num_classes(&self) -> usize {
        ShapeKind::ALL.len() * self.colors.len()
    }

    /// Probe label: shape x color.
    pub fn class_of(&self, o: &SceneObject) -> usize {
        let s = ShapeKind::ALL.iter().position(|&k| k == o.shape).expect("known shape");
        s * self.colors.len() + o.color
    }

    pub fn clause(&self, o: &SceneObject) -> String {
        format!("a {} {} at the {}", self.colors[o.color].name, o.shape.name(), o.cell)
    }

    fn random_object<R: Rng>(&self, cell: Cell, rng: &mut R) -> SceneObject {
        let radius = rng.random_range(self.min_radius..=self.max_radius);
        let pick = |band: usize, rng: &mut R| {
            let (lo, hi) = Cell::band(band, self.image_side);
            rng.random_range(lo + radius..=hi - 1 - radius)
        };
        let row = pick(cell.row, rng);
        let col = pick(cell.col, rng);
        SceneObject {
            shape: ShapeKind::ALL[rng.random_range(0..3)],
            color: rng.random_range(0..self.colors.len()),
            cell,
            center: (row, col),
            radius,
        }
    }

    fn random_cell<R: Rng>(rng: &mut R) -> Cell {
        Cell {
            row: rng.random_range(0..3),
            col: rng.random_range(0..3),
        }
    }

    pub fn render(&self, objects: &[SceneObject]) -> Image {
        let (s, c) = (self.image_side, 3);
        let mut pixels = vec![BACKGROUND; s * s * c];
        for o in objects {
            let rgb = self.colors[o.color].rgb;
            for (y, x) in o.pixels(s) {
                pixels[(y * s + x) * c..(y * s + x + 1) * c].copy_from_slice(&rgb);
            }
        }
        Image {
            side: s,
            channels: c,
            pixels,
        }
    }

    pub fn generate_pair(&self, seed: u64) -> PairRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, Stream::Pair as u64));
        let object = self.random_object(Self::random_cell(&mut rng), &mut rng);
        let caption = self.clause(&object);
        PairRecord {
            seed,
            image: self.render(&[object]),
            tokens: self.vocab.encode(&caption).expect("grammar words are in the vocabulary"),
            bbox: object.bbox(self.image_side),
            caption,
            object,
        }
    }

    /// One or two clauses; two with probability 3/4.
    pub fn generate_text(&self, seed: u64) -> TextRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, Stream::Text as u64));
        let clauses = if rng.random_bool(0.75) { 2 } else { 1 };
        let caption = (0..clauses)
            .map(|_| {
                let o = self.random_object(Self::random_cell(&mut rng), &mut rng);
                self.clause(&o)
            })
            .collect::<Vec<_>>()
            .join(" and ");
        TextRecord {
            seed,
            tokens: self.vocab.encode(&caption).expect("grammar words are in the vocabulary"),
            caption,
        }
    }

    /// One to `max_image_objects` objects in distinct cells.
    pub fn generate_image(&self, seed: u64) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, Stream::Image as u64));
        let n = rng.random_range(1..=self.max_image_objects);
        let mut cells: Vec<Cell> = Cell::all().collect();
        cells.shuffle(&mut rng);
        let objects: Vec<SceneObject> = cells[..n].iter().map(|&c| self.random_object(c, &mut rng)).collect();
        ImageRecord {
            seed,
            image: self.render(&objects),
            objects,
        }
    }

    /// Reads the object back from the pixels and rebuilds its clause; the
    /// caption must match it exactly. Returns the recovered clause.
    pub fn check_caption(&self, pair: &PairRecord) -> Result<String> {
        let img = &pair.image;
        let s = img.side;
        let mut by_color: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for y in 0..s {
            for x in 0..s {
                let px = img.pixel(y, x);
                if px.iter().all(|&v| v == BACKGROUND) {
                    continue;
                }
                let color = self
                    .colors
                    .iter()
                    .position(|c| c.rgb.as_slice() == px)
                    .ok_or_else(|| Error::InvalidArgument(format!("pixel ({y}, {x}) has no palette color")))?;
                by_color.entry(color).or_default().push((y, x));
            }
        }
        if by_color.len() != 1 {
            return Err(Error::InvalidArgument(format!("expected one object, found {} colors", by_color.len())));
        }
        let (color, mut pixels) = by_color.into_iter().next().expect("one entry");
        pixels.sort_unstable();
        let y1 = pixels.iter().map(|p| p.0).min().expect("non-empty");
        let y2 = pixels.iter().map(|p| p.0).max().expect("non-empty");
        let x1 = pixels.iter().map(|p| p.1).min().expect("non-empty");
        let x2 = pixels.iter().map(|p| p.1).max().expect("non-empty");
        if y2 - y1 != x2 - x1 || (y2 - y1) % 2 != 0 {
            return Err(Error::InvalidArgument("object extent is not an odd square".into()));
        }
        let radius = (y2 - y1) / 2;
        let center = (y1 + radius, x1 + radius);
        let cell = Cell::of_pixel(center.0, center.1, s);
        let shape = ShapeKind::ALL
            .into_iter()
            .find(|&k| {
                let mut cand = SceneObject {
                    shape: k,
                    color,
                    cell,
                    center,
                    radius,
                }
                .pixels(s);
                cand.sort_unstable();
                cand == pixels
            })
            .ok_or_else(|| Error::InvalidArgument("pixels match no shape template".into()))?;
        let clause = self.clause(&SceneObject {
            shape,
            color,
            cell,
            center,
            radius,
        });
        if clause != pair.caption {
            return Err(Error::InvalidArgument(format!(
                "caption {:?} but the image shows {clause:?}",
                pair.caption
            )));
        }
        Ok(clause)
    }
}
