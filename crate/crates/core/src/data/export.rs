use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::seeds::{sample_seed, Stream};
use super::world::{SceneObject, ShapeWorld};
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::objectives::BoundingBox;

/// Sidecar of an exported image plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub side: usize,
    pub channels: usize,
    pub layout: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<SceneObject>,
}

/// One JSON-lines record of the text and pair streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonRecord {
    pub tokens: Vec<u32>,
    pub caption: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub seed: u64,
    /// File stem of the image, pair stream only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub texts: usize,
    pub images: usize,
    pub pairs: usize,
}

/// Writes `text/`, `image/` and `pair/` under `dir`. Image planes are
/// channel-major little-endian f32.
pub fn export_corpus(
    world: &ShapeWorld,
    dir: &Path,
    global_seed: u64,
    texts: usize,
    images: usize,
    pairs: usize,
) -> Result<ExportSummary> {
    for sub in ["text", "image", "pair"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut text_out = BufWriter::new(fs::File::create(dir.join("text/records.jsonl"))?);
    for i in 0..texts as u64 {
        let t = world.generate_text(sample_seed(global_seed, Stream::Text, i));
        let rec = JsonRecord {
            tokens: t.tokens.ids.clone(),
            caption: t.caption,
            bbox: None,
            seed: t.seed,
            image: None,
        };
        writeln!(text_out, "{}", serde_json::to_string(&rec)?)?;
    }
    text_out.flush()?;

    for i in 0..images {
        let r = world.generate_image(sample_seed(global_seed, Stream::Image, i as u64));
        write_image(&dir.join("image"), &format!("{i:06}"), &r.image, r.seed, r.objects)?;
    }

    let mut pair_out = BufWriter::new(fs::File::create(dir.join("pair/records.jsonl"))?);
    for i in 0..pairs {
        let p = world.generate_pair(sample_seed(global_seed, Stream::Pair, i as u64));
        let stem = format!("{i:06}");
        write_image(&dir.join("pair"), &stem, &p.image, p.seed, vec![p.object])?;
        let rec = JsonRecord {
            tokens: p.tokens.ids.clone(),
            caption: p.caption,
            bbox: Some(p.bbox),
            seed: p.seed,
            image: Some(stem),
        };
        writeln!(pair_out, "{}", serde_json::to_string(&rec)?)?;
    }
    pair_out.flush()?;
    Ok(ExportSummary { texts, images, pairs })
}

fn write_image(dir: &Path, stem: &str, img: &Image, seed: u64, objects: Vec<SceneObject>) -> Result<()> {
    let (s, c) = (img.side, img.channels);
    let mut bytes = Vec::with_capacity(s * s * c * 4);
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                bytes.extend_from_slice(&(img.pixel(y, x)[ch] as f32).to_le_bytes());
            }
        }
    }
    fs::write(dir.join(format!("{stem}.f32")), bytes)?;
    let side = ImageSidecar {
        side: s,
        channels: c,
        layout: "chw".into(),
        seed,
        objects,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Reads back an exported plane using its sidecar.
pub fn read_image_plane(dir: &Path, stem: &str) -> Result<Image> {
    let side: ImageSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.f32")))?;
    let (s, c) = (side.side, side.channels);
    if bytes.len() != s * s * c * 4 {
        return Err(Error::InvalidArgument(format!(
            "{stem}.f32 has {} bytes, sidecar implies {}",
            bytes.len(),
            s * s * c * 4
        )));
    }
    let planes: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut pixels = vec![0.0; s * s * c];
    for ch in 0..c {
        for i in 0..s * s {
            pixels[i * c + ch] = f64::from(planes[ch * s * s + i]);
        }
    }
    Image::new(s, c, pixels)
}
