use std::collections::BTreeSet;

use super::*;
use crate::encoders::{EncoderConfig, CLS_ID};

fn world() -> ShapeWorld {
    ShapeWorld::default()
}

#[test]
fn vocabulary_covers_the_grammar_and_fits_the_encoder() {
    let w = world();
    let v = w.vocab();
    assert_eq!(v.len(), 3 + 4 + 6 + 3 + 6);
    assert!(v.len() <= EncoderConfig::default().vocab_size);
    assert_eq!(v.id("[CLS]"), Some(CLS_ID));
    let json = serde_json::to_string(v).unwrap();
    let back: Vocabulary = serde_json::from_str(&json).unwrap();
    assert_eq!(&back, v);
    assert!(v.encode("a purple circle").is_err());
    let t = v.encode("a red circle").unwrap();
    assert_eq!(v.decode(&t), "a red circle");
}

#[test]
fn samples_are_pure_functions_of_the_seed() {
    let w = world();
    for seed in [0, 1, u64::MAX] {
        assert_eq!(w.generate_pair(seed), w.generate_pair(seed));
        assert_eq!(w.generate_text(seed), w.generate_text(seed));
        assert_eq!(w.generate_image(seed), w.generate_image(seed));
    }
}

#[test]
fn boxes_are_valid_and_tight_over_many_seeds() {
    let w = world();
    let s = w.image_side as f64;
    for seed in 0..100_000u64 {
        let p = w.generate_pair(seed);
        let b = p.bbox;
        b.validate().unwrap();
        assert!(b.w > 0.0 && b.h > 0.0 && b.cx - b.w / 2.0 >= 0.0 && b.cx + b.w / 2.0 <= 1.0);
        let [x1, y1, x2, y2] = b.corners();
        let mut touches = [false; 4];
        for (y, x) in p.object.pixels(w.image_side) {
            let (py, px) = (y as f64, x as f64);
            assert!(px >= x1 * s - 1e-9 && px + 1.0 <= x2 * s + 1e-9, "seed {seed}");
            assert!(py >= y1 * s - 1e-9 && py + 1.0 <= y2 * s + 1e-9, "seed {seed}");
            touches[0] |= (px - x1 * s).abs() < 1e-9;
            touches[1] |= (px + 1.0 - x2 * s).abs() < 1e-9;
            touches[2] |= (py - y1 * s).abs() < 1e-9;
            touches[3] |= (py + 1.0 - y2 * s).abs() < 1e-9;
        }
        assert!(touches.iter().all(|&t| t), "seed {seed}: box is not tight");
    }
}

#[test]
fn captions_are_faithful_to_the_pixels() {
    let w = world();
    for seed in 0..20_000u64 {
        let p = w.generate_pair(seed);
        assert_eq!(w.check_caption(&p).unwrap(), p.caption);
        assert_eq!(Cell::of_pixel(p.object.center.0, p.object.center.1, w.image_side), p.object.cell);
    }
}

#[test]
fn checker_rejects_a_wrong_caption() {
    let w = world();
    let mut p = w.generate_pair(3);
    let c = &w.colors[(p.object.color + 1) % w.colors.len()].name;
    p.caption = format!("a {c} {} at the {}", p.object.shape.name(), p.object.cell);
    assert!(w.check_caption(&p).is_err());
    let mut q = w.generate_pair(3);
    let other = ShapeKind::ALL.into_iter().find(|&k| k != q.object.shape).unwrap();
    q.caption = format!("a {} {} at the {}", w.colors[q.object.color].name, other.name(), q.object.cell);
    assert!(w.check_caption(&q).is_err());
}

#[test]
fn shape_templates_are_distinct_at_every_radius() {
    for r in 2..=4i64 {
        let cells = |k: ShapeKind| {
            (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| k.contains(dy, dx, r))
                .collect::<BTreeSet<_>>()
        };
        let sets: Vec<_> = ShapeKind::ALL.iter().map(|&k| cells(k)).collect();
        assert_ne!(sets[0], sets[1]);
        assert_ne!(sets[1], sets[2]);
        assert_ne!(sets[0], sets[2]);
        for s in &sets {
            // Every template spans the full (2r + 1) square in both axes.
            assert_eq!(s.iter().map(|p| p.0).min(), Some(-r));
            assert_eq!(s.iter().map(|p| p.0).max(), Some(r));
            assert_eq!(s.iter().map(|p| p.1).min(), Some(-r));
            assert_eq!(s.iter().map(|p| p.1).max(), Some(r));
        }
    }
}

#[test]
fn text_stream_stays_in_vocabulary_and_length() {
    let w = world();
    let mut lengths = BTreeSet::new();
    for seed in 0..5_000u64 {
        let t = w.generate_text(seed);
        assert!(t.tokens.len() <= w.max_text_len);
        assert!(t.tokens.ids.iter().all(|&id| (id as usize) < w.vocab().len()));
        assert_eq!(t.tokens.ids[0], CLS_ID);
        assert_eq!(w.vocab().decode(&t.tokens), t.caption);
        lengths.insert(t.tokens.len());
    }
    assert_eq!(lengths, BTreeSet::from([8, 16]));
}

#[test]
fn image_stream_scenes() {
    let w = world();
    let mut counts = BTreeSet::new();
    for seed in 0..2_000u64 {
        let r = w.generate_image(seed);
        assert!(r.image.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        let cells: BTreeSet<_> = r.objects.iter().map(|o| o.cell).collect();
        assert_eq!(cells.len(), r.objects.len());
        counts.insert(r.objects.len());
    }
    assert_eq!(counts, BTreeSet::from([1, 2, 3]));
}

#[test]
fn streams_are_independent_for_equal_seeds() {
    let w = world();
    let differ = (0..50u64).filter(|&s| w.generate_image(s).image != w.generate_pair(s).image).count();
    assert_eq!(differ, 50);
}

#[test]
fn schedule_sizes_and_disjoint_steps() {
    let sizes = BatchSizes::default();
    let [t, i, p] = schedule_batches(7, 0, &sizes).unwrap();
    assert_eq!((t.seeds.len(), i.seeds.len(), p.seeds.len()), (32, 12, 12));
    assert_eq!((t.modality, i.modality, p.modality), (Modality::Text, Modality::Image, Modality::Pair));
    for step in 0..20 {
        let a = schedule_batches(7, step, &sizes).unwrap();
        let b = schedule_batches(7, step + 1, &sizes).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let xs: BTreeSet<_> = x.seeds.iter().collect();
            assert_eq!(xs.len(), x.seeds.len());
            assert!(y.seeds.iter().all(|s| !xs.contains(s)));
        }
    }
    assert_ne!(schedule_batches(7, 0, &sizes).unwrap(), schedule_batches(8, 0, &sizes).unwrap());
}

#[test]
fn zero_sizes_need_the_explicit_flag() {
    let mut sizes = BatchSizes {
        text: 0,
        ..BatchSizes::default()
    };
    assert!(schedule_batches(0, 0, &sizes).is_err());
    sizes.allow_disabled_streams = true;
    let [t, _, _] = schedule_batches(0, 0, &sizes).unwrap();
    assert!(t.seeds.is_empty());
}

#[test]
fn fixed_corpus_has_unique_captions_and_is_reproducible() {
    let w = world();
    let c = FixedCorpus::generate(&w, 5, 16, 8, 8).unwrap();
    let captions: BTreeSet<_> = c.batch.pairs.iter().map(|p| &p.caption).collect();
    assert_eq!(captions.len(), 8);
    assert_eq!(c, FixedCorpus::generate(&w, 5, 16, 8, 8).unwrap());
    let src = DataSource::Fixed(c.clone());
    assert_eq!(src.batch(0).unwrap(), src.batch(99).unwrap());
    assert!(unique_pairs(&w, 0, Stream::Pair, 500).is_err());
    let eval = eval_pairs(&w, 5, 64).unwrap();
    assert!(eval.iter().all(|e| c.batch.pairs.iter().all(|p| p.seed != e.seed)));
}

#[test]
fn probe_classes_cover_shape_by_color() {
    let w = world();
    let classes: BTreeSet<_> = (0..3_000u64).map(|s| w.class_of(&w.generate_pair(s).object)).collect();
    assert_eq!(classes.len(), w.num_classes());
    assert_eq!(*classes.iter().max().unwrap(), w.num_classes() - 1);
}

#[test]
fn export_round_trips() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let s = export_corpus(&w, dir.path(), 11, 5, 3, 4).unwrap();
    assert_eq!((s.texts, s.images, s.pairs), (5, 3, 4));
    let lines = std::fs::read_to_string(dir.path().join("pair/records.jsonl")).unwrap();
    let recs: Vec<JsonRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    for (i, r) in recs.iter().enumerate() {
        let p = w.generate_pair(r.seed);
        assert_eq!(r.caption, p.caption);
        assert_eq!(r.tokens, p.tokens.ids);
        assert_eq!(r.bbox, Some(p.bbox));
        let img = read_image_plane(&dir.path().join("pair"), &format!("{i:06}")).unwrap();
        assert_eq!(img, p.image);
    }
    let texts = std::fs::read_to_string(dir.path().join("text/records.jsonl")).unwrap();
    assert!(texts.lines().all(|l| !l.contains("\"box\"")));
    let first = read_image_plane(&dir.path().join("image"), "000000").unwrap();
    assert_eq!(first, w.generate_image(sample_seed(11, Stream::Image, 0)).image);
    std::fs::write(dir.path().join("image/000001.f32"), [0u8; 7]).unwrap();
    assert!(read_image_plane(&dir.path().join("image"), "000001").is_err());
}
