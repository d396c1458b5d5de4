use std::cell::RefCell;
use std::fs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xfm_core::data::{eval_pairs, ShapeWorld};
use xfm_core::encoders::{EncoderConfig, XfmModel};
use xfm_core::eval::{
    emit_reports, linear_probe, probe_data, retrieval_eval, retrieval_eval_with, stop_gradient_suite, GradcheckConfig,
    PairScorer, ProbeConfig, ReportOptions, GRADCHECK_FILE, PROBE_FILE, RETRIEVAL_FILE, STOPGRAD_FILE,
};
use xfm_core::trainer::{train, DataConfig, LrSchedule, RunConfig, CHECKPOINT_DIR};
use xfm_core::Result;

/// Scores from fixed tables; records every pair it is asked to match.
struct Table {
    sim: Vec<Vec<f64>>,
    itm: Box<dyn Fn(usize, usize) -> f64>,
    asked: RefCell<Vec<(usize, usize)>>,
}

impl PairScorer for Table {
    fn pool_size(&self) -> usize {
        self.sim.len()
    }

    fn similarity(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.sim.clone())
    }

    fn match_probability(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.asked.borrow_mut().extend_from_slice(pairs);
        Ok(pairs.iter().map(|&(i, t)| (self.itm)(i, t)).collect())
    }
}

fn random_table(n: usize, seed: u64, itm: Box<dyn Fn(usize, usize) -> f64>) -> Table {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Table {
        sim: (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        itm,
        asked: RefCell::new(Vec::new()),
    }
}

fn small() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 32,
        ..EncoderConfig::default()
    }
}

#[test]
fn singleton_pool_is_always_found() {
    let world = ShapeWorld::default();
    let model = XfmModel::new(small(), 0).unwrap();
    let p = eval_pairs(&world, 0, 1).unwrap();
    let r = retrieval_eval(&model, vec![p[0].image.clone()], vec![p[0].tokens.clone()], 1).unwrap();
    assert_eq!((r.text_retrieval.r1, r.image_retrieval.r1), (1.0, 1.0));
}

#[test]
fn constant_match_probability_keeps_stage_one_order() {
    let t = random_table(12, 1, Box::new(|_, _| 0.5));
    let (_, trace) = retrieval_eval_with(&t, 12).unwrap();
    assert_eq!(trace.final_text, trace.stage1_text);
    assert_eq!(trace.final_image, trace.stage1_image);
}

#[test]
fn stage_two_only_sees_the_top_k() {
    // The match head prefers the true pair; it can only help when stage one
    // already placed it in the top k.
    let t = random_table(20, 2, Box::new(|i, j| if i == j { 0.99 } else { 0.01 }));
    let k = 3;
    let (r, trace) = retrieval_eval_with(&t, k).unwrap();
    assert_eq!(r.rerank_outside_topk, 0);
    for (q, s1) in trace.stage1_text.iter().enumerate() {
        assert!(trace.reranked_text[q].iter().all(|c| s1[..k].contains(c)));
        let found = s1[..k].contains(&q);
        assert_eq!(trace.final_text[q][0] == q, found);
    }
    for &(i, t_) in t.asked.borrow().iter() {
        assert!(trace.stage1_text[i][..k].contains(&t_) || trace.stage1_image[t_][..k].contains(&i));
    }
    assert!(r.text_retrieval.r5 >= r.text_retrieval.r1);
}

#[test]
fn k_bounds_are_enforced() {
    let t = random_table(4, 3, Box::new(|_, _| 0.5));
    assert!(retrieval_eval_with(&t, 0).is_err());
    assert!(retrieval_eval_with(&t, 5).is_err());
}

#[test]
fn recall_is_invariant_to_pool_order() {
    let world = ShapeWorld::default();
    let model = XfmModel::new(small(), 5).unwrap();
    let mut pool = eval_pairs(&world, 5, 10).unwrap();
    let run = |pool: &[xfm_core::data::PairRecord]| {
        retrieval_eval(&model, pool.iter().map(|p| p.image.clone()).collect(), pool.iter().map(|p| p.tokens.clone()).collect(), 4)
            .unwrap()
    };
    let a = run(&pool);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    let b = run(&pool);
    assert_eq!(a, b);
}

#[test]
fn untrained_model_retrieves_at_chance() {
    let world = ShapeWorld::default();
    let mut total = 0.0;
    let seeds = 20;
    for s in 0..seeds {
        let model = XfmModel::new(EncoderConfig::default(), 1000 + s).unwrap();
        let pool = eval_pairs(&world, s, 64).unwrap();
        let r = retrieval_eval(&model, pool.iter().map(|p| p.image.clone()).collect(), pool.iter().map(|p| p.tokens.clone()).collect(), 4)
            .unwrap();
        for x in [r.text_retrieval, r.image_retrieval] {
            assert!((0.0..=1.0).contains(&x.r1) && x.r5 >= x.r1);
        }
        total += (r.text_retrieval.r1 + r.image_retrieval.r1) / 2.0;
    }
    let mean = total / seeds as f64;
    assert!((mean - 1.0 / 64.0).abs() <= 0.05, "mean R@1 {mean}");
}

#[test]
fn probe_leaves_the_backbone_alone_and_permuted_labels_are_chance() {
    let world = ShapeWorld::default();
    let model = XfmModel::new(small(), 2).unwrap();
    let before = model.params().tensors().to_vec();
    let train_set = probe_data(&world, 0, 0, 270);
    let test_set = probe_data(&world, 0, 270, 270);
    let cfg = ProbeConfig {
        epochs: 150,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&model, &train_set, &test_set, world.num_classes(), &cfg).unwrap();
    assert!(r.backbone_unchanged);
    assert_eq!(r.backbone_max_abs_grad, 0.0);
    assert!(before.iter().zip(model.params().tensors()).all(|(a, b)| a.bit_eq(b)));
    assert!((0.0..=1.0).contains(&r.accuracy));

    let mut labels: Vec<usize> = train_set.iter().map(|x| x.1).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let permuted: Vec<_> = train_set.iter().zip(labels).map(|((img, _), y)| (img.clone(), y)).collect();
    let p = linear_probe(&model, &permuted, &test_set, world.num_classes(), &cfg).unwrap();
    let chance = 1.0 / world.num_classes() as f64;
    assert!((p.accuracy - chance).abs() <= 0.1, "permuted-label accuracy {}", p.accuracy);

    let one_class: Vec<_> = train_set.iter().map(|(i, _)| (i.clone(), 0)).collect();
    assert!(linear_probe(&model, &one_class, &test_set, world.num_classes(), &cfg).is_err());
}

#[test]
fn broken_cross_attention_is_named_by_the_stop_gradient_suite() {
    let world = ShapeWorld::default();
    let mut model = XfmModel::new(small(), 3).unwrap();
    assert!(stop_gradient_suite(&model, &world, 0).unwrap().pass);
    let ids: Vec<_> = model.params().ids().filter(|&id| model.params().name(id).contains("cross_attn.out")).collect();
    for id in ids {
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let suite = stop_gradient_suite(&model, &world, 0).unwrap();
    assert!(!suite.pass);
    let text = serde_json::to_string(&suite).unwrap();
    assert!(text.contains("itm: vision gradient"), "{text}");
}

fn quick_options() -> ReportOptions {
    ReportOptions {
        pool: 8,
        k: 4,
        probe_train: 36,
        probe_test: 18,
        probe: ProbeConfig {
            epochs: 20,
            ..ProbeConfig::default()
        },
        gradcheck: GradcheckConfig {
            encoder: small(),
            seeds: 1,
            ..GradcheckConfig::default()
        },
    }
}

#[test]
fn reports_are_complete_and_reproducible() {
    let run = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        encoder: small(),
        schedule: LrSchedule {
            peak: 1e-3,
            warmup: 1,
            total: 2,
        },
        data: DataConfig::Fixed {
            texts: 4,
            images: 2,
            pairs: 3,
        },
        ..RunConfig::default()
    };
    train(&cfg, Some(run.path())).unwrap();
    let ckpt = run.path().join(CHECKPOINT_DIR);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = emit_reports(&ckpt, a.path(), &quick_options()).unwrap();
    assert!(s.pass());
    emit_reports(&ckpt, b.path(), &quick_options()).unwrap();
    for f in [RETRIEVAL_FILE, PROBE_FILE, STOPGRAD_FILE, GRADCHECK_FILE] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert!(emit_reports(&run.path().join("nope"), a.path(), &quick_options()).is_err());
}
