use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::encoders::{Provenance, TokenSequence};

fn plan(positions: &[usize], original: Vec<u32>) -> MaskedText {
    MaskedText {
        corrupted: original.clone(),
        original,
        positions: positions.to_vec(),
    }
}

#[test]
fn empty_plan_gives_zero() {
    let g = Graph::new();
    let logits = g.param(Tensor::zeros(&[4, 11])).unwrap();
    let p = plan(&[], vec![1, 5, 6, 7]);
    assert_eq!(mlm_loss(logits, &p).unwrap().item().unwrap(), 0.0);
    assert_eq!(imlm_loss(logits, &p).unwrap().item().unwrap(), 0.0);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let g = Graph::new();
    let logits = g.param(Tensor::full(&[3, 11], 0.7)).unwrap();
    let l = mlm_loss(logits, &plan(&[2], vec![1, 4, 9])).unwrap().item().unwrap();
    assert!((l - 11f64.ln()).abs() < 1e-12);
}

#[test]
fn near_delta_logits_give_near_zero() {
    let g = Graph::new();
    let mut t = Tensor::zeros(&[2, 11]);
    t.data_mut()[11 + 7] = 1e6;
    let logits = g.param(t).unwrap();
    let l = mlm_loss(logits, &plan(&[1], vec![1, 7])).unwrap().item().unwrap();
    assert!(l < 1e-6);
}

#[test]
fn masked_position_beyond_logits_is_rejected() {
    let g = Graph::new();
    let logits = g.param(Tensor::zeros(&[2, 11])).unwrap();
    assert!(mlm_loss(logits, &plan(&[5], vec![1, 4, 4, 4, 4, 4])).is_err());
}

#[test]
fn mlm_and_imlm_share_the_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let logits = g.param(Tensor::randn(&[6, 13], 1.0, &mut rng)).unwrap();
    let p = plan(&[1, 3, 4], vec![1, 5, 6, 7, 8, 9]);
    let a = mlm_loss(logits, &p).unwrap().item().unwrap();
    let b = imlm_loss(logits, &p).unwrap().item().unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn itc_oracles() {
    let g = Graph::new();
    let one = g.param(Tensor::new(vec![1, 1], vec![3.7]).unwrap()).unwrap();
    assert_eq!(itc_loss(one).unwrap().item().unwrap(), 0.0);
    let l3 = 3f64.ln();
    let sim = g.param(Tensor::new(vec![2, 2], vec![l3, 0.0, 0.0, l3]).unwrap()).unwrap();
    let l = itc_loss(sim).unwrap().item().unwrap();
    assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((l - 0.28768).abs() < 1e-5);
    let rect = g.param(Tensor::zeros(&[2, 3])).unwrap();
    assert!(itc_loss(rect).is_err());
}

#[test]
fn itc_is_invariant_to_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 6;
    let m = Tensor::randn(&[b, b], 2.0, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut pm = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            pm[i * b + j] = m.data()[perm[i] * b + perm[j]];
        }
    }
    let g = Graph::new();
    let a = itc_loss(g.param(m).unwrap()).unwrap().item().unwrap();
    let c = itc_loss(g.param(Tensor::new(vec![b, b], pm).unwrap()).unwrap()).unwrap().item().unwrap();
    assert!((a - c).abs() < 1e-12);
}

#[test]
fn itc_decreases_when_diagonal_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let b = rng.random_range(2..8);
        let m = Tensor::randn(&[b, b], 1.0, &mut rng);
        let c: f64 = rng.random_range(0.01..2.0);
        let mut bumped = m.clone();
        for i in 0..b {
            bumped.data_mut()[i * b + i] += c;
        }
        let g = Graph::new();
        let a = itc_loss(g.param(m).unwrap()).unwrap().item().unwrap();
        let z = itc_loss(g.param(bumped).unwrap()).unwrap().item().unwrap();
        assert!(z < a);
    }
}

#[test]
fn itm_closed_forms() {
    let g = Graph::new();
    let v = |x: f64| g.param(Tensor::full(&[3], x)).unwrap();
    let (l, d) = itm_loss(v(0.5), v(0.5), v(0.5)).unwrap();
    assert!((l.item().unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(d.clamped, 0);
    let eps = 1e-9;
    let (l, _) = itm_loss(v(1.0 - eps), v(eps), v(eps)).unwrap();
    assert!(l.item().unwrap() < 1e-8);
    let (l, d) = itm_loss(v(1.0), v(0.0), v(0.0)).unwrap();
    assert!(l.item().unwrap().is_finite());
    assert_eq!(d.clamped, 9);
}

#[test]
fn itm_symmetric_in_negative_roles() {
    let g = Graph::new();
    let pos = g.param(Tensor::vector(vec![0.9, 0.6]).unwrap()).unwrap();
    let a = g.param(Tensor::vector(vec![0.2, 0.3]).unwrap()).unwrap();
    let b = g.param(Tensor::vector(vec![0.4, 0.1]).unwrap()).unwrap();
    let x = itm_loss(pos, a, b).unwrap().0.item().unwrap();
    let y = itm_loss(pos, b, a).unwrap().0.item().unwrap();
    assert!((x - y).abs() < 1e-15);
}

#[test]
fn negatives_exclude_self_and_cover_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(sample_negatives(1, &mut rng).is_none());
    let two = sample_negatives(2, &mut rng).unwrap();
    assert_eq!(two.image, vec![1, 0]);
    assert_eq!(two.text, vec![1, 0]);
    for _ in 0..200 {
        let n = sample_negatives(5, &mut rng).unwrap();
        for i in 0..5 {
            assert_ne!(n.image[i], i);
            assert_ne!(n.text[i], i);
        }
    }
}

#[test]
fn hard_negatives_follow_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = 3;
    let mut sim = Tensor::zeros(&[b, b]);
    sim.data_mut()[2] = 50.0; // image 0 vs text 2
    let mut hits = 0;
    for _ in 0..200 {
        let n = sample_hard_negatives(&sim, &mut rng).unwrap().unwrap();
        for i in 0..b {
            assert_ne!(n.image[i], i);
            assert_ne!(n.text[i], i);
        }
        hits += (n.text[0] == 2) as usize;
    }
    assert_eq!(hits, 200);
}

fn seq<'g>(g: &'g Graph, data: Vec<f64>, shape: [usize; 3]) -> FeatureSequence<'g> {
    FeatureSequence {
        hidden: g.param(Tensor::new(shape.to_vec(), data).unwrap()).unwrap(),
        valid: None,
        provenance: Provenance::Vision,
    }
}

fn one_patch_plan(grid: usize, masked: &[usize]) -> PatchMaskPlan {
    let mut p = PatchMaskPlan::empty(grid, grid);
    p.masked = masked.iter().copied().collect();
    p
}

#[test]
fn mim_documented_example() {
    let g = Graph::new();
    // 2x2 grid: positions [CLS, p0, p1, p2, p3], hidden 2; only p1 masked.
    let target = vec![0.0; 10];
    let mut pred = vec![0.0; 10];
    pred[4] = 0.3;
    pred[5] = -0.4;
    let l = mim_loss(&seq(&g, pred, [1, 5, 2]), &seq(&g, target, [1, 5, 2]), &[one_patch_plan(2, &[1])])
        .unwrap()
        .item()
        .unwrap();
    assert!((l - 0.0625).abs() < 1e-15);
}

#[test]
fn mim_ignores_unmasked_positions_and_scales_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Graph::new();
    let target = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
    let pred = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
    let plans = [one_patch_plan(2, &[0, 3]), one_patch_plan(2, &[2])];
    let eval = |p: &Tensor, t: &Tensor| {
        mim_loss(&seq(&g, p.data().to_vec(), [2, 5, 3]), &seq(&g, t.data().to_vec(), [2, 5, 3]), &plans)
            .unwrap()
            .item()
            .unwrap()
    };
    let base = eval(&pred, &target);
    assert!(base > 0.0);
    assert_eq!(eval(&pred, &pred), 0.0);

    let mut poked = pred.clone();
    for (item, pos) in [(0usize, 2usize), (0, 3), (1, 1), (1, 2), (1, 4)] {
        for k in 0..3 {
            poked.data_mut()[(item * 5 + pos) * 3 + k] += 7.0;
        }
    }
    assert_eq!(eval(&poked, &target).to_bits(), base.to_bits());

    let doubled: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| t + 2.0 * (p - t))
        .collect();
    let d = eval(&Tensor::new(vec![2, 5, 3], doubled).unwrap(), &target);
    assert!((d - 4.0 * base).abs() < 1e-12);
}

#[test]
fn mim_rejects_plan_grid_mismatch() {
    let g = Graph::new();
    let x = seq(&g, vec![0.0; 10], [1, 5, 2]);
    assert!(mim_loss(&x, &x, &[one_patch_plan(3, &[1])]).is_err());
}

#[test]
fn bbp_documented_values() {
    let g = Graph::new();
    let cases = [
        ([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.4, 0.4], 1.15),
        ([0.2, 0.2, 0.2, 0.2], [0.8, 0.8, 0.2, 0.2], 3.075),
    ];
    for (truth, pred, want) in cases {
        let t = BoundingBox::new(truth[0], truth[1], truth[2], truth[3]).unwrap();
        let p = g.param(Tensor::new(vec![1, 4], pred.to_vec()).unwrap()).unwrap();
        let l = bbp_loss(p, &[t]).unwrap().item().unwrap();
        assert!((l - want).abs() < 1e-9, "{l} vs {want}");
    }
    let t = BoundingBox::new(0.3, 0.4, 0.2, 0.5).unwrap();
    let p = g.param(Tensor::new(vec![1, 4], t.to_array().to_vec()).unwrap()).unwrap();
    assert!(bbp_loss(p, &[t]).unwrap().item().unwrap().abs() < 1e-15);
}

#[test]
fn giou_stays_in_range_and_bbp_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let random_box = |rng: &mut ChaCha8Rng| {
        BoundingBox::new(rng.random(), rng.random(), rng.random_range(1e-3..=1.0), rng.random_range(1e-3..=1.0)).unwrap()
    };
    for _ in 0..100_000 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let v = giou(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert!(1.0 - v + a.l1(&b) >= 0.0);
    }
}

#[test]
fn total_is_the_unweighted_sum() {
    let g = Graph::new();
    let mut b = LossBundle::default();
    assert!(matches!(b.total(), Err(Error::EmptyBundle)));
    b.itc = Some(g.param(Tensor::scalar(0.75)).unwrap());
    assert_eq!(b.total().unwrap().item().unwrap(), 0.75);
    for o in Objective::ALL {
        *b.slot(o) = Some(g.param(Tensor::scalar(1.0)).unwrap());
    }
    assert_eq!(b.total().unwrap().item().unwrap(), 6.0);
    assert_eq!(b.values().unwrap().total, 6.0);
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Graph::new();
    let x = g.param(Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
    let mut b = LossBundle::default();
    b.itc = Some(itc_loss(x).unwrap());
    b.mlm = Some(token_cross_entropy(x, &[0, 3, 2, 2]).unwrap());
    b.mim = Some(x.mul(x).unwrap().mean().unwrap());
    g.backward(b.total().unwrap()).unwrap();
    let total = x.grad().unwrap();
    let mut sum = Tensor::zeros(&[4, 4]);
    for (_, v) in b.present() {
        g.backward(v).unwrap();
        sum.add_assign(&x.grad().unwrap());
    }
    assert!(total.max_abs_diff(&sum) < 1e-14);
}

#[test]
fn masked_text_round_trip_through_plan_helpers() {
    let tokens = TokenSequence::from_word_ids(&[5, 6, 7]);
    let p = plan(&[2], tokens.ids.clone());
    assert_eq!(p.targets(), vec![6]);
    assert_eq!(p.corrupted_sequence(&tokens).attention_mask, tokens.attention_mask);
}
