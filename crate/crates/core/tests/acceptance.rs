//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfm_core::autodiff::{Graph, Tensor};
use xfm_core::data::{sample_seed, ShapeWorld, Stream};
use xfm_core::encoders::{EncoderConfig, ParamGroup, XfmModel};
use xfm_core::eval::{gradcheck_inputs, gradcheck_suite, retrieval_eval, GradcheckConfig};
use xfm_core::gradflow::{
    forward_pretraining, verify_stop_gradient, GradFlowConfig, MimTargets, StepInputs, Variant,
};
use xfm_core::masking::{block_mask_image, MaskedText, TextMasker};
use xfm_core::objectives::{bbp_loss, itc_loss, mlm_loss, BoundingBox, Objective};
use xfm_core::trainer::{
    train, AdamW, AdamWConfig, DataConfig, LrSchedule, RunConfig, BLOB_FILE, CHECKPOINT_DIR, MANIFEST_FILE,
    METRICS_FILE,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Desk-scale inputs with boxed pairs and masked tokens in both text paths.
fn desk_inputs(seed: u64) -> StepInputs {
    gradcheck_inputs(&ShapeWorld::default(), &EncoderConfig::default(), seed).expect("inputs")
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let report = gradcheck_suite(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report.worst.values().copied().fold(0.0, f64::max);
    let per: Vec<String> = report.worst.iter().map(|(o, e)| format!("{o} {e:.1e}")).collect();
    check(
        report.pass && cfg.seeds >= 20 && worst < 1e-5 && elapsed < Duration::from_secs(300),
        format!(
            "max rel err {worst:.2e} < 1e-5 over {} seeds x {} probes [{}]; {:.1} s < 300 s",
            cfg.seeds,
            report.rows[0].probes,
            per.join(", "),
            secs(elapsed)
        ),
    )
}

fn stop_gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let model = XfmModel::new(EncoderConfig::default(), 50 + seed).map_err(|e| e.to_string())?;
        let inputs = desk_inputs(70 + seed);
        for v in Variant::ALL {
            let r = verify_stop_gradient(&model, &inputs, &GradFlowConfig::new(v)).map_err(|e| e.to_string())?;
            ok &= r.pass;
            lines.extend(r.failures.iter().map(|f| format!("{v}: {f}")));
            let lang = |o| r.max_abs(o, ParamGroup::Text).unwrap_or(f64::NAN);
            match v {
                Variant::All => {
                    ok &= [Objective::Itm, Objective::Imlm, Objective::Bbp].iter().all(|&o| lang(o) == 0.0);
                    ok &= lang(Objective::Mlm) > 0.0 && lang(Objective::Itc) > 0.0;
                }
                Variant::Wostop => {
                    ok &= [Objective::Mlm, Objective::Itc, Objective::Itm, Objective::Imlm, Objective::Bbp]
                        .iter()
                        .all(|&o| lang(o) > 0.0);
                }
                _ => {}
            }
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    check(
        ok,
        format!(
            "5 variant patterns x 3 seeds exact; all: ITM/IMLM/BBP language max|g| == 0; wostop: all five > 0; {:.1} s < 60 s{}",
            secs(elapsed),
            if lines.is_empty() { String::new() } else { format!("; {}", lines.join("; ")) }
        ),
    )
}

fn value_invariance() -> Outcome {
    let mut checked = 0;
    for seed in 0..5u64 {
        let model = XfmModel::new(EncoderConfig::default(), seed).map_err(|e| e.to_string())?;
        let inputs = desk_inputs(seed);
        let values = |v| {
            let g = Graph::new();
            let p = model.bind(&g, true).unwrap();
            forward_pretraining(&model, &p, &inputs, &GradFlowConfig::new(v), MimTargets::Live)
                .unwrap()
                .bundle
                .values()
                .unwrap()
        };
        let base = values(Variant::All);
        for v in [Variant::SMlm, Variant::SItm, Variant::Wostop] {
            if !base.bit_eq(&values(v)) {
                return Err(format!("seed {seed}: {v} differs from all"));
            }
            checked += 1;
        }
    }
    Ok(format!("loss values bit-identical across all/s-mlm/s-itm/wostop ({checked} comparisons)"))
}

fn mim_self_target() -> Outcome {
    let mut compared = 0usize;
    for seed in 0..5u64 {
        let model = XfmModel::new(EncoderConfig::default(), 10 + seed).map_err(|e| e.to_string())?;
        let frozen = model.clone();
        let inputs = desk_inputs(20 + seed);
        let grads = |t: MimTargets<'_>| {
            let g = Graph::new();
            let p = model.bind(&g, true).unwrap();
            let out = forward_pretraining(&model, &p, &inputs, &GradFlowConfig::default(), t).unwrap();
            g.backward(out.bundle.mim.unwrap()).unwrap();
            p.grads()
        };
        let live = grads(MimTargets::Live);
        let fixed = grads(MimTargets::Frozen(&frozen));
        for (id, (a, b)) in model.params().ids().zip(live.iter().zip(&fixed)) {
            if model.params().group(id) == ParamGroup::Vision {
                if !a.bit_eq(b) {
                    return Err(format!("seed {seed}: {} differs", model.params().name(id)));
                }
                compared += a.len();
            }
        }
        if live.iter().all(|t| t.max_abs() == 0.0) {
            return Err("MIM produced no gradient".into());
        }
    }
    Ok(format!("live detached vs frozen-copy targets: {compared} vision gradient entries bit-identical over 5 seeds"))
}

fn loss_oracles() -> Outcome {
    let g = Graph::new();
    let l3 = 3f64.ln();
    let itc = itc_loss(g.constant(Tensor::new(vec![2, 2], vec![l3, 0.0, 0.0, l3]).unwrap()).unwrap())
        .and_then(|v| v.item())
        .map_err(|e| e.to_string())?;
    let bbp = |truth: [f64; 4], pred: [f64; 4]| {
        let t = BoundingBox::new(truth[0], truth[1], truth[2], truth[3]).unwrap();
        bbp_loss(g.constant(Tensor::new(vec![1, 4], pred.to_vec()).unwrap()).unwrap(), &[t])
            .unwrap()
            .item()
            .unwrap()
    };
    let b1 = bbp([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.4, 0.4]);
    let b2 = bbp([0.2, 0.2, 0.2, 0.2], [0.8, 0.8, 0.2, 0.2]);
    let plan = MaskedText {
        original: vec![1, 4, 9],
        corrupted: vec![1, 2, 9],
        positions: vec![1],
    };
    let mlm = mlm_loss(g.constant(Tensor::full(&[3, 11], 0.25)).unwrap(), &plan)
        .and_then(|v| v.item())
        .map_err(|e| e.to_string())?;
    check(
        (itc - 0.28768).abs() <= 1e-5 && (b1 - 1.15).abs() <= 1e-9 && (b2 - 3.075).abs() <= 1e-9 && (mlm - 11f64.ln()).abs() <= 1e-9,
        format!("itc {itc:.6} (0.28768), bbp {b1:.12} (1.15) and {b2:.12} (3.075), mlm {mlm:.12} (ln 11 = {:.12})", 11f64.ln()),
    )
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::overfit();
    let trainer_world = ShapeWorld::default();
    let out = train(&cfg, None).map_err(|e| e.to_string())?;
    let first = out.metrics[0].total;
    let last = out.metrics.last().unwrap().total;
    let tail: f64 = out.metrics[out.metrics.len() - 50..].iter().map(|m| m.total).sum::<f64>() / 50.0;
    let corpus = xfm_core::data::FixedCorpus::generate(&trainer_world, cfg.seed, 16, 8, 8).map_err(|e| e.to_string())?;
    let pairs = &corpus.batch.pairs;
    let k = 16.min(pairs.len());
    let r = retrieval_eval(
        &out.model,
        pairs.iter().map(|p| p.image.clone()).collect(),
        pairs.iter().map(|p| p.tokens.clone()).collect(),
        k,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        last < 0.1 * first && r.text_retrieval.r1 == 1.0 && r.image_retrieval.r1 == 1.0 && elapsed < Duration::from_secs(900),
        format!(
            "{} steps: total {first:.4} -> {last:.4} ({:.2}% of step 1; last-50 mean {tail:.4}); R@1 text {:.3} image {:.3} (k {k}); {:.1} s < 900 s",
            out.metrics.len(),
            100.0 * last / first,
            r.text_retrieval.r1,
            r.image_retrieval.r1,
            secs(elapsed)
        ),
    )
}

fn masking_statistics() -> Outcome {
    let world = ShapeWorld::default();
    let masker = TextMasker::new(world.vocab().len() as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut eligible, mut selected) = (0usize, 0usize);
    let mut i = 0;
    while eligible < 100_000 {
        let t = world.generate_text(sample_seed(7, Stream::Text, i)).tokens;
        i += 1;
        eligible += (0..t.len()).filter(|&p| TextMasker::is_eligible(&t, p)).count();
        selected += masker.mask(&t, 0.15, &mut rng).map_err(|e| e.to_string())?.positions.len();
    }
    let rate = selected as f64 / eligible as f64;
    let coverage = (0..1000u64)
        .map(|s| block_mask_image(8, 8, 0.4, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().masked_fraction())
        .sum::<f64>()
        / 1000.0;
    check(
        (rate - 0.15).abs() <= 0.005 && (0.38..=0.45).contains(&coverage),
        format!("MLM rate {rate:.4} over {eligible} positions (0.15 +/- 0.005); block coverage {coverage:.4} over 1000 seeds ([0.38, 0.45])"),
    )
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        schedule: LrSchedule {
            peak: 1e-3,
            warmup: 20,
            total: 200,
        },
        data: DataConfig::default(),
        checkpoint_every: 100,
        ..RunConfig::default()
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    train(&cfg, Some(a.path())).map_err(|e| e.to_string())?;
    train(&cfg, Some(b.path())).map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for f in [METRICS_FILE.to_string(), format!("{CHECKPOINT_DIR}/{BLOB_FILE}"), format!("{CHECKPOINT_DIR}/{MANIFEST_FILE}")] {
        let x = fs::read(a.path().join(&f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.path().join(&f)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
        bytes += x.len();
    }
    Ok(format!(
        "two {}-step streaming runs (seed {}): metrics log and checkpoint byte-identical ({bytes} bytes)",
        cfg.schedule.total, cfg.seed
    ))
}

fn schedule_and_optimizer() -> Outcome {
    let s = LrSchedule::desk();
    let at = |t| s.lr_at(t).unwrap();
    let spots = at(0) == 0.0 && at(s.total) == 0.0 && at(s.warmup) == s.peak && at(s.warmup / 2) == s.peak / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let steps = rng.random_range(1..6);
        let b1 = rng.random_range(0.5..0.99);
        let b2 = if rng.random_bool(0.5) { 0.98 } else { 0.999 };
        let eps = 10f64.powi(-rng.random_range(6..10));
        let wd = rng.random_range(0.0..0.1);
        let theta0 = rng.random_range(-3.0..3.0);
        let grads: Vec<f64> = (0..steps).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lrs: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..0.1)).collect();
        let mut p = [Tensor::vector(vec![theta0]).unwrap()];
        let mut opt = AdamW::new(
            AdamWConfig {
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: wd,
            },
            &p,
        );
        for (g, lr) in grads.iter().zip(&lrs) {
            opt.step(&mut p, &[Tensor::vector(vec![*g]).unwrap()], &[true], *lr).unwrap();
        }
        let want = common::adamw_reference(theta0, &grads, &lrs, b1, b2, eps, wd);
        worst = worst.max((p[0].data()[0] - want).abs() / want.abs().max(1.0));
    }
    check(
        spots && worst <= 1e-12,
        format!("lr_at spot values exact: {spots}; AdamW vs scalar reference max rel diff {worst:.1e} over 10^4 trials"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("stop-gradient exactness", stop_gradient_exactness),
        ("stop-gradient value invariance", value_invariance),
        ("MIM self-target exactness", mim_self_target),
        ("loss oracles", loss_oracles),
        ("overfit sanity", overfit_sanity),
        ("masking statistics", masking_statistics),
        ("determinism", determinism),
        ("schedule and optimizer closed forms", schedule_and_optimizer),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(d) => println!("PASS {}. {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {}. {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
