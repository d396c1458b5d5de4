use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::{linear_probe, probe_data, ProbeConfig};
use super::retrieval::{retrieval_eval, Recall};
use crate::data::{eval_pairs, ShapeWorld};
use crate::error::Result;
use crate::gradflow::Variant;
use crate::objectives::Objective;
use crate::trainer::{train, RunConfig, StepMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean of the last `window` steps per objective; `None` when absent.
    pub final_losses: Vec<(Objective, Option<f64>)>,
    pub final_total: f64,
    pub text_retrieval: Recall,
    pub image_retrieval: Recall,
    pub probe_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: u64,
    pub window: usize,
    pub rows: Vec<AblationRow>,
}

fn tail_mean(metrics: &[StepMetrics], window: usize, f: impl Fn(&StepMetrics) -> Option<f64>) -> Option<f64> {
    let tail = &metrics[metrics.len().saturating_sub(window)..];
    let vals: Option<Vec<f64>> = tail.iter().map(f).collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains every variant from the same seed and evaluates each.
pub fn ablate(base: &RunConfig, pool: usize, k: usize, out: Option<&Path>) -> Result<AblationReport> {
    let world = ShapeWorld::default();
    let window = 50;
    let eval = eval_pairs(&world, base.seed, pool)?;
    let probe_train = probe_data(&world, base.seed, 0, 360);
    let probe_test = probe_data(&world, base.seed, 360, 180);
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = RunConfig {
            variant: v,
            ..base.clone()
        };
        let dir = out.map(|o| o.join(v.name()));
        log::info!("ablation: training variant {v}");
        let outcome = train(&cfg, dir.as_deref())?;
        let m = &outcome.metrics;
        let r = retrieval_eval(
            &outcome.model,
            eval.iter().map(|p| p.image.clone()).collect(),
            eval.iter().map(|p| p.tokens.clone()).collect(),
            k,
        )?;
        let probe = linear_probe(&outcome.model, &probe_train, &probe_test, world.num_classes(), &ProbeConfig::default())?;
        let field = |o: Objective| -> fn(&StepMetrics) -> Option<f64> {
            match o {
                Objective::Mlm => |s| s.mlm,
                Objective::Itc => |s| s.itc,
                Objective::Itm => |s| s.itm,
                Objective::Imlm => |s| s.imlm,
                Objective::Bbp => |s| s.bbp,
                Objective::Mim => |s| s.mim,
            }
        };
        rows.push(AblationRow {
            variant: v,
            final_losses: Objective::ALL.iter().map(|&o| (o, tail_mean(m, window, field(o)))).collect(),
            final_total: tail_mean(m, window, |s| Some(s.total)).unwrap_or(f64::NAN),
            text_retrieval: r.text_retrieval,
            image_retrieval: r.image_retrieval,
            probe_accuracy: probe.accuracy,
        });
    }
    Ok(AblationReport {
        seed: base.seed,
        steps: base.schedule.total,
        window,
        rows,
    })
}

impl AblationReport {
    /// Markdown comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from("| variant | mlm | itc | itm | imlm | bbp | mim | total | TR@1 | TR@5 | IR@1 | IR@5 | probe |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.variant);
            for (_, v) in &r.final_losses {
                let _ = write!(s, " {} |", f(*v));
            }
            let _ = writeln!(
                s,
                " {:.4} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.final_total,
                r.text_retrieval.r1,
                r.text_retrieval.r5,
                r.image_retrieval.r1,
                r.image_retrieval.r5,
                r.probe_accuracy
            );
        }
        s
    }
}
