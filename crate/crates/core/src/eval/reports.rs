use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gradcheck::{gradcheck_suite, GradcheckConfig, GradcheckReport};
use super::probe::{linear_probe, probe_data, ProbeConfig, ProbeReport};
use super::retrieval::{retrieval_eval, RetrievalReport};
use crate::data::{eval_pairs, sample_seed, ShapeWorld, Stream};
use crate::encoders::XfmModel;
use crate::error::{Error, Result};
use crate::gradflow::{verify_stop_gradient, GradFlowConfig, MaskingConfig, PairSample, StepInputs, StopGradReport, Variant};
use crate::trainer::{load_checkpoint, RunConfig};

pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const PROBE_FILE: &str = "probe.json";
pub const STOPGRAD_FILE: &str = "stopgrad.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub pool: usize,
    pub k: usize,
    pub probe_train: usize,
    pub probe_test: usize,
    pub probe: ProbeConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            pool: 64,
            k: 16,
            probe_train: 360,
            probe_test: 180,
            probe: ProbeConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// The stop-gradient check for every variant on one model and batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopGradSuite {
    pub reports: Vec<StopGradReport>,
    pub pass: bool,
}

pub fn stop_gradient_suite(model: &XfmModel, world: &ShapeWorld, seed: u64) -> Result<StopGradSuite> {
    let texts: Vec<_> = (0..4).map(|i| world.generate_text(sample_seed(seed, Stream::Text, i)).tokens).collect();
    let images: Vec<_> = (0..2).map(|i| world.generate_image(sample_seed(seed, Stream::Image, i)).image).collect();
    let pairs: Vec<PairSample> = eval_pairs(world, seed, 4)?
        .into_iter()
        .map(|p| PairSample {
            image: p.image,
            tokens: p.tokens,
            bbox: Some(p.bbox),
        })
        .collect();
    let masking = MaskingConfig {
        text_rate: 0.5,
        ..MaskingConfig::default()
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(sample_seed(seed, Stream::Masking, 0));
    let inputs = StepInputs::prepare(model.config(), &masking, world.vocab().len() as u32, &texts, &images, &pairs, &mut rng)?;
    let reports = Variant::ALL
        .iter()
        .map(|&v| verify_stop_gradient(model, &inputs, &GradFlowConfig::new(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StopGradSuite {
        pass: reports.iter().all(|r| r.pass),
        reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub retrieval: RetrievalReport,
    pub probe: ProbeReport,
    pub stopgrad_pass: bool,
    pub gradcheck_pass: bool,
}

impl ReportSummary {
    /// Whether the invariant suites passed.
    pub fn pass(&self) -> bool {
        self.stopgrad_pass && self.gradcheck_pass
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Evaluates the checkpoint in `checkpoint_dir` and writes the four
/// reports to `out`. Evaluation data is seeded by the run's seed.
pub fn emit_reports(checkpoint_dir: &Path, out: &Path, options: &ReportOptions) -> Result<ReportSummary> {
    if !checkpoint_dir.is_dir() {
        return Err(Error::MissingFile(checkpoint_dir.to_path_buf()));
    }
    let ckpt = load_checkpoint(checkpoint_dir)?;
    let run: RunConfig = match &ckpt.manifest.run {
        Some(v) => serde_json::from_value(v.clone())?,
        None => RunConfig::default(),
    };
    let model = ckpt.into_model(None)?;
    let world = ShapeWorld::default();
    fs::create_dir_all(out)?;

    let pool = eval_pairs(&world, run.seed, options.pool)?;
    let retrieval = retrieval_eval(
        &model,
        pool.iter().map(|p| p.image.clone()).collect(),
        pool.iter().map(|p| p.tokens.clone()).collect(),
        options.k,
    )?;
    write_json(&out.join(RETRIEVAL_FILE), &retrieval)?;

    let train = probe_data(&world, run.seed, 0, options.probe_train);
    let test = probe_data(&world, run.seed, options.probe_train as u64, options.probe_test);
    let probe = linear_probe(&model, &train, &test, world.num_classes(), &options.probe)?;
    write_json(&out.join(PROBE_FILE), &probe)?;

    let stopgrad = stop_gradient_suite(&model, &world, run.seed)?;
    write_json(&out.join(STOPGRAD_FILE), &stopgrad)?;

    let gradcheck: GradcheckReport = gradcheck_suite(&options.gradcheck)?;
    write_json(&out.join(GRADCHECK_FILE), &gradcheck)?;

    for r in stopgrad.reports.iter().filter(|r| !r.pass) {
        for f in &r.failures {
            log::error!("stop-gradient ({}): {f}", r.variant);
        }
    }
    Ok(ReportSummary {
        retrieval,
        probe,
        stopgrad_pass: stopgrad.pass,
        gradcheck_pass: gradcheck.pass,
    })
}
