//! Optimization loop: AdamW, warmup plus linear decay, one update per
//! tri-stream step, checkpoints and JSON-lines metrics.

mod checkpoint;
mod optim;
mod schedule;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{sample_seed, BatchSizes, DataSource, FixedCorpus, ShapeWorld, Stream};
use crate::encoders::{EncoderConfig, XfmModel};
use crate::error::{Error, Result};
use crate::gradflow::{forward_pretraining, GradFlowConfig, MaskingConfig, MimTargets, StepInputs, Variant};

pub use checkpoint::{
    load_checkpoint, load_model, save_checkpoint, Checkpoint, Manifest, TensorEntry, BLOB_FILE, MANIFEST_FILE,
};
pub use optim::{AdamW, AdamWConfig, StepOutcome};
pub use schedule::LrSchedule;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Fresh samples every step.
    Streaming { sizes: BatchSizes },
    /// The same small corpus at every step.
    Fixed { texts: usize, images: usize, pairs: usize },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Streaming {
            sizes: BatchSizes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    /// `schedule.total` is the number of steps.
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub masking: MaskingConfig,
    pub data: DataConfig,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::All,
            encoder: EncoderConfig::default(),
            schedule: LrSchedule::desk(),
            optimizer: AdamWConfig::default(),
            masking: MaskingConfig::default(),
            data: DataConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    /// The fixed 8-pair, 16-text, 8-image corpus used for overfitting.
    pub fn overfit() -> Self {
        Self {
            data: DataConfig::Fixed {
                texts: 16,
                images: 8,
                pairs: 8,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.schedule.validate()?;
        if let DataConfig::Streaming { sizes } = &self.data {
            sizes.validate()?;
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// One line of the metrics log. Absent objectives are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mlm: Option<f64>,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub imlm: Option<f64>,
    pub bbp: Option<f64>,
    pub mim: Option<f64>,
    pub total: f64,
}

/// Parameters only decay when they are matrices; biases, norms, embeddings
/// of rank 1 and the temperature are exempt.
pub fn decay_mask(model: &XfmModel) -> Vec<bool> {
    model.params().tensors().iter().map(|t| t.rank() >= 2).collect()
}

pub struct Trainer {
    config: RunConfig,
    world: ShapeWorld,
    model: XfmModel,
    optimizer: AdamW,
    source: DataSource,
    decay: Vec<bool>,
    step: u64,
    skipped: u64,
    out: Option<PathBuf>,
    metrics: Option<BufWriter<fs::File>>,
}

impl Trainer {
    /// With `out`, writes the config, truncates the metrics log and saves
    /// checkpoints under it.
    pub fn new(config: RunConfig, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let world = ShapeWorld::default();
        if world.vocab().len() > config.encoder.vocab_size || world.max_text_len > config.encoder.max_text_len {
            return Err(Error::Config("encoder vocabulary or text length too small for the corpus".into()));
        }
        let model = XfmModel::new(config.encoder.clone(), config.seed)?;
        let source = match &config.data {
            DataConfig::Streaming { sizes } => DataSource::Streaming {
                world: world.clone(),
                seed: config.seed,
                sizes: *sizes,
            },
            DataConfig::Fixed { texts, images, pairs } => {
                DataSource::Fixed(FixedCorpus::generate(&world, config.seed, *texts, *images, *pairs)?)
            }
        };
        let metrics = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut json = serde_json::to_vec_pretty(&config)?;
                json.push(b'\n');
                fs::write(dir.join(CONFIG_FILE), json)?;
                Some(BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?))
            }
            None => None,
        };
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, model.params().tensors()),
            decay: decay_mask(&model),
            config,
            world,
            model,
            source,
            step: 0,
            skipped: 0,
            out: out.map(Path::to_path_buf),
            metrics,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn world(&self) -> &ShapeWorld {
        &self.world
    }

    pub fn model(&self) -> &XfmModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut XfmModel {
        &mut self.model
    }

    pub fn into_model(self) -> XfmModel {
        self.model
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.schedule.total
    }

    /// The inputs of 1-based step `step`.
    pub fn inputs_for(&self, step: u64) -> Result<StepInputs> {
        let batch = self.source.batch(step - 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, Stream::Masking, step - 1));
        StepInputs::prepare(
            &self.config.encoder,
            &self.config.masking,
            self.world.vocab().len() as u32,
            &batch.text_tokens(),
            &batch.image_pixels(),
            &batch.pair_samples(),
            &mut rng,
        )
    }

    /// Runs one step. A non-finite loss aborts with
    /// [`Error::NonFiniteLoss`] and leaves parameters and saved checkpoints
    /// untouched.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("schedule already completed".into()));
        }
        let t = self.step + 1;
        let lr = self.config.schedule.lr_at(t)?;
        let inputs = self.inputs_for(t)?;
        let flow = GradFlowConfig::new(self.config.variant);
        let abort = |e: Error| match e {
            Error::NonFinite { .. } => {
                log::error!("step {t}: non-finite value, aborting");
                Error::NonFiniteLoss { step: t as usize }
            }
            other => other,
        };

        let g = Graph::new();
        let p = self.model.bind(&g, true).map_err(abort)?;
        let out = forward_pretraining(&self.model, &p, &inputs, &flow, MimTargets::Live).map_err(abort)?;
        let values = out.bundle.values().map_err(abort)?;
        if !values.total.is_finite() {
            return Err(abort(Error::NonFinite { op: "total" }));
        }
        g.backward(out.bundle.total()?).map_err(abort)?;
        let grads = p.grads();
        drop(g);

        let outcome = self
            .optimizer
            .step(self.model.params_mut().tensors_mut(), &grads, &self.decay, lr)?;
        if outcome == StepOutcome::SkippedNonFinite {
            self.skipped += 1;
        }
        self.step = t;
        let m = StepMetrics {
            step: t,
            lr,
            mlm: values.mlm,
            itc: values.itc,
            itm: values.itm,
            imlm: values.imlm,
            bbp: values.bbp,
            mim: values.mim,
            total: values.total,
        };
        if let Some(w) = &mut self.metrics {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
            w.flush()?;
        }
        let every = self.config.checkpoint_every;
        if self.is_finished() || (every > 0 && t % every == 0) {
            self.save()?;
        }
        Ok(m)
    }

    /// Saves to `<out>/checkpoint` when an output directory is set.
    pub fn save(&self) -> Result<()> {
        if let Some(dir) = &self.out {
            save_checkpoint(
                &dir.join(CHECKPOINT_DIR),
                &self.model,
                self.step,
                Some(serde_json::to_value(&self.config)?),
            )?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: XfmModel,
    pub metrics: Vec<StepMetrics>,
    pub skipped_updates: u64,
}

/// Runs the full schedule.
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), out)?;
    let mut metrics = Vec::with_capacity(config.schedule.total as usize);
    while !trainer.is_finished() {
        let m = trainer.step()?;
        if m.step % 100 == 0 || m.step == 1 {
            log::info!("step {} lr {:.3e} total {:.5}", m.step, m.lr, m.total);
        }
        metrics.push(m);
    }
    Ok(TrainOutcome {
        skipped_updates: trainer.skipped_updates(),
        model: trainer.into_model(),
        metrics,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
