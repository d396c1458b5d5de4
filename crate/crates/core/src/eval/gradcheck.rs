use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, Graph, Tensor};
use crate::data::{mix, sample_seed, unique_pairs, ShapeWorld, Stream};
use crate::encoders::{EncoderConfig, XfmModel};
use crate::error::{Error, Result};
use crate::gradflow::{forward_pretraining, GradFlowConfig, MaskingConfig, MimTargets, StepInputs, Variant};
use crate::objectives::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub encoder: EncoderConfig,
    pub seeds: usize,
    pub first_seed: u64,
    /// Random unit directions over all parameters, shared by every objective.
    pub directions: usize,
    /// Single coordinates per objective, drawn among its non-zero gradients.
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            seeds: 20,
            first_seed: 0,
            directions: 3,
            coordinates: 2,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub objective: Objective,
    pub seed: u64,
    pub probes: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub rows: Vec<GradcheckRow>,
    pub worst: BTreeMap<Objective, f64>,
    pub pass: bool,
}

/// One probe: a parameter-space direction, either dense or a single
/// coordinate.
enum Probe {
    Dense(Vec<Tensor>),
    Coordinate { tensor: usize, index: usize },
}

impl Probe {
    fn dot(&self, grads: &[Tensor]) -> f64 {
        match self {
            Probe::Dense(u) => u
                .iter()
                .zip(grads)
                .map(|(u, g)| u.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum(),
            Probe::Coordinate { tensor, index } => grads[*tensor].data()[*index],
        }
    }

    fn apply(&self, params: &mut [Tensor], base: &[Tensor], h: f64) {
        match self {
            Probe::Dense(u) => {
                for ((p, b), u) in params.iter_mut().zip(base).zip(u) {
                    for ((x, &x0), &d) in p.data_mut().iter_mut().zip(b.data()).zip(u.data()) {
                        *x = x0 + h * d;
                    }
                }
            }
            Probe::Coordinate { tensor, index } => {
                params[*tensor].data_mut()[*index] = base[*tensor].data()[*index] + h;
            }
        }
    }

    fn restore(&self, params: &mut [Tensor], base: &[Tensor]) {
        match self {
            Probe::Dense(_) => params.clone_from_slice(base),
            Probe::Coordinate { tensor, index } => {
                params[*tensor].data_mut()[*index] = base[*tensor].data()[*index];
            }
        }
    }
}

/// A small step batch with boxed pairs and guaranteed masked tokens.
pub fn gradcheck_inputs(world: &ShapeWorld, encoder: &EncoderConfig, seed: u64) -> Result<StepInputs> {
    let texts: Vec<_> = (0..2).map(|i| world.generate_text(sample_seed(seed, Stream::Text, i)).tokens).collect();
    let images: Vec<_> = (0..1).map(|i| world.generate_image(sample_seed(seed, Stream::Image, i)).image).collect();
    let pairs: Vec<_> = unique_pairs(world, seed, Stream::Pair, 3)?
        .into_iter()
        .map(|p| crate::gradflow::PairSample {
            image: p.image,
            tokens: p.tokens,
            bbox: Some(p.bbox),
        })
        .collect();
    let masking = MaskingConfig {
        text_rate: 0.4,
        ..MaskingConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, Stream::Masking as u64));
    for _ in 0..64 {
        let inp = StepInputs::prepare(encoder, &masking, world.vocab().len() as u32, &texts, &images, &pairs, &mut rng)?;
        let masked = |t: &Option<crate::gradflow::TextInputs>| t.as_ref().is_some_and(|t| !t.positions.is_empty());
        if masked(&inp.text) && inp.pair.as_ref().is_some_and(|p| !p.masked_text.positions.is_empty()) {
            return Ok(inp);
        }
    }
    Err(Error::InvalidArgument("could not draw a batch with masked tokens".into()))
}

/// Every objective's loss with nothing detached on the language side and
/// MIM targets taken from `frozen`, so all six are plain functions of the
/// parameters.
fn losses(model: &XfmModel, frozen: &XfmModel, inputs: &StepInputs) -> Result<BTreeMap<Objective, f64>> {
    let g = Graph::with_finite_checks(true);
    let p = model.bind(&g, false)?;
    let out = forward_pretraining(model, &p, inputs, &GradFlowConfig::new(Variant::Wostop), MimTargets::Frozen(frozen))?;
    Objective::ALL
        .iter()
        .map(|&o| {
            let v = out.bundle.get(o).ok_or_else(|| Error::InvalidArgument(format!("{o} missing from the bundle")))?;
            Ok((o, v.item()?))
        })
        .collect()
}

/// Checks one seed: analytic gradients by reverse mode against central
/// differences along shared random directions plus per-objective sampled
/// coordinates.
pub fn gradcheck_seed(config: &GradcheckConfig, world: &ShapeWorld, seed: u64) -> Result<Vec<GradcheckRow>> {
    let model = XfmModel::new(config.encoder.clone(), seed)?;
    let frozen = model.clone();
    let inputs = gradcheck_inputs(world, &config.encoder, seed)?;

    let g = Graph::with_finite_checks(true);
    let p = model.bind(&g, true)?;
    let out = forward_pretraining(&model, &p, &inputs, &GradFlowConfig::new(Variant::Wostop), MimTargets::Frozen(&frozen))?;
    let mut analytic = BTreeMap::new();
    for o in Objective::ALL {
        let loss = out.bundle.get(o).ok_or_else(|| Error::InvalidArgument(format!("{o} missing from the bundle")))?;
        g.backward(loss)?;
        analytic.insert(o, p.grads());
    }
    drop(out);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x6772_6164));
    let base = model.params().tensors().to_vec();
    let mut probes = Vec::new();
    for _ in 0..config.directions {
        let mut u: Vec<Tensor> = base
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.sample(StandardNormal)).collect()))
            .collect::<Result<_>>()?;
        let norm = u.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        for t in &mut u {
            t.data_mut().iter_mut().for_each(|x| *x /= norm);
        }
        probes.push(Probe::Dense(u));
    }
    for grads in analytic.values() {
        let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].max_abs() > 0.0).collect();
        if live.is_empty() {
            continue;
        }
        for _ in 0..config.coordinates {
            let tensor = live[rng.random_range(0..live.len())];
            let nz: Vec<usize> = (0..grads[tensor].len()).filter(|&j| grads[tensor].data()[j] != 0.0).collect();
            probes.push(Probe::Coordinate {
                tensor,
                index: nz[rng.random_range(0..nz.len())],
            });
        }
    }

    let mut work = model.clone();
    let mut worst: BTreeMap<Objective, f64> = Objective::ALL.iter().map(|&o| (o, 0.0)).collect();
    for probe in &probes {
        let mut eval = |h: f64| -> Result<BTreeMap<Objective, f64>> {
            probe.apply(work.params_mut().tensors_mut(), &base, h);
            let v = losses(&work, &frozen, &inputs);
            probe.restore(work.params_mut().tensors_mut(), &base);
            v
        };
        let hi = eval(config.step)?;
        let lo = eval(-config.step)?;
        for o in Objective::ALL {
            let numeric = (hi[&o] - lo[&o]) / (2.0 * config.step);
            let err = relative_error(probe.dot(&analytic[&o]), numeric);
            let w = worst.get_mut(&o).expect("all objectives listed");
            *w = w.max(err);
        }
    }
    Ok(worst
        .into_iter()
        .map(|(objective, e)| GradcheckRow {
            objective,
            seed,
            probes: probes.len(),
            max_relative_error: e,
            pass: e < config.tolerance,
        })
        .collect())
}

pub fn gradcheck_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.seeds == 0 || !(config.step > 0.0) {
        return Err(Error::Config("gradcheck needs at least one seed and a positive step".into()));
    }
    let world = ShapeWorld::default();
    let mut rows = Vec::new();
    for s in 0..config.seeds as u64 {
        rows.extend(gradcheck_seed(config, &world, config.first_seed + s)?);
    }
    let mut worst: BTreeMap<Objective, f64> = BTreeMap::new();
    for r in &rows {
        let w = worst.entry(r.objective).or_insert(0.0);
        *w = w.max(r.max_relative_error);
    }
    Ok(GradcheckReport {
        config: config.clone(),
        pass: rows.iter().all(|r| r.pass),
        rows,
        worst,
    })
}
