use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{mix, PairRecord, ShapeWorld, Stream};
use crate::encoders::{Image, XfmModel};
use crate::error::{Error, Result};
use crate::objectives::token_cross_entropy;
use crate::trainer::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Images encoded per graph.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            chunk: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub num_classes: usize,
    pub classes_present: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    /// Largest backbone gradient seen while training the head. Exactly 0.
    pub backbone_max_abs_grad: f64,
    pub backbone_unchanged: bool,
}

/// Labelled images for probing, drawn from the pair generator under a
/// dedicated stream. Labels are shape x color classes.
pub fn probe_data(world: &ShapeWorld, seed: u64, offset: u64, n: usize) -> Vec<(Image, usize)> {
    (offset..offset + n as u64)
        .map(|i| {
            let p: PairRecord = world.generate_pair(mix(mix(seed, Stream::Eval as u64 ^ 0x7072_6f62), i));
            let label = world.class_of(&p.object);
            (p.image, label)
        })
        .collect()
}

/// Vision [CLS] features, detached from the backbone. Each chunk also runs
/// a backward pass from a head loss and records the backbone's largest
/// gradient, which must be zero.
fn frozen_features(model: &XfmModel, data: &[(Image, usize)], classes: usize, chunk: usize) -> Result<(Tensor, f64)> {
    let d = model.config().hidden_dim;
    let mut rows = Vec::with_capacity(data.len() * d);
    let mut worst = 0.0_f64;
    for part in data.chunks(chunk.max(1)) {
        let g = Graph::new();
        let p = model.bind(&g, true)?;
        let images: Vec<Image> = part.iter().map(|x| x.0.clone()).collect();
        let cls = model.encode_image(&p, &images, None)?.cls()?.detach();
        let w = g.param(Tensor::full(&[d, classes], 0.01))?;
        let labels: Vec<usize> = part.iter().map(|x| x.1).collect();
        let loss = token_cross_entropy(cls.matmul(w)?, &labels)?;
        g.backward(loss)?;
        for v in p.vars() {
            worst = worst.max(g.grad_or_zeros(*v).max_abs());
        }
        rows.extend_from_slice(cls.value().data());
    }
    Ok((Tensor::new(vec![data.len(), d], rows)?, worst))
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains a linear map from frozen vision [CLS] features to labels with
/// full-batch Adam; reports held-out accuracy.
pub fn linear_probe(
    model: &XfmModel,
    train: &[(Image, usize)],
    test: &[(Image, usize)],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut present: Vec<usize> = train.iter().map(|x| x.1).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(format!("probe needs at least 2 classes, found {}", present.len())));
    }
    if let Some(&y) = train.iter().chain(test).map(|(_, y)| y).find(|&&y| y >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {y} outside {num_classes} classes")));
    }
    let snapshot = model.params().tensors().to_vec();
    let (x_train, g_train) = frozen_features(model, train, num_classes, config.chunk)?;
    let (x_test, g_test) = if test.is_empty() {
        (Tensor::zeros(&[0, model.config().hidden_dim]), 0.0)
    } else {
        frozen_features(model, test, num_classes, config.chunk)?
    };
    let backbone_max_abs_grad = g_train.max(g_test);
    if backbone_max_abs_grad != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "probe leaked gradient {backbone_max_abs_grad:e} into the backbone"
        )));
    }

    let d = model.config().hidden_dim;
    let y_train: Vec<usize> = train.iter().map(|x| x.1).collect();
    let mut head = vec![Tensor::zeros(&[d, num_classes]), Tensor::zeros(&[num_classes])];
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            beta2: 0.999,
            ..AdamWConfig::default()
        },
        &head,
    );
    let logits_of = |head: &[Tensor], x: &Tensor| -> Result<Tensor> {
        let g = Graph::new();
        let out = g.constant(x.clone())?.matmul(g.constant(head[0].clone())?)?.add(g.constant(head[1].clone())?)?;
        Ok(Tensor::clone(&out.value()))
    };
    for _ in 0..config.epochs {
        let g = Graph::new();
        let w = g.param(head[0].clone())?;
        let b = g.param(head[1].clone())?;
        let loss = token_cross_entropy(g.constant(x_train.clone())?.matmul(w)?.add(b)?, &y_train)?;
        g.backward(loss)?;
        let grads = [g.grad_or_zeros(w), g.grad_or_zeros(b)];
        opt.step(&mut head, &grads, &[false, false], config.lr)?;
    }
    let y_test: Vec<usize> = test.iter().map(|x| x.1).collect();
    let unchanged = snapshot.iter().zip(model.params().tensors()).all(|(a, b)| a.bit_eq(b));
    Ok(ProbeReport {
        accuracy: if test.is_empty() { 0.0 } else { accuracy(&logits_of(&head, &x_test)?, &y_test) },
        train_accuracy: accuracy(&logits_of(&head, &x_train)?, &y_train),
        num_classes,
        classes_present: present.len(),
        train_size: train.len(),
        test_size: test.len(),
        epochs: config.epochs,
        backbone_max_abs_grad,
        backbone_unchanged: unchanged,
    })
}
