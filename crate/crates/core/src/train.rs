//! Optimizer and training loops for the three heads on cached features.
//!
//! The extractor is frozen before any head is trained, so each image's
//! feature map is computed once up front and reused for every epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelBundle, EXTRACTOR_PREFIX};
use crate::checkpoint::hex;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::heads::{
    class_weights_from_counts, rough_targets, BoxTarget, ClassWeights, Situation, FINE_PREFIX,
    META_PREFIX, ROUGH_PREFIX,
};
use crate::metrics::{self, ConfusionMatrix, FineEvaluation, Metrics};
use crate::model::Architecture;
use crate::tensor::{self, DropoutMode, Tensor};
use crate::Rng;

/// Stochastic gradient descent with classical momentum:
/// `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update. A gradient for a frozen or unknown array is a bug
    /// in the caller and is rejected before anything is written.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: BTreeMap<String, &Tensor>) -> Result<()> {
        for (name, g) in &grads {
            match bundle.get(name) {
                None => return Err(Error::Invariant(format!("gradient for unknown array {name}"))),
                Some(p) if p.frozen => {
                    return Err(Error::Invariant(format!("gradient for frozen array {name}")))
                }
                Some(p) if p.tensor.shape() != g.shape() => {
                    return Err(Error::shape("sgd_step", p.tensor.shape(), g.shape()))
                }
                Some(_) => {}
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
        }
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let p = bundle.get_mut(&name).expect("checked above");
            for (pi, vi) in p.tensor.data_mut().iter_mut().zip(v.data()) {
                *pi -= self.learning_rate * vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Meta,
    Rough,
    Fine,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Meta, HeadKind::Rough, HeadKind::Fine];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Meta => "meta",
            HeadKind::Rough => "rough",
            HeadKind::Fine => "fine",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Meta => META_PREFIX,
            HeadKind::Rough => ROUGH_PREFIX,
            HeadKind::Fine => FINE_PREFIX,
        }
    }

    /// Whether an example is part of this head's training data.
    pub fn accepts(self, situation: Situation) -> bool {
        match self {
            HeadKind::Meta => true,
            HeadKind::Rough => situation == Situation::FarObjects,
            HeadKind::Fine => situation == Situation::CloseObject,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaSource {
    /// Inverse-frequency weights from the training labels. Grid cells get
    /// one pseudo-count each so that empty cells stay finite.
    #[default]
    Auto,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: AlphaSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            alpha: AlphaSource::Auto,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned per head on the desk-scale data set.
    pub fn for_head(kind: HeadKind) -> Self {
        let (learning_rate, epochs) = match kind {
            HeadKind::Meta | HeadKind::Rough => (0.005, 30),
            HeadKind::Fine => (0.01, 40),
        };
        Self {
            learning_rate,
            epochs,
            ..Self::default()
        }
    }
}

/// A labelled frame reduced to its (frozen) feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub situation: Situation,
    pub boxes: Vec<BoxTarget>,
}

impl Example {
    pub fn centers(&self) -> Vec<(f64, f64)> {
        self.boxes.iter().map(|b| (b.x, b.y)).collect()
    }
}

/// Runs the extractor once per image.
pub fn featurize<'a>(
    arch: &Architecture,
    bundle: &ModelBundle,
    samples: impl IntoIterator<Item = (&'a Tensor, Situation, &'a [BoxTarget])>,
) -> Result<Vec<Example>> {
    samples
        .into_iter()
        .map(|(image, situation, boxes)| {
            Ok(Example {
                features: arch.extractor.extract_features(bundle, image)?,
                situation,
                boxes: boxes.to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub head: HeadKind,
    pub samples: usize,
    pub alpha: Vec<f64>,
    /// Eval-mode loss over the training data before the first step.
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub extractor_checksum: String,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        out.push_str(&format!("0,{:.12}\n", self.initial_loss));
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{:.12}\n", i + 1, l));
        }
        out
    }
}

fn head_alpha(kind: HeadKind, arch: &Architecture, data: &[&Example], source: &AlphaSource) -> Result<ClassWeights> {
    let classes = match kind {
        HeadKind::Meta => Situation::ALL.len(),
        HeadKind::Rough => arch.rough.grid().cells(),
        HeadKind::Fine => return Ok(ClassWeights::uniform(4)),
    };
    match source {
        AlphaSource::Explicit(a) => {
            if a.len() != classes {
                return Err(Error::Config(format!(
                    "{} head needs {classes} class weights, got {}",
                    kind.name(),
                    a.len()
                )));
            }
            ClassWeights::new(a.clone())
        }
        AlphaSource::Auto if kind == HeadKind::Meta => {
            let mut counts = vec![0; classes];
            data.iter().for_each(|e| counts[e.situation.index()] += 1);
            class_weights_from_counts(&counts)
        }
        AlphaSource::Auto => {
            let grid = arch.rough.grid();
            let mut counts = vec![1; classes];
            for e in data {
                let t = rough_targets(&e.centers(), grid)?;
                t.iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .for_each(|(i, _)| counts[i] += 1);
            }
            class_weights_from_counts(&counts)
        }
    }
}

fn sample_loss(
    kind: HeadKind,
    arch: &Architecture,
    bundle: &ModelBundle,
    g: &mut Graph,
    example: &Example,
    alpha: &ClassWeights,
    mode: DropoutMode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let x = g.constant(example.features.clone());
    match kind {
        HeadKind::Meta => {
            let logits = arch.meta.forward(g, bundle, x)?;
            let mut t = vec![0.0; 3];
            t[example.situation.index()] = 1.0;
            g.weighted_ce(logits, &t, alpha.as_slice())
        }
        HeadKind::Rough => {
            let scores = arch.rough.forward(g, bundle, x, mode, rng)?;
            let t = rough_targets(&example.centers(), arch.rough.grid())?;
            g.weighted_ce(scores, &t, alpha.as_slice())
        }
        HeadKind::Fine => {
            let [target] = example.boxes[..] else {
                return Err(Error::invalid(format!(
                    "close-view example needs exactly one box, has {}",
                    example.boxes.len()
                )));
            };
            let pred = arch.fine.forward(g, bundle, x)?;
            g.squared_error(pred, &target.as_array())
        }
    }
}

/// Mean eval-mode loss of a head over the examples it accepts.
pub fn head_loss(
    kind: HeadKind,
    arch: &Architecture,
    bundle: &ModelBundle,
    data: &[Example],
    alpha: &ClassWeights,
) -> Result<f64> {
    let chosen: Vec<&Example> = data.iter().filter(|e| kind.accepts(e.situation)).collect();
    if chosen.is_empty() {
        return Err(Error::invalid(format!("no examples for the {} head", kind.name())));
    }
    let mut rng = Rng::seed_from_u64(0);
    let mut total = 0.0;
    for e in &chosen {
        let mut g = Graph::new();
        let l = sample_loss(kind, arch, bundle, &mut g, e, alpha, DropoutMode::Eval, &mut rng)?;
        total += g.value(l).data()[0];
    }
    Ok(total / chosen.len() as f64)
}

/// Mini-batch SGD on one head. Only that head's arrays receive updates; the
/// extractor must already be frozen and is verified unchanged afterwards.
pub fn train_head(
    kind: HeadKind,
    arch: &Architecture,
    bundle: &mut ModelBundle,
    data: &[Example],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if !bundle.all_frozen(EXTRACTOR_PREFIX) {
        return Err(Error::invalid(
            "extractor arrays must be frozen before training a head",
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let before = bundle.checksum(EXTRACTOR_PREFIX);
    let chosen: Vec<&Example> = data.iter().filter(|e| kind.accepts(e.situation)).collect();
    if chosen.is_empty() {
        return Err(Error::invalid(format!("no examples for the {} head", kind.name())));
    }
    let alpha = head_alpha(kind, arch, &chosen, &config.alpha)?;
    let initial_loss = head_loss(kind, arch, bundle, data, &alpha)?;

    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut rng = Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let losses = batch
                .iter()
                .map(|&i| {
                    sample_loss(kind, arch, bundle, &mut g, chosen[i], &alpha, DropoutMode::Train, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = g.mean(&losses)?;
            total += g.value(loss).data()[0] * batch.len() as f64;
            let grads = g.backward(loss)?;
            let grads: BTreeMap<String, &Tensor> = grads
                .params()
                .into_iter()
                .filter(|(n, _)| n.starts_with(kind.prefix()))
                .collect();
            opt.step(bundle, grads)?;
            steps += 1;
        }
        epoch_losses.push(total / chosen.len() as f64);
    }

    let after = bundle.checksum(EXTRACTOR_PREFIX);
    if before != after {
        return Err(Error::Invariant("extractor weights changed during head training".into()));
    }
    Ok(TrainReport {
        head: kind,
        samples: chosen.len(),
        alpha: alpha.as_slice().to_vec(),
        initial_loss,
        epoch_losses,
        steps,
        extractor_checksum: hex(&after),
    })
}

pub fn evaluate_meta_head(
    arch: &Architecture,
    bundle: &ModelBundle,
    data: &[Example],
) -> Result<ConfusionMatrix> {
    let pairs = data
        .iter()
        .map(|e| Ok((e.situation, arch.meta.meta_forward(bundle, &e.features)?.verdict())))
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_meta(pairs)
}

/// Rough-head metrics over the far-view examples.
pub fn evaluate_rough_head(
    arch: &Architecture,
    bundle: &ModelBundle,
    data: &[Example],
    threshold: f64,
) -> Result<Metrics> {
    let frames = data
        .iter()
        .filter(|e| e.situation == Situation::FarObjects)
        .map(|e| {
            let scores = arch.rough.scores(bundle, &e.features)?;
            Ok((tensor::softmax_slice(&scores), e.centers()))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_rough(
        frames.iter().map(|(p, c)| (&p[..], &c[..])),
        arch.rough.grid(),
        threshold,
    )
}

/// Fine-head metrics over the close-view examples.
pub fn evaluate_fine_head(
    arch: &Architecture,
    bundle: &ModelBundle,
    data: &[Example],
    iou_threshold: f64,
) -> Result<FineEvaluation> {
    let pairs = data
        .iter()
        .filter(|e| e.situation == Situation::CloseObject)
        .map(|e| Ok((arch.fine.fine_forward(bundle, &e.features)?, e.boxes[0])))
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_fine(&pairs, iou_threshold)
}
