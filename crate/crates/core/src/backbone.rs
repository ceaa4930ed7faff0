//! The shared feature extractor, its parameter store, and the proxy
//! pretraining task that stands in for large-scale pretraining.
//!
//! The extractor is a stack of depthwise-separable blocks. After
//! [`proxy_pretrain`] it is frozen with [`ModelBundle::freeze`] and every head
//! consumes the same feature map.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{self, ConvSpec, Tensor};
use crate::train::Sgd;
use crate::Rng;

/// Prefix of every extractor parameter array.
pub const EXTRACTOR_PREFIX: &str = "fe.";

/// Channel width of the extractor trunk the original system used; recorded
/// for reference, the desk-scale default is much narrower.
pub const REFERENCE_TRUNK_CHANNELS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn trainable(tensor: Tensor) -> Self {
        Self {
            tensor,
            frozen: false,
        }
    }

    pub fn frozen(tensor: Tensor) -> Self {
        Self {
            tensor,
            frozen: true,
        }
    }
}

/// Named parameter arrays with per-array frozen flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    params: BTreeMap<String, Param>,
    fingerprint: [u8; 32],
}

impl ModelBundle {
    pub fn new(fingerprint: [u8; 32]) -> Self {
        Self {
            params: BTreeMap::new(),
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Option<Param> {
        self.params.insert(name.into(), param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Flags every array whose name starts with `prefix` as frozen.
    /// Returns how many arrays matched; a prefix matching nothing is an error.
    pub fn freeze(&mut self, prefix: &str) -> Result<usize> {
        let mut matched = 0;
        for (_, p) in self.params.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            p.frozen = true;
            matched += 1;
        }
        if matched == 0 {
            return Err(Error::invalid(format!(
                "freeze prefix {prefix:?} matches no parameter array"
            )));
        }
        Ok(matched)
    }

    pub fn unfreeze(&mut self, prefix: &str) -> usize {
        let mut matched = 0;
        for (_, p) in self.params.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            p.frozen = false;
            matched += 1;
        }
        matched
    }

    pub fn all_frozen(&self, prefix: &str) -> bool {
        let mut any = false;
        for (_, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            if !p.frozen {
                return false;
            }
            any = true;
        }
        any
    }

    /// Copy holding only the arrays under `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelBundle {
        ModelBundle {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
            fingerprint: self.fingerprint,
        }
    }

    /// Adds the arrays of `other`; fingerprints must agree and names must be
    /// disjoint.
    pub fn merge(&mut self, other: ModelBundle) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(crate::checkpoint::CheckpointError::FingerprintMismatch {
                expected: crate::checkpoint::hex(&self.fingerprint),
                found: crate::checkpoint::hex(&other.fingerprint),
            }
            .into());
        }
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::invalid(format!("duplicate parameter array {name:?}")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every array
    /// under `prefix`. Frozen flags are not part of the digest.
    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn count_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }
}

/// One depthwise-separable block of a trunk: `K×K` depthwise filtering with
/// the block stride, a `1×1` channel mix, optional bias, optional relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub relu: bool,
}

impl BlockSpec {
    pub fn new(out_channels: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            bias: true,
            relu: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

/// A [`BlockSpec`] bound to concrete input channels and parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock {
    pub name: String,
    pub depthwise: ConvSpec,
    pub pointwise: ConvSpec,
    pub bias: bool,
    pub relu: bool,
}

impl SeparableBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, spec: &BlockSpec) -> Self {
        Self {
            name: name.into(),
            depthwise: ConvSpec::depthwise(in_channels, spec.kernel, spec.stride)
                .with_padding(spec.padding),
            pointwise: ConvSpec::pointwise(in_channels, spec.out_channels),
            bias: spec.bias,
            relu: spec.relu,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.depthwise.output_extent(h)?,
            self.depthwise.output_extent(w)?,
        ))
    }

    fn dw_name(&self) -> String {
        format!("{}.dw", self.name)
    }

    fn pw_name(&self) -> String {
        format!("{}.pw", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        let dw = self.depthwise;
        let pw = self.pointwise;
        bundle.insert(
            self.dw_name(),
            Param::trainable(Tensor::uniform(&dw.weight_shape(), he_bound(dw.fan_in()), rng)),
        );
        bundle.insert(
            self.pw_name(),
            Param::trainable(Tensor::uniform(&pw.weight_shape(), he_bound(pw.fan_in()), rng)),
        );
        if self.bias {
            bundle.insert(
                self.bias_name(),
                Param::trainable(Tensor::zeros(&[pw.out_channels])),
            );
        }
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModelBundle, x: NodeId) -> Result<NodeId> {
        let dw = g.param(bundle, &self.dw_name())?;
        let pw = g.param(bundle, &self.pw_name())?;
        let mid = g.conv2d(x, dw, &self.depthwise)?;
        let mut out = g.conv2d(mid, pw, &self.pointwise)?;
        if self.bias {
            let b = g.param(bundle, &self.bias_name())?;
            out = g.add_channel_bias(out, b)?;
        }
        if self.relu {
            out = g.relu(out)?;
        }
        Ok(out)
    }

    /// Weight count without bias, `C·K² + C·O`.
    pub fn weight_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }

    /// Weight count of a standard convolution with the same channels and
    /// kernel, `C·O·K²`.
    pub fn standard_equivalent(&self) -> usize {
        tensor::standard_param_count(
            self.depthwise.in_channels,
            self.pointwise.out_channels,
            self.depthwise.kernel_size,
        )
    }
}

/// Uniform bound for He-style initialization of relu layers.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Uniform bound for layers feeding a softmax, sigmoid or sum.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// A named `out × in` affine layer (`{name}.w`, `{name}.b`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        bundle.insert(
            self.weight_name(),
            Param::trainable(Tensor::uniform(
                &[self.outputs, self.inputs],
                lecun_bound(self.inputs),
                rng,
            )),
        );
        bundle.insert(self.bias_name(), Param::trainable(Tensor::zeros(&[self.outputs])));
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModelBundle, x: NodeId) -> Result<NodeId> {
        let w = g.param(bundle, &self.weight_name())?;
        let b = g.param(bundle, &self.bias_name())?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `(channels, height, width)` of input images.
    pub input: [usize; 3],
    pub blocks: Vec<BlockSpec>,
}

impl Default for BackboneConfig {
    /// 3×64×64 → four separable blocks → 64×8×8. Only the last block has a
    /// bias, so an all-zero image maps to a per-channel constant.
    fn default() -> Self {
        Self {
            input: [3, 64, 64],
            blocks: vec![
                BlockSpec::new(24, 2).without_bias(),
                BlockSpec::new(96, 2).without_bias(),
                BlockSpec::new(256, 2).without_bias(),
                BlockSpec::new(64, 1),
            ],
        }
    }
}

impl BackboneConfig {
    /// Feature-map shape `[C, H, W]`, or an error when a block would shrink
    /// the map below 1×1.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (i, spec) in self.blocks.iter().enumerate() {
            let block = SeparableBlock::new(format!("b{i}"), c, spec);
            block.depthwise.validate()?;
            block.pointwise.validate()?;
            let Some((nh, nw)) = block.output_hw(h, w) else {
                return Err(Error::Config(format!(
                    "block {i} reduces a {h}x{w} map below 1x1"
                )));
            };
            (c, h, w) = (spec.out_channels, nh, nw);
        }
        Ok([c, h, w])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    config: BackboneConfig,
    blocks: Vec<SeparableBlock>,
    output: [usize; 3],
}

impl Extractor {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let output = config.output_shape()?;
        let mut c = config.input[0];
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let b = SeparableBlock::new(format!("{EXTRACTOR_PREFIX}b{i}"), c, spec);
                c = spec.out_channels;
                b
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[SeparableBlock] {
        &self.blocks
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        for b in &self.blocks {
            b.init(bundle, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModelBundle, image: NodeId) -> Result<NodeId> {
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(g, bundle, x)?;
        }
        Ok(x)
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input {
            return Err(Error::shape("extract_features", image.shape(), &self.config.input));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Feature map for one image.
    pub fn extract_features(&self, bundle: &ModelBundle, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, bundle, x)?;
        Ok(g.value(f).clone())
    }
}

/// Builds the extractor for `config` and initializes its `fe.*` arrays.
pub fn build_extractor(
    config: BackboneConfig,
    fingerprint: [u8; 32],
    rng: &mut Rng,
) -> Result<(Extractor, ModelBundle)> {
    let extractor = Extractor::new(config)?;
    let mut bundle = ModelBundle::new(fingerprint);
    extractor.init(&mut bundle, rng);
    Ok((extractor, bundle))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.002,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub classes: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains the extractor jointly with a throwaway `GAP → linear` classifier on
/// a labelled texture task, then discards the classifier. The `fe.*` arrays
/// are left trainable; callers freeze them afterwards.
pub fn proxy_pretrain(
    extractor: &Extractor,
    bundle: &mut ModelBundle,
    train: &[(Tensor, usize)],
    held_out: &[(Tensor, usize)],
    config: &ProxyConfig,
    rng: &mut Rng,
) -> Result<ProxyReport> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::invalid("proxy pretraining needs non-empty train and held-out sets"));
    }
    if config.batch_size == 0 || config.learning_rate <= 0.0 {
        return Err(Error::Config("proxy batch size and learning rate must be positive".into()));
    }
    let classes = train.iter().chain(held_out).map(|(_, c)| c + 1).max().unwrap_or(1);
    let channels = extractor.output_shape()[0];
    let head = Dense::new("proxy.fc", channels, classes);
    let mut work = bundle.clone();
    work.unfreeze(EXTRACTOR_PREFIX);
    head.init(&mut work, rng);

    let initial_accuracy = proxy_accuracy(extractor, &head, &work, held_out)?;
    let alpha = vec![1.0; classes];
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (image, label) = &train[i];
                extractor.check_image(image)?;
                let x = g.constant(image.clone());
                let f = extractor.forward(&mut g, &work, x)?;
                let pooled = g.global_avg_pool(f)?;
                let logits = head.forward(&mut g, &work, pooled)?;
                let mut target = vec![0.0; classes];
                target[*label] = 1.0;
                losses.push(g.weighted_ce(logits, &target, &alpha)?);
            }
            let loss = g.mean(&losses)?;
            total += g.value(loss).data()[0] * batch.len() as f64;
            let grads = g.backward(loss)?;
            opt.step(&mut work, grads.params())?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let final_accuracy = proxy_accuracy(extractor, &head, &work, held_out)?;

    for (name, p) in work.iter() {
        if name.starts_with(EXTRACTOR_PREFIX) {
            if let Some(dst) = bundle.get_mut(name) {
                dst.tensor = p.tensor.clone();
            }
        }
    }
    Ok(ProxyReport {
        classes,
        initial_accuracy,
        final_accuracy,
        epoch_losses,
    })
}

fn proxy_accuracy(
    extractor: &Extractor,
    head: &Dense,
    bundle: &ModelBundle,
    set: &[(Tensor, usize)],
) -> Result<f64> {
    let mut correct = 0;
    for (image, label) in set {
        let f = extractor.extract_features(bundle, image)?;
        let mut g = Graph::new();
        let x = g.constant(f);
        let pooled = g.global_avg_pool(x)?;
        let logits = head.forward(&mut g, bundle, pooled)?;
        if tensor::argmax(g.value(logits).data()) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
