//! The three task networks that sit on top of the shared feature map:
//! a situation classifier, a grid-cell locator for distant objects and a box
//! regressor for a single close object, together with their losses.

use serde::{Deserialize, Serialize};

use crate::backbone::{BlockSpec, Dense, ModelBundle, Param, SeparableBlock};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, NodeId};
use crate::tensor::{self, ConvSpec, DropoutMode, Tensor};
use crate::Rng;

pub const META_PREFIX: &str = "meta.";
pub const ROUGH_PREFIX: &str = "rough.";
pub const FINE_PREFIX: &str = "fine.";

/// What the robot currently sees. Indices are part of the checkpoint and
/// wire contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Situation {
    NoObject = 0,
    FarObjects = 1,
    CloseObject = 2,
}

impl Situation {
    pub const ALL: [Situation; 3] = [
        Situation::NoObject,
        Situation::FarObjects,
        Situation::CloseObject,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("situation index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Situation::NoObject => "no_object",
            Situation::FarObjects => "far_objects",
            Situation::CloseObject => "close_object",
        }
    }
}

/// Positive per-class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid(format!(
                "class weights must be positive and finite, got {alpha:?}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `α_i = total / (k · count_i)`: balanced counts give all-ones.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::invalid("class_weights_from_counts needs at least one class"));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {i} has no samples; merge it with another class or supply weights explicitly"
        )));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    ClassWeights::new(
        counts
            .iter()
            .map(|&c| total as f64 / (k * c as f64))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { rows: 4, cols: 4 }
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major cell holding the normalized point `(x, y)`; the upper
    /// boundary belongs to the last row/column.
    pub fn cell_index(&self, x: f64, y: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::invalid(format!("point ({x}, {y}) outside the unit image")));
        }
        let row = ((y * self.rows as f64).floor() as usize).min(self.rows - 1);
        let col = ((x * self.cols as f64).floor() as usize).min(self.cols - 1);
        Ok(row * self.cols + col)
    }

    /// Geometric center of a cell in normalized coordinates.
    pub fn cell_center(&self, index: usize) -> Result<(f64, f64)> {
        if index >= self.cells() {
            return Err(Error::invalid(format!("cell {index} outside a {}-cell grid", self.cells())));
        }
        let (row, col) = (index / self.cols, index % self.cols);
        Ok((
            (col as f64 + 0.5) / self.cols as f64,
            (row as f64 + 0.5) / self.rows as f64,
        ))
    }
}

/// Soft target over grid cells: each distinct occupied cell gets `1/k`.
pub fn rough_targets(centers: &[(f64, f64)], grid: &GridSpec) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(Error::invalid("rough targets need at least one object"));
    }
    let mut occupied = vec![false; grid.cells()];
    for &(x, y) in centers {
        occupied[grid.cell_index(x, y)?] = true;
    }
    let k = occupied.iter().filter(|&&o| o).count() as f64;
    Ok(occupied
        .into_iter()
        .map(|o| if o { 1.0 / k } else { 0.0 })
        .collect())
}

/// Normalized box: center `(x, y)`, width `w`, height `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTarget {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxTarget {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if b.as_array().iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::invalid(format!("box components must lie in (0, 1): {b:?}")));
        }
        Ok(b)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)` clipped to the unit image.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            (self.x - self.w / 2.0).clamp(0.0, 1.0),
            (self.y - self.h / 2.0).clamp(0.0, 1.0),
            (self.x + self.w / 2.0).clamp(0.0, 1.0),
            (self.y + self.h / 2.0).clamp(0.0, 1.0),
        )
    }

    pub fn area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        (x1 - x0) * (y1 - y0)
    }

    pub fn iou(&self, other: &BoxTarget) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// `(x-x')² + (y-y')² + (w-w')² + (h-h')²`.
pub fn fine_loss(pred: &BoxTarget, target: &BoxTarget) -> f64 {
    pred.as_array()
        .iter()
        .zip(target.as_array())
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// `-α_t · log softmax(o)_t`.
pub fn weighted_ce_loss(logits: &[f64], target: usize, alpha: &ClassWeights) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if target >= logits.len() || alpha.len() != logits.len() {
        return Err(Error::invalid(format!(
            "target {target} / {} weights for {} logits",
            alpha.len(),
            logits.len()
        )));
    }
    let mut t = vec![0.0; logits.len()];
    t[target] = 1.0;
    Ok(graph::weighted_ce_value(logits, &t, alpha.as_slice()))
}

/// Weighted cross-entropy over grid cells with a soft target.
pub fn rough_loss(scores: &[f64], target: &[f64], alpha: &ClassWeights) -> Result<f64> {
    check_soft_target(target, scores.len(), alpha)?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(graph::weighted_ce_value(scores, target, alpha.as_slice()))
}

pub(crate) fn check_soft_target(target: &[f64], n: usize, alpha: &ClassWeights) -> Result<()> {
    if target.len() != n || alpha.len() != n {
        return Err(Error::invalid(format!(
            "rough loss lengths disagree: {} scores, {} targets, {} weights",
            n,
            target.len(),
            alpha.len()
        )));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 || target.iter().any(|t| *t < 0.0) {
        return Err(Error::invalid(format!("rough target must be a distribution, sums to {total}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl MetaOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = tensor::softmax_slice(&logits);
        Self {
            logits,
            probabilities,
        }
    }

    pub fn verdict(&self) -> Situation {
        Situation::from_index(tensor::argmax(&self.logits)).expect("meta head has three outputs")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub grid: GridSpec,
    pub meta_blocks: Vec<BlockSpec>,
    pub rough_dropout: f64,
    pub rough_shared: BlockSpec,
    /// Channels of the spatial branch's stride-2 blocks.
    pub rough_spatial_channels: usize,
    pub fine_blocks: Vec<BlockSpec>,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            meta_blocks: vec![BlockSpec::new(64, 1), BlockSpec::new(64, 1)],
            rough_dropout: 0.1,
            rough_shared: BlockSpec::new(64, 1),
            rough_spatial_channels: 32,
            fine_blocks: vec![
                BlockSpec::new(64, 2),
                BlockSpec::new(64, 2),
                BlockSpec::new(64, 2),
            ],
        }
    }
}

fn check_features(g: &Graph, x: NodeId, expected: &[usize; 3], head: &'static str) -> Result<()> {
    if g.value(x).shape() != expected {
        return Err(Error::shape(head, g.value(x).shape(), expected));
    }
    Ok(())
}

fn chain(prefix: &str, mut channels: usize, specs: &[BlockSpec]) -> (Vec<SeparableBlock>, usize) {
    let blocks = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let b = SeparableBlock::new(format!("{prefix}b{i}"), channels, s);
            channels = s.out_channels;
            b
        })
        .collect();
    (blocks, channels)
}

fn run_blocks(
    blocks: &[SeparableBlock],
    g: &mut Graph,
    bundle: &ModelBundle,
    mut x: NodeId,
) -> Result<NodeId> {
    for b in blocks {
        x = b.forward(g, bundle, x)?;
    }
    Ok(x)
}

/// Situation classifier: separable blocks → global pool → linear(3).
#[derive(Clone, Debug, PartialEq)]
pub struct MetaHead {
    features: [usize; 3],
    blocks: Vec<SeparableBlock>,
    fc: Dense,
}

impl MetaHead {
    pub fn new(features: [usize; 3], config: &HeadsConfig) -> Result<Self> {
        let (blocks, channels) = chain(META_PREFIX, features[0], &config.meta_blocks);
        validate_chain(&blocks, features)?;
        Ok(Self {
            features,
            blocks,
            fc: Dense::new("meta.fc", channels, Situation::ALL.len()),
        })
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        self.blocks.iter().for_each(|b| b.init(bundle, rng));
        self.fc.init(bundle, rng);
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModelBundle, features: NodeId) -> Result<NodeId> {
        check_features(g, features, &self.features, "meta_forward")?;
        let x = run_blocks(&self.blocks, g, bundle, features)?;
        let pooled = g.global_avg_pool(x)?;
        self.fc.forward(g, bundle, pooled)
    }

    pub fn meta_forward(&self, bundle: &ModelBundle, features: &Tensor) -> Result<MetaOutput> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let logits = self.forward(&mut g, bundle, x)?;
        Ok(MetaOutput::from_logits(g.value(logits).data().to_vec()))
    }
}

/// Grid-cell locator. After dropout and one shared block the network forks:
/// branch A pools globally and maps to `n` scores, branch B downsamples to the
/// grid resolution and projects to one channel per cell. The two `n`-vectors
/// are added and passed through a final linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoughHead {
    features: [usize; 3],
    grid: GridSpec,
    dropout: f64,
    shared: SeparableBlock,
    branch_a: Dense,
    branch_b: Vec<SeparableBlock>,
    projection: ConvSpec,
    out: Dense,
}

impl RoughHead {
    pub fn new(features: [usize; 3], config: &HeadsConfig) -> Result<Self> {
        let grid = config.grid;
        let shared = SeparableBlock::new("rough.shared", features[0], &config.rough_shared);
        let Some((h, w)) = shared.output_hw(features[1], features[2]) else {
            return Err(Error::Config("rough shared block shrinks features below 1x1".into()));
        };
        if !(0.0..1.0).contains(&config.rough_dropout) {
            return Err(Error::Config(format!(
                "rough dropout must be in [0, 1), got {}",
                config.rough_dropout
            )));
        }
        let steps = downsample_steps(h, w, &grid)?;
        let mut channels = shared.out_channels();
        let mut branch_b = Vec::with_capacity(steps);
        for i in 0..steps {
            let spec = BlockSpec::new(config.rough_spatial_channels, 2);
            branch_b.push(SeparableBlock::new(format!("rough.b.b{i}"), channels, &spec));
            channels = spec.out_channels;
        }
        let n = grid.cells();
        Ok(Self {
            features,
            grid,
            dropout: config.rough_dropout,
            branch_a: Dense::new("rough.a.fc", shared.out_channels(), n),
            shared,
            branch_b,
            projection: ConvSpec::pointwise(channels, 1),
            out: Dense::new("rough.out", n, n),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        self.shared.init(bundle, rng);
        self.branch_a.init(bundle, rng);
        self.branch_b.iter().for_each(|b| b.init(bundle, rng));
        let bound = crate::backbone::lecun_bound(self.projection.fan_in());
        bundle.insert(
            "rough.b.proj.w",
            Param::trainable(Tensor::uniform(&self.projection.weight_shape(), bound, rng)),
        );
        bundle.insert("rough.b.proj.b", Param::trainable(Tensor::zeros(&[1])));
        self.out.init(bundle, rng);
    }

    /// Scores (logits) over grid cells.
    pub fn forward(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        features: NodeId,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        check_features(g, features, &self.features, "rough_forward")?;
        let x = g.dropout(features, self.dropout, mode, rng)?;
        let shared = self.shared.forward(g, bundle, x)?;
        let a = self.branch_a_scores(g, bundle, shared)?;
        let b = self.branch_b_scores(g, bundle, shared)?;
        let merged = g.add(a, b)?;
        self.out.forward(g, bundle, merged)
    }

    fn branch_a_scores(&self, g: &mut Graph, bundle: &ModelBundle, shared: NodeId) -> Result<NodeId> {
        let pooled = g.global_avg_pool(shared)?;
        self.branch_a.forward(g, bundle, pooled)
    }

    fn branch_b_scores(&self, g: &mut Graph, bundle: &ModelBundle, shared: NodeId) -> Result<NodeId> {
        let spatial = run_blocks(&self.branch_b, g, bundle, shared)?;
        let pw = g.param(bundle, "rough.b.proj.w")?;
        let pb = g.param(bundle, "rough.b.proj.b")?;
        let map = g.conv2d(spatial, pw, &self.projection)?;
        let map = g.add_channel_bias(map, pb)?;
        g.reshape(map, &[self.grid.cells()])
    }

    pub fn scores(&self, bundle: &ModelBundle, features: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        // eval mode never draws from the generator
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let s = self.forward(&mut g, bundle, x, DropoutMode::Eval, &mut rng)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Number of stride-2 stages taking `h×w` down to the grid resolution.
fn downsample_steps(h: usize, w: usize, grid: &GridSpec) -> Result<usize> {
    let reject = || {
        Error::Config(format!(
            "a {h}x{w} feature map cannot be reduced to a {}x{} grid by stride-2 stages",
            grid.rows, grid.cols
        ))
    };
    if h % grid.rows != 0 || w % grid.cols != 0 || h / grid.rows != w / grid.cols {
        return Err(reject());
    }
    let factor = h / grid.rows;
    if !factor.is_power_of_two() {
        return Err(reject());
    }
    Ok(factor.trailing_zeros() as usize)
}

/// Box regressor: separable blocks → global pool → linear(4) → sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct FineHead {
    features: [usize; 3],
    blocks: Vec<SeparableBlock>,
    fc: Dense,
}

impl FineHead {
    pub fn new(features: [usize; 3], config: &HeadsConfig) -> Result<Self> {
        let (blocks, channels) = chain(FINE_PREFIX, features[0], &config.fine_blocks);
        validate_chain(&blocks, features)?;
        Ok(Self {
            features,
            blocks,
            fc: Dense::new("fine.fc", channels, 4),
        })
    }

    pub fn init(&self, bundle: &mut ModelBundle, rng: &mut Rng) {
        self.blocks.iter().for_each(|b| b.init(bundle, rng));
        self.fc.init(bundle, rng);
    }

    pub fn forward(&self, g: &mut Graph, bundle: &ModelBundle, features: NodeId) -> Result<NodeId> {
        check_features(g, features, &self.features, "fine_forward")?;
        let x = run_blocks(&self.blocks, g, bundle, features)?;
        let pooled = g.global_avg_pool(x)?;
        let raw = self.fc.forward(g, bundle, pooled)?;
        g.sigmoid(raw)
    }

    pub fn fine_forward(&self, bundle: &ModelBundle, features: &Tensor) -> Result<BoxTarget> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, bundle, x)?;
        // sigmoid can round to exactly 0 or 1 in f64 for saturated inputs
        let v: Vec<f64> = g
            .value(out)
            .data()
            .iter()
            .map(|v| v.clamp(1e-12, 1.0 - 1e-12))
            .collect();
        Ok(BoxTarget {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        })
    }
}

fn validate_chain(blocks: &[SeparableBlock], features: [usize; 3]) -> Result<()> {
    let (mut h, mut w) = (features[1], features[2]);
    for b in blocks {
        b.depthwise.validate()?;
        (h, w) = b
            .output_hw(h, w)
            .ok_or_else(|| Error::Config(format!("head block {} shrinks below 1x1", b.name)))?;
    }
    Ok(())
}
