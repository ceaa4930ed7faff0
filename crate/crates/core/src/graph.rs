//! Reverse-mode autodiff over [`Tensor`] kernels.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the ids of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into every node that requires one.
//! Parameters come from a [`ModelBundle`]; frozen arrays enter the tape as
//! constants and never get a gradient buffer.

use std::collections::{BTreeMap, HashMap};

use crate::backbone::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, DropoutMode, Tensor};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param,
    Conv { x: NodeId, w: NodeId, spec: ConvSpec },
    ChannelBias { x: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    AvgPool(NodeId),
    Mask { x: NodeId, mask: Vec<f64> },
    Add(NodeId, NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(Vec<NodeId>),
    WeightedCe { logits: NodeId, target: Vec<f64>, alpha: Vec<f64> },
    SquaredError { pred: NodeId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("forward pass"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Variable,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Looks up (and caches) the named array of `bundle` as a leaf.
    pub fn param(&mut self, bundle: &ModelBundle, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = bundle
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter array named {name:?}")))?;
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param,
            requires_grad: !p.frozen,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let value = tensor::conv2d(self.value(x), self.value(w), spec)?;
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Conv { x, w, spec: *spec }, rg)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add_channel_bias(self.value(x), self.value(b))?;
        let rg = self.rg(&[x, b]);
        self.push(value, Op::ChannelBias { x, b }, rg)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() != 1 {
            return Err(Error::shape("softmax", self.value(x).shape(), &[0]));
        }
        let value = tensor::softmax(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(value, Op::AvgPool(x), rg)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64, mode: DropoutMode, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
        }
        match mode {
            DropoutMode::Eval => Ok(x),
            DropoutMode::Train if p == 0.0 => Ok(x),
            DropoutMode::Train => {
                let mask = tensor::dropout_mask(self.value(x).len(), p, rng)?;
                self.apply_mask(x, mask)
            }
        }
    }

    /// Multiplies `x` elementwise by a fixed mask.
    pub fn apply_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask", self.value(x).shape(), &[mask.len()]));
        }
        let value = tensor::apply_mask(self.value(x), &mask);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mask { x, mask }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Average of scalar nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of zero nodes"));
        }
        let mut total = 0.0;
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::shape("mean", self.value(x).shape(), &[1]));
            }
            total += self.value(x).data()[0];
        }
        let rg = self.rg(xs);
        self.push(
            Tensor::scalar(total / xs.len() as f64),
            Op::Mean(xs.to_vec()),
            rg,
        )
    }

    /// `-Σ α_i · t_i · log softmax(o)_i`.
    pub fn weighted_ce(&mut self, logits: NodeId, target: &[f64], alpha: &[f64]) -> Result<NodeId> {
        let o = self.value(logits);
        if !o.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        if o.rank() != 1 || target.len() != o.len() || alpha.len() != o.len() {
            return Err(Error::shape("weighted_ce", o.shape(), &[target.len(), alpha.len()]));
        }
        let loss = weighted_ce_value(o.data(), target, alpha);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                target: target.to_vec(),
                alpha: alpha.to_vec(),
            },
            rg,
        )
    }

    /// `Σ (p_i - t_i)²`.
    pub fn squared_error(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape("squared_error", p.shape(), &[target.len()]));
        }
        let loss = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Reverse accumulation from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward(
                "no recorded forward pass produced this node".into(),
            ));
        };
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.0] = Some(Tensor::new(node.value.shape().to_vec(), vec![1.0])?);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::new();
            match &node.op {
                Op::Constant | Op::Variable | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, spec } => {
                    let (gx, gw) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), spec, &g)?;
                    contributions.push((*x, gx));
                    contributions.push((*w, gw));
                }
                Op::ChannelBias { x, b } => {
                    contributions.push((*b, tensor::add_channel_bias_backward(self.value(*x).shape(), &g)));
                    contributions.push((*x, g));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = tensor::linear_backward(self.value(*x), self.value(*w), &g);
                    contributions.push((*x, gx));
                    contributions.push((*w, gw));
                    contributions.push((*b, gb));
                }
                Op::Relu(x) => contributions.push((*x, tensor::relu_backward(self.value(*x), &g))),
                Op::Sigmoid(x) => {
                    contributions.push((*x, tensor::sigmoid_backward(&node.value, &g)))
                }
                Op::Softmax(x) => {
                    contributions.push((*x, tensor::softmax_backward(&node.value, &g)))
                }
                Op::AvgPool(x) => contributions.push((
                    *x,
                    tensor::global_avg_pool_backward(self.value(*x).shape(), &g)?,
                )),
                Op::Mask { x, mask } => contributions.push((*x, tensor::apply_mask(&g, mask))),
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Reshape(x) => contributions.push((*x, g.reshape(self.value(*x).shape())?)),
                Op::Sum(x) => {
                    let shape = self.value(*x).shape();
                    contributions.push((*x, Tensor::full(shape, g.data()[0])));
                }
                Op::Mean(xs) => {
                    let share = g.data()[0] / xs.len() as f64;
                    for &x in xs {
                        contributions.push((x, Tensor::scalar(share)));
                    }
                }
                Op::WeightedCe {
                    logits,
                    target,
                    alpha,
                } => {
                    let p = tensor::softmax_slice(self.value(*logits).data());
                    let s: f64 = alpha.iter().zip(target).map(|(a, t)| a * t).sum();
                    let scale = g.data()[0];
                    let d = p
                        .iter()
                        .zip(alpha.iter().zip(target))
                        .map(|(p, (a, t))| scale * (p * s - a * t))
                        .collect();
                    contributions.push((*logits, Tensor::from_vec(d)));
                }
                Op::SquaredError { pred, target } => {
                    let scale = g.data()[0];
                    let d = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(p, t)| scale * 2.0 * (p - t))
                        .collect();
                    contributions.push((*pred, Tensor::from_vec(d)));
                }
            }
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !grad.is_finite() {
                    return Err(Error::NonFinite("backward pass"));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

pub(crate) fn weighted_ce_value(logits: &[f64], target: &[f64], alpha: &[f64]) -> f64 {
    let logp = tensor::log_softmax_slice(logits);
    -logp
        .iter()
        .zip(target.iter().zip(alpha))
        .map(|(lp, (t, a))| if *t == 0.0 { 0.0 } else { a * t * lp })
        .sum::<f64>()
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, NodeId>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf does not require one.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter the forward pass touched.
    pub fn params(&self) -> BTreeMap<String, &Tensor> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.wrt(*id).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn into_params(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.grads[id.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Param;

    #[test]
    fn bias_gradient_of_summed_identity_linear() {
        let mut bundle = ModelBundle::new([0; 32]);
        bundle.insert("fc.w", Param::trainable(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()));
        bundle.insert("fc.b", Param::trainable(Tensor::zeros(&[3])));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.3, -2.0, 5.0]));
        let w = g.param(&bundle, "fc.w").unwrap();
        let b = g.param(&bundle, "fc.b").unwrap();
        let y = g.linear(x, w, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["fc.b"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut bundle = ModelBundle::new([0; 32]);
        bundle.insert("fc.w", Param::frozen(Tensor::full(&[2, 2], 0.5)));
        bundle.insert("fc.b", Param::trainable(Tensor::zeros(&[2])));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = g.param(&bundle, "fc.w").unwrap();
        let b = g.param(&bundle, "fc.b").unwrap();
        let y = g.linear(x, w, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(w).is_none());
        let names: Vec<_> = grads.params().into_keys().collect();
        assert_eq!(names, vec!["fc.b".to_string()]);
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut other = Graph::new();
        let x = other.variable(Tensor::scalar(1.0));
        let empty = Graph::new();
        assert!(matches!(empty.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn weighted_ce_rejects_non_finite_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![f64::NAN, 0.0, 0.0]));
        assert!(matches!(
            g.weighted_ce(x, &[1.0, 0.0, 0.0], &[1.0; 3]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, -3.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0]);
    }
}
