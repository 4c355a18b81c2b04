use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::Op;
use super::{ParamId, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Named counters bumped by model code, used to verify which forward
/// passes a training step actually executed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounters(BTreeMap<&'static str, usize>);

impl OpCounters {
    pub fn get(&self, name: &str) -> usize {
        self.0.get(name).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, name: &'static str) {
        *self.0.entry(name).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &OpCounters) {
        for (name, count) in &other.0 {
            *self.0.entry(name).or_insert(0) += count;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, usize)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

/// Ordered record of executed ops. One tape serves one forward/backward
/// pass and is owned by a single thread.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    pub(crate) dropout_rng: Option<ChaCha8Rng>,
    counters: OpCounters,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape in training mode: dropout layers draw their masks from a
    /// generator seeded with `seed`.
    pub fn with_dropout(seed: u64) -> Self {
        Self { dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn count(&mut self, name: &'static str) {
        self.counters.bump(name);
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a free variable that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a parameter. Repeated calls with the same id reuse the node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let var = self.push_unchecked(value.clone(), Op::Param(id), true);
        self.params.insert(id, var);
        var
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar. Nodes are visited in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            node.op.backward(self, &node.value, &upstream, &mut grads);
            grads[index] = Some(upstream);
        }
        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &var)| (id, var)).collect();
        params.sort_unstable();
        Ok(Gradients { nodes, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .binary_search_by_key(&id, |&(p, _)| p)
            .ok()
            .and_then(|i| self.wrt(self.params[i].1))
    }

    /// Parameter gradients in ascending id order. Parameters the loss did not
    /// reach are omitted.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().filter_map(|&(id, var)| self.wrt(var).map(|g| (id, g)))
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
