//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable operation pushes one node holding its output value and
//! a hand-written backward closure. Closures are self-contained: they capture
//! (cheap `Arc` clones of) whatever forward values they need and deposit
//! parent gradients through a [`GradSink`]. The tape is append-only, so node
//! indices are already a topological order and the backward sweep is a single
//! reverse loop — gradient accumulation happens in one fixed, serial order,
//! which keeps runs bit-reproducible.
//!
//! Trainable parameters live in a [`ParamStore`] outside the tape; binding one
//! onto a tape yields a leaf node whose gradient is copied back into the store
//! after the backward sweep. Frozen parameters bind as constants: no gradient
//! is ever computed for them, so their stored gradient stays identically zero.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Insertion index of this parameter within its store.
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named value with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, name-indexed collection of parameters.
///
/// Insertion order is the canonical order for optimizer sweeps and
/// checkpoints, so construction order must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_add", format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, value, grad, trainable });
        Ok(id)
    }

    /// Trainable parameter initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape, -bound, bound, rng);
        self.add(name, value, true)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    /// Mutable access by insertion index (the canonical sweep order).
    pub fn by_index_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::shape(
                "param_set_value",
                format!("{:?} vs {:?}", value.shape(), self.params[id.0].value.shape()),
            ));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        p.grad.add_assign(grad)
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Collects gradient contributions during the backward sweep.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    needs_grad: &'a [bool],
}

impl<'a, T: Real> GradSink<'a, T> {
    /// Adds `contribution` to the gradient of `target`, skipping nodes that
    /// do not require gradients (constants and everything downstream-only of
    /// constants).
    pub fn add(&mut self, target: NodeId, contribution: Tensor<T>) {
        if !self.needs_grad[target.0] {
            return;
        }
        match &mut self.grads[target.0] {
            Some(acc) => {
                acc.add_assign(&contribution).expect("gradient shape mismatch");
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// The autodiff tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(NodeId, ParamId)>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, None)
    }

    /// Records a gradient-requiring input with no producer (e.g. a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, None)
    }

    /// Binds a stored parameter onto this tape.
    ///
    /// Trainable parameters become leaves whose gradients flow back into the
    /// store via [`Tape::accumulate_param_grads`]; frozen parameters become
    /// constants, so no gradient is ever produced for them.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        if p.trainable {
            let node = self.leaf(p.value.clone());
            self.bindings.push((node, id));
            node
        } else {
            self.constant(p.value.clone())
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, needs_grad, backward });
        id
    }

    /// Records an op node: output `value`, with `backward` run only if any
    /// input needs a gradient.
    pub(crate) fn op(
        &mut self,
        value: Tensor<T>,
        inputs_need_grad: bool,
        backward: BackwardFn<T>,
    ) -> NodeId {
        if inputs_need_grad {
            self.push(value, true, Some(backward))
        } else {
            self.push(value, false, None)
        }
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_value.shape()),
            ));
        }
        root_value.ensure_finite("backward")?;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        let needs_grad: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();

        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue;
            };
            // Take the (complete, since all consumers have larger ids) gradient
            // out so the sink can mutate the rest of the slice.
            let g = grads[id].take().expect("checked above");
            {
                let mut sink = GradSink { grads: &mut grads, needs_grad: &needs_grad };
                backward(&g, &mut sink);
            }
            grads[id] = Some(g);
        }

        Ok(Gradients { grads })
    }

    /// Copies gradients of bound trainable parameters back into the store,
    /// accumulating in binding order.
    pub fn accumulate_param_grads(
        &self,
        gradients: &Gradients<T>,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        for &(node, pid) in &self.bindings {
            if let Some(g) = gradients.get(node) {
                g.ensure_finite("accumulate_param_grads")?;
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }

    /// The parameter bindings recorded on this tape.
    pub fn bindings(&self) -> &[(NodeId, ParamId)] {
        &self.bindings
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
