//! Define-by-run gradient tape.
//!
//! A [`Graph`] records one forward pass. Every differentiable op appends a node
//! holding the ids of its inputs and a closure mapping the output gradient to
//! input gradients. [`Graph::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because nodes can only refer to
//! earlier nodes.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::time::{Duration, Instant};

use crate::error::{Result, TensorError};
use crate::flops::{FlopCounter, FlopTally};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per input. The `needs`
/// slice tells the closure which inputs actually participate in the tape.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    check_finite: Cell<bool>,
    flops: RefCell<Option<FlopCounter>>,
    scopes: RefCell<Vec<String>>,
    profile: RefCell<Option<Profiler>>,
}

/// Wall-clock time per op name. Forward time is measured from the previous
/// recorded op, so glue code between ops is attributed to the next op.
#[derive(Default)]
struct Profiler {
    mark: Option<Instant>,
    ops: HashMap<&'static str, OpTiming>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpTiming {
    pub calls: usize,
    pub forward: Duration,
    pub backward: Duration,
}

/// A value flowing through a [`Graph`]. Constants carry no node id.
#[derive(Clone)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            check_finite: Cell::new(true),
            flops: RefCell::new(None),
            scopes: RefCell::new(Vec::new()),
            profile: RefCell::new(None),
        }
    }

    /// A graph that never records nodes; used for inference.
    pub fn no_grad() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Toggle the per-op NaN/Inf check (on by default).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { graph: self, value: Rc::new(value), node: None }
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        if !self.grad_enabled {
            return self.constant(value);
        }
        let id = self.push_node(Node { op: "leaf", parents: Vec::new(), backward: None });
        Var { graph: self, value: Rc::new(value), node: Some(id) }
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wrap an op result, attaching a backward closure when any input is tracked.
    pub(crate) fn record<'g>(
        &'g self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var<'g, T>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.to_string() });
        }
        if let Some(p) = self.profile.borrow_mut().as_mut() {
            let now = Instant::now();
            let t = p.ops.entry(op).or_default();
            t.calls += 1;
            if let Some(m) = p.mark {
                t.forward += now - m;
            }
            p.mark = Some(now);
        }
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.grad_enabled && parents.iter().any(Option::is_some) {
            Some(self.push_node(Node { op, parents, backward: Some(Box::new(backward)) }))
        } else {
            None
        };
        Ok(Var { graph: self, value: Rc::new(value), node })
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every leaf
    /// reachable from `loss`.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Grads<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let mut leaves = HashMap::new();
        let Some(root) = loss.node else {
            return Ok(Grads { grads: leaves });
        };
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let started = Instant::now();
            let input_grads = backward(&grad, &needs)?;
            if let Some(p) = self.profile.borrow_mut().as_mut() {
                p.ops.entry(node.op).or_default().backward += started.elapsed();
            }
            for (parent, g) in node.parents.iter().zip(input_grads) {
                let (Some(p), Some(g)) = (parent, g) else {
                    continue;
                };
                if self.check_finite.get() && !g.is_finite() {
                    return Err(TensorError::NonFinite { op: format!("{} (backward)", node.op) });
                }
                match &mut pending[*p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads: leaves })
    }

    /// Start timing ops by name (forward and backward).
    pub fn enable_profiler(&self) {
        *self.profile.borrow_mut() = Some(Profiler { mark: Some(Instant::now()), ..Profiler::default() });
    }

    /// Timings sorted by total time, slowest first.
    pub fn take_profile(&self) -> Vec<(&'static str, OpTiming)> {
        let Some(p) = self.profile.borrow_mut().take() else {
            return Vec::new();
        };
        let mut v: Vec<_> = p.ops.into_iter().collect();
        v.sort_by(|a, b| (b.1.forward + b.1.backward).cmp(&(a.1.forward + a.1.backward)));
        v
    }

    /// Start counting multiply-accumulates per scope.
    pub fn enable_flop_counter(&self) {
        *self.flops.borrow_mut() = Some(FlopCounter::default());
    }

    pub fn take_flop_counter(&self) -> Option<FlopCounter> {
        self.flops.borrow_mut().take()
    }

    pub(crate) fn count(&self, tally: FlopTally) {
        if let Some(counter) = self.flops.borrow_mut().as_mut() {
            let scope = self.scopes.borrow().join(".");
            counter.add(&scope, tally);
        }
    }

    /// Push a name onto the scope stack until the guard drops.
    pub fn scope(&self, name: &str) -> ScopeGuard<'_, T> {
        self.scopes.borrow_mut().push(name.to_string());
        ScopeGuard { graph: self }
    }

    pub fn current_scope(&self) -> String {
        self.scopes.borrow().join(".")
    }
}

pub struct ScopeGuard<'g, T: Real> {
    graph: &'g Graph<T>,
}

impl<T: Real> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.graph.scopes.borrow_mut().pop();
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        Var { graph: self.graph, value: Rc::clone(&self.value), node: None }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Grads<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.node.and_then(|id| self.grads.remove(&id))
    }

    /// Gradient for `var`, or zeros when `var` did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
