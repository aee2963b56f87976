//! Reference-counted computation graph with reverse-mode differentiation.
//!
//! A [`Var`] owns its value and, when any input requires a gradient, its
//! parents plus a backward closure. Graphs built purely from constants keep
//! no parents, so inference-time intermediates are freed as soon as they go
//! out of scope.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps the output gradient, parent values and output value to one optional
/// gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        param: Option<ParamId>,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            param,
            parents,
            backward,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None, Vec::new(), None)
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, None, Vec::new(), None)
    }

    pub(crate) fn param(value: Tensor<T>, id: ParamId) -> Self {
        Self::make(value, true, Some(id), Vec::new(), None)
    }

    /// Records an operation. The closure is only retained when at least one
    /// parent requires a gradient.
    pub fn from_op<F>(value: Tensor<T>, parents: &[&Var<T>], backward: F) -> Self
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(
                value,
                true,
                None,
                parents.iter().map(|&p| p.clone()).collect(),
                Some(Box::new(backward)),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        Ok(self.backward_with(Tensor::full(self.shape(), T::one())))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut grads = Gradients { by_node: HashMap::new(), by_param: HashMap::new() };
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if let Some(pid) = node.0.param {
                        accumulate(&mut grads.by_param, pid, g.clone());
                    }
                    accumulate(&mut grads.by_node, node.0.id, g);
                }
                Some(backward) => {
                    let parent_values: Vec<&Tensor<T>> =
                        node.0.parents.iter().map(|p| p.value()).collect();
                    let parent_grads = backward(&g, &parent_values, &node.0.value);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        if let (true, Some(pg)) = (parent.requires_grad(), pg) {
                            debug_assert_eq!(pg.shape(), parent.shape());
                            accumulate(&mut pending, parent.0.id, pg);
                        }
                    }
                }
            }
        }
        grads
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Scalar>(map: &mut HashMap<K, Tensor<T>>, key: K, g: Tensor<T>) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(Tensor::all_finite)
    }
}
