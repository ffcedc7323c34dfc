//! Named-parameter plumbing shared by every learnable component.
//!
//! Each component exposes `bind(prefix, alloc) -> Bound…`, walking its
//! tensors in one canonical order and asking `alloc` for the graph leaf to
//! use, plus a `visit_mut` twin over the same order for optimizer updates,
//! freezing, and checkpoint IO. Callers choose what `alloc` does: push a
//! fresh leaf (training), reuse externally supplied ids (gradient checking),
//! or harvest clones ([`collect_params`]).

use crate::numcore::{Graph, NodeId, Tensor};

/// Runs a component's bind walk against a scratch graph and returns the
/// (name, tensor) pairs in binding order.
pub fn collect_params(
    bind: impl FnOnce(&mut dyn FnMut(&str, &Tensor) -> NodeId),
) -> Vec<(String, Tensor)> {
    let mut g = Graph::new();
    let mut out = Vec::new();
    bind(&mut |name, t| {
        out.push((name.to_string(), t.clone()));
        g.leaf(t)
    });
    out
}

/// Names and leaf ids recorded while binding components for a training step,
/// aligned index-for-index with the owning components' `visit_mut` order.
#[derive(Debug, Default)]
pub struct Registry {
    pub names: Vec<String>,
    pub ids: Vec<NodeId>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    /// Makes an `alloc` that pushes each tensor as a leaf on `g` and records
    /// it here.
    pub fn record<'a>(
        &'a mut self,
        g: &'a mut Graph,
    ) -> impl FnMut(&str, &Tensor) -> NodeId + 'a {
        |name, t| {
            let id = g.leaf(t);
            self.names.push(name.to_string());
            self.ids.push(id);
            id
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
