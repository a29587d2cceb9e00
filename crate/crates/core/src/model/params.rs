use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

use super::weights::{is_trainable, Stage, Weights};

/// Binds named weights into a graph on first use. Parameters trained in
/// `stage` become gradient leaves; everything else is a constant.
pub struct Params<'g> {
    graph: &'g Graph,
    weights: &'g Weights,
    stage: Option<Stage>,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Params<'g> {
    pub fn new(graph: &'g Graph, weights: &'g Weights, stage: Option<Stage>) -> Self {
        Params {
            graph,
            weights,
            stage,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Inference binding: nothing is trainable.
    pub fn frozen(graph: &'g Graph, weights: &'g Weights) -> Self {
        Self::new(graph, weights, None)
    }

    pub fn weights(&self) -> &'g Weights {
        self.weights
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = Arc::clone(self.weights.get(name)?);
        let trainable = self.stage.is_some_and(|s| is_trainable(s, name));
        let v = self.graph.leaf(t, trainable);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradients of every bound trainable parameter; parameters that were
    /// bound but received no gradient get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Dense `x·W + b` using `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(self.get(&format!("{prefix}.w"))?)?
            .add_row(self.get(&format!("{prefix}.b"))?)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(
            self.get(&format!("{prefix}.g"))?,
            self.get(&format!("{prefix}.b"))?,
        )
    }
}
