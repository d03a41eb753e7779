//! Small reusable layer wiring on top of the graph.

use crate::error::Result;
use crate::tensor::{glorot_bound, Graph, ParamStore, Scalar, Tensor, Var};

/// A `k×k` same-padding convolution bound to graph variables.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Option<Var>,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, 1, self.pad)
    }

    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        g.relu(y)
    }
}

/// Stack of conv + ReLU layers.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub convs: Vec<Conv>,
}

impl ConvBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for conv in &self.convs {
            x = conv.forward_relu(g, x)?;
        }
        Ok(x)
    }
}

/// Adds `{prefix}.w` (`c_out×c_in×k×k`) and `{prefix}.b` to `store`.
pub(crate) fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let bound = glorot_bound(c_in * k * k, c_out * k * k);
    store.insert_uniform(&format!("{prefix}.w"), &[c_out, c_in, k, k], bound, seed)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![c_out]))?;
    Ok(())
}

/// Name-based lookup of registered parameter variables.
pub(crate) struct Bound<'a, T> {
    pub store: &'a ParamStore<T>,
    pub vars: &'a [Var],
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from layout"));
        self.vars[i]
    }

    pub fn conv(&self, prefix: &str) -> Conv {
        let weight = self.var(&format!("{prefix}.w"));
        let k = self.store.get(&format!("{prefix}.w")).expect("weight exists").shape()[2];
        Conv {
            weight,
            bias: Some(self.var(&format!("{prefix}.b"))),
            pad: (k - 1) / 2,
        }
    }

    pub fn block(&self, prefix: &str, depth: usize) -> ConvBlock {
        ConvBlock {
            convs: (0..depth).map(|i| self.conv(&format!("{prefix}.conv{i}"))).collect(),
        }
    }
}
