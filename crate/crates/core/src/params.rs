//! Named parameter storage and the small layer vocabulary shared by every block.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Learnable tensors keyed by dotted module path (`"dsfr.gate_img.w"`).
///
/// Iteration order is the lexical order of names, which fixes the order of
/// optimizer updates and checkpoint records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Binds `name` as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(name, self.get(name)?)
    }
}

/// Glorot-uniform `fan_in × fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(vec![fan_in, fan_out], bound, rng)
}

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        store.insert(format!("{prefix}.w"), glorot(fan_in, fan_out, rng));
        store.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, fan_out]));
    }

    pub fn init_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        store.insert(format!("{prefix}.w"), Tensor::zeros(vec![fan_in, fan_out]));
        store.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, fan_out]));
    }

    pub fn bind(store: &ParamStore, g: &mut Graph, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: store.bind(g, &format!("{prefix}.w"))?,
            b: store.bind(g, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add(y, self.b)
    }
}

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// `zero_out` zero-initializes the output layer so the block starts as the zero map.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: (usize, usize, usize),
        zero_out: bool,
        rng: &mut R,
    ) {
        let (c_in, c_hidden, c_out) = dims;
        Linear::init(store, &format!("{prefix}.fc1"), c_in, c_hidden, rng);
        if zero_out {
            Linear::init_zero(store, &format!("{prefix}.fc2"), c_hidden, c_out);
        } else {
            Linear::init(store, &format!("{prefix}.fc2"), c_hidden, c_out, rng);
        }
    }

    pub fn bind(store: &ParamStore, g: &mut Graph, prefix: &str) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::bind(store, g, &format!("{prefix}.fc1"))?,
            out: Linear::bind(store, g, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, h)
    }
}

/// Single-head scaled dot-product attention projections, all `C×C`, bias-free.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}.{name}"), glorot(dim, dim, rng));
        }
    }

    pub fn bind(store: &ParamStore, g: &mut Graph, prefix: &str) -> Result<Self> {
        Ok(Attention {
            wq: store.bind(g, &format!("{prefix}.wq"))?,
            wk: store.bind(g, &format!("{prefix}.wk"))?,
            wv: store.bind(g, &format!("{prefix}.wv"))?,
            wo: store.bind(g, &format!("{prefix}.wo"))?,
        })
    }

    /// `softmax((q·Wq)(kv·Wk)ᵀ / √C) (kv·Wv) Wo`. Also returns the attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<(Var, Var)> {
        let qc = g.value(queries).cols();
        let kc = g.value(keys_values).cols();
        if qc != kc {
            return Err(Error::dim("attention", format!("query width {qc} vs key width {kc}")));
        }
        let q = g.matmul(queries, self.wq)?;
        let k = g.matmul(keys_values, self.wk)?;
        let v = g.matmul(keys_values, self.wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (qc as f64).sqrt())?;
        let weights = g.softmax_rows(scores)?;
        let ctx = g.matmul(weights, v)?;
        Ok((g.matmul(ctx, self.wo)?, weights))
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, queries, keys_values)?.0)
    }
}
