//! Named parameters and the layers built from them.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// All learnable arrays of a model under stable dotted names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Registers every parameter as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.variable(v.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters placed on one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient of every bound parameter; parameters off the output's path
    /// get zeros.
    pub fn grads(&self, g: &Graph, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

/// Normal samples redrawn until they fall within two standard deviations.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub const LINEAR_INIT_STD: f64 = 0.02;

pub fn init_linear(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut Rng) {
    store.insert(format!("{prefix}.weight"), trunc_normal(&[inputs, outputs], LINEAR_INIT_STD, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, outputs]));
}

/// `x W + b` for an `r x inputs` matrix.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[1, dim], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, dim]));
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Shape of a pre-normalization transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn init_block(store: &mut ParamStore, prefix: &str, shape: BlockShape, rng: &mut Rng) {
    let d = shape.dim;
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, &format!("{prefix}.qkv"), d, 3 * d, rng);
    init_linear(store, &format!("{prefix}.proj"), d, d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.fc1"), d, shape.mlp_ratio * d, rng);
    init_linear(store, &format!("{prefix}.fc2"), shape.mlp_ratio * d, d, rng);
}

/// Multi-head self-attention over the rows of `x` (no positional
/// information), followed by a GELU MLP; both sublayers are residual with
/// layer normalization on their inputs.
pub fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, shape: BlockShape) -> Result<Var> {
    let d = shape.dim;
    if g.shape(x).get(1) != Some(&d) || d % shape.heads != 0 {
        return Err(Error::Shape(format!(
            "{prefix}: block of width {d} with {} heads got {:?}",
            shape.heads,
            g.shape(x)
        )));
    }
    let head = d / shape.heads;
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), h)?;
    let mut heads = Vec::with_capacity(shape.heads);
    for i in 0..shape.heads {
        let q = g.slice_cols(qkv, i * head, head)?;
        let k = g.slice_cols(qkv, d + i * head, head)?;
        let v = g.slice_cols(qkv, 2 * d + i * head, head)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (head as f64).sqrt());
        let attn = g.softmax(logits)?;
        heads.push(g.matmul(attn, v)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn_out = linear(g, p, &format!("{prefix}.proj"), merged)?;
    let x = g.add(x, attn_out)?;

    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn shape() -> BlockShape {
        BlockShape {
            dim: 8,
            heads: 2,
            mlp_ratio: 4,
        }
    }

    fn randomized_block() -> ParamStore {
        let mut r = rng::stream(3, 0);
        let mut store = ParamStore::new();
        init_block(&mut store, "b", shape(), &mut r);
        // spread weights so every sublayer contributes visibly
        for (_, t) in store.iter_mut() {
            let noise = trunc_normal(t.shape(), 0.5, &mut r);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        store
    }

    fn run(store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = block(&mut g, &p, "b", xv, shape()).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn block_is_row_permutation_equivariant() {
        let store = randomized_block();
        let mut r = rng::stream(4, 0);
        let x = trunc_normal(&[5, 8], 1.0, &mut r);
        let y = run(&store, &x);
        let perm = [3usize, 0, 4, 1, 2];
        let xp_data: Vec<f64> = perm.iter().flat_map(|&i| x.row_slice(i).to_vec()).collect();
        let yp = run(&store, &Tensor::new(vec![5, 8], xp_data).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row_slice(k).iter().zip(y.row_slice(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_stays_zero_at_init() {
        let mut store = ParamStore::new();
        init_block(&mut store, "b", shape(), &mut rng::stream(0, 0));
        let y = run(&store, &Tensor::zeros(&[3, 8]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        init_block(&mut store, "b", shape(), &mut rng::stream(0, 0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 6]));
        assert!(block(&mut g, &p, "b", x, shape()).is_err());
    }

    #[test]
    fn trunc_normal_bounds() {
        let t = trunc_normal(&[1000], 0.02, &mut rng::stream(1, 0));
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
