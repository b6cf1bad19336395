//! Parameterized building blocks over the autodiff tape.

use partgroup_autograd::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

/// Registers parameters under a dotted path prefix.
pub(crate) struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scoped<V>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> V) -> V {
        self.push(name);
        let v = f(self);
        self.pop();
        v
    }

    fn path(&self, leaf: &str) -> String {
        let mut p = self.prefix.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(leaf);
        p
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(leaf);
        self.store.add(path, value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        self.scoped(name, |b| {
            let w = init::xavier(b.rng, &[fan_in, fan_out], fan_in, fan_out);
            let w = b.add("weight", w);
            let bias = bias.then(|| b.add("bias", Tensor::zeros(&[fan_out])));
            Linear { w, b: bias }
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        self.scoped(name, |b| LayerNorm {
            gamma: b.add("weight", Tensor::full(&[dim], T::one())),
            beta: b.add("bias", Tensor::zeros(&[dim])),
        })
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize]) -> Mlp {
        self.scoped(name, |b| Mlp {
            layers: dims.windows(2).enumerate().map(|(i, w)| b.linear(&i.to_string(), w[0], w[1], true)).collect(),
        })
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Attention {
        self.scoped(name, |b| Attention {
            q: b.linear("q_proj", dim, dim, true),
            k: b.linear("k_proj", dim, dim, true),
            v: b.linear("v_proj", dim, dim, true),
            out: b.linear("out_proj", dim, dim, true),
            heads,
        })
    }

    pub fn ffn(&mut self, name: &str, dim: usize, hidden: usize) -> Mlp {
        self.mlp(name, &[dim, hidden, dim])
    }

    /// Learned embedding table with unit-variance uniform entries.
    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let t = init::uniform(self.rng, &[rows, dim], 3f64.sqrt());
        self.add(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.matmul(x, g.param(self.w));
        match self.b {
            Some(b) => g.add_broadcast(y, g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta))
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i != last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Multi-head attention with separate query, key and value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// Returns the projected output `[B, Nq, D]` and the weights `[B, H, Nq, Nk]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Var) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let a = g.attn_weights(q, k, self.heads, key_mask);
        let o = g.attn_apply(a, v);
        (self.out.forward(g, o), a)
    }
}

/// `x + p`, broadcasting `p` over leading dimensions when needed.
pub(crate) fn with_pos<T: Scalar>(g: &Graph<'_, T>, x: Var, pos: Option<Var>) -> Var {
    match pos {
        None => x,
        Some(p) if g.shape(p) == g.shape(x) => g.add(x, p),
        Some(p) => g.add_broadcast(x, p),
    }
}
