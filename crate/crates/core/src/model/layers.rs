//! Reusable sublayers: linear maps, layer norm, feed-forward, multi-head
//! attention, the conformer convolution module and the latent attention.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::init::{uniform_tensor, Init};
use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// `y = x W (+ b)` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[input, output], Init::fan_in(input), rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Pre-norm position-wise MLP: `LN → Linear → SiLU → Linear`. The caller
/// adds the residual.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, expansion: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            up: Linear::new(store, &format!("{name}.up"), dim, dim * expansion, true, rng),
            down: Linear::new(store, &format!("{name}.down"), dim * expansion, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.up.forward(g, p, h)?;
        let h = g.silu(h)?;
        self.down.forward(g, p, h)
    }
}

/// Column blocks `[h*dh, (h+1)*dh)` of `x`, or `x` itself for one head.
fn head<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let dh = g.shape(x)[1] / heads;
    g.slice_cols(x, h * dh, dh)
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, outs: Vec<Var>) -> Result<Var> {
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

/// Scaled dot-product attention, `softmax(q kᵀ/√d) v`, per head.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let dh = g.shape(q)[1] / heads;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head(g, q, h, heads)?, head(g, k, h, heads)?, head(g, v, h, heads)?);
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    merge_heads(g, outs)
}

/// Multi-head attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng),
            heads,
        }
    }

    /// Queries from `xq` (`[Tq, E]`), keys and values from `xkv` (`[Tk, E]`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.query.forward(g, p, xq)?;
        let k = self.key.forward(g, p, xkv)?;
        let v = self.value.forward(g, p, xkv)?;
        let o = attend(g, q, k, v, self.heads)?;
        self.out.forward(g, p, o)
    }
}

/// Conformer convolution module:
/// `LN → pointwise (E→2E) → GLU → depthwise conv → LN → SiLU → pointwise`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise_weight: ParamId,
    depthwise_bias: ParamId,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
    dim: usize,
}

impl ConvModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), dim, 2 * dim, true, rng),
            depthwise_weight: store.add(
                format!("{name}.depthwise.weight"),
                uniform_tensor(&[kernel, dim], Init::fan_in(kernel), rng),
            ),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[dim])),
            mid_norm: LayerNorm::new(store, &format!("{name}.mid_norm"), dim),
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), dim, dim, true, rng),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.pointwise_in.forward(g, p, h)?;
        let value = g.slice_cols(h, 0, self.dim)?;
        let gate = g.slice_cols(h, self.dim, self.dim)?;
        let gate = g.sigmoid(gate)?;
        let h = g.mul(value, gate)?;
        let h = g.depthwise_conv1d(h, p.var(self.depthwise_weight), p.var(self.depthwise_bias))?;
        let h = self.mid_norm.forward(g, p, h)?;
        let h = g.silu(h)?;
        self.pointwise_out.forward(g, p, h)
    }
}

/// Latent attention: sequence attention routed through a fixed set of
/// learned latent vectors, linear in sequence length.
///
/// Stage 1: each latent attends over all positions (softmax over time) and
/// gathers a summary of the values. Stage 2: each position attends over the
/// updated latents (softmax over latents). No `T x T` score matrix is ever
/// formed; the largest score matrices are `n_latents x T` and `T x n_latents`.
#[derive(Clone, Debug)]
pub struct LatentAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    latents: ParamId,
    out: Linear,
    heads: usize,
}

impl LatentAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        latent_dim: usize,
        n_latents: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, latent_dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, latent_dim, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, latent_dim, false, rng),
            latents: store.add(
                format!("{name}.latents"),
                uniform_tensor(&[n_latents, latent_dim], Init(1.0), rng),
            ),
            out: Linear::new(store, &format!("{name}.out"), latent_dim, dim, false, rng),
            heads,
        }
    }

    pub fn latents(&self) -> ParamId {
        self.latents
    }

    pub fn value_projection(&self) -> ParamId {
        self.value.weight
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let lat = p.var(self.latents);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                head(g, q, h, self.heads)?,
                head(g, k, h, self.heads)?,
                head(g, v, h, self.heads)?,
            );
            let lh = head(g, lat, h, self.heads)?;
            let dh = g.shape(qh)[1];
            let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
            // latents gather over time: [L, T] scores, softmax over T
            let s1 = g.matmul_nt(lh, kh)?;
            let s1 = g.scale(s1, scale)?;
            let a1 = g.softmax_rows(s1)?;
            let z = g.matmul(a1, vh)?;
            // positions read back from latents: [T, L] scores, softmax over L
            let s2 = g.matmul_nt(qh, z)?;
            let s2 = g.scale(s2, scale)?;
            let a2 = g.softmax_rows(s2)?;
            outs.push(g.matmul(a2, z)?);
        }
        let o = merge_heads(g, outs)?;
        self.out.forward(g, p, o)
    }
}
