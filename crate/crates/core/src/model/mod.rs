//! The EEND-CD network.
//!
//! Per depth `d`: pool the stack of earlier frame representations and add
//! the pooled summary to the current frames (from the second block on),
//! refine the attractors against those frames, then run the conformer
//! block, which cross-attends to the refined attractors. The last
//! attractors are projected to a direction and a bias per slot and scored
//! against the final frame embeddings.

mod config;
pub mod init;
pub mod layers;

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
use init::{uniform_tensor, Init};
use layers::{ConvModule, FeedForward, LatentAttention, LayerNorm, Linear, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::frontend::{CnnEncoder, N_MELS, WINDOW_FRAMES};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Conformer decoder block with six residual sublayers and a closing norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ff1: FeedForward,
    latte_norm: LayerNorm,
    latte: LatentAttention,
    conv1: ConvModule,
    cross_norm: LayerNorm,
    cross: MultiHeadAttention,
    conv2: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let e = cfg.embed_dim;
        Self {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), e, cfg.ff_expansion, rng),
            latte_norm: LayerNorm::new(store, &format!("{name}.latte_norm"), e),
            latte: LatentAttention::new(
                store,
                &format!("{name}.latte"),
                e,
                cfg.latte_dim,
                cfg.n_latents,
                cfg.heads,
                rng,
            ),
            conv1: ConvModule::new(store, &format!("{name}.conv1"), e, cfg.conv_kernel, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), e),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), e, cfg.heads, rng),
            conv2: ConvModule::new(store, &format!("{name}.conv2"), e, cfg.conv_kernel, rng),
            ff2: FeedForward::new(store, &format!("{name}.ff2"), e, cfg.ff_expansion, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), e),
        }
    }

    pub fn latte(&self) -> &LatentAttention {
        &self.latte
    }

    pub fn cross_attention(&self) -> &MultiHeadAttention {
        &self.cross
    }

    /// `x` is `[T, E]`, `attractors` is `[S, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, attractors: Var) -> Result<Var> {
        let half = T::from_f64(0.5);
        let h = self.ff1.forward(g, p, x)?;
        let h = g.scale(h, half)?;
        let x = g.add(x, h)?;

        let h = self.latte_norm.forward(g, p, x)?;
        let h = self.latte.forward(g, p, h)?;
        let x = g.add(x, h)?;

        let h = self.conv1.forward(g, p, x)?;
        let x = g.add(x, h)?;

        let h = self.cross_norm.forward(g, p, x)?;
        let h = self.cross.forward(g, p, h, attractors)?;
        let x = g.add(x, h)?;

        let h = self.conv2.forward(g, p, x)?;
        let x = g.add(x, h)?;

        let h = self.ff2.forward(g, p, x)?;
        let h = g.scale(h, half)?;
        let x = g.add(x, h)?;

        self.final_norm.forward(g, p, x)
    }
}

/// Self-attentive pooling over the depth axis: a score MLP rates each depth
/// entry per frame, a softmax over depth turns the scores into weights.
#[derive(Clone, Debug)]
pub struct DepthPool {
    hidden: Linear,
    score: Linear,
}

impl DepthPool {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, hidden, true, rng),
            score: Linear::new(store, &format!("{name}.score"), hidden, 1, true, rng),
        }
    }

    pub fn hidden(&self) -> &Linear {
        &self.hidden
    }

    pub fn score(&self) -> &Linear {
        &self.score
    }

    /// Pools `stack` (each `[T, E]`) into one `[T, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, stack: &[Var]) -> Result<Var> {
        if stack.is_empty() {
            return Err(Error::Config("depth pooling over an empty stack".into()));
        }
        let mut scores = Vec::with_capacity(stack.len());
        for &x in stack {
            let h = self.hidden.forward(g, p, x)?;
            let h = g.tanh(h)?;
            scores.push(self.score.forward(g, p, h)?);
        }
        let s = if scores.len() == 1 {
            scores[0]
        } else {
            g.concat_cols(&scores)?
        };
        let w = g.softmax_rows(s)?;
        let mut pooled = None;
        for (k, &x) in stack.iter().enumerate() {
            let wk = if stack.len() == 1 { w } else { g.slice_cols(w, k, 1)? };
            let term = g.mul_col(x, wk)?;
            pooled = Some(match pooled {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(pooled.expect("nonempty"))
    }
}

/// One transformer-decoder layer over attractor slots: self-attention,
/// cross-attention to the frames, feed-forward; pre-norm residuals.
#[derive(Clone, Debug)]
pub struct AttractorDecoder {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    memory_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

impl AttractorDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let e = cfg.embed_dim;
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), e),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), e, cfg.heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), e),
            memory_norm: LayerNorm::new(store, &format!("{name}.memory_norm"), e),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), e, cfg.heads, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), e, cfg.ff_expansion, rng),
        }
    }

    pub fn cross_attention(&self) -> &MultiHeadAttention {
        &self.cross_attn
    }

    /// `a` is `[S, E]`, `x` is `[T, E]`; returns updated `[S, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, a: Var, x: Var) -> Result<Var> {
        let h = self.self_norm.forward(g, p, a)?;
        let h = self.self_attn.forward(g, p, h, h)?;
        let a = g.add(a, h)?;

        let h = self.cross_norm.forward(g, p, a)?;
        let mem = self.memory_norm.forward(g, p, x)?;
        let h = self.cross_attn.forward(g, p, h, mem)?;
        let a = g.add(a, h)?;

        let h = self.ff.forward(g, p, a)?;
        g.add(a, h)
    }
}

/// Splits final attractors into directions and biases and scores frames:
/// `logit[t, s] = x_t · a_s + b_s + b_global`.
#[derive(Clone, Debug)]
pub struct LogitHead {
    split: Linear,
    global_bias: ParamId,
    dim: usize,
}

impl LogitHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            split: Linear::new(store, &format!("{name}.split"), dim, dim + 1, true, rng),
            global_bias: store.add(format!("{name}.global_bias"), Tensor::zeros(&[1])),
            dim,
        }
    }

    pub fn global_bias(&self) -> ParamId {
        self.global_bias
    }

    /// Returns `(logits [T, S], directions [S, E], slot_bias [S, 1])` where
    /// `slot_bias = b_s + b_global`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, a: Var) -> Result<(Var, Var, Var)> {
        let ab = self.split.forward(g, p, a)?;
        let dirs = g.slice_cols(ab, 0, self.dim)?;
        let b = g.slice_cols(ab, self.dim, 1)?;
        let slot_bias = g.add_scalar(b, p.var(self.global_bias))?;
        let xa = g.matmul_nt(x, dirs)?;
        let logits = g.add_row(xa, slot_bias)?;
        Ok((logits, dirs, slot_bias))
    }
}

/// Graph nodes produced by [`EendCd::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[T, S]` speaker logits.
    pub logits: Var,
    /// `[T, E]` final frame embeddings.
    pub embeddings: Var,
    /// `[S, E]` attractors after the last decoder.
    pub attractors: Var,
    /// `[S, E]` attractor directions from the logit head.
    pub directions: Var,
    /// `[S, 1]` per-slot bias including the global bias.
    pub slot_bias: Var,
}

/// The full network: CNN front-end, `depth` x (depth pool, attractor
/// decoder, conformer block), logit head.
#[derive(Clone, Debug)]
pub struct EendCd {
    config: ModelConfig,
    frontend: CnnEncoder,
    attractor_init: ParamId,
    pools: Vec<DepthPool>,
    decoders: Vec<AttractorDecoder>,
    blocks: Vec<ConformerBlock>,
    head: LogitHead,
}

impl EendCd {
    /// Builds the network and registers freshly initialized parameters.
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let e = config.embed_dim;
        let frontend = CnnEncoder::new(store, &config.cnn_channels_full(), rng);
        let attractor_init = store.add(
            "attractors.init",
            uniform_tensor(&[config.n_attractors, e], Init(1.0), rng),
        );
        let pools = (1..config.depth)
            .map(|d| DepthPool::new(store, &format!("pool.{d}"), e, config.sap_hidden, rng))
            .collect();
        let decoders = (0..config.depth)
            .map(|d| AttractorDecoder::new(store, &format!("decoder.{d}"), &config, rng))
            .collect();
        let blocks = (0..config.depth)
            .map(|d| ConformerBlock::new(store, &format!("block.{d}"), &config, rng))
            .collect();
        let head = LogitHead::new(store, "head", e, rng);
        Ok(Self {
            config,
            frontend,
            attractor_init,
            pools,
            decoders,
            blocks,
            head,
        })
    }

    /// Initializes a fresh parameter store for `config`.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn frontend(&self) -> &CnnEncoder {
        &self.frontend
    }

    pub fn blocks(&self) -> &[ConformerBlock] {
        &self.blocks
    }

    pub fn decoders(&self) -> &[AttractorDecoder] {
        &self.decoders
    }

    pub fn pools(&self) -> &[DepthPool] {
        &self.pools
    }

    pub fn head(&self) -> &LogitHead {
        &self.head
    }

    pub fn attractor_init(&self) -> ParamId {
        self.attractor_init
    }

    /// Checks that `store` holds a parameter set shaped for this model.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let mut reference = ParamStore::<T>::new();
        Self::new(self.config.clone(), &mut reference, 0)?;
        if reference.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match model ({})",
                store.len(),
                reference.len()
            )));
        }
        for ((_, rn, rt), (_, sn, st)) in reference.iter().zip(store.iter()) {
            if rn != sn || rt.shape() != st.shape() {
                return Err(Error::Config(format!(
                    "parameter {sn} {:?} does not match expected {rn} {:?}",
                    st.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass from a `[T, 15, 23]` window node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, windows: Var) -> Result<ForwardOutput> {
        let shape = g.shape(windows);
        if shape.len() != 3 || shape[1] != WINDOW_FRAMES || shape[2] != N_MELS {
            return Err(Error::Config(format!(
                "expected [T, {WINDOW_FRAMES}, {N_MELS}] windows, got {shape:?}"
            )));
        }
        let x0 = self.frontend.encode(g, p, windows)?;
        self.forward_embeddings(g, p, x0)
    }

    /// Forward pass from front-end embeddings `[T, E]`.
    pub fn forward_embeddings<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x0: Var) -> Result<ForwardOutput> {
        if g.shape(x0).len() != 2 || g.shape(x0)[1] != self.config.embed_dim {
            return Err(Error::Config(format!(
                "expected [T, {}] embeddings, got {:?}",
                self.config.embed_dim,
                g.shape(x0)
            )));
        }
        let mut a = p.var(self.attractor_init);
        let mut stack = Vec::with_capacity(self.config.depth + 1);
        stack.push(x0);
        let mut x = x0;
        for d in 0..self.config.depth {
            if d > 0 {
                let pooled = self.pools[d - 1].forward(g, p, &stack)?;
                x = g.add(x, pooled)?;
            }
            a = self.decoders[d].forward(g, p, a, x)?;
            x = self.blocks[d].forward(g, p, x, a)?;
            stack.push(x);
        }
        let (logits, directions, slot_bias) = self.head.forward(g, p, x, a)?;
        Ok(ForwardOutput {
            logits,
            embeddings: x,
            attractors: a,
            directions,
            slot_bias,
        })
    }

    /// Per-frame, per-slot speaker probabilities for one recording.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, windows: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let w = g.constant(windows.clone())?;
        let out = self.forward(&mut g, &p, w)?;
        let probs = g.sigmoid(out.logits)?;
        Ok(g.value(probs).clone())
    }
}
