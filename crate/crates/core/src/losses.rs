//! Training objective: PIT-aligned suppressive BCE, MO-DPCL / A-DPCL angle
//! losses on the final embeddings, and an orthogonality penalty on active
//! attractor directions.
//!
//! Label conventions: BCE targets use the `{0, 1}` view of a
//! [`LabelMatrix`], the angle losses use the `{+1, -1}` view.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::min_cost_assignment;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::numerics::{bce_logit, Graph, Scalar, Tensor, Var, NORM_EPS};

/// Ground-truth speaker activity, `frames x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    frames: usize,
    width: usize,
    active: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(frames: usize, width: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != frames * width {
            return Err(Error::Dimension {
                op: "labels",
                lhs: vec![frames, width],
                rhs: vec![active.len()],
            });
        }
        Ok(Self { frames, width, active })
    }

    pub fn silent(frames: usize, width: usize) -> Self {
        Self {
            frames,
            width,
            active: vec![false; frames * width],
        }
    }

    /// From a `±1` matrix.
    pub fn from_pm<T: Scalar>(y: &Tensor<T>) -> Result<Self> {
        let (f, w) = y.dims2()?;
        let mut active = Vec::with_capacity(f * w);
        for &v in y.data() {
            let v = v.to_f64();
            if v == 1.0 {
                active.push(true);
            } else if v == -1.0 {
                active.push(false);
            } else {
                return Err(Error::Config("label entries must be +1 or -1".into()));
            }
        }
        Self::new(f, w, active)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_active(&self, t: usize, k: usize) -> bool {
        self.active[t * self.width + k]
    }

    pub fn set(&mut self, t: usize, k: usize, on: bool) {
        self.active[t * self.width + k] = on;
    }

    /// `{+1, -1}` view.
    pub fn y_pm<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .active
            .iter()
            .map(|&a| if a { T::one() } else { -T::one() })
            .collect();
        Tensor::new(&[self.frames, self.width], data).expect("shape")
    }

    /// `{0, 1}` view.
    pub fn y_01<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .active
            .iter()
            .map(|&a| if a { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[self.frames, self.width], data).expect("shape")
    }

    /// Columns with at least one active frame.
    pub fn speaker_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&k| (0..self.frames).any(|t| self.is_active(t, k)))
            .collect()
    }

    pub fn n_true_speakers(&self) -> usize {
        self.speaker_columns().len()
    }

    /// Rows `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let w = self.width;
        Self {
            frames: len,
            width: w,
            active: self.active[start * w..(start + len) * w].to_vec(),
        }
    }

    /// Columns reordered by `perm` (`new[:, j] = old[:, perm[j]]`).
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut out = Self::silent(self.frames, perm.len());
        for t in 0..self.frames {
            for (j, &k) in perm.iter().enumerate() {
                out.set(t, j, self.is_active(t, k));
            }
        }
        out
    }

    /// Number of frames where at least one speaker is active.
    pub fn speech_frames(&self) -> usize {
        (0..self.frames)
            .filter(|&t| (0..self.width).any(|k| self.is_active(t, k)))
            .count()
    }

    /// Number of frames where two or more speakers are active.
    pub fn overlap_frames(&self) -> usize {
        (0..self.frames)
            .filter(|&t| (0..self.width).filter(|&k| self.is_active(t, k)).count() >= 2)
            .count()
    }
}

/// Injective map from true-speaker label columns to attractor slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `(label column, slot)` pairs in ascending label-column order.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the per-pair mean BCE under this map.
    pub cost: f64,
    pub n_slots: usize,
}

impl Alignment {
    pub fn active_slots(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.pairs.iter().map(|&(_, s)| s).collect();
        s.sort_unstable();
        s
    }

    pub fn inactive_slots(&self) -> Vec<usize> {
        let active = self.active_slots();
        (0..self.n_slots).filter(|s| !active.contains(s)).collect()
    }

    /// Labels rearranged into slot order (`frames x n_slots`); slots without
    /// a speaker are inactive everywhere.
    pub fn slot_labels(&self, labels: &LabelMatrix) -> LabelMatrix {
        let mut out = LabelMatrix::silent(labels.frames(), self.n_slots);
        for &(k, s) in &self.pairs {
            for t in 0..labels.frames() {
                out.set(t, s, labels.is_active(t, k));
            }
        }
        out
    }
}

/// Mean BCE of logit column `s` against label column `k`.
fn pair_cost<T: Scalar>(logits: &Tensor<T>, labels: &LabelMatrix, k: usize, s: usize) -> f64 {
    let frames = labels.frames();
    let total: f64 = (0..frames)
        .map(|t| {
            let y = if labels.is_active(t, k) { 1.0 } else { 0.0 };
            bce_logit(logits.at(t, s).to_f64(), y)
        })
        .sum();
    total / frames as f64
}

fn check_pit_inputs<T: Scalar>(logits: &Tensor<T>, labels: &LabelMatrix) -> Result<(usize, Vec<usize>)> {
    let (t, s) = logits.dims2()?;
    if t != labels.frames() {
        return Err(Error::Dimension {
            op: "pit_align",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.frames(), labels.width()],
        });
    }
    let cols = labels.speaker_columns();
    if cols.len() > s {
        return Err(Error::Capacity {
            speakers: cols.len(),
            slots: s,
        });
    }
    Ok((s, cols))
}

/// Minimum-cost injective assignment of true speakers to slots under
/// per-column BCE. A label matrix with no active speaker yields an empty
/// alignment.
pub fn pit_align<T: Scalar>(logits: &Tensor<T>, labels: &LabelMatrix) -> Result<Alignment> {
    let (s, cols) = check_pit_inputs(logits, labels)?;
    let k = cols.len();
    let mut cost = Vec::with_capacity(k * s);
    for &c in &cols {
        for slot in 0..s {
            cost.push(pair_cost(logits, labels, c, slot));
        }
    }
    let assignment = min_cost_assignment(&cost, k, s);
    let pairs: Vec<(usize, usize)> = cols
        .iter()
        .zip(assignment)
        .map(|(&c, slot)| (c, slot.expect("k <= s")))
        .collect();
    let total = pairs
        .iter()
        .enumerate()
        .map(|(i, &(_, slot))| cost[i * s + slot])
        .sum();
    Ok(Alignment {
        pairs,
        cost: total,
        n_slots: s,
    })
}

/// Exhaustive search over all `S!/(S-K)!` injective maps. Reference for
/// [`pit_align`]; exponential, test sizes only.
pub fn pit_align_exhaustive<T: Scalar>(logits: &Tensor<T>, labels: &LabelMatrix) -> Result<Alignment> {
    let (s, cols) = check_pit_inputs(logits, labels)?;
    fn search(
        i: usize,
        cols: &[usize],
        s: usize,
        cost: &dyn Fn(usize, usize) -> f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if i == cols.len() {
            let c: f64 = cur.iter().enumerate().map(|(j, &slot)| cost(cols[j], slot)).sum();
            if c < best.0 {
                *best = (c, cur.clone());
            }
            return;
        }
        for slot in 0..s {
            if !used[slot] {
                used[slot] = true;
                cur.push(slot);
                search(i + 1, cols, s, cost, used, cur, best);
                cur.pop();
                used[slot] = false;
            }
        }
    }
    let cost = |k: usize, slot: usize| pair_cost(logits, labels, k, slot);
    let mut best = (f64::INFINITY, Vec::new());
    search(0, &cols, s, &cost, &mut vec![false; s], &mut Vec::new(), &mut best);
    if cols.is_empty() {
        best.0 = 0.0;
    }
    Ok(Alignment {
        pairs: cols.iter().copied().zip(best.1).collect(),
        cost: best.0,
        n_slots: s,
    })
}

/// Constant `[rows, cols]` node.
fn constant<T: Scalar>(g: &mut Graph<T>, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
    g.constant(Tensor::new(&[rows, cols], data)?)
}

fn zero_scalar<T: Scalar>(g: &mut Graph<T>) -> Result<Var> {
    g.constant(Tensor::scalar(T::zero()))
}

/// Suppressive PIT-BCE.
///
/// Aligned slots are scored with their full logits against the aligned
/// labels. Unaligned slots predict from `b_s + b_global` alone (the `x · a_s`
/// term is masked out, so no BCE gradient reaches their directions) against
/// an all-zero target. `suppress` is the mean squared norm of unaligned
/// directions. Returns `(bce, suppress)`.
pub fn suppressive_bce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    directions: Var,
    slot_bias: Var,
    labels: &LabelMatrix,
    align: &Alignment,
) -> Result<(Var, Var)> {
    let (t, s) = g.value(logits).dims2()?;
    let active = align.active_slots();
    let mut mask = vec![T::zero(); t * s];
    for row in mask.chunks_mut(s) {
        for &slot in &active {
            row[slot] = T::one();
        }
    }
    let inv: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
    let target = align.slot_labels(labels).y_01::<T>();

    let mask_v = constant(g, t, s, mask)?;
    let inv_v = constant(g, t, s, inv)?;
    let zeros = constant(g, t, s, vec![T::zero(); t * s])?;
    let bias_only = g.add_row(zeros, slot_bias)?;
    let kept = g.mul(logits, mask_v)?;
    let biased = g.mul(bias_only, inv_v)?;
    let combined = g.add(kept, biased)?;
    let bce = g.bce_with_logits(combined, &target)?;

    let inactive = align.inactive_slots();
    let suppress = if inactive.is_empty() {
        zero_scalar(g)?
    } else {
        let rows = g.select_rows(directions, &inactive)?;
        let sq = g.square(rows)?;
        let tot = g.sum(sq)?;
        g.scale(tot, T::from_f64(1.0 / inactive.len() as f64))?
    };
    Ok((bce, suppress))
}

/// MO-DPCL label vectors: each `±1` row divided by `max(‖row‖₂, ε)`.
pub fn mo_dpcl_labels<T: Scalar>(labels: &LabelMatrix) -> Tensor<T> {
    let y = labels.y_pm::<f64>();
    let w = labels.width();
    let mut out = Vec::with_capacity(y.len());
    for row in y.data().chunks(w.max(1)) {
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
        out.extend(row.iter().map(|&v| T::from_f64(v / n)));
    }
    Tensor::new(&[labels.frames(), w], out).expect("shape")
}

/// A-DPCL label-attractor vectors `(y_t · A) / max(‖y_t · A‖₂, ε)` with the
/// labels rearranged into slot order. Differentiable in `directions`.
pub fn a_dpcl_labels<T: Scalar>(
    g: &mut Graph<T>,
    labels: &LabelMatrix,
    directions: Var,
    align: &Alignment,
) -> Result<Var> {
    let y = align.slot_labels(labels).y_pm::<T>();
    let yv = g.constant(y)?;
    let la = g.matmul(yv, directions)?;
    g.l2_normalize_rows(la)
}

/// Frame budget above which pairs are subsampled.
pub const DPCL_PAIR_BUDGET: usize = 2048;

/// Mean over frame pairs of `(⟨l_i, l_j⟩ - ⟨x̂_i, x̂_j⟩)²` with `x̂` the
/// L2-normalized embeddings. Exact for `T <= budget`; above it a uniform
/// random subset of `budget` frames is scored (`budget²` pairs).
pub fn dpcl_loss<T: Scalar>(g: &mut Graph<T>, l: Var, x: Var, budget: usize, seed: u64) -> Result<Var> {
    let t = g.shape(x)[0];
    if g.shape(l)[0] != t {
        return Err(Error::Dimension {
            op: "dpcl_loss",
            lhs: g.shape(l).to_vec(),
            rhs: g.shape(x).to_vec(),
        });
    }
    let xn = g.l2_normalize_rows(x)?;
    let (l, xn) = if t > budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, t, budget).into_vec();
        idx.sort_unstable();
        (g.select_rows(l, &idx)?, g.select_rows(xn, &idx)?)
    } else {
        (l, xn)
    };
    let gl = g.matmul_nt(l, l)?;
    let gx = g.matmul_nt(xn, xn)?;
    g.mse(gl, gx)
}

/// Mean squared off-diagonal cosine similarity among aligned directions.
pub fn ortho_loss<T: Scalar>(g: &mut Graph<T>, directions: Var, align: &Alignment) -> Result<Var> {
    let active = align.active_slots();
    let k = active.len();
    if k < 2 {
        return zero_scalar(g);
    }
    let rows = g.select_rows(directions, &active)?;
    let unit = g.l2_normalize_rows(rows)?;
    let gram = g.matmul_nt(unit, unit)?;
    let mut mask = vec![T::one(); k * k];
    for i in 0..k {
        mask[i * k + i] = T::zero();
    }
    let m = constant(g, k, k, mask)?;
    let off = g.mul(gram, m)?;
    let sq = g.square(off)?;
    let tot = g.sum(sq)?;
    g.scale(tot, T::from_f64(1.0 / (k * (k - 1)) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DpclMode {
    None,
    MultiOpposite,
    #[default]
    Attractor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub bce: f64,
    pub dpcl: f64,
    pub ortho: f64,
    pub suppress: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 1.0,
            dpcl: 0.5,
            ortho: 0.1,
            suppress: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            bce: 0.0,
            dpcl: 0.0,
            ortho: 0.0,
            suppress: 0.0,
        }
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub bce: f64,
    pub dpcl: f64,
    pub ortho: f64,
    pub suppress: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Nodes the objective reads from a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub logits: Var,
    pub embeddings: Var,
    pub directions: Var,
    pub slot_bias: Var,
}

impl From<&ForwardOutput> for LossInputs {
    fn from(o: &ForwardOutput) -> Self {
        Self {
            logits: o.logits,
            embeddings: o.embeddings,
            directions: o.directions,
            slot_bias: o.slot_bias,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mode: DpclMode,
    pub pair_budget: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mode: DpclMode::default(),
            pair_budget: DPCL_PAIR_BUDGET,
            seed: 0,
        }
    }
}

/// Evaluated objective: the weighted total node plus component values.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub bundle: LossBundle,
    pub alignment: Alignment,
}

/// Aligns once with PIT, then builds every component and the weighted sum.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    inputs: LossInputs,
    labels: &LabelMatrix,
    cfg: &LossConfig,
) -> Result<Objective> {
    let alignment = pit_align(g.value(inputs.logits), labels)?;
    let (bce, suppress) = suppressive_bce(g, inputs.logits, inputs.directions, inputs.slot_bias, labels, &alignment)?;
    let dpcl = match cfg.mode {
        DpclMode::None => zero_scalar(g)?,
        DpclMode::MultiOpposite => {
            let l = g.constant(mo_dpcl_labels::<T>(labels))?;
            dpcl_loss(g, l, inputs.embeddings, cfg.pair_budget, cfg.seed)?
        }
        DpclMode::Attractor => {
            let l = a_dpcl_labels(g, labels, inputs.directions, &alignment)?;
            dpcl_loss(g, l, inputs.embeddings, cfg.pair_budget, cfg.seed)?
        }
    };
    let ortho = ortho_loss(g, inputs.directions, &alignment)?;

    let w = cfg.weights;
    let terms = [(bce, w.bce), (dpcl, w.dpcl), (ortho, w.ortho), (suppress, w.suppress)];
    let mut total = None;
    for (v, wt) in terms {
        let s = g.scale(v, T::from_f64(wt))?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.expect("four terms");
    let val = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64();
    let bundle = LossBundle {
        bce: val(g, bce),
        dpcl: val(g, dpcl),
        ortho: val(g, ortho),
        suppress: val(g, suppress),
        total: val(g, total),
        weights: w,
    };
    Ok(Objective {
        total,
        bundle,
        alignment,
    })
}
