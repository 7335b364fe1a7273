//! Central finite-difference gradient checks in 64-bit.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub tol: f64,
    /// Absolute error at or below which a check passes outright.
    pub abs_floor: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding do not blow up the ratio.
    pub scale_floor: f64,
    pub step: f64,
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            abs_floor: 1e-10,
            scale_floor: 1e-6,
            step: FD_STEP,
        }
    }
}

/// Compares reverse-mode gradients of `f` with central differences over
/// every element of every input. `f` must return a single-element node.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ins
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(crate::Error::NonScalar(g.shape(out).to_vec()));
        }
        Ok(g.value(out).data()[0])
    };
    compare_gradients(name, eval, &analytic, inputs, cfg)
}

/// Checks supplied gradients of a scalar function against central
/// differences.
pub fn compare_gradients<F>(
    name: &str,
    eval: F,
    analytic: &[Tensor<f64>],
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        for ei in 0..a.len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + cfg.step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - cfg.step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let an = a.data()[ei];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(cfg.scale_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradReport {
        op_name: name.into(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel <= cfg.tol || max_abs <= cfg.abs_floor,
    })
}

/// Reduces `x` to a scalar through a fixed pseudo-random weighting so that
/// non-scalar primitives can be checked without degenerate gradients (a
/// plain sum makes softmax gradients vanish).
pub fn random_projection(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor::new(&shape, w)?)?;
    let p = g.mul(x, wv)?;
    g.sum(p)
}

/// Tensor with uniform entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape")
}
