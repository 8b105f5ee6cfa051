//! Central finite-difference gradient checking.
//!
//! The checked function is reduced to a scalar with fixed pseudo-random
//! weights, `L = sum(r * f(x))`, so every output element contributes. The
//! reported error is norm-relative: `max_i |a_i - n_i| / max_i |n_i|` over the
//! analytic (`a`) and numerical (`n`) gradients of each checked input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DType, Storage, Tensor};
use crate::error::{Error, Result};

/// Input to a gradient check.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    /// When false the input is passed as a constant and not checked.
    pub differentiable: bool,
}

impl CheckInput {
    pub fn var(values: Vec<f64>, shape: &[usize]) -> Self {
        Self { values, shape: shape.to_vec(), differentiable: true }
    }

    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Self {
        Self { values, shape: shape.to_vec(), differentiable: false }
    }

    pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        Self::var((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape)
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Largest norm-relative error across checked inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<Option<f64>>,
}

fn weighted_sum(out: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = Tensor::from_slice(weights, out.shape(), out.dtype())?;
    out.mul(&w)?.sum()
}

/// Compares analytic gradients of `f` against central differences with step `h`, in f64.
pub fn check<F>(f: F, inputs: &[CheckInput], h: f64, seed: u64) -> Result<CheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let build = |vals: &[Vec<f64>], vars: bool| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .zip(vals)
            .map(|(inp, v)| {
                if vars && inp.differentiable {
                    Tensor::variable(Storage::F64(v.clone()), &inp.shape)
                } else {
                    Tensor::from_f64(v.clone(), &inp.shape)
                }
            })
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();

    let leaves = build(&base, true)?;
    let out = f(&leaves)?;
    if out.dtype() != DType::F64 {
        return Err(Error::InvalidInput("gradient checks run in f64".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    weighted_sum(&out, &weights)?.backward()?;

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let ts = build(vals, false)?;
        weighted_sum(&f(&ts)?, &weights)?.to_scalar()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst: f64 = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        if !inp.differentiable {
            per_input.push(None);
            continue;
        }
        let analytic = leaves[i].grad().map(|g| g.to_vec_f64()).unwrap_or_else(|| vec![0.0; inp.values.len()]);
        let mut numeric = Vec::with_capacity(inp.values.len());
        let mut vals = base.clone();
        for k in 0..inp.values.len() {
            let x0 = base[i][k];
            vals[i][k] = x0 + h;
            let up = eval(&vals)?;
            vals[i][k] = x0 - h;
            let down = eval(&vals)?;
            vals[i][k] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        per_input.push(Some(rel));
    }
    Ok(CheckReport { max_rel_error: worst, per_input })
}
