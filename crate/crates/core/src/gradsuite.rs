//! Finite-difference checks of every differentiable operation, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::depthnet::lift_depth;
use crate::error::Result;
use crate::losses::{capl, local_std, mask_bce, smooth, spl};
use crate::posenet::exp_map;
use crate::resample::{c2e_batch, e2c_batch, reproject_grid};
use crate::tensor::gradcheck::{check, CheckInput};
use crate::tensor::{Conv2dSpec, PadMode, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Tolerance on the norm-relative error of smooth operations.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for bilinear sampling off the pixel lattice.
pub const SAMPLING_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Values with magnitude in `[0.2, 1]` and random sign, away from kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> CheckInput {
    let n = shape.iter().product();
    CheckInput::var((0..n).map(|_| rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(), shape)
}

/// Sampling coordinates whose fractional part stays in `[0.1, 0.9]`.
fn off_lattice(rng: &mut ChaCha8Rng, n: usize, ho: usize, wo: usize, h: usize, w: usize) -> CheckInput {
    let mut v = Vec::with_capacity(n * ho * wo * 2);
    for _ in 0..n * ho * wo {
        v.push(rng.random_range(0..w) as f64 - 0.5 + rng.random_range(0.1..0.9));
        v.push(rng.random_range(0..h - 1) as f64 + rng.random_range(0.1..0.9));
    }
    CheckInput::var(v, &[n, ho, wo, 2])
}

type Case = (&'static str, f64, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>, Vec<CheckInput>);

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize], lo: f64, hi: f64| CheckInput::random(rng, s, lo, hi);
    let t = TOLERANCE;
    let conv = |mode, stride| move |x: &[Tensor]| x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::same(3, 3, stride, mode));
    vec![
        ("add", t, Box::new(|x: &[Tensor]| x[0].add(&x[1])), vec![r(rng, &[2, 3], -1.0, 1.0), r(rng, &[2, 3], -1.0, 1.0)]),
        ("sub", t, Box::new(|x: &[Tensor]| x[0].sub(&x[1])), vec![r(rng, &[2, 3], -1.0, 1.0), r(rng, &[2, 3], -1.0, 1.0)]),
        ("mul", t, Box::new(|x: &[Tensor]| x[0].mul(&x[1])), vec![r(rng, &[2, 3], -1.0, 1.0), r(rng, &[2, 3], -1.0, 1.0)]),
        ("affine", t, Box::new(|x: &[Tensor]| x[0].affine(-1.7, 0.3)), vec![r(rng, &[5], -1.0, 1.0)]),
        ("abs", t, Box::new(|x: &[Tensor]| x[0].abs()), vec![signed(rng, &[6])]),
        ("relu", t, Box::new(|x: &[Tensor]| x[0].relu()), vec![signed(rng, &[6])]),
        ("sigmoid", t, Box::new(|x: &[Tensor]| x[0].sigmoid()), vec![r(rng, &[6], -4.0, 4.0)]),
        ("log", t, Box::new(|x: &[Tensor]| x[0].log()), vec![r(rng, &[6], 0.2, 3.0)]),
        ("recip", t, Box::new(|x: &[Tensor]| x[0].recip()), vec![r(rng, &[6], 0.2, 3.0)]),
        ("clamp", t, Box::new(|x: &[Tensor]| x[0].clamp(-0.5, 0.5)), vec![signed(rng, &[8])]),
        (
            "map_elementwise",
            t,
            Box::new(|x: &[Tensor]| x[0].map_elementwise("cube", |v| v * v * v, |v| 3.0 * v * v)),
            vec![r(rng, &[6], -1.0, 1.0)],
        ),
        ("sum", t, Box::new(|x: &[Tensor]| x[0].sum()), vec![r(rng, &[2, 3, 2], -1.0, 1.0)]),
        ("mean", t, Box::new(|x: &[Tensor]| x[0].mean()), vec![r(rng, &[2, 3, 2], -1.0, 1.0)]),
        ("mean_axis", t, Box::new(|x: &[Tensor]| x[0].mean_axis(1)), vec![r(rng, &[2, 3, 2], -1.0, 1.0)]),
        (
            "concat",
            t,
            Box::new(|x: &[Tensor]| Tensor::concat(&[&x[0], &x[1]], 1)),
            vec![r(rng, &[2, 1, 3], -1.0, 1.0), r(rng, &[2, 2, 3], -1.0, 1.0)],
        ),
        ("narrow", t, Box::new(|x: &[Tensor]| x[0].narrow(2, 1, 2)), vec![r(rng, &[2, 2, 4], -1.0, 1.0)]),
        ("reshape", t, Box::new(|x: &[Tensor]| x[0].reshape(&[3, 4])), vec![r(rng, &[2, 6], -1.0, 1.0)]),
        (
            "conv2d_zero",
            t,
            Box::new(conv(PadMode::Zero, 1)),
            vec![r(rng, &[2, 2, 5, 6], -1.0, 1.0), r(rng, &[3, 2, 3, 3], -1.0, 1.0), r(rng, &[3], -1.0, 1.0)],
        ),
        (
            "conv2d_wrap_stride2",
            t,
            Box::new(conv(PadMode::WrapLongitude, 2)),
            vec![r(rng, &[1, 2, 6, 8], -1.0, 1.0), r(rng, &[2, 2, 3, 3], -1.0, 1.0), r(rng, &[2], -1.0, 1.0)],
        ),
        ("pixel_shuffle", t, Box::new(|x: &[Tensor]| x[0].pixel_shuffle(2)), vec![r(rng, &[1, 8, 2, 3], -1.0, 1.0)]),
        ("pixel_unshuffle", t, Box::new(|x: &[Tensor]| x[0].pixel_unshuffle(2)), vec![r(rng, &[1, 2, 4, 6], -1.0, 1.0)]),
        ("downsample2x", t, Box::new(|x: &[Tensor]| x[0].downsample2x()), vec![r(rng, &[1, 2, 4, 6], -1.0, 1.0)]),
        (
            "grid_sample",
            SAMPLING_TOLERANCE,
            Box::new(|x: &[Tensor]| x[0].grid_sample(&x[1], true)),
            vec![r(rng, &[1, 2, 5, 8], 0.0, 1.0), off_lattice(rng, 1, 3, 4, 5, 8)],
        ),
        ("e2c", t, Box::new(|x: &[Tensor]| e2c_batch(&x[0], 4)), vec![r(rng, &[1, 1, 4, 8], 0.0, 1.0)]),
        ("c2e", t, Box::new(|x: &[Tensor]| c2e_batch(&x[0], 4)), vec![r(rng, &[6, 1, 4, 4], 0.0, 1.0)]),
        (
            "reproject_grid",
            SAMPLING_TOLERANCE,
            Box::new(|x: &[Tensor]| Ok(reproject_grid(&x[0], &exp_map(&x[1])?, &x[2])?.0)),
            vec![r(rng, &[1, 1, 4, 8], 1.0, 3.0), r(rng, &[1, 3], -0.1, 0.1), r(rng, &[1, 3], -0.2, 0.2)],
        ),
        ("exp_map", t, Box::new(|x: &[Tensor]| exp_map(&x[0])), vec![r(rng, &[3, 3], -1.5, 1.5)]),
        ("exp_map_small", t, Box::new(|x: &[Tensor]| exp_map(&x[0])), vec![r(rng, &[2, 3], -3e-3, 3e-3)]),
        ("lift_depth", t, Box::new(|x: &[Tensor]| lift_depth(&x[0], 10.0, 0.01)), vec![r(rng, &[6], -3.0, 3.0)]),
        (
            "capl",
            t,
            Box::new(|x: &[Tensor]| capl(&x[0], &x[1], &x[2], &x[3], &x[4])),
            vec![
                CheckInput::random(rng, &[1, 3, 4, 8], 0.0, 1.0),
                CheckInput::random(rng, &[1, 3, 4, 8], 2.0, 3.0),
                CheckInput::random(rng, &[1, 3, 4, 8], -3.0, -2.0),
                CheckInput::random(rng, &[1, 1, 4, 8], 0.1, 0.9),
                std_map(rng),
            ],
        ),
        (
            "spl",
            t,
            Box::new(|x: &[Tensor]| spl(&x[0], &x[1], &x[2], &x[3])),
            vec![
                CheckInput::random(rng, &[1, 3, 4, 8], 0.0, 1.0),
                CheckInput::random(rng, &[1, 3, 4, 8], 2.0, 3.0),
                CheckInput::random(rng, &[1, 3, 4, 8], -3.0, -2.0),
                CheckInput::random(rng, &[1, 1, 4, 8], 0.1, 0.9),
            ],
        ),
        ("mask_bce", t, Box::new(|x: &[Tensor]| mask_bce(&x[0])), vec![r(rng, &[1, 1, 4, 8], 0.05, 0.95)]),
        ("smooth", t, Box::new(|x: &[Tensor]| smooth(&x[0])), vec![smooth_input(rng)]),
    ]
}

/// Contrast weights held constant, as the loss treats them.
fn std_map(rng: &mut ChaCha8Rng) -> CheckInput {
    let img = CheckInput::random(rng, &[1, 3, 4, 8], 0.0, 1.0);
    let t = Tensor::from_f64(img.values, &img.shape).expect("shape matches");
    let s = local_std(&t).expect("4-d input");
    CheckInput::constant(s.to_vec_f64(), s.shape())
}

/// Strictly increasing values in raster order so no neighbor difference is near 0.
fn smooth_input(rng: &mut ChaCha8Rng) -> CheckInput {
    let (h, w) = (4, 8);
    let v: Vec<f64> = (0..h * w).map(|i| 1.0 + i as f64 * 0.37 + rng.random_range(0.0..0.1)).collect();
    CheckInput::var(v, &[1, 1, h, w])
}

/// Runs every check; the list order is fixed.
pub fn run(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (op, tolerance, f, inputs) in cases(&mut rng) {
        let rep = check(|x| f(x), &inputs, STEP, seed)?;
        out.push(OpCheck { op, max_rel_error: rep.max_rel_error, tolerance });
    }
    Ok(out)
}
