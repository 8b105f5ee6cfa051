//! Pose network: an encoder over three stacked panoramas predicting the
//! motions to the previous and next frames and four occlusion masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::nn::{Conv2d, Stage};
use crate::tensor::{DType, Module, PadMode, Parameter, Storage, Tensor};

/// Scale applied to the raw pose head so motions start near identity.
pub const POSE_SCALE: f64 = 0.01;

/// Axis-angle rotation and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseVec6 {
    pub omega: [f64; 3],
    pub t: [f64; 3],
}

impl PoseVec6 {
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::exp(&self.omega, &self.t)
    }
}

/// Coefficients `A = sinθ/θ`, `B = (1−cosθ)/θ²` and their derivatives divided by θ.
fn rodrigues_coeffs(th2: f64) -> (f64, f64, f64, f64) {
    let th = th2.sqrt();
    if th < 1e-2 {
        let t4 = th2 * th2;
        (
            1.0 - th2 / 6.0 + t4 / 120.0,
            0.5 - th2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + th2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + th2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = th.sin_cos();
        (s / th, (1.0 - c) / th2, (th * c - s) / (th2 * th), (th * s - 2.0 + 2.0 * c) / (th2 * th2))
    }
}

fn hat(w: &[f64]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mm(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rodrigues map `[N, 3]` axis-angle vectors to `[N, 3, 3]` rotations,
/// differentiable, with series expansions near zero angle.
pub fn exp_map(omega: &Tensor) -> Result<Tensor> {
    let s = omega.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::dim("axis-angle", format!("expected [N,3], got {s:?}")));
    }
    let n = s[0];
    let w = omega.to_vec_f64();
    let mut out = Vec::with_capacity(n * 9);
    for b in 0..n {
        let wb = &w[b * 3..b * 3 + 3];
        let (a, bb, _, _) = rodrigues_coeffs(wb.iter().map(|x| x * x).sum());
        let k = hat(wb);
        let k2 = mm(&k, &k);
        for i in 0..3 {
            for j in 0..3 {
                out.push(if i == j { 1.0 } else { 0.0 } + a * k[i][j] + bb * k2[i][j]);
            }
        }
    }
    let dtype = omega.dtype();
    Ok(Tensor::from_op(
        Storage::from_f64(dtype, &out),
        vec![n, 3, 3],
        "exp_map",
        vec![omega.clone()],
        Box::new(move |g| {
            let g = g.to_f64_vec();
            let mut gw = vec![0.0; n * 3];
            for b in 0..n {
                let wb = &w[b * 3..b * 3 + 3];
                let (a, bb, da, db) = rodrigues_coeffs(wb.iter().map(|x| x * x).sum());
                let k = hat(wb);
                let k2 = mm(&k, &k);
                let gb = &g[b * 9..b * 9 + 9];
                for (i, gwi) in gw[b * 3..b * 3 + 3].iter_mut().enumerate() {
                    let mut e = [0.0; 3];
                    e[i] = 1.0;
                    let ki = hat(&e);
                    let (kik, kki) = (mm(&ki, &k), mm(&k, &ki));
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            let d = da * wb[i] * k[r][c] + a * ki[r][c] + db * wb[i] * k2[r][c] + bb * (kik[r][c] + kki[r][c]);
                            acc += gb[r * 3 + c] * d;
                        }
                    }
                    *gwi = acc;
                }
            }
            Ok(vec![Some(Storage::from_f64(dtype, &gw))])
        }),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseNetConfig {
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128], blocks_per_stage: 1 }
    }
}

/// Motion from the reference frame to a neighbor as rotation `[N,3,3]` and translation `[N,3]`.
#[derive(Clone, Debug)]
pub struct PoseTensors {
    pub r: Tensor,
    pub t: Tensor,
    pub omega: Tensor,
}

impl PoseTensors {
    fn from_parts(omega: Tensor, t: Tensor) -> Result<Self> {
        Ok(Self { r: exp_map(&omega)?, t, omega })
    }

    /// The motions as plain values, one per batch element.
    pub fn values(&self) -> Vec<PoseVec6> {
        let (w, t) = (self.omega.to_vec_f64(), self.t.to_vec_f64());
        (0..w.len() / 3)
            .map(|b| PoseVec6 { omega: [w[3 * b], w[3 * b + 1], w[3 * b + 2]], t: [t[3 * b], t[3 * b + 1], t[3 * b + 2]] })
            .collect()
    }
}

pub struct PoseOutput {
    pub prev: PoseTensors,
    pub next: PoseTensors,
    /// Occlusion masks in (0, 1), finest first; `masks[s]` has height `H / 2^s`.
    pub masks: Vec<Tensor>,
}

pub struct PoseNet {
    pub config: PoseNetConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
    mask_heads: Vec<Conv2d>,
    pose_head: Conv2d,
}

impl PoseNet {
    pub fn new(config: PoseNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) {
            return Err(Error::Config("posenet widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths;
        let wrap = PadMode::WrapLongitude;
        let stem = Conv2d::new("posenet.enc.stem", 9, w[0], 3, 1, wrap, dtype, &mut rng)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (cin, stride) = if s == 0 { (w[0], 1) } else { (w[s - 1], 2) };
            stages.push(Stage::new(&format!("posenet.enc.stage{}", s + 1), cin, w[s], stride, config.blocks_per_stage, wrap, dtype, &mut rng)?);
        }
        let mask_heads =
            (0..4).map(|s| Conv2d::new(&format!("posenet.mask{}", s + 1), w[s], 1, 3, 1, wrap, dtype, &mut rng)).collect::<Result<_>>()?;
        let pose_head = Conv2d::new("posenet.pose", w[3], 12, 1, 1, wrap, dtype, &mut rng)?;
        Ok(Self { config, stem, stages, mask_heads, pose_head })
    }

    /// Three `[N, 3, H, W]` panoramas with `H` divisible by 8.
    pub fn forward(&self, prev: &Tensor, reference: &Tensor, next: &Tensor) -> Result<PoseOutput> {
        let s = reference.shape();
        if prev.shape() != s || next.shape() != s {
            return Err(Error::dim("frames", format!("triplet shapes differ: {:?} {:?} {:?}", prev.shape(), s, next.shape())));
        }
        let (n, c, h, w) = reference.dims4()?;
        if c != 3 {
            return Err(Error::dim("channel", format!("posenet expects RGB frames, got {c} channels")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::dim("spatial", format!("{h}x{w} is not divisible by 8")));
        }
        let mut x = self.stem.forward(&Tensor::concat(&[prev, reference, next], 1)?)?.relu()?;
        let mut masks = Vec::with_capacity(4);
        for (stage, head) in self.stages.iter().zip(&self.mask_heads) {
            x = stage.forward(&x)?;
            masks.push(head.forward(&x)?.sigmoid()?);
        }
        let pooled = x.mean_axis(3)?.mean_axis(2)?;
        let raw = self.pose_head.forward(&pooled)?.affine(POSE_SCALE, 0.0)?.reshape(&[n, 12])?;
        let part = |k: usize| raw.narrow(1, 3 * k, 3);
        Ok(PoseOutput {
            prev: PoseTensors::from_parts(part(0)?, part(1)?)?,
            next: PoseTensors::from_parts(part(2)?, part(3)?)?,
            masks,
        })
    }
}

impl Module for PoseNet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        self.stages.iter().for_each(|s| s.visit(f));
        self.mask_heads.iter().for_each(|m| m.visit(f));
        self.pose_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
        self.mask_heads.iter_mut().for_each(|m| m.visit_mut(f));
        self.pose_head.visit_mut(f);
    }
}
