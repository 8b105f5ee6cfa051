//! Training objectives: contrast-aware and plain spherical photometric
//! losses, the occlusion-mask regularizer, depth smoothness, berHu and the
//! combined self-supervised objective. All means are per pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to occlusion masks before the logarithm.
pub const MASK_EPS: f64 = 1e-6;
/// berHu threshold as a fraction of the largest absolute error.
pub const BERHU_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Mask regularizer weight.
    pub w1: f64,
    /// Smoothness weight.
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 0.1, w2: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotometricLoss {
    Capl,
    Spl,
}

/// Mean over channels of a `[N, C, H, W]` batch, as a constant `[N, H, W]` buffer.
fn gray(img: &Tensor) -> Result<(Vec<f64>, usize, usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    let v = img.to_vec_f64();
    let mut g = vec![0.0; n * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &v[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for (o, x) in g[b * h * w..(b + 1) * h * w].iter_mut().zip(plane) {
                *o += x;
            }
        }
    }
    g.iter_mut().for_each(|x| *x /= c as f64);
    Ok((g, n, h, w))
}

/// Population standard deviation of the channel-mean image over a 5×5
/// window, wrapping in longitude and clamping in latitude. `[N, 1, H, W]`,
/// without gradient.
pub fn local_std(img: &Tensor) -> Result<Tensor> {
    let (g, n, h, w) = gray(img)?;
    let mut out = Vec::with_capacity(n * h * w);
    let mut win = [0.0; 25];
    for b in 0..n {
        let plane = &g[b * h * w..(b + 1) * h * w];
        for v in 0..h {
            for u in 0..w {
                let mut k = 0;
                for dv in -2i64..=2 {
                    let y = (v as i64 + dv).clamp(0, h as i64 - 1) as usize;
                    for du in -2i64..=2 {
                        let x = (u as i64 + du).rem_euclid(w as i64) as usize;
                        win[k] = plane[y * w + x];
                        k += 1;
                    }
                }
                // Centered on the middle sample so flat windows give exactly zero.
                let c = win[12];
                let mean = win.iter().map(|x| x - c).sum::<f64>() / 25.0;
                let var = win.iter().map(|x| (x - c - mean) * (x - c - mean)).sum::<f64>() / 25.0;
                out.push(var.sqrt());
            }
        }
    }
    Tensor::from_slice(&out, &[n, 1, h, w], img.dtype())
}

/// Channel mean of `|I − W₁| + |I − W₂|`, `[N, 1, H, W]`.
pub fn photo_residual(reference: &Tensor, warp_prev: &Tensor, warp_next: &Tensor) -> Result<Tensor> {
    for (t, what) in [(warp_prev, "previous warp"), (warp_next, "next warp")] {
        if t.shape() != reference.shape() {
            return Err(Error::dim("scale", format!("{what} {:?} vs reference {:?}", t.shape(), reference.shape())));
        }
    }
    let d = reference.sub(warp_prev)?.abs()?.add(&reference.sub(warp_next)?.abs()?)?;
    d.mean_axis(1)
}

fn check_map(name: &'static str, map: &Tensor, like: &Tensor) -> Result<()> {
    let (n, _, h, w) = like.dims4()?;
    if map.shape() != [n, 1, h, w] {
        return Err(Error::dim("scale", format!("{name} {:?}, expected [{n},1,{h},{w}]", map.shape())));
    }
    Ok(())
}

/// `mean(X · σ · δ)`; `σ` is used as a constant.
pub fn capl(reference: &Tensor, warp_prev: &Tensor, warp_next: &Tensor, mask: &Tensor, std_map: &Tensor) -> Result<Tensor> {
    check_map("mask", mask, reference)?;
    check_map("std map", std_map, reference)?;
    let delta = photo_residual(reference, warp_prev, warp_next)?;
    mask.mul(&std_map.detach())?.mul(&delta)?.mean()
}

/// [`capl`] with `σ ≡ 1`.
pub fn spl(reference: &Tensor, warp_prev: &Tensor, warp_next: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = reference.dims4()?;
    capl(reference, warp_prev, warp_next, mask, &Tensor::ones(&[n, 1, h, w], reference.dtype()))
}

/// `mean(−log clamp(X, ε, 1 − ε))`.
pub fn mask_bce(mask: &Tensor) -> Result<Tensor> {
    mask.clamp(MASK_EPS, 1.0 - MASK_EPS)?.log()?.affine(-1.0, 0.0)?.mean()
}

/// `mean(|d(u+1) − d(u)| + |d(v+1) − d(v)|)` with `u` wrapped and `v` clamped.
pub fn smooth(depth: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = depth.dims4()?;
    let right = Tensor::concat(&[&depth.narrow(3, 1, w - 1)?, &depth.narrow(3, 0, 1)?], 3)?;
    let below = if h > 1 { Tensor::concat(&[&depth.narrow(2, 1, h - 1)?, &depth.narrow(2, h - 1, 1)?], 2)? } else { depth.clone() };
    right.sub(depth)?.abs()?.add(&below.sub(depth)?.abs()?)?.mean()
}

/// berHu value of one residual for threshold `c`.
pub fn berhu_value(e: f64, c: f64) -> f64 {
    let a = e.abs();
    if a <= c {
        a
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}

fn berhu_slope(e: f64, c: f64) -> f64 {
    if e.abs() <= c {
        if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        e / c
    }
}

/// Reverse Huber loss over pixels where `valid` is nonzero, with
/// `c = 0.2 · max |d − d_gt|` taken over those pixels and held constant.
/// Ground truth outside the valid set may hold any value.
pub fn berhu(d: &Tensor, d_gt: &Tensor, valid: &Tensor) -> Result<Tensor> {
    if d_gt.shape() != d.shape() || valid.shape() != d.shape() {
        return Err(Error::dim("scale", format!("depth {:?}, truth {:?}, mask {:?}", d.shape(), d_gt.shape(), valid.shape())));
    }
    let (dv, gv, mv) = (d.to_vec_f64(), d_gt.to_vec_f64(), valid.to_vec_f64());
    let count = mv.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptyBatch("no valid ground-truth pixels".into()));
    }
    let gt_clean: Vec<f64> = gv.iter().zip(&mv).zip(&dv).map(|((&g, &m), &x)| if m != 0.0 { g } else { x }).collect();
    let c = BERHU_FRACTION
        * dv.iter().zip(&gt_clean).zip(&mv).filter(|(_, &m)| m != 0.0).map(|((x, g), _)| (x - g).abs()).fold(0.0, f64::max);
    let e = d.sub(&Tensor::from_slice(&gt_clean, d.shape(), d.dtype())?)?;
    let per_pixel = if c > 0.0 {
        e.map_elementwise("berhu", move |x| berhu_value(x, c), move |x| berhu_slope(x, c))?
    } else {
        e.abs()?
    };
    let mask = Tensor::from_slice(&mv.iter().map(|&m| if m != 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>(), d.shape(), d.dtype())?;
    per_pixel.mul(&mask)?.sum()?.affine(1.0 / count as f64, 0.0)
}

/// Inputs of one pyramid scale of the self-supervised objective.
pub struct ScaleTerms<'a> {
    pub reference: &'a Tensor,
    pub warp_prev: &'a Tensor,
    pub warp_next: &'a Tensor,
    /// Occlusion mask `X_s`, already multiplied by any warp validity.
    pub mask: &'a Tensor,
    /// Regularized mask before validity gating; defaults to `mask`.
    pub raw_mask: Option<&'a Tensor>,
    pub depth: &'a Tensor,
}

/// Scalar parts of the objective, summed over scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub photometric: f64,
    pub mask: f64,
    pub smooth: f64,
    pub total: f64,
}

/// `Σ_s [photo_s + w1·mask_bce(X_s) + w2·smooth(d_s)]` over exactly four scales.
pub fn self_supervised_loss(scales: &[ScaleTerms<'_>], kind: PhotometricLoss, weights: LossWeights) -> Result<(Tensor, LossParts)> {
    if scales.len() != 4 {
        return Err(Error::dim("scale", format!("expected 4 scales, got {}", scales.len())));
    }
    let mut total: Option<Tensor> = None;
    let mut parts = LossParts::default();
    for s in scales {
        let photo = match kind {
            PhotometricLoss::Capl => capl(s.reference, s.warp_prev, s.warp_next, s.mask, &local_std(s.reference)?)?,
            PhotometricLoss::Spl => spl(s.reference, s.warp_prev, s.warp_next, s.mask)?,
        };
        let bce = mask_bce(s.raw_mask.unwrap_or(s.mask))?;
        let sm = smooth(s.depth)?;
        parts.photometric += photo.to_scalar()?;
        parts.mask += bce.to_scalar()?;
        parts.smooth += sm.to_scalar()?;
        let term = photo.add(&bce.affine(weights.w1, 0.0)?)?.add(&sm.affine(weights.w2, 0.0)?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("four scales");
    parts.total = total.to_scalar()?;
    Ok((total, parts))
}

/// Validity of ground-truth depth: finite, positive and at most `max_depth`.
pub fn depth_valid_mask(d_gt: &Tensor, max_depth: f64) -> Result<Tensor> {
    let v: Vec<f64> = d_gt.to_vec_f64().iter().map(|&x| if x.is_finite() && x > 0.0 && x <= max_depth { 1.0 } else { 0.0 }).collect();
    Tensor::from_slice(&v, d_gt.shape(), d_gt.dtype())
}
