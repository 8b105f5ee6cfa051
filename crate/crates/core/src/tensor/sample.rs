//! Bilinear sampling: a differentiable `grid_sample` and fixed sparse
//! resampling plans for precomputed coordinate maps.

use std::rc::Rc;

use super::{typed, typed_storage, with_dtype, Element, Tensor};
use crate::error::{Error, Result};

/// Coordinates this close to an integer are treated as lying on the lattice.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear footprint of a continuous source coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// False when the coordinate was clamped (zero derivative).
    pub x_free: bool,
    pub y_free: bool,
}

/// `x` wraps modulo `w` when `wrap_x`, otherwise clamps; `y` always clamps.
pub(crate) fn footprint(x: f64, y: f64, h: usize, w: usize, wrap_x: bool) -> Footprint {
    let (x0, x1, fx, x_free) = if wrap_x {
        let xs = snap(x);
        let f = xs.floor();
        let x0 = (f as i64).rem_euclid(w as i64) as usize;
        (x0, (x0 + 1) % w, xs - f, true)
    } else {
        axis_clamped(x, w)
    };
    let (y0, y1, fy, y_free) = axis_clamped(y, h);
    Footprint { x0, x1, y0, y1, fx, fy, x_free, y_free }
}

fn axis_clamped(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let free = (0.0..=hi).contains(&v);
    let c = snap(v.clamp(0.0, hi));
    let f = c.floor();
    let i0 = f as usize;
    (i0, (i0 + 1).min(n - 1), c - f, free)
}

impl Footprint {
    fn weights(&self) -> [f64; 4] {
        [
            (1.0 - self.fx) * (1.0 - self.fy),
            self.fx * (1.0 - self.fy),
            (1.0 - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    fn offsets(&self, w: usize) -> [usize; 4] {
        [self.y0 * w + self.x0, self.y0 * w + self.x1, self.y1 * w + self.x0, self.y1 * w + self.x1]
    }
}

/// One bilinear tap of a [`ResamplePlan`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub plane: u32,
    pub pixel: u32,
    pub weight: f64,
}

/// Fixed sparse linear map between stacks of image planes.
///
/// Input tensors are laid out `[N * in_planes, C, in_h, in_w]`, outputs
/// `[N * out_planes, C, out_h, out_w]`; e.g. six planes for a cubemap.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub in_planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_planes: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[Tap; 4]>,
    frac: Vec<(f64, f64)>,
}

impl ResamplePlan {
    /// Builds a plan from a per-output-pixel source `(plane, x, y)` in array
    /// coordinates of the source plane. `wrap_x` wraps columns, otherwise clamps.
    #[allow(clippy::too_many_arguments)]
    pub fn from_coords(
        in_planes: usize,
        in_h: usize,
        in_w: usize,
        out_planes: usize,
        out_h: usize,
        out_w: usize,
        wrap_x: bool,
        mut src: impl FnMut(usize, usize, usize) -> (usize, f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(out_planes * out_h * out_w);
        let mut frac = Vec::with_capacity(out_planes * out_h * out_w);
        for p in 0..out_planes {
            for v in 0..out_h {
                for u in 0..out_w {
                    let (plane, x, y) = src(p, v, u);
                    let fp = footprint(x, y, in_h, in_w, wrap_x);
                    let (wts, offs) = (fp.weights(), fp.offsets(in_w));
                    taps.push(std::array::from_fn(|k| Tap { plane: plane as u32, pixel: offs[k] as u32, weight: wts[k] }));
                    frac.push((fp.fx, fp.fy));
                }
            }
        }
        Self { in_planes, in_h, in_w, out_planes, out_h, out_w, taps, frac }
    }

    pub fn taps(&self) -> &[[Tap; 4]] {
        &self.taps
    }

    /// Nested lerps rather than a weighted sum, so constants pass through exactly.
    fn forward_kernel<T: Element>(&self, x: &[T], n: usize, c: usize) -> Vec<T> {
        let (ihw, ohw) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = Vec::with_capacity(n * self.out_planes * c * ohw);
        for ni in 0..n {
            for p in 0..self.out_planes {
                let taps = &self.taps[p * ohw..(p + 1) * ohw];
                let frac = &self.frac[p * ohw..(p + 1) * ohw];
                for ci in 0..c {
                    for (tap, &(fx, fy)) in taps.iter().zip(frac) {
                        let at = |t: &Tap| x[((ni * self.in_planes + t.plane as usize) * c + ci) * ihw + t.pixel as usize];
                        let (fx, fy) = (T::of(fx), T::of(fy));
                        let (a, b, cc, d) = (at(&tap[0]), at(&tap[1]), at(&tap[2]), at(&tap[3]));
                        let top = a + fx * (b - a);
                        let bot = cc + fx * (d - cc);
                        out.push(top + fy * (bot - top));
                    }
                }
            }
        }
        out
    }

    fn backward_kernel<T: Element>(&self, g: &[T], n: usize, c: usize) -> Vec<T> {
        let (ihw, ohw) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut gx = vec![T::zero(); n * self.in_planes * c * ihw];
        let mut i = 0;
        for ni in 0..n {
            for p in 0..self.out_planes {
                let taps = &self.taps[p * ohw..(p + 1) * ohw];
                for ci in 0..c {
                    for tap in taps {
                        let gv = g[i];
                        i += 1;
                        for t in tap {
                            let base = ((ni * self.in_planes + t.plane as usize) * c + ci) * ihw;
                            gx[base + t.pixel as usize] += gv * T::of(t.weight);
                        }
                    }
                }
            }
        }
        gx
    }

    /// Applies the plan to plain `f64` data of one sample, `[in_planes, C, in_h, in_w]`.
    pub fn apply_f64(&self, data: &[f64], channels: usize) -> Vec<f64> {
        self.forward_kernel(data, 1, channels)
    }

    /// Differentiable application to a tensor.
    pub fn apply(self: &Rc<Self>, x: &Tensor) -> Result<Tensor> {
        let (np, c, h, w) = x.dims4()?;
        if h != self.in_h || w != self.in_w {
            return Err(Error::dim("spatial", format!("plan expects {}x{}, got {h}x{w}", self.in_h, self.in_w)));
        }
        if np % self.in_planes != 0 {
            return Err(Error::dim("batch", format!("{np} planes is not a multiple of {}", self.in_planes)));
        }
        let n = np / self.in_planes;
        let data = with_dtype!(x.dtype(), T => T::wrap(self.forward_kernel::<T>(typed(x), n, c)));
        let plan = Rc::clone(self);
        Ok(Tensor::from_op(
            data,
            vec![n * self.out_planes, c, self.out_h, self.out_w],
            "resample",
            vec![x.clone()],
            Box::new(move |g| {
                Ok(vec![Some(with_dtype!(g.dtype(), T => T::wrap(plan.backward_kernel::<T>(typed_storage(g), n, c))))])
            }),
        ))
    }
}

fn grid_forward<T: Element>(x: &[T], grid: &[T], dims: (usize, usize, usize, usize, usize, usize), wrap: bool) -> Vec<T> {
    let (n, c, h, w, oh, ow) = dims;
    let mut out = vec![T::zero(); n * c * oh * ow];
    for ni in 0..n {
        for o in 0..oh * ow {
            let gi = (ni * oh * ow + o) * 2;
            let fp = footprint(grid[gi].as_f64(), grid[gi + 1].as_f64(), h, w, wrap);
            let offs = fp.offsets(w);
            for ci in 0..c {
                let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let [a, b, cc, d] = offs.map(|k| plane[k].as_f64());
                let top = a + fp.fx * (b - a);
                let bot = cc + fp.fx * (d - cc);
                out[(ni * c + ci) * oh * ow + o] = T::of(top + fp.fy * (bot - top));
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn grid_backward<T: Element>(
    g: &[T],
    x: &[T],
    grid: &[T],
    dims: (usize, usize, usize, usize, usize, usize),
    wrap: bool,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (n, c, h, w, oh, ow) = dims;
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gg = need.1.then(|| vec![T::zero(); grid.len()]);
    for ni in 0..n {
        for o in 0..oh * ow {
            let gi = (ni * oh * ow + o) * 2;
            let fp = footprint(grid[gi].as_f64(), grid[gi + 1].as_f64(), h, w, wrap);
            let (wts, offs) = (fp.weights(), fp.offsets(w));
            let (mut dx, mut dy) = (0.0, 0.0);
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let gv = g[(ni * c + ci) * oh * ow + o].as_f64();
                if let Some(gx) = gx.as_mut() {
                    for k in 0..4 {
                        gx[base + offs[k]] += T::of(gv * wts[k]);
                    }
                }
                if gg.is_some() {
                    let v = |k: usize| x[base + offs[k]].as_f64();
                    dx += gv * ((1.0 - fp.fy) * (v(1) - v(0)) + fp.fy * (v(3) - v(2)));
                    dy += gv * ((1.0 - fp.fx) * (v(2) - v(0)) + fp.fx * (v(3) - v(1)));
                }
            }
            if let Some(gg) = gg.as_mut() {
                gg[gi] = T::of(if fp.x_free { dx } else { 0.0 });
                gg[gi + 1] = T::of(if fp.y_free { dy } else { 0.0 });
            }
        }
    }
    (gx, gg)
}

impl Tensor {
    /// Bilinear sampling of `[N,C,H,W]` at pixel coordinates `grid: [N,H',W',2]`
    /// holding `(x, y)`. With `wrap_longitude` x wraps modulo W; y always clamps.
    pub fn grid_sample(&self, grid: &Tensor, wrap_longitude: bool) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (gn, oh, ow, two) = grid.dims4()?;
        if gn != n {
            return Err(Error::dim("batch", format!("grid batch {gn} vs input batch {n}")));
        }
        if two != 2 {
            return Err(Error::dim("grid", format!("last axis must be 2, got {two}")));
        }
        if grid.dtype() != self.dtype() {
            return Err(Error::DType { lhs: self.dtype(), rhs: grid.dtype() });
        }
        if grid.to_vec_f64().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in sampling grid".into()));
        }
        let dims = (n, c, h, w, oh, ow);
        let data = with_dtype!(self.dtype(), T => T::wrap(grid_forward::<T>(typed(self), typed(grid), dims, wrap_longitude)));
        let need = (self.requires_grad(), grid.requires_grad());
        let (x, gr) = (self.clone(), grid.clone());
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            "grid_sample",
            vec![self.clone(), grid.clone()],
            Box::new(move |g| {
                Ok(with_dtype!(g.dtype(), T => {
                    let (a, b) = grid_backward::<T>(typed_storage(g), typed(&x), typed(&gr), dims, wrap_longitude, need);
                    vec![a.map(T::wrap), b.map(T::wrap)]
                }))
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn lattice_grid_is_identity() {
        let (h, w) = (3, 5);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut grid = Vec::new();
        for v in 0..h {
            for u in 0..w {
                grid.extend([u as f64, v as f64]);
            }
        }
        let xt = Tensor::from_f64(x.clone(), &[1, 1, h, w]).unwrap();
        let gt = Tensor::from_f64(grid, &[1, h, w, 2]).unwrap();
        assert_eq!(xt.grid_sample(&gt, true).unwrap().to_vec_f64(), x);
        assert_eq!(xt.grid_sample(&gt, false).unwrap().to_vec_f64(), x);
    }

    #[test]
    fn midpoint() {
        let x = Tensor::from_f64(vec![0.0, 10.0], &[1, 1, 1, 2]).unwrap();
        let g = Tensor::from_f64(vec![0.5, 0.0], &[1, 1, 1, 2]).unwrap();
        assert_eq!(x.grid_sample(&g, false).unwrap().to_vec_f64(), vec![5.0]);
    }

    #[test]
    fn longitude_wraps() {
        let x = Tensor::from_f64(vec![0.0, 4.0, 8.0, 2.0], &[1, 1, 1, 4]).unwrap();
        let g = Tensor::from_f64(vec![3.5, 0.0, -0.5, 0.0, 7.0, 0.0], &[1, 1, 3, 2]).unwrap();
        assert_eq!(x.grid_sample(&g, true).unwrap().to_vec_f64(), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn latitude_clamps() {
        let x = Tensor::from_f64(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let g = Tensor::from_f64(vec![0.0, -3.0, 1.0, 9.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.grid_sample(&g, true).unwrap().to_vec_f64(), vec![1.0, 4.0]);
    }

    #[test]
    fn nan_grid_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2], DType::F64);
        let g = Tensor::from_f64(vec![f64::NAN, 0.0], &[1, 1, 1, 2]).unwrap();
        assert!(matches!(x.grid_sample(&g, true), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn near_integer_coordinates_snap() {
        let x = Tensor::from_f64(vec![1.0, 2.0, 3.0], &[1, 1, 1, 3]).unwrap();
        let g = Tensor::from_f64(vec![1.0 + 1e-12, 0.0], &[1, 1, 1, 2]).unwrap();
        assert_eq!(x.grid_sample(&g, true).unwrap().to_vec_f64(), vec![2.0]);
    }

    #[test]
    fn plan_shift_is_permutation() {
        let plan = Rc::new(ResamplePlan::from_coords(1, 1, 4, 1, 1, 4, true, |_, v, u| (0, u as f64 + 1.0, v as f64)));
        let x = Tensor::from_f64(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 1, 4]).unwrap();
        assert_eq!(plan.apply(&x).unwrap().to_vec_f64(), vec![2.0, 3.0, 4.0, 1.0]);
    }
}
