//! Convolution and spatial rearrangement ops on `[N, C, H, W]` tensors.

use std::rc::Rc;

use super::{typed, typed_storage, with_dtype, Element, Tensor};
use crate::error::{Error, Result};

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    Zero,
    /// Circular along W (longitude), zeros along H. For equirectangular maps.
    WrapLongitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub mode: PadMode,
}

impl Conv2dSpec {
    /// Padding that preserves size at stride 1 for odd kernels.
    pub fn same(kh: usize, kw: usize, stride: usize, mode: PadMode) -> Self {
        Self { stride, pad_h: kh / 2, pad_w: kw / 2, mode }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, pad_h: 0, pad_w: 0, mode: PadMode::Zero }
    }
}

const PAD: u32 = u32::MAX;

/// Precomputed im2col addressing for one input geometry.
struct ColIndex {
    c: usize,
    hw: usize,
    kk: usize,
    p: usize,
    /// `kk * p` source spatial offsets, `PAD` for zeros.
    src: Vec<u32>,
}

impl ColIndex {
    #[allow(clippy::too_many_arguments)]
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, oh: usize, ow: usize, spec: &Conv2dSpec) -> Self {
        let p = oh * ow;
        let mut src = Vec::with_capacity(kh * kw * p);
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad_h as isize;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad_w as isize;
                        let ix = match spec.mode {
                            PadMode::WrapLongitude => Some(ix.rem_euclid(w as isize)),
                            PadMode::Zero => (0..w as isize).contains(&ix).then_some(ix),
                        };
                        let idx = match ix {
                            Some(ix) if (0..h as isize).contains(&iy) => (iy as usize * w + ix as usize) as u32,
                            _ => PAD,
                        };
                        src.push(idx);
                    }
                }
            }
        }
        Self { c, hw: h * w, kk: kh * kw, p, src }
    }

    fn gather<T: Element>(&self, x: &[T], cols: &mut [T]) {
        for ci in 0..self.c {
            let plane = &x[ci * self.hw..(ci + 1) * self.hw];
            let rows = &mut cols[ci * self.kk * self.p..(ci + 1) * self.kk * self.p];
            for (d, &s) in rows.iter_mut().zip(&self.src) {
                *d = if s == PAD { T::zero() } else { plane[s as usize] };
            }
        }
    }

    fn scatter<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        for ci in 0..self.c {
            let plane = &mut gx[ci * self.hw..(ci + 1) * self.hw];
            let rows = &cols[ci * self.kk * self.p..(ci + 1) * self.kk * self.p];
            for (&g, &s) in rows.iter().zip(&self.src) {
                if s != PAD {
                    plane[s as usize] += g;
                }
            }
        }
    }
}

fn conv_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, k: usize, idx: &ColIndex) -> Vec<T> {
    let ckk = idx.c * idx.kk;
    let mut cols = vec![T::zero(); ckk * idx.p];
    let mut out = vec![T::zero(); n * k * idx.p];
    for ni in 0..n {
        idx.gather(&x[ni * idx.c * idx.hw..(ni + 1) * idx.c * idx.hw], &mut cols);
        let o = &mut out[ni * k * idx.p..(ni + 1) * k * idx.p];
        if let Some(b) = b {
            for (ki, row) in o.chunks_mut(idx.p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[ki]);
            }
        }
        T::gemm(k, ckk, idx.p, T::one(), w, false, &cols, false, T::one(), o);
    }
    out
}

struct ConvGrads<T> {
    gx: Option<Vec<T>>,
    gw: Option<Vec<T>>,
    gb: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Element>(
    g: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    k: usize,
    idx: &ColIndex,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ckk = idx.c * idx.kk;
    let mut cols = vec![T::zero(); ckk * idx.p];
    let mut gcols = vec![T::zero(); ckk * idx.p];
    let mut gx = need.0.then(|| vec![T::zero(); n * idx.c * idx.hw]);
    let mut gw = need.1.then(|| vec![T::zero(); k * ckk]);
    let mut gb = need.2.then(|| vec![T::zero(); k]);
    for ni in 0..n {
        let go = &g[ni * k * idx.p..(ni + 1) * k * idx.p];
        if let Some(gw) = gw.as_mut() {
            idx.gather(&x[ni * idx.c * idx.hw..(ni + 1) * idx.c * idx.hw], &mut cols);
            T::gemm(k, idx.p, ckk, T::one(), go, false, &cols, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(ckk, k, idx.p, T::one(), w, true, go, false, T::zero(), &mut gcols);
            idx.scatter(&gcols, &mut gx[ni * idx.c * idx.hw..(ni + 1) * idx.c * idx.hw]);
        }
        if let Some(gb) = gb.as_mut() {
            for (ki, row) in go.chunks(idx.p).enumerate() {
                gb[ki] += row.iter().copied().sum();
            }
        }
    }
    ConvGrads { gx, gw, gb }
}

/// Permutation / gather: `out[i] = in[map[i]]`; backward scatter-adds.
pub(crate) fn gather_op(x: &Tensor, map: Rc<Vec<u32>>, out_shape: Vec<usize>, op: &'static str) -> Tensor {
    let in_len = x.numel();
    let data = super::dispatch!(x.storage(), v => map.iter().map(|&i| v[i as usize]).collect());
    let map_bw = Rc::clone(&map);
    Tensor::from_op(
        data,
        out_shape,
        op,
        vec![x.clone()],
        Box::new(move |g| {
            Ok(vec![Some(super::dispatch!(g, v => {
                let mut out = vec![num_traits::zero(); in_len];
                for (&i, &gv) in map_bw.iter().zip(v.iter()) {
                    out[i as usize] += gv;
                }
                out
            }))])
        }),
    )
}

impl Tensor {
    /// 2-D cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus optional `[K]` bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (k, wc, kh, kw) = weight.dims4()?;
        if wc != c {
            return Err(Error::dim("channels", format!("input has {c} channels, weight expects {wc}")));
        }
        if weight.dtype() != self.dtype() {
            return Err(Error::DType { lhs: self.dtype(), rhs: weight.dtype() });
        }
        if let Some(b) = bias {
            if b.shape() != [k] {
                return Err(Error::dim("bias", format!("expected [{k}], got {:?}", b.shape())));
            }
        }
        if spec.stride == 0 {
            return Err(Error::InvalidInput("conv2d stride must be positive".into()));
        }
        if h + 2 * spec.pad_h < kh {
            return Err(Error::dim("height", format!("kernel height {kh} exceeds padded input {}", h + 2 * spec.pad_h)));
        }
        if w + 2 * spec.pad_w < kw {
            return Err(Error::dim("width", format!("kernel width {kw} exceeds padded input {}", w + 2 * spec.pad_w)));
        }
        let oh = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.pad_w - kw) / spec.stride + 1;
        let idx = Rc::new(ColIndex::new(c, h, w, kh, kw, oh, ow, &spec));

        let data = with_dtype!(self.dtype(), T => T::wrap(conv_forward::<T>(
            typed(self),
            typed(weight),
            bias.map(typed::<T>),
            n,
            k,
            &idx,
        )));

        let (x, wt) = (self.clone(), weight.clone());
        let need = (self.requires_grad(), weight.requires_grad(), bias.is_some_and(|b| b.requires_grad()));
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            data,
            vec![n, k, oh, ow],
            "conv2d",
            parents,
            Box::new(move |g| {
                let grads = with_dtype!(x.dtype(), T => {
                    let r = conv_backward::<T>(typed_storage(g), typed(&x), typed(&wt), n, k, &idx, need);
                    (r.gx.map(T::wrap), r.gw.map(T::wrap), r.gb.map(T::wrap))
                });
                let mut out = vec![grads.0, grads.1];
                if has_bias {
                    out.push(grads.2);
                }
                Ok(out)
            }),
        ))
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor> {
        let (n, cr, h, w) = self.dims4()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::dim("channels", format!("{cr} channels not divisible by r^2 = {}", r * r)));
        }
        let c = cr / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut map = Vec::with_capacity(self.numel());
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src_c = ci * r * r + (oy % r) * r + (ox % r);
                        map.push((((ni * cr + src_c) * h + oy / r) * w + ox / r) as u32);
                    }
                }
            }
        }
        Ok(gather_op(self, Rc::new(map), vec![n, c, oh, ow], "pixel_shuffle"))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor> {
        let (n, c, oh, ow) = self.dims4()?;
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(Error::dim("spatial", format!("{oh}x{ow} not divisible by {r}")));
        }
        let (h, w, cr) = (oh / r, ow / r, c * r * r);
        let mut map = Vec::with_capacity(self.numel());
        for ni in 0..n {
            for sc in 0..cr {
                let (ci, i, j) = (sc / (r * r), (sc / r) % r, sc % r);
                for y in 0..h {
                    for x in 0..w {
                        map.push((((ni * c + ci) * oh + y * r + i) * ow + x * r + j) as u32);
                    }
                }
            }
        }
        Ok(gather_op(self, Rc::new(map), vec![n, cr, h, w], "pixel_unshuffle"))
    }

    /// 2x2 area-average downsampling.
    pub fn downsample2x(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("spatial", format!("{h}x{w} is not divisible by 2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = n * c;
        let data = super::dispatch!(self.storage(), v => {
            let q = super::cst_like(v, 0.25);
            let mut out = Vec::with_capacity(planes * oh * ow);
            for p in 0..planes {
                let src = &v[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let i = 2 * y * w + 2 * x;
                        out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q);
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            "downsample2x",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(super::dispatch!(g, v => {
                    let q = super::cst_like(v, 0.25);
                    let mut out = vec![num_traits::zero(); planes * h * w];
                    for p in 0..planes {
                        for y in 0..h {
                            for x in 0..w {
                                out[p * h * w + y * w + x] = v[p * oh * ow + (y / 2) * ow + x / 2] * q;
                            }
                        }
                    }
                    out
                }))])
            }),
        ))
    }
}

/// Direct-loop reference convolution, used only to cross-check the im2col path.
#[cfg(test)]
pub(crate) fn conv2d_reference(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], spec: Conv2dSpec) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [k, _, kh, kw] = ws;
    let oh = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.pad_w - kw) / spec.stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ki];
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let iy = (oy * spec.stride + a) as isize - spec.pad_h as isize;
                                let mut ix = (ox * spec.stride + bb) as isize - spec.pad_w as isize;
                                if spec.mode == PadMode::WrapLongitude {
                                    ix = ix.rem_euclid(wd as isize);
                                }
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((ki * c + ci) * kh + a) * kw + bb];
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
