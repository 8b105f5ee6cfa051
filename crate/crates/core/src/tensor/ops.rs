//! Elementwise, reduction and structural operations.

use super::{dispatch, dispatch2, same_shape, Element, Storage, Tensor};
use crate::error::{Error, Result};

/// `x` converted to the element type of `like`.
#[inline]
fn cst<T: Element>(_like: &[T], x: f64) -> T {
    T::of(x)
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add operands")?;
        let data = dispatch2!(self.storage(), rhs.storage(), (a, b) => zip_map(a, b, |x, y| x + y))?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), rhs.clone()],
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "sub operands")?;
        let data = dispatch2!(self.storage(), rhs.storage(), (a, b) => zip_map(a, b, |x, y| x - y))?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sub",
            vec![self.clone(), rhs.clone()],
            Box::new(|g| Ok(vec![Some(g.clone()), Some(dispatch!(g, v => v.iter().map(|&x| -x).collect()))])),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul operands")?;
        let data = dispatch2!(self.storage(), rhs.storage(), (a, b) => zip_map(a, b, |x, y| x * y))?;
        let (a_data, b_data) = (self.storage().clone(), rhs.storage().clone());
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let ga = if need_a { Some(dispatch2!(g, &b_data, (g, b) => zip_map(g, b, |x, y| x * y))?) } else { None };
                let gb = if need_b { Some(dispatch2!(g, &a_data, (g, a) => zip_map(g, a, |x, y| x * y))?) } else { None };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let data = dispatch!(self.storage(), v => {
            let (s, b) = (cst(v, scale), cst(v, shift));
            v.iter().map(|&x| x * s + b).collect()
        });
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "affine",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch!(g, v => {
                    let s = cst(v, scale);
                    v.iter().map(|&x| x * s).collect()
                }))])
            }),
        ))
    }

    pub fn abs(&self) -> Result<Tensor> {
        let x = self.storage().clone();
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| a.abs()).collect());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "abs",
            vec![self.clone()],
            Box::new(move |g| {
                // Subgradient 0 at the kink.
                Ok(vec![Some(dispatch2!(g, &x, (g, x) => zip_map(g, x, |g, x| {
                    if x > num_traits::zero() { g } else if x < num_traits::zero() { -g } else { num_traits::zero() }
                }))?)])
            }),
        ))
    }

    pub fn relu(&self) -> Result<Tensor> {
        let x = self.storage().clone();
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| a.max(num_traits::zero())).collect());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "relu",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch2!(g, &x, (g, x) => zip_map(g, x, |g, x| {
                    if x > num_traits::zero() { g } else { num_traits::zero() }
                }))?)])
            }),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| {
            let one: f64 = 1.0;
            cst(v, one / (one + (-a.as_f64()).exp()))
        }).collect());
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sigmoid",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch2!(g, &y, (g, y) => zip_map(g, y, |g, y| {
                    g * y * (cst(&[y], 1.0) - y)
                }))?)])
            }),
        ))
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn log(&self) -> Result<Tensor> {
        if self.to_vec_f64().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let x = self.storage().clone();
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| a.ln()).collect());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "log",
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(dispatch2!(g, &x, (g, x) => zip_map(g, x, |g, x| g / x))?)])),
        ))
    }

    /// `1 / x`; zero inputs are a domain error.
    pub fn recip(&self) -> Result<Tensor> {
        if self.to_vec_f64().contains(&0.0) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| a.recip()).collect());
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "recip",
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(dispatch2!(g, &y, (g, y) => zip_map(g, y, |g, y| -g * y * y))?)])),
        ))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let x = self.storage().clone();
        let data = dispatch!(self.storage(), v => {
            let (l, h) = (cst(v, lo), cst(v, hi));
            v.iter().map(|&a| a.max(l).min(h)).collect()
        });
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "clamp",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch2!(g, &x, (g, x) => zip_map(g, x, |g, x| {
                    let xf = x.as_f64();
                    if xf > lo && xf < hi { g } else { num_traits::zero() }
                }))?)])
            }),
        ))
    }

    /// Elementwise map with a caller-supplied derivative, evaluated in f64.
    pub fn map_elementwise(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.storage().clone();
        let data = dispatch!(self.storage(), v => v.iter().map(|&a| cst(v, f(a.as_f64()))).collect());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch2!(g, &x, (g, x) => zip_map(g, x, |g, x| {
                    g * cst(&[g], df(x.as_f64()))
                }))?)])
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let data = dispatch!(self.storage(), v => vec![v.iter().copied().sum()]);
        Ok(Tensor::from_op(
            data,
            vec![],
            "sum",
            vec![self.clone()],
            Box::new(move |g| Ok(vec![Some(Storage::full(g.dtype(), n, g.get_f64(0)))])),
        ))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyBatch("mean of an empty tensor".into()));
        }
        self.sum()?.affine(1.0 / n as f64, 0.0)
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("axis", format!("axis {axis} out of range for rank {}", self.rank())));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let data = dispatch!(self.storage(), v => {
            let scale = cst(v, 1.0 / len as f64);
            let mut out = vec![num_traits::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &v[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            out.iter_mut().for_each(|x| *x *= scale);
            out
        });
        Ok(Tensor::from_op(
            data,
            shape,
            "mean_axis",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch!(g, v => {
                    let scale = cst(v, 1.0 / len as f64);
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        for _ in 0..len {
                            out.extend(v[o * inner..(o + 1) * inner].iter().map(|&x| x * scale));
                        }
                    }
                    out
                }))])
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("axis", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank || p.dtype() != first.dtype() {
                return Err(Error::dim("rank", "concat operands differ in rank or dtype"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::dim("concat off-axis", format!("{:?} vs {:?}", p.shape(), first.shape())));
                }
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let data = match first.storage() {
            Storage::F32(_) => Storage::F32(concat_kernel(parts, &lens, outer, inner, |s| match s {
                Storage::F32(v) => v.as_slice(),
                _ => unreachable!(),
            })),
            Storage::F64(_) => Storage::F64(concat_kernel(parts, &lens, outer, inner, |s| match s {
                Storage::F64(v) => v.as_slice(),
                _ => unreachable!(),
            })),
        };
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            parts.iter().map(|&t| t.clone()).collect(),
            Box::new(move |g| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(lens_bw.len());
                for &len in &lens_bw {
                    out.push(Some(dispatch!(g, v => {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&v[start..start + len * inner]);
                        }
                        part
                    })));
                    offset += len;
                }
                Ok(out)
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::dim("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape())));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let data = dispatch!(self.storage(), v => {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                out.extend_from_slice(&v[s..s + len * inner]);
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g| {
                Ok(vec![Some(dispatch!(g, v => {
                    let mut out = vec![num_traits::zero(); outer * full * inner];
                    for o in 0..outer {
                        let d = (o * full + start) * inner;
                        out[d..d + len * inner].copy_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
                    }
                    out
                }))])
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(
            self.storage().clone(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g| Ok(vec![Some(g.clone())])),
        ))
    }
}

fn concat_kernel<T: Element>(
    parts: &[&Tensor],
    lens: &[usize],
    outer: usize,
    inner: usize,
    get: impl Fn(&Storage) -> &[T],
) -> Vec<T> {
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(lens) {
            let v = get(p.storage());
            out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
        }
    }
    out
}
