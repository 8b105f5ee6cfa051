//! Image-level resampling: equirect/cubemap conversion, panorama rotation,
//! pyramids and the depth-driven backward warp.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{
    cube_to_equirect_coord, equirect_to_cube_coord, rotate_sphere, unproject, CubeFace, Mat3, PixelGrid, PoseSE3,
    Vec3,
};
use crate::tensor::{DType, ResamplePlan, Storage, Tensor};

/// Panorama `[C, H, W]` with `W = 2H`.
#[derive(Clone, Debug)]
pub struct EquirectImage {
    tensor: Tensor,
}

/// Per-pixel metric depth on the equirectangular grid, one channel.
pub type DepthMap = EquirectImage;

impl EquirectImage {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 {
            return Err(Error::dim("rank", format!("equirect image must be [C,H,W], got {s:?}")));
        }
        if s[2] != 2 * s[1] || s[1] == 0 {
            return Err(Error::dim("width", format!("equirect image needs W = 2H, got {}x{}", s[1], s[2])));
        }
        Ok(Self { tensor })
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(channels: usize, h: usize, dtype: DType, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let w = 2 * h;
        let mut v = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(c, y, x));
                }
            }
        }
        Self::new(Tensor::from_slice(&v, &[channels, h, w], dtype)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid { height: self.height(), width: self.width() }
    }

    /// View as a batch of one, `[1, C, H, W]`.
    pub fn batched(&self) -> Result<Tensor> {
        self.tensor.reshape(&[1, self.channels(), self.height(), self.width()])
    }

    /// Inverse of [`batched`](Self::batched) for a batch of one.
    pub fn from_batched(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(Error::dim("batch", format!("expected a batch of one, got {n}")));
        }
        Self::new(t.reshape(&[c, h, w])?)
    }
}

/// Six square faces `[6, C, w, w]` in the order B, D, F, L, R, U.
#[derive(Clone, Debug)]
pub struct CubemapImage {
    faces: Tensor,
}

impl CubemapImage {
    pub fn new(faces: Tensor) -> Result<Self> {
        let s = faces.shape();
        if s.len() != 4 || s[0] != 6 {
            return Err(Error::dim("faces", format!("cubemap must be [6,C,w,w], got {s:?}")));
        }
        if s[2] != s[3] {
            return Err(Error::dim("side", format!("cube faces must be square, got {}x{}", s[2], s[3])));
        }
        Ok(Self { faces })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.faces
    }

    pub fn side(&self) -> usize {
        self.faces.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.faces.shape()[1]
    }

    /// One face as `[C, w, w]`.
    pub fn face(&self, face: CubeFace) -> Result<Tensor> {
        let (c, w) = (self.channels(), self.side());
        self.faces.narrow(0, face.index(), 1)?.reshape(&[c, w, w])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum PlanKind {
    E2C,
    C2E,
}

thread_local! {
    static PLANS: RefCell<HashMap<(PlanKind, usize, usize), Rc<ResamplePlan>>> = RefCell::new(HashMap::new());
}

fn cached(kind: PlanKind, a: usize, b: usize, build: impl FnOnce() -> ResamplePlan) -> Rc<ResamplePlan> {
    if let Some(p) = PLANS.with(|c| c.borrow().get(&(kind, a, b)).cloned()) {
        return p;
    }
    let plan = Rc::new(build());
    PLANS.with(|c| c.borrow_mut().insert((kind, a, b), Rc::clone(&plan)));
    plan
}

/// Plan sampling an `h × 2h` panorama onto six `w × w` faces.
pub fn e2c_plan(h: usize, w: usize) -> Rc<ResamplePlan> {
    cached(PlanKind::E2C, h, w, || {
        let grid = PixelGrid { height: h, width: 2 * h };
        ResamplePlan::from_coords(1, h, 2 * h, 6, w, w, true, |p, v, u| {
            let d = cube_to_equirect_coord(CubeFace::ALL[p], [u as f64 + 0.5, v as f64 + 0.5], w as f64);
            let (x, y) = grid.coord(d);
            (0, x, y)
        })
    })
}

/// Plan sampling six `w × w` faces onto an `h × 2h` panorama. Face edges clamp.
pub fn c2e_plan(w: usize, h: usize) -> Rc<ResamplePlan> {
    cached(PlanKind::C2E, w, h, || {
        let grid = PixelGrid { height: h, width: 2 * h };
        ResamplePlan::from_coords(6, w, w, 1, h, 2 * h, false, |_, v, u| {
            let (face, p) = equirect_to_cube_coord(grid.direction(u as f64, v as f64), w as f64);
            (face.index(), p[0] - 0.5, p[1] - 0.5)
        })
    })
}

fn check_positive(what: &'static str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::dim(what, "must be positive"));
    }
    Ok(())
}

/// Batched E2C: `[N, C, H, 2H]` to `[6N, C, w, w]`.
pub fn e2c_batch(x: &Tensor, w: usize) -> Result<Tensor> {
    check_positive("side", w)?;
    let (_, _, h, _) = x.dims4()?;
    e2c_plan(h, w).apply(x)
}

/// Batched C2E: `[6N, C, w, w]` to `[N, C, H, 2H]`.
pub fn c2e_batch(x: &Tensor, h: usize) -> Result<Tensor> {
    check_positive("height", h)?;
    let (_, _, w, _) = x.dims4()?;
    c2e_plan(w, h).apply(x)
}

pub fn e2c(img: &EquirectImage, w: usize) -> Result<CubemapImage> {
    CubemapImage::new(e2c_batch(&img.batched()?, w)?)
}

pub fn c2e(cm: &CubemapImage, h: usize) -> Result<EquirectImage> {
    EquirectImage::from_batched(&c2e_batch(cm.tensor(), h)?)
}

/// Rotates every panorama of a `[N, C, H, W]` batch by `r`.
pub fn rotate_batch(x: &Tensor, r: &Mat3) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let coords = rotate_sphere(r, PixelGrid::new(h, w)?)?;
    let plan = ResamplePlan::from_coords(1, h, w, 1, h, w, true, |_, v, u| {
        let (x, y) = coords[v * w + u];
        (0, x, y)
    });
    Rc::new(plan).apply(x)
}

pub fn rotate_image(img: &EquirectImage, r: &Mat3) -> Result<EquirectImage> {
    EquirectImage::from_batched(&rotate_batch(&img.batched()?, r)?)
}

/// Area-averaged pyramid of a `[N, C, H, W]` batch; level 0 is the input.
pub fn pyramid(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = x.dims4()?;
    let f = 1usize << levels.saturating_sub(1);
    if levels == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::dim("spatial", format!("{h}x{w} cannot form a {levels}-level pyramid")));
    }
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let next = out.last().unwrap().downsample2x()?;
        out.push(next);
    }
    Ok(out)
}

/// Unit ray directions of every pixel center, row-major.
type RayCache = RefCell<HashMap<(usize, usize), Rc<Vec<Vec3>>>>;

fn pixel_rays(h: usize, w: usize) -> Rc<Vec<Vec3>> {
    thread_local! {
        static RAYS: RayCache = RefCell::new(HashMap::new());
    }
    RAYS.with(|c| {
        Rc::clone(c.borrow_mut().entry((h, w)).or_insert_with(|| {
            let g = PixelGrid { height: h, width: w };
            Rc::new((0..h * w).map(|i| unproject(g.direction((i % w) as f64, (i / w) as f64))).collect())
        }))
    })
}

struct GridGeom {
    n: usize,
    h: usize,
    w: usize,
    rays: Rc<Vec<Vec3>>,
    depth: Vec<f64>,
    r: Vec<f64>,
    t: Vec<f64>,
}

impl GridGeom {
    /// Target-frame point of pixel `i` of sample `b`.
    fn point(&self, b: usize, i: usize) -> Vec3 {
        let e = &self.rays[i];
        let d = self.depth[b * self.h * self.w + i];
        let r = &self.r[b * 9..b * 9 + 9];
        let t = &self.t[b * 3..b * 3 + 3];
        std::array::from_fn(|k| d * (r[k * 3] * e[0] + r[k * 3 + 1] * e[1] + r[k * 3 + 2] * e[2]) + t[k])
    }
}

fn usable(q: &Vec3) -> bool {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    n2.is_finite() && n2 > 1e-24 && q[0] * q[0] + q[2] * q[2] > 1e-24
}

/// Differentiable reprojection of reference pixels into target-image coordinates.
///
/// `depth` is `[N, 1, H, W]`, `r` is `[N, 3, 3]` and `t` is `[N, 3]`, mapping
/// reference camera coordinates to target camera coordinates. Returns the
/// sampling grid `[N, H, W, 2]` (array coordinates) and a constant validity
/// mask `[N, 1, H, W]` (zero where the point lands on the target camera
/// center, a pole, or non-finite values). Gradients flow to depth, `r` and `t`.
pub fn reproject_grid(depth: &Tensor, r: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = depth.dims4()?;
    if c != 1 {
        return Err(Error::dim("channel", format!("depth must have one channel, got {c}")));
    }
    if r.shape() != [n, 3, 3] {
        return Err(Error::dim("rotation", format!("expected [{n},3,3], got {:?}", r.shape())));
    }
    if t.shape() != [n, 3] {
        return Err(Error::dim("translation", format!("expected [{n},3], got {:?}", t.shape())));
    }
    let dv = depth.to_vec_f64();
    if dv.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("NaN in depth map".into()));
    }
    let geom = Rc::new(GridGeom { n, h, w, rays: pixel_rays(h, w), depth: dv, r: r.to_vec_f64(), t: t.to_vec_f64() });
    let (wf, hf) = (w as f64, h as f64);
    let mut grid = Vec::with_capacity(n * h * w * 2);
    let mut valid = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for i in 0..h * w {
            let q = geom.point(b, i);
            if usable(&q) && geom.depth[b * h * w + i] > 0.0 {
                let rho = (q[0] * q[0] + q[2] * q[2]).sqrt();
                let theta = q[0].atan2(q[2]);
                let phi = q[1].atan2(rho);
                grid.push((theta + PI) / (2.0 * PI) * wf - 0.5);
                grid.push((PI / 2.0 - phi) / PI * hf - 0.5);
                valid.push(1.0);
            } else {
                grid.push((i % w) as f64);
                grid.push((i / w) as f64);
                valid.push(0.0);
            }
        }
    }
    let dtype = depth.dtype();
    let valid = Tensor::from_slice(&valid, &[n, 1, h, w], dtype)?;
    let g2 = Rc::clone(&geom);
    let grid = Tensor::from_op(
        Storage::from_f64(dtype, &grid),
        vec![n, h, w, 2],
        "reproject_grid",
        vec![depth.clone(), r.clone(), t.clone()],
        Box::new(move |g| {
            let g = g.to_f64_vec();
            let geom = g2;
            let (h, w) = (geom.h, geom.w);
            let mut gd = vec![0.0; geom.n * h * w];
            let mut gr = vec![0.0; geom.n * 9];
            let mut gt = vec![0.0; geom.n * 3];
            for b in 0..geom.n {
                for i in 0..h * w {
                    let q = geom.point(b, i);
                    let di = geom.depth[b * h * w + i];
                    if !(usable(&q) && di > 0.0) {
                        continue;
                    }
                    let k = b * h * w + i;
                    let gx = g[2 * k] * w as f64 / (2.0 * PI);
                    let gy = -g[2 * k + 1] * h as f64 / PI;
                    let rho2 = q[0] * q[0] + q[2] * q[2];
                    let rho = rho2.sqrt();
                    let n2 = rho2 + q[1] * q[1];
                    let gq = [
                        gx * q[2] / rho2 - gy * q[0] * q[1] / (rho * n2),
                        gy * rho / n2,
                        -gx * q[0] / rho2 - gy * q[2] * q[1] / (rho * n2),
                    ];
                    let e = &geom.rays[i];
                    let rm = &geom.r[b * 9..b * 9 + 9];
                    for row in 0..3 {
                        let re = rm[row * 3] * e[0] + rm[row * 3 + 1] * e[1] + rm[row * 3 + 2] * e[2];
                        gd[k] += gq[row] * re;
                        for col in 0..3 {
                            gr[b * 9 + row * 3 + col] += gq[row] * di * e[col];
                        }
                        gt[b * 3 + row] += gq[row];
                    }
                }
            }
            Ok(vec![
                Some(Storage::from_f64(dtype, &gd)),
                Some(Storage::from_f64(dtype, &gr)),
                Some(Storage::from_f64(dtype, &gt)),
            ])
        }),
    );
    Ok((grid, valid))
}

/// Synthesizes the reference view from `target` `[N, C, H, W]` using reference
/// depth and the reference-to-target motion (`r`, `t`). Returns the warped
/// batch and the validity mask.
pub fn warp_batch(target: &Tensor, depth: &Tensor, r: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, _, h, w) = target.dims4()?;
    let (nd, _, hd, wd) = depth.dims4()?;
    if (n, h, w) != (nd, hd, wd) {
        return Err(Error::dim("spatial", format!("target {n}x{h}x{w} vs depth {nd}x{hd}x{wd}")));
    }
    let (grid, valid) = reproject_grid(depth, r, t)?;
    Ok((target.grid_sample(&grid, true)?, valid))
}

/// Single-image form of [`warp_batch`] with a fixed pose.
pub fn warp_to_reference(target: &EquirectImage, depth_ref: &DepthMap, pose_ref_to_target: &PoseSE3) -> Result<(EquirectImage, Tensor)> {
    let dtype = depth_ref.tensor().dtype();
    let r: Vec<f64> = pose_ref_to_target.r.iter().flatten().copied().collect();
    let r = Tensor::from_slice(&r, &[1, 3, 3], dtype)?;
    let t = Tensor::from_slice(&pose_ref_to_target.t, &[1, 3], dtype)?;
    let (warped, valid) = warp_batch(&target.batched()?, &depth_ref.batched()?, &r, &t)?;
    let (_, _, h, w) = valid.dims4()?;
    Ok((EquirectImage::from_batched(&warped)?, valid.reshape(&[1, h, w])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_y, PoseSE3};
    use crate::tensor::gradcheck::{check, CheckInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_texture(h: usize) -> EquirectImage {
        let g = PixelGrid::equirect(h).unwrap();
        EquirectImage::from_fn(1, h, DType::F64, |_, v, u| {
            let d = g.direction(u as f64, v as f64);
            0.5 + 0.2 * (2.0 * d.theta).sin() * d.phi.cos() + 0.1 * (3.0 * d.phi).cos()
        })
        .unwrap()
    }

    #[test]
    fn constant_roundtrip_exact() {
        let img = EquirectImage::new(Tensor::full(&[2, 8, 16], 0.25, DType::F64)).unwrap();
        let cm = e2c(&img, 8).unwrap();
        assert!(cm.tensor().to_vec_f64().iter().all(|&x| x == 0.25));
        let back = c2e(&cm, 8).unwrap();
        assert!(back.tensor().to_vec_f64().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn aspect_enforced() {
        assert!(EquirectImage::new(Tensor::zeros(&[1, 4, 4], DType::F32)).is_err());
        assert!(CubemapImage::new(Tensor::zeros(&[5, 1, 4, 4], DType::F32)).is_err());
    }

    #[test]
    fn pyramid_shapes_and_mean() {
        let x = Tensor::zeros(&[1, 3, 64, 128], DType::F32);
        let levels = pyramid(&x, 4).unwrap();
        let shapes: Vec<_> = levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        assert_eq!(shapes, vec![(64, 128), (32, 64), (16, 32), (8, 16)]);
        let b = Tensor::from_f64(vec![0.0, 0.0, 1.0, 1.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(pyramid(&b, 2).unwrap()[1].to_vec_f64(), vec![0.5]);
        assert!(pyramid(&Tensor::zeros(&[1, 1, 12, 24], DType::F32), 4).is_err());
    }

    #[test]
    fn identity_warp_exact() {
        let tex = smooth_texture(8);
        let depth = EquirectImage::from_fn(1, 8, DType::F64, |_, v, u| 1.0 + 0.1 * (v + u) as f64).unwrap();
        let (warped, valid) = warp_to_reference(&tex, &depth, &PoseSE3::identity()).unwrap();
        assert_eq!(warped.tensor().to_vec_f64(), tex.tensor().to_vec_f64());
        assert!(valid.to_vec_f64().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn pure_rotation_ignores_depth_scale() {
        let tex = smooth_texture(8);
        let pose = PoseSE3::rotation(rot_x(0.2));
        let d1 = EquirectImage::new(Tensor::full(&[1, 8, 16], 1.0, DType::F64)).unwrap();
        let d2 = EquirectImage::new(Tensor::full(&[1, 8, 16], 7.5, DType::F64)).unwrap();
        let a = warp_to_reference(&tex, &d1, &pose).unwrap().0.tensor().to_vec_f64();
        let b = warp_to_reference(&tex, &d2, &pose).unwrap().0.tensor().to_vec_f64();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_commutes_with_scaling() {
        let tex = smooth_texture(8);
        let scaled = EquirectImage::new(tex.tensor().affine(3.0, 0.0).unwrap()).unwrap();
        let depth = EquirectImage::new(Tensor::full(&[1, 8, 16], 2.0, DType::F64)).unwrap();
        let pose = PoseSE3::exp(&[0.05, 0.1, 0.0], &[0.1, 0.0, -0.05]);
        let a = warp_to_reference(&tex, &depth, &pose).unwrap().0.tensor().to_vec_f64();
        let b = warp_to_reference(&scaled, &depth, &pose).unwrap().0.tensor().to_vec_f64();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_depth_rejected() {
        let tex = smooth_texture(4);
        let depth = EquirectImage::new(Tensor::full(&[1, 4, 8], f64::NAN, DType::F64)).unwrap();
        assert!(matches!(warp_to_reference(&tex, &depth, &PoseSE3::identity()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn yaw_rotation_shifts_columns() {
        let tex = smooth_texture(8);
        let rotated = rotate_image(&tex, &rot_y(2.0 * PI * 2.0 / 16.0)).unwrap().tensor().to_vec_f64();
        let orig = tex.tensor().to_vec_f64();
        for v in 0..8 {
            for u in 0..16 {
                assert_eq!(rotated[v * 16 + u], orig[v * 16 + (u + 14) % 16]);
            }
        }
    }

    #[test]
    fn grid_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (4, 8);
        let depth = CheckInput::random(&mut rng, &[1, 1, h, w], 1.0, 3.0);
        let r = rot_y(0.1);
        let rin = CheckInput::var(r.iter().flatten().copied().collect(), &[1, 3, 3]);
        let tin = CheckInput::var(vec![0.1, -0.05, 0.2], &[1, 3]);
        let rep = check(|x| Ok(reproject_grid(&x[0], &x[1], &x[2])?.0), &[depth, rin, tin], 1e-6, 1).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn warp_gradient_wrt_depth() {
        let tex = smooth_texture(8);
        let target = tex.batched().unwrap().to_vec_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let depth = CheckInput::random(&mut rng, &[1, 1, 8, 16], 1.5, 2.5);
        let r = CheckInput::constant(rot_x(0.03).iter().flatten().copied().collect(), &[1, 3, 3]);
        let t = CheckInput::constant(vec![0.13, 0.02, -0.07], &[1, 3]);
        let rep = check(
            |x| {
                let tgt = Tensor::from_f64(target.clone(), &[1, 1, 8, 16])?;
                Ok(warp_batch(&tgt, &x[0], &x[1], &x[2])?.0)
            },
            &[depth, r, t],
            1e-6,
            2,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}
