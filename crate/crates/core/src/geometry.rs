//! Spherical projection algebra: directions on the unit sphere, the cubemap
//! face table, rigid poses and panorama rotations.
//!
//! Conventions: `unproject(θ, φ) = (sinθ·cosφ, sinφ, cosθ·cosφ)`, so +z is
//! the forward axis (θ = 0), +x is θ = π/2 and +y points up. Equirectangular
//! pixel centers sit at `θ = (u + 0.5)/W·2π − π`, `φ = π/2 − (v + 0.5)/H·π`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Largest entry of `|RᵀR − I|`, and the determinant.
fn orthonormality(r: &Mat3) -> (f64, f64) {
    let rtr = mat_mul(&transpose(r), r);
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            dev = dev.max((rtr[i][j] - IDENTITY[i][j]).abs());
        }
    }
    (dev, det(r))
}

/// Checks that `r` is a proper rotation within `tol`.
pub fn validate_rotation(r: &Mat3, tol: f64) -> Result<()> {
    let (dev, d) = orthonormality(r);
    if !(dev <= tol && (d - 1.0).abs() <= tol) {
        return Err(Error::InvalidInput(format!("not a rotation: |RᵀR - I| = {dev:.3e}, det = {d}")));
    }
    Ok(())
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rodrigues rotation for an axis-angle vector.
pub fn axis_angle(w: &Vec3) -> Mat3 {
    let th2 = dot(w, w);
    let th = th2.sqrt();
    let (a, b) = if th < 1e-4 {
        (1.0 - th2 / 6.0 + th2 * th2 / 120.0, 0.5 - th2 / 24.0 + th2 * th2 / 720.0)
    } else {
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    let k2 = mat_mul(&k, &k);
    std::array::from_fn(|i| std::array::from_fn(|j| IDENTITY[i][j] + a * k[i][j] + b * k2[i][j]))
}

/// Axis of a panorama rotation. Pitch turns about +x, yaw about +y (up),
/// roll about +z (forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationAxis {
    Pitch,
    Yaw,
    Roll,
    /// Arbitrary axis; normalized before use.
    Axis([f64; 3]),
}

impl RotationAxis {
    pub fn matrix(self, angle: f64) -> Result<Mat3> {
        Ok(match self {
            RotationAxis::Pitch => rot_x(angle),
            RotationAxis::Yaw => rot_y(angle),
            RotationAxis::Roll => rot_z(angle),
            RotationAxis::Axis(a) => {
                let n = norm(&a);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::InvalidInput("rotation axis must be a nonzero finite vector".into()));
                }
                axis_angle(&[a[0] / n * angle, a[1] / n * angle, a[2] / n * angle])
            }
        })
    }
}

/// A direction on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereDirection {
    /// Longitude in `[−π, π)`.
    pub theta: f64,
    /// Latitude in `[−π/2, π/2]`.
    pub phi: f64,
}

impl SphereDirection {
    /// Wraps θ into `[−π, π)`; φ is taken as given.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta: wrap_angle(theta), phi }
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let t = (a + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        -PI
    } else {
        t
    }
}

pub fn unproject(d: SphereDirection) -> Vec3 {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    [st * cp, sp, ct * cp]
}

/// Direction of a nonzero vector. At the poles θ is canonicalized to 0.
pub fn project(q: &Vec3) -> Result<SphereDirection> {
    let n = norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Domain(format!("cannot project vector {q:?}")));
    }
    let rho = (q[0] * q[0] + q[2] * q[2]).sqrt();
    if rho <= 1e-15 * n {
        return Ok(SphereDirection { theta: 0.0, phi: FRAC_PI_2.copysign(q[1]) });
    }
    let mut theta = q[0].atan2(q[2]);
    if theta >= PI {
        theta = -PI;
    }
    Ok(SphereDirection { theta, phi: q[1].atan2(rho) })
}

/// Equirectangular pixel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("spatial", format!("empty grid {height}x{width}")));
        }
        Ok(Self { height, width })
    }

    /// The 2:1 panorama grid of height `h`.
    pub fn equirect(h: usize) -> Result<Self> {
        Self::new(h, 2 * h)
    }

    /// Direction through array coordinate `(u, v)`; integer values are pixel centers.
    pub fn direction(&self, u: f64, v: f64) -> SphereDirection {
        SphereDirection::new(
            (u + 0.5) / self.width as f64 * 2.0 * PI - PI,
            FRAC_PI_2 - (v + 0.5) / self.height as f64 * PI,
        )
    }

    /// Continuous array coordinate `(u, v)` of a direction, inverse of [`direction`](Self::direction).
    pub fn coord(&self, d: SphereDirection) -> (f64, f64) {
        (
            (d.theta + PI) / (2.0 * PI) * self.width as f64 - 0.5,
            (FRAC_PI_2 - d.phi) / PI * self.height as f64 - 0.5,
        )
    }
}

/// Cubemap face, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CubeFace {
    B,
    D,
    F,
    L,
    R,
    U,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [CubeFace::B, CubeFace::D, CubeFace::F, CubeFace::L, CubeFace::R, CubeFace::U];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Camera-to-world rotation of the face camera. Its third column is the view axis.
    pub fn rotation(self) -> Mat3 {
        match self {
            CubeFace::F => IDENTITY,
            CubeFace::B => [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            CubeFace::R => [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]],
            CubeFace::L => [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
            CubeFace::U => [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
            CubeFace::D => [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn axis(self) -> Vec3 {
        let r = self.rotation();
        [r[0][2], r[1][2], r[2][2]]
    }
}

/// Intrinsics `[[w/2, 0, w/2], [0, w/2, w/2], [0, 0, 1]]` of a face with side `w`.
pub fn face_intrinsics(w: f64) -> Mat3 {
    [[w / 2.0, 0.0, w / 2.0], [0.0, w / 2.0, w / 2.0], [0.0, 0.0, 1.0]]
}

/// Direction through face pixel coordinate `p = (x, y)` with `p ∈ [0, w)²`;
/// the center of pixel `(i, j)` is `(j + 0.5, i + 0.5)`.
pub fn cube_to_equirect_coord(face: CubeFace, p: [f64; 2], w: f64) -> SphereDirection {
    let f = w / 2.0;
    let local = [(p[0] - f) / f, (p[1] - f) / f, 1.0];
    project(&mat_vec(&face.rotation(), &local)).expect("face rays are nonzero")
}

/// Face with the largest view-axis alignment (ties go to the earlier face)
/// and the face pixel coordinate of `d`.
pub fn equirect_to_cube_coord(d: SphereDirection, w: f64) -> (CubeFace, [f64; 2]) {
    let q = unproject(d);
    let mut best = CubeFace::B;
    let mut best_dot = f64::NEG_INFINITY;
    for face in CubeFace::ALL {
        let s = dot(&face.axis(), &q);
        if s > best_dot {
            best = face;
            best_dot = s;
        }
    }
    let local = mat_vec(&transpose(&best.rotation()), &q);
    let f = w / 2.0;
    (best, [f * local[0] / local[2] + f, f * local[1] / local[2] + f])
}

/// Rigid motion `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { r: IDENTITY, t: [0.0; 3] }
    }

    /// Validated constructor; `r` must be a rotation within 1e-9.
    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        validate_rotation(&r, 1e-9)?;
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self { r, t })
    }

    pub fn translation(t: Vec3) -> Self {
        Self { r: IDENTITY, t }
    }

    pub fn rotation(r: Mat3) -> Self {
        Self { r, t: [0.0; 3] }
    }

    /// Pose from an axis-angle rotation and a translation.
    pub fn exp(omega: &Vec3, t: &Vec3) -> Self {
        Self { r: axis_angle(omega), t: *t }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let y = mat_vec(&self.r, x);
        [y[0] + self.t[0], y[1] + self.t[1], y[2] + self.t[2]]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 { r: mat_mul(&self.r, &other.r), t: self.apply(&other.t) }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = transpose(&self.r);
        let t = mat_vec(&rt, &self.t);
        PoseSE3 { r: rt, t: [-t[0], -t[1], -t[2]] }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 4..i * 4 + 3].copy_from_slice(&self.r[i]);
            out[i * 4 + 3] = self.t[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let r = std::array::from_fn(|i| [v[i * 4], v[i * 4 + 1], v[i * 4 + 2]]);
        Self::new(r, [v[3], v[7], v[11]])
    }
}

/// Moves the point at `depth` along `d` by `pose`, returning its new direction and distance.
pub fn reproject(d: SphereDirection, depth: f64, pose: &PoseSE3) -> Result<(SphereDirection, f64)> {
    if !(depth > 0.0) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    let e = unproject(d);
    let q = pose.apply(&[depth * e[0], depth * e[1], depth * e[2]]);
    let n = norm(&q);
    if !(n > 0.0) {
        return Err(Error::DegeneratePoint);
    }
    Ok((project(&q)?, n))
}

/// Camera motion taking frame-`a` camera coordinates to frame-`b` camera
/// coordinates, for world←camera poses; the argument of [`reproject`] and of
/// warping `b` onto `a`.
pub fn relative_pose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    b.inverse().compose(a)
}

/// Snaps values within 1e-9 of an integer onto it.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Source coordinate map of rotating a panorama by `r`: output pixel `(u, v)`
/// samples the input at the array coordinate of `r⁻¹·unproject(u, v)`.
/// Returned row-major, `(x, y)` per pixel, with `x ∈ [0, W)`.
pub fn rotate_sphere(r: &Mat3, grid: PixelGrid) -> Result<Vec<(f64, f64)>> {
    validate_rotation(r, 1e-9)?;
    let rt = transpose(r);
    let mut out = Vec::with_capacity(grid.height * grid.width);
    for v in 0..grid.height {
        for u in 0..grid.width {
            let q = mat_vec(&rt, &unproject(grid.direction(u as f64, v as f64)));
            let (x, y) = grid.coord(project(&q)?);
            out.push((snap(x).rem_euclid(grid.width as f64), snap(y)));
        }
    }
    Ok(out)
}
