//! Synthetic panoramas of textured box rooms with analytic depth, camera
//! trajectories, and reading/writing datasets on disk.

use std::f64::consts::PI;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{face_intrinsics, mat_vec, rot_y, unproject, CubeFace, PixelGrid, PoseSE3, Vec3};
use crate::io::{format_manifest, parse_manifest, read_pfm, read_png, read_poses, write_pfm, write_png, write_poses, ManifestEntry};
use crate::resample::{DepthMap, EquirectImage};
use crate::tensor::{DType, Tensor};

/// One sinusoid `amp · sin(2π(fs·s + ft·t) + phase[c])` in wall coordinates (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub fs: f64,
    pub ft: f64,
    pub amp: f64,
    pub phase: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTexture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    /// Per-wall multiplier on the texture amplitude.
    pub strength: f64,
}

/// Axis-aligned box `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    /// Entry distance of a ray starting outside the box.
    fn entry(&self, o: &Vec3, d: &Vec3) -> Option<(f64, usize, bool)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut face = (0, false);
        for k in 0..3 {
            if d[k] == 0.0 {
                if o[k] <= self.min[k] || o[k] >= self.max[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((self.min[k] - o[k]) / d[k], (self.max[k] - o[k]) / d[k]);
            let (near, far, near_is_max) = if a < b { (a, b, false) } else { (b, a, true) };
            if near > t0 {
                t0 = near;
                face = (k, near_is_max);
            }
            t1 = t1.min(far);
        }
        (t0 > 0.0 && t0 <= t1).then_some((t0, face.0, face.1))
    }
}

/// Textured box room. Walls are indexed `2·axis + (1 if the max side)`:
/// −x, +x, −y (floor), +y (ceiling), −z, +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Aabb,
    pub walls: Vec<WallTexture>,
    /// Global multiplier on every texture amplitude; 0 gives flat walls.
    pub texture_strength: f64,
    /// Optional interior block, textured like the wall facing each of its sides.
    pub block: Option<Aabb>,
    /// Standard deviation of Gaussian noise added to rendered colors.
    pub noise_std: f64,
    /// Color samples per pixel along each axis, box-filtered; depth is always
    /// taken at the pixel center.
    #[serde(default = "one")]
    pub supersample: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SceneSpec {
    /// Random room around the origin with extents in `[3.5, 5] × [2.4, 3] × [3.5, 5]` m.
    pub fn random(seed: u64, texture_strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = [rng.random_range(3.5..5.0), rng.random_range(2.4..3.0), rng.random_range(3.5..5.0)];
        let room = Aabb { min: [-ext[0] / 2.0, -1.4, -ext[2] / 2.0], max: [ext[0] / 2.0, ext[1] - 1.4, ext[2] / 2.0] };
        let walls = (0..6).map(|_| random_wall(&mut rng)).collect();
        Self { room, walls, texture_strength, block: None, noise_std: 0.0, supersample: 1, seed }
    }

    /// Cube room of side `side` centered at the origin.
    pub fn cube(seed: u64, side: f64, texture_strength: f64) -> Self {
        let mut s = Self::random(seed, texture_strength);
        s.room = Aabb { min: [-side / 2.0; 3], max: [side / 2.0; 3] };
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.len() != 6 {
            return Err(Error::InvalidInput(format!("scene needs 6 wall textures, got {}", self.walls.len())));
        }
        if (0..3).any(|k| !(self.room.max[k] > self.room.min[k])) {
            return Err(Error::InvalidInput("room box is empty".into()));
        }
        if self.supersample == 0 {
            return Err(Error::InvalidInput("supersample must be at least 1".into()));
        }
        if self.noise_std < 0.0 || self.texture_strength < 0.0 {
            return Err(Error::InvalidInput("noise and texture strength must be non-negative".into()));
        }
        Ok(())
    }

    fn check_camera(&self, c: &Vec3) -> Result<()> {
        if !self.room.contains(c) {
            return Err(Error::InvalidInput(format!("camera {c:?} is outside the room")));
        }
        if self.block.is_some_and(|b| b.contains(c)) {
            return Err(Error::InvalidInput(format!("camera {c:?} is inside the interior block")));
        }
        Ok(())
    }

    /// Nearest hit of a unit ray from inside the room: distance and wall index.
    pub fn trace(&self, o: &Vec3, d: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for k in 0..3 {
            if d[k] > 0.0 {
                let t = (self.room.max[k] - o[k]) / d[k];
                if t < best.0 {
                    best = (t, 2 * k + 1);
                }
            } else if d[k] < 0.0 {
                let t = (self.room.min[k] - o[k]) / d[k];
                if t < best.0 {
                    best = (t, 2 * k);
                }
            }
        }
        if let Some((t, axis, hit_max)) = self.block.and_then(|b| b.entry(o, d)) {
            if t < best.0 {
                // The block side facing -axis looks like the +axis room wall and vice versa.
                best = (t, 2 * axis + usize::from(!hit_max));
            }
        }
        best
    }

    /// Noise-free color of a surface point on wall `wall`.
    pub fn shade(&self, p: &Vec3, wall: usize) -> [f64; 3] {
        let tex = &self.walls[wall];
        let axis = wall / 2;
        let (s, t) = match axis {
            0 => (p[2], p[1]),
            1 => (p[0], p[2]),
            _ => (p[0], p[1]),
        };
        let k = self.texture_strength * tex.strength;
        std::array::from_fn(|c| {
            let mut v = tex.base[c];
            if k != 0.0 {
                for w in &tex.waves {
                    v += k * w.amp * (2.0 * PI * (w.fs * s + w.ft * t) + w.phase[c]).sin();
                }
            }
            v.clamp(0.0, 1.0)
        })
    }
}

fn random_wall(rng: &mut ChaCha8Rng) -> WallTexture {
    let base = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let waves = (0..3)
        .map(|_| Wave {
            fs: rng.random_range(-1.5..1.5),
            ft: rng.random_range(-1.5..1.5),
            amp: rng.random_range(0.04..0.08),
            phase: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        })
        .collect();
    WallTexture { base, waves, strength: 1.0 }
}

/// A rendered or loaded frame. Color is `[3, H, 2H]`, depth `[1, H, 2H]`, both f64.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub rgb: EquirectImage,
    pub depth: Option<DepthMap>,
    /// World←camera pose.
    pub pose: Option<PoseSE3>,
    pub index: usize,
}

/// Renders the panorama seen from `pose` (world←camera) at height `h`.
pub fn render_frame(scene: &SceneSpec, pose: &PoseSE3, h: usize, index: usize) -> Result<FrameRecord> {
    scene.validate()?;
    scene.check_camera(&pose.t)?;
    let grid = PixelGrid::equirect(h)?;
    let (w, n) = (grid.width, h * grid.width);
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let ss = scene.supersample;
    let hit = |u: f64, v: f64| {
        let dir = mat_vec(&pose.r, &unproject(grid.direction(u, v)));
        let (t, wall) = scene.trace(&pose.t, &dir);
        (t, scene.shade(&[pose.t[0] + t * dir[0], pose.t[1] + t * dir[1], pose.t[2] + t * dir[2]], wall))
    };
    for i in 0..n {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let (t, center) = hit(u, v);
        depth[i] = t;
        let c = if ss == 1 {
            center
        } else {
            let mut acc = [0.0; 3];
            for a in 0..ss {
                for b in 0..ss {
                    let off = |k: usize| (k as f64 + 0.5) / ss as f64 - 0.5;
                    let (_, c) = hit(u + off(a), v + off(b));
                    (0..3).for_each(|k| acc[k] += c[k]);
                }
            }
            acc.map(|x| x / (ss * ss) as f64)
        };
        for k in 0..3 {
            rgb[k * n + i] = c[k];
        }
    }
    if scene.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, scene.noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in &mut rgb {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(FrameRecord {
        rgb: EquirectImage::new(Tensor::from_f64(rgb, &[3, h, w])?)?,
        depth: Some(EquirectImage::new(Tensor::from_f64(depth, &[1, h, w])?)?),
        pose: Some(*pose),
        index,
    })
}

/// Perspective render of one cube face of side `w`; returns `([3, w, w], [1, w, w])` f64 data.
pub fn render_face(scene: &SceneSpec, pose: &PoseSE3, face: CubeFace, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    scene.check_camera(&pose.t)?;
    let k = face_intrinsics(w as f64);
    let n = w * w;
    let (mut rgb, mut depth) = (vec![0.0; 3 * n], vec![0.0; n]);
    for i in 0..n {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let local = [(x - k[0][2]) / k[0][0], (y - k[1][2]) / k[1][1], 1.0];
        let d = mat_vec(&pose.r, &mat_vec(&face.rotation(), &local));
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let d = d.map(|v| v / norm);
        let (t, wall) = scene.trace(&pose.t, &d);
        let c = scene.shade(&[pose.t[0] + t * d[0], pose.t[1] + t * d[1], pose.t[2] + t * d[2]], wall);
        for ch in 0..3 {
            rgb[ch * n + i] = c[ch];
        }
        depth[i] = t;
    }
    Ok((rgb, depth))
}

pub fn make_sequence(scene: &SceneSpec, trajectory: &[PoseSE3], h: usize) -> Result<Vec<FrameRecord>> {
    trajectory.iter().enumerate().map(|(i, p)| render_frame(scene, p, h, i)).collect()
}

/// Camera path: start at `start`, translate by `step` meters per frame along
/// the unit direction `dir` and yaw by `yaw_step` radians per frame.
pub fn linear_trajectory(start: Vec3, dir: Vec3, step: f64, yaw_step: f64, frames: usize) -> Vec<PoseSE3> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    (0..frames)
        .map(|i| {
            let s = step * i as f64 / n;
            PoseSE3 { r: rot_y(yaw_step * i as f64), t: [start[0] + s * dir[0], start[1] + s * dir[1], start[2] + s * dir[2]] }
        })
        .collect()
}

/// Closed loop of `frames` poses on an ellipse with radii `radii` (x, z) around
/// the room center at height `y`, each frame yawing along the path.
pub fn loop_trajectory(scene: &SceneSpec, radii: [f64; 2], y: f64, frames: usize) -> Vec<PoseSE3> {
    let c = [(scene.room.min[0] + scene.room.max[0]) / 2.0, (scene.room.min[2] + scene.room.max[2]) / 2.0];
    (0..frames)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / frames as f64;
            PoseSE3 { r: rot_y(0.25 * a.sin()), t: [c[0] + radii[0] * a.cos(), y, c[1] + radii[1] * a.sin()] }
        })
        .collect()
}

/// Smooth function of direction for resampling tests: a sum of sinusoids of
/// direction cosines, values in `[0.2, 0.8]`.
pub fn spherical_texture(h: usize, seed: u64, dtype: DType) -> Result<EquirectImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(Vec3, f64, f64)> = (0..4)
        .map(|_| {
            let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
            (v.map(|x| x / n), rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let grid = PixelGrid::equirect(h)?;
    EquirectImage::from_fn(1, h, dtype, |_, v, u| {
        let q = unproject(grid.direction(u as f64, v as f64));
        0.5 + 0.075 * waves.iter().map(|(n, f, p)| (f * (n[0] * q[0] + n[1] * q[1] + n[2] * q[2]) * PI + p).sin()).sum::<f64>()
    })
}

/// Writes frames as `rgb_NNNN.png`, `depth_NNNN.pfm`, `poses.txt` and `manifest.txt`.
pub fn write_dataset(dir: &Path, frames: &[FrameRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(frames.len());
    let mut poses = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let (h, w) = (f.rgb.height(), f.rgb.width());
        let rgb = PathBuf::from(format!("rgb_{i:04}.png"));
        write_png(&dir.join(&rgb), &f.rgb.tensor().to_vec_f64(), w, h)?;
        let depth = match &f.depth {
            Some(d) => {
                let p = PathBuf::from(format!("depth_{i:04}.pfm"));
                let v: Vec<f32> = d.tensor().to_vec_f64().iter().map(|&x| x as f32).collect();
                write_pfm(File::create(dir.join(&p))?, &v, w, h)?;
                Some(p)
            }
            None => None,
        };
        let pose = f.pose.map(|p| {
            poses.push(p);
            poses.len() - 1
        });
        entries.push(ManifestEntry { rgb, depth, pose });
    }
    write_poses(File::create(dir.join("poses.txt"))?, &poses)?;
    std::fs::write(dir.join("manifest.txt"), format_manifest(&entries))?;
    Ok(())
}

/// Frames listed in a manifest, loaded lazily in order.
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    poses: Vec<PoseSE3>,
    next: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<FrameRecord> {
        let e = &self.entries[i];
        let path = self.root.join(&e.rgb);
        let (rgb, w, h) = read_png(&path)?;
        if w != 2 * h {
            return Err(Error::ingest(&path, format!("aspect: equirect frames need W = 2H, got {w}x{h}")));
        }
        let depth = match &e.depth {
            Some(p) => {
                let path = self.root.join(p);
                let (d, dw, dh) = read_pfm(&path)?;
                if (dw, dh) != (w, h) {
                    return Err(Error::ingest(&path, format!("depth is {dw}x{dh}, color is {w}x{h}")));
                }
                let d: Vec<f64> = d.iter().map(|&x| x as f64).collect();
                Some(EquirectImage::new(Tensor::from_f64(d, &[1, h, w])?)?)
            }
            None => None,
        };
        let pose = match e.pose {
            Some(k) => Some(*self.poses.get(k).ok_or_else(|| Error::ingest(&self.root, format!("pose index {k} out of range")))?),
            None => None,
        };
        Ok(FrameRecord { rgb: EquirectImage::new(Tensor::from_f64(rgb, &[3, h, w])?)?, depth, pose, index: i })
    }
}

impl Iterator for Dataset {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.entries.len() {
            return None;
        }
        self.next += 1;
        Some(self.load(self.next - 1))
    }
}

/// Opens the dataset described by `manifest` (relative to `root` when not absolute).
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Dataset> {
    let mpath = if manifest.is_absolute() { manifest.to_path_buf() } else { root.join(manifest) };
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::ingest(&mpath, e.to_string()))?;
    let entries = parse_manifest(&text, &mpath)?;
    let poses_path = root.join("poses.txt");
    let poses = if entries.iter().any(|e| e.pose.is_some()) { read_poses(&poses_path)? } else { Vec::new() };
    Ok(Dataset { root: root.to_path_buf(), entries, poses, next: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{relative_pose, SphereDirection};

    fn analytic(theta: f64, phi: f64) -> f64 {
        let scene = SceneSpec::cube(0, 2.0, 1.0);
        scene.trace(&[0.0; 3], &unproject(SphereDirection::new(theta, phi))).0
    }

    #[test]
    fn center_of_cube_distances() {
        assert_eq!(analytic(0.0, 0.0), 1.0);
        assert!((analytic(PI / 4.0, 0.0) - 2f64.sqrt()).abs() < 1e-12);
        assert!((analytic(0.0, PI / 4.0) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_ray_march() {
        let mut scene = SceneSpec::random(7, 1.0);
        scene.block = Some(Aabb { min: [0.6, -1.0, 0.6], max: [1.2, 0.2, 1.1] });
        let pose = PoseSE3::exp(&[0.0, 0.4, 0.0], &[-0.2, 0.1, 0.1]);
        let f = render_frame(&scene, &pose, 16, 0).unwrap();
        let depth = f.depth.unwrap().tensor().to_vec_f64();
        let grid = PixelGrid::equirect(16).unwrap();
        let inside = |p: &Vec3| {
            scene.room.contains(p) && !scene.block.unwrap().contains(p)
        };
        for (i, &d) in depth.iter().enumerate().step_by(7) {
            let dir = mat_vec(&pose.r, &unproject(grid.direction((i % 32) as f64, (i / 32) as f64)));
            let at = |t: f64| [pose.t[0] + t * dir[0], pose.t[1] + t * dir[1], pose.t[2] + t * dir[2]];
            let (mut lo, mut hi) = (0.0, 0.0);
            while inside(&at(hi)) {
                lo = hi;
                hi += 0.01;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(&at(mid)) { lo = mid } else { hi = mid }
            }
            assert!((d - lo).abs() < 1e-9, "pixel {i}: {d} vs {lo}");
        }
    }

    #[test]
    fn cube_depth_symmetric_under_half_turn() {
        let scene = SceneSpec::cube(0, 2.0, 1.0);
        let f = render_frame(&scene, &PoseSE3::identity(), 16, 0).unwrap();
        let d = f.depth.unwrap().tensor().to_vec_f64();
        for v in 0..16 {
            for u in 0..32 {
                assert!((d[v * 32 + u] - d[v * 32 + (u + 16) % 32]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn camera_outside_rejected() {
        let scene = SceneSpec::cube(0, 2.0, 1.0);
        assert!(matches!(render_frame(&scene, &PoseSE3::translation([1.5, 0.0, 0.0]), 8, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_strength_gives_flat_walls() {
        let scene = SceneSpec::random(3, 0.0);
        let f = render_frame(&scene, &PoseSE3::translation([0.2, 0.1, -0.3]), 16, 0).unwrap();
        let rgb = f.rgb.tensor().to_vec_f64();
        let mut colors: Vec<[u64; 3]> = (0..16 * 32).map(|i| std::array::from_fn(|c| rgb[c * 512 + i].to_bits())).collect();
        colors.sort();
        colors.dedup();
        assert!(colors.len() <= 6);
    }

    #[test]
    fn supersampling_filters_color_only() {
        let mut scene = SceneSpec::random(3, 1.0);
        let p = PoseSE3::translation([0.2, 0.1, -0.3]);
        let a = render_frame(&scene, &p, 16, 0).unwrap();
        scene.supersample = 3;
        let b = render_frame(&scene, &p, 16, 0).unwrap();
        assert_eq!(a.depth.unwrap().tensor().storage(), b.depth.unwrap().tensor().storage());
        let (ca, cb) = (a.rgb.tensor().to_vec_f64(), b.rgb.tensor().to_vec_f64());
        let mean_diff = ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ca.len() as f64;
        assert!(ca != cb && mean_diff < 0.05, "{mean_diff}");
        scene.supersample = 0;
        assert!(render_frame(&scene, &p, 16, 0).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut scene = SceneSpec::random(5, 1.0);
        scene.noise_std = 0.01;
        let p = PoseSE3::translation([0.1, 0.0, 0.2]);
        let a = render_frame(&scene, &p, 8, 3).unwrap();
        let b = render_frame(&scene, &p, 8, 3).unwrap();
        assert_eq!(a.rgb.tensor().storage(), b.rgb.tensor().storage());
    }

    #[test]
    fn block_occludes() {
        let mut scene = SceneSpec::cube(0, 4.0, 1.0);
        scene.block = Some(Aabb { min: [-0.5, -0.5, 1.0], max: [0.5, 0.5, 1.5] });
        let (t, wall) = scene.trace(&[0.0; 3], &[0.0, 0.0, 1.0]);
        assert_eq!((t, wall), (1.0, 5));
        assert!(render_frame(&scene, &PoseSE3::translation([0.0, 0.0, 1.2]), 4, 0).is_err());
    }

    #[test]
    fn relative_pose_identity() {
        let p = PoseSE3::exp(&[0.1, 0.2, -0.3], &[0.5, 0.0, 0.1]);
        let r = relative_pose(&p, &p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.r[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            assert!(r.t[i].abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneSpec::random(1, 1.0);
        let frames = make_sequence(&scene, &linear_trajectory([0.0; 3], [1.0, 0.0, 0.0], 0.05, 0.0, 3), 8).unwrap();
        write_dataset(dir.path(), &frames).unwrap();
        let ds = load_dataset(dir.path(), Path::new("manifest.txt")).unwrap();
        assert_eq!(ds.len(), 3);
        let loaded: Vec<FrameRecord> = ds.collect::<Result<_>>().unwrap();
        let d0: Vec<f32> = frames[1].depth.as_ref().unwrap().tensor().to_vec_f64().iter().map(|&x| x as f32).collect();
        let d1: Vec<f32> = loaded[1].depth.as_ref().unwrap().tensor().to_vec_f64().iter().map(|&x| x as f32).collect();
        assert_eq!(d0, d1);
        assert_eq!(loaded[2].pose, frames[2].pose);
    }

    #[test]
    fn empty_manifest_and_bad_aspect() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.txt"), "").unwrap();
        assert_eq!(load_dataset(dir.path(), Path::new("m.txt")).unwrap().count(), 0);
        write_png(&dir.path().join("sq.png"), &[0.5; 3 * 16], 4, 4).unwrap();
        std::fs::write(dir.path().join("m.txt"), "sq.png\n").unwrap();
        let mut ds = load_dataset(dir.path(), Path::new("m.txt")).unwrap();
        match ds.next().unwrap() {
            Err(Error::Ingestion { msg, .. }) => assert!(msg.contains("aspect")),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(dir.path().join("m.txt"), "missing.png\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), Path::new("m.txt")).unwrap().next().unwrap(), Err(Error::Ingestion { .. })));
    }
}
