//! Depth evaluation: error metrics, median alignment, the depth cutoff and
//! point-cloud export.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject, PixelGrid, SphereDirection};
use crate::io::{write_ply, PlyPoint};
use crate::resample::{DepthMap, EquirectImage};

/// Ground truth beyond this distance (meters) is ignored.
pub const MAX_EVAL_DEPTH: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mae: f64,
    pub mre: f64,
    pub rmse: f64,
    pub rmse_log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    /// Unweighted mean of per-frame metrics.
    pub fn mean(frames: &[DepthMetrics]) -> Result<DepthMetrics> {
        if frames.is_empty() {
            return Err(Error::EmptyBatch("no frames to aggregate".into()));
        }
        let n = frames.len() as f64;
        let avg = |f: fn(&DepthMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        Ok(DepthMetrics {
            mae: avg(|m| m.mae),
            mre: avg(|m| m.mre),
            rmse: avg(|m| m.rmse),
            rmse_log10: avg(|m| m.rmse_log10),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
        })
    }
}

/// Pixels whose ground truth is finite, positive and at most the cutoff.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalMask {
    pub valid: Vec<bool>,
}

impl EvalMask {
    pub fn from_truth(gt: &[f64], max_depth: f64) -> Self {
        Self { valid: gt.iter().map(|&g| g.is_finite() && g > 0.0 && g <= max_depth).collect() }
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn masked<'a>(v: &'a [f64], mask: &'a EvalMask) -> impl Iterator<Item = f64> + 'a {
    v.iter().zip(&mask.valid).filter(|(_, &m)| m).map(|(&x, _)| x)
}

fn check_lengths(d: &[f64], gt: &[f64], mask: &EvalMask) -> Result<()> {
    if d.len() != gt.len() || d.len() != mask.valid.len() {
        return Err(Error::dim("pixels", format!("prediction {}, truth {}, mask {}", d.len(), gt.len(), mask.valid.len())));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyBatch("evaluation mask is empty".into()));
    }
    Ok(())
}

/// Median with the lower-middle element for even counts.
pub fn lower_median(mut v: Vec<f64>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyBatch("median of an empty set".into()));
    }
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// Scales `d` so its masked median matches that of `gt`.
pub fn median_align(d: &[f64], gt: &[f64], mask: &EvalMask) -> Result<Vec<f64>> {
    check_lengths(d, gt, mask)?;
    let md = lower_median(masked(d, mask).collect())?;
    let mg = lower_median(masked(gt, mask).collect())?;
    if !(md > 0.0) || !md.is_finite() {
        return Err(Error::DegeneratePrediction(format!("prediction median is {md}")));
    }
    let s = mg / md;
    Ok(d.iter().map(|x| x * s).collect())
}

pub fn compute_metrics(d: &[f64], gt: &[f64], mask: &EvalMask) -> Result<DepthMetrics> {
    check_lengths(d, gt, mask)?;
    let pairs: Vec<(f64, f64)> = masked(d, mask).zip(masked(gt, mask)).collect();
    if let Some(&(p, _)) = pairs.iter().find(|(p, _)| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidInput(format!("prediction {p} inside the evaluation mask")));
    }
    let n = pairs.len() as f64;
    let mut m = DepthMetrics::default();
    let (mut se, mut sl) = (0.0, 0.0);
    for &(p, g) in &pairs {
        let e = p - g;
        m.mae += e.abs();
        m.mre += e.abs() / g;
        se += e * e;
        let l = p.log10() - g.log10();
        sl += l * l;
        let ratio = (p / g).max(g / p);
        m.delta1 += (ratio < 1.25) as u8 as f64;
        m.delta2 += (ratio < 1.25 * 1.25) as u8 as f64;
        m.delta3 += (ratio < 1.25 * 1.25 * 1.25) as u8 as f64;
    }
    m.mae /= n;
    m.mre /= n;
    m.rmse = (se / n).sqrt();
    m.rmse_log10 = (sl / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

/// Peak signal-to-noise ratio in dB over paired samples.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

/// `depth · unproject(d)`.
pub fn surface_point(d: SphereDirection, depth: f64) -> [f64; 3] {
    unproject(d).map(|x| depth * x)
}

/// Points `depth · unproject(pixel)` for every pixel with finite positive depth,
/// colored from `rgb` (`[3, H, W]`; gray when it has one channel).
pub fn pointcloud(depth: &DepthMap, rgb: &EquirectImage) -> Result<Vec<PlyPoint>> {
    let (h, w) = (depth.height(), depth.width());
    if (rgb.height(), rgb.width()) != (h, w) {
        return Err(Error::dim("spatial", format!("depth {h}x{w} vs color {}x{}", rgb.height(), rgb.width())));
    }
    let d = depth.tensor().to_vec_f64();
    let c = rgb.tensor().to_vec_f64();
    let ch = rgb.channels();
    let grid = PixelGrid { height: h, width: w };
    let mut out = Vec::new();
    for (i, &z) in d.iter().enumerate().take(h * w) {
        if !(z > 0.0 && z.is_finite()) {
            continue;
        }
        let q = surface_point(grid.direction((i % w) as f64, (i / w) as f64), z);
        let col = |k: usize| (c[k.min(ch - 1) * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(PlyPoint { xyz: q.map(|x| x as f32), rgb: [col(0), col(1), col(2)] });
    }
    Ok(out)
}

/// Writes [`pointcloud`] as binary PLY; returns the vertex count.
pub fn export_pointcloud(depth: &DepthMap, rgb: &EquirectImage, path: &Path) -> Result<usize> {
    let pts = pointcloud(depth, rgb)?;
    write_ply(File::create(path)?, &pts)?;
    Ok(pts.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};
    use proptest::prelude::*;

    fn all(n: usize) -> EvalMask {
        EvalMask { valid: vec![true; n] }
    }

    #[test]
    fn perfect_prediction() {
        let gt = vec![1.0, 2.0, 3.5, 9.0];
        let m = compute_metrics(&gt, &gt, &all(4)).unwrap();
        assert_eq!(m, DepthMetrics { delta1: 1.0, delta2: 1.0, delta3: 1.0, ..Default::default() });
    }

    #[test]
    fn delta_threshold_boundary() {
        let gt = vec![1.0, 2.0, 4.0];
        let below: Vec<f64> = gt.iter().map(|g| 1.25 * g - 1e-9).collect();
        let above: Vec<f64> = gt.iter().map(|g| 1.25 * g + 1e-9).collect();
        assert_eq!(compute_metrics(&below, &gt, &all(3)).unwrap().delta1, 1.0);
        let m = compute_metrics(&above, &gt, &all(3)).unwrap();
        assert_eq!((m.delta1, m.delta2), (0.0, 1.0));
    }

    #[test]
    fn alignment_cancels_scale() {
        let gt = vec![1.0, 2.0, 3.0, 4.0];
        let d: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        assert_eq!(median_align(&d, &gt, &all(4)).unwrap(), gt);
        assert_eq!(median_align(&gt, &gt, &all(4)).unwrap(), gt);
        assert!(matches!(median_align(&[0.0, 0.0, 1.0], &[1.0; 3], &all(3)), Err(Error::DegeneratePrediction(_))));
    }

    #[test]
    fn lower_middle_median() {
        assert_eq!(lower_median(vec![4.0, 1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lower_median(vec![5.0]).unwrap(), 5.0);
    }

    #[test]
    fn cutoff_mask() {
        let m = EvalMask::from_truth(&[0.5, 10.0, 10.5, f64::INFINITY, 0.0, f64::NAN], MAX_EVAL_DEPTH);
        assert_eq!(m.valid, vec![true, true, false, false, false, false]);
        assert!(matches!(compute_metrics(&[1.0], &[20.0], &EvalMask::from_truth(&[20.0], 10.0)), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn pointcloud_geometry() {
        let h = 4;
        let depth = EquirectImage::new(Tensor::full(&[1, h, 2 * h], 1.0, DType::F64)).unwrap();
        let rgb = EquirectImage::new(Tensor::full(&[3, h, 2 * h], 0.5, DType::F64)).unwrap();
        let pts = pointcloud(&depth, &rgb).unwrap();
        assert_eq!(pts.len(), 2 * h * h);
        for p in &pts {
            let r = p.xyz.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            assert!((r - 1.0).abs() < 1e-6);
        }
        // A missing pixel is skipped.
        let mut d = vec![2.0; 2 * h * h];
        d[0] = f64::INFINITY;
        let depth = EquirectImage::new(Tensor::from_f64(d, &[1, h, 2 * h]).unwrap()).unwrap();
        assert_eq!(pointcloud(&depth, &rgb).unwrap().len(), 2 * h * h - 1);
    }

    #[test]
    fn forward_axis_point() {
        let p = surface_point(SphereDirection::new(0.0, 0.0), 2.0);
        assert_eq!(p, [0.0, 0.0, 2.0]);
    }

    proptest! {
        #[test]
        fn invariants(v in prop::collection::vec((0.1..20.0f64, 0.1..9.9f64), 1..64)) {
            let (d, gt): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mask = all(d.len());
            let m = compute_metrics(&d, &gt, &mask).unwrap();
            prop_assert!(m.mae <= m.rmse + 1e-12);
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0 && m.delta1 >= 0.0);
            let a = median_align(&d, &gt, &mask).unwrap();
            prop_assert!((lower_median(a.clone()).unwrap() - lower_median(gt.clone()).unwrap()).abs() < 1e-9);
            let b = median_align(&a, &gt, &mask).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs());
            }
        }
    }
}
