//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spherefuse::geometry::{
    cube_to_equirect_coord, equirect_to_cube_coord, project, relative_pose, reproject, unproject, PixelGrid, PoseSE3,
    SphereDirection, Vec3,
};
use spherefuse::gradsuite;
use spherefuse::losses::{berhu, berhu_value, capl, local_std, mask_bce, smooth, spl, PhotometricLoss, MASK_EPS};
use spherefuse::metrics::{compute_metrics, median_align, psnr, EvalMask, MAX_EVAL_DEPTH};
use spherefuse::pipeline::{
    frame_metrics, train_selfsup, train_supervised, LogRecord, LrSchedule, Mode, TrainConfig, Trainer,
};
use spherefuse::resample::{c2e, e2c, warp_to_reference};
use spherefuse::synth::{linear_trajectory, make_sequence, spherical_texture, Aabb, FrameRecord, SceneSpec};
use spherefuse::tensor::{DType, Tensor};

// Pinned tolerances and budgets.
const GEOMETRY_TOL: f64 = 1e-9;
const GEOMETRY_SAMPLES: usize = 10_000;
const GEOMETRY_TIME: Duration = Duration::from_secs(5);
const PSNR_MIN_DB: f64 = 30.0;
const GRAD_TIME: Duration = Duration::from_secs(60);
const WARP_RESIDUAL_MAX: f64 = 1e-2;
const LOSS_TOL: f64 = 1e-6;
const KNEE_EPS: f64 = 1e-7;
const OVERFIT_RMSE_MAX: f64 = 0.05;
const OVERFIT_ITERS: usize = 2000;
const OVERFIT_TIME: Duration = Duration::from_secs(15 * 60);
const SELFSUP_MRE_MAX: f64 = 0.25;
const SELFSUP_CAPL_RATIO_MAX: f64 = 0.5;
const SELFSUP_ITERS: usize = 5000;
const DEGENERATION_ITERS: usize = 3000;
const DEGENERATION_NOISE: f64 = 0.01;
const METRIC_TOL: f64 = 1e-9;

type Criterion = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt().atan2(d)
}

fn random_direction(rng: &mut ChaCha8Rng) -> SphereDirection {
    let z: f64 = rng.random_range(-1.0..1.0);
    SphereDirection::new(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), z.asin())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = PixelGrid::equirect(512).unwrap();
    let mut worst = [0.0f64; 4];
    for _ in 0..GEOMETRY_SAMPLES {
        let d = random_direction(&mut rng);
        let q = unproject(d);
        // project ∘ unproject
        worst[0] = worst[0].max(angle_between(&q, &unproject(project(&q).unwrap())));
        // pixel coordinates and back
        let (u, v) = grid.coord(d);
        worst[1] = worst[1].max(angle_between(&q, &unproject(grid.direction(u, v))));
        // E2C then C2E
        let w = 256.0;
        let (face, p) = equirect_to_cube_coord(d, w);
        worst[2] = worst[2].max(angle_between(&q, &unproject(cube_to_equirect_coord(face, p, w))));
        // reproject there and back
        let depth = rng.random_range(0.5..8.0);
        let omega = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let t = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let pose = PoseSE3::exp(&omega, &t);
        let (d2, z2) = reproject(d, depth, &pose).unwrap();
        let (d3, z3) = reproject(d2, z2, &pose.inverse()).unwrap();
        worst[3] = worst[3].max(angle_between(&q, &unproject(d3))).max((z3 - depth).abs() / depth);
    }
    let elapsed = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max <= GEOMETRY_TOL && elapsed < GEOMETRY_TIME,
        format!("max error {max:.2e} (project {:.1e}, pixel {:.1e}, cube {:.1e}, reproject {:.1e}) in {elapsed:.2?}", worst[0], worst[1], worst[2], worst[3]),
    )
}

fn criterion_2() -> Outcome {
    let img = spherical_texture(256, 11, DType::F64).unwrap();
    let back = c2e(&e2c(&img, 256).unwrap(), 256).unwrap();
    let rows = 4 * 512..(256 - 4) * 512;
    let (a, b) = (img.tensor().to_vec_f64(), back.tensor().to_vec_f64());
    let db = psnr(&a[rows.clone()], &b[rows], 1.0);
    outcome(db >= PSNR_MIN_DB, format!("PSNR {db:.2} dB (threshold {PSNR_MIN_DB})"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let checks = gradsuite::run(0).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.op).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < GRAD_TIME,
        format!("{} ops, worst rel error {worst:.2e}, failed {failed:?}, {elapsed:.2?}", checks.len()),
    )
}

fn criterion_4() -> Outcome {
    let scene = SceneSpec::random(9, 1.0);
    let f = make_sequence(&scene, &linear_trajectory([0.0, 0.0, 0.0], [1.0, 0.0, 0.5], 0.05, 0.0, 2), 64).unwrap();
    let depth = f[0].depth.as_ref().unwrap();
    let (same, _) = warp_to_reference(&f[0].rgb, depth, &PoseSE3::identity()).unwrap();
    let exact = same.tensor().to_vec_f64() == f[0].rgb.tensor().to_vec_f64();
    let rel = relative_pose(f[0].pose.as_ref().unwrap(), f[1].pose.as_ref().unwrap());
    let (warped, valid) = warp_to_reference(&f[1].rgb, depth, &rel).unwrap();
    let (a, b, m) = (warped.tensor().to_vec_f64(), f[0].rgb.tensor().to_vec_f64(), valid.to_vec_f64());
    let n = m.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in (0..n).filter(|&i| m[i] > 0.0) {
        sum += (0..3).map(|c| (a[c * n + i] - b[c * n + i]).abs()).sum::<f64>() / 3.0;
        count += 1;
    }
    let residual = sum / count as f64;
    outcome(
        exact && residual < WARP_RESIDUAL_MAX,
        format!("identity exact {exact}, oracle residual {residual:.2e} over {:.1}% pixels", 100.0 * count as f64 / n as f64),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Tensor, Vec<f64>) {
    let v: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect();
    (Tensor::from_f64(v.clone(), shape).unwrap(), v)
}

fn brute_std(gray: &[f64], h: usize, w: usize, v: usize, u: usize) -> f64 {
    let mut win = Vec::with_capacity(25);
    for dv in -2i64..=2 {
        for du in -2i64..=2 {
            let y = (v as i64 + dv).clamp(0, h as i64 - 1) as usize;
            let x = (u as i64 + du).rem_euclid(w as i64) as usize;
            win.push(gray[y * w + x]);
        }
    }
    let mean = win.iter().sum::<f64>() / 25.0;
    (win.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 25.0).sqrt()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, h, w) = (2, 3, 8, 16);
    let (r, rv) = random_tensor(&mut rng, &[n, c, h, w], 0.0, 1.0);
    let (p, pv) = random_tensor(&mut rng, &[n, c, h, w], 0.0, 1.0);
    let (q, qv) = random_tensor(&mut rng, &[n, c, h, w], 0.0, 1.0);
    let (x, xv) = random_tensor(&mut rng, &[n, 1, h, w], 0.0, 1.0);
    let (d, dv) = random_tensor(&mut rng, &[n, 1, h, w], 0.5, 5.0);
    let (g, gv) = random_tensor(&mut rng, &[n, 1, h, w], 0.5, 5.0);
    let hw = h * w;
    let (mut capl_ref, mut spl_ref, mut bce_ref, mut sm_ref) = (0.0, 0.0, 0.0, 0.0);
    for b in 0..n {
        let gray: Vec<f64> = (0..hw).map(|i| (0..c).map(|ch| rv[(b * c + ch) * hw + i]).sum::<f64>() / c as f64).collect();
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let delta = (0..c)
                    .map(|ch| {
                        let k = (b * c + ch) * hw + i;
                        (rv[k] - pv[k]).abs() + (rv[k] - qv[k]).abs()
                    })
                    .sum::<f64>()
                    / c as f64;
                let xm = xv[b * hw + i];
                capl_ref += xm * brute_std(&gray, h, w, v, u) * delta;
                spl_ref += xm * delta;
                bce_ref += -xm.clamp(MASK_EPS, 1.0 - MASK_EPS).ln();
                let dd = |vv: usize, uu: usize| dv[b * hw + vv * w + uu];
                sm_ref += (dd(v, (u + 1) % w) - dd(v, u)).abs() + (dd((v + 1).min(h - 1), u) - dd(v, u)).abs();
            }
        }
    }
    let count = (n * hw) as f64;
    let (capl_ref, spl_ref, bce_ref, sm_ref) = (capl_ref / count, spl_ref / count, bce_ref / count, sm_ref / count);
    let cmax = 0.2 * dv.iter().zip(&gv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let berhu_ref = dv.iter().zip(&gv).map(|(a, b)| berhu_brute(a - b, cmax)).sum::<f64>() / count;

    let ones = Tensor::ones(&[n, 1, h, w], DType::F64);
    let errs = [
        ("capl", capl(&r, &p, &q, &x, &local_std(&r).unwrap()).unwrap().to_scalar().unwrap() - capl_ref),
        ("spl", spl(&r, &p, &q, &x).unwrap().to_scalar().unwrap() - spl_ref),
        ("mask", mask_bce(&x).unwrap().to_scalar().unwrap() - bce_ref),
        ("smooth", smooth(&d).unwrap().to_scalar().unwrap() - sm_ref),
        ("berhu", berhu(&d, &g, &ones).unwrap().to_scalar().unwrap() - berhu_ref),
    ];
    let worst = errs.iter().map(|(_, e)| e.abs()).fold(0.0, f64::max);

    let knee_c = 0.37;
    let (below, above) = (berhu_value(knee_c - KNEE_EPS, knee_c), berhu_value(knee_c + KNEE_EPS, knee_c));
    let knee_ok = (below - knee_c).abs() <= 2.0 * KNEE_EPS && (above - knee_c).abs() <= 2.0 * KNEE_EPS;

    let flat = Tensor::full(&[n, c, h, w], 0.4, DType::F64);
    let flat_capl = capl(&flat, &p, &q, &x, &local_std(&flat).unwrap()).unwrap().to_scalar().unwrap();

    outcome(
        worst < LOSS_TOL && knee_ok && flat_capl == 0.0,
        format!("worst oracle gap {worst:.1e} {errs:?}, knee {below:.9}/{above:.9}, flat CAPL {flat_capl}")
            .replace('"', ""),
    )
}

fn berhu_brute(e: f64, c: f64) -> f64 {
    if e.abs() <= c {
        e.abs()
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}

fn criterion_6() -> Outcome {
    let scene = SceneSpec::random(3, 1.0);
    let frames = make_sequence(&scene, &linear_trajectory([-0.45, 0.0, -0.2], [1.0, 0.0, 0.4], 0.3, 0.3, 4), 64).unwrap();
    let cfg = overfit_config();
    let start = Instant::now();
    let trainer = train_supervised(cfg, &frames, None).unwrap();
    let elapsed = start.elapsed();
    let rmse = training_rmse(&trainer, &frames);
    outcome(
        rmse < OVERFIT_RMSE_MAX && elapsed < OVERFIT_TIME,
        format!("training RMSE {rmse:.4} m after {OVERFIT_ITERS} iterations in {elapsed:.1?}"),
    )
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        mode: Mode::Supervised,
        batch: 4,
        iterations: Some(OVERFIT_ITERS),
        lr: 1e-3,
        lr_schedule: LrSchedule::Cosine,
        ..Default::default()
    }
}

fn training_rmse(trainer: &Trainer, frames: &[FrameRecord]) -> f64 {
    let mut total = 0.0;
    for f in frames {
        let gt = f.depth.as_ref().unwrap().tensor().to_vec_f64();
        let (m, _) = frame_metrics(&trainer.predict(&f.rgb).unwrap(), &gt, false).unwrap();
        total += m.rmse;
    }
    total / frames.len() as f64
}

/// Textured corridor walked straight down its axis at 0.2 m per frame.
fn corridor(flat_walls: &[usize], noise_std: f64) -> (SceneSpec, Vec<PoseSE3>) {
    let mut scene = SceneSpec::random(7, 1.0);
    scene.room = Aabb { min: [-1.6, -1.4, -6.0], max: [1.6, 1.2, 6.0] };
    scene.supersample = 4;
    scene.noise_std = noise_std;
    for &k in flat_walls {
        scene.walls[k].strength = 0.0;
    }
    (scene, linear_trajectory([0.1, 0.0, -4.9], [0.0, 0.0, 1.0], 0.2, 0.0, 50))
}

fn selfsup_config(loss: PhotometricLoss, iterations: usize) -> TrainConfig {
    TrainConfig {
        mode: Mode::Selfsup,
        loss,
        batch: 1,
        iterations: Some(iterations),
        widths: [8, 16, 32, 64],
        posenet_widths: [8, 16, 32, 64],
        ..Default::default()
    }
}

fn photometric_trace(trainer: &Trainer) -> Vec<f64> {
    trainer
        .log
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { parts: Some(p), .. } => Some(p.photometric),
            _ => None,
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let (scene, traj) = corridor(&[], 0.0);
    let frames = make_sequence(&scene, &traj, 64).unwrap();
    let start = Instant::now();
    let mut trainer = train_selfsup(selfsup_config(PhotometricLoss::Capl, SELFSUP_ITERS), &frames, None).unwrap();
    let elapsed = start.elapsed();
    let m = trainer.validate_on(&frames, true).unwrap();
    // Single steps are noisy at batch 1, so both ends are 100-step means.
    let capl = photometric_trace(&trainer);
    let mean = |r: std::ops::Range<usize>| capl[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let (early, last) = (mean(50..150), mean(capl.len() - 100..capl.len()));
    let ratio = last / early;
    outcome(
        m.mre <= SELFSUP_MRE_MAX && ratio <= SELFSUP_CAPL_RATIO_MAX,
        format!("aligned MRE {:.4}, CAPL {early:.5} around step 100 -> {last:.5} final (ratio {ratio:.3}), {elapsed:.1?}", m.mre),
    )
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn criterion_8() -> Outcome {
    // +x wall, ceiling and far end are flat; sensor noise is all they show.
    let (mut scene, traj) = corridor(&[1, 3, 5], 0.0);
    let clean = make_sequence(&scene, &traj, 64).unwrap();
    scene.noise_std = DEGENERATION_NOISE;
    let frames = make_sequence(&scene, &traj, 64).unwrap();
    // Flat pixels: the whole 5x5 window of the noise-free render is one color.
    let flat: Vec<Vec<bool>> = clean
        .iter()
        .map(|f| local_std(&f.rgb.batched().unwrap()).unwrap().to_vec_f64().iter().map(|&s| s == 0.0).collect())
        .collect();
    let mut stds = Vec::new();
    for loss in [PhotometricLoss::Capl, PhotometricLoss::Spl] {
        let trainer = train_selfsup(selfsup_config(loss, DEGENERATION_ITERS), &frames, None).unwrap();
        let mut rel = Vec::new();
        for (f, mask) in frames.iter().zip(&flat) {
            let gt = f.depth.as_ref().unwrap().tensor().to_vec_f64();
            let pred = median_align(&trainer.predict(&f.rgb).unwrap(), &gt, &EvalMask::from_truth(&gt, MAX_EVAL_DEPTH)).unwrap();
            rel.extend((0..gt.len()).filter(|&i| mask[i]).map(|i| pred[i] / gt[i] - 1.0));
        }
        stds.push(population_std(&rel));
    }
    outcome(
        stds[0] < stds[1],
        format!("relative depth error std on flat walls: CAPL {:.4} vs SPL {:.4}", stds[0], stds[1]),
    )
}

/// Sorting-based reimplementation of alignment and metrics.
fn scalar_metrics(d: &[f64], gt: &[f64], align: bool) -> [f64; 7] {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].is_finite() && gt[i] > 0.0 && gt[i] <= MAX_EVAL_DEPTH).collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[(v.len() - 1) / 2]
    };
    let s = if align { median(idx.iter().map(|&i| gt[i]).collect()) / median(idx.iter().map(|&i| d[i]).collect()) } else { 1.0 };
    let mut m = [0.0; 7];
    for &i in &idx {
        let (p, g) = (d[i] * s, gt[i]);
        m[0] += (p - g).abs();
        m[1] += (p - g).abs() / g;
        m[2] += (p - g).powi(2);
        m[3] += (p.log10() - g.log10()).powi(2);
        let ratio = if p > g { p / g } else { g / p };
        for (k, thr) in [1.25, 1.5625, 1.953125].iter().enumerate() {
            if ratio < *thr {
                m[4 + k] += 1.0;
            }
        }
    }
    let n = idx.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m[2] = m[2].sqrt();
    m[3] = m[3].sqrt();
    m
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst, mut invariants) = (0.0f64, true);
    for _ in 0..1000 {
        let len = rng.random_range(1..200);
        let gt: Vec<f64> = (0..len)
            .map(|_| match rng.random_range(0..20) {
                0 => 0.0,
                1 => f64::NAN,
                2 => rng.random_range(10.5..20.0),
                _ => rng.random_range(0.1..9.9),
            })
            .collect();
        let mask = EvalMask::from_truth(&gt, MAX_EVAL_DEPTH);
        if mask.count() == 0 {
            continue;
        }
        let d: Vec<f64> = gt.iter().map(|g| if g.is_finite() && *g > 0.0 { g * rng.random_range(0.5..2.0) } else { 1.0 }).collect();
        for align in [false, true] {
            let pred = if align { median_align(&d, &gt, &mask).unwrap() } else { d.clone() };
            let m = compute_metrics(&pred, &gt, &mask).unwrap();
            let got = [m.mae, m.mre, m.rmse, m.rmse_log10, m.delta1, m.delta2, m.delta3];
            let want = scalar_metrics(&d, &gt, align);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
            invariants &= m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.mae <= m.rmse + 1e-15;
        }
    }
    outcome(worst <= METRIC_TOL && invariants, format!("worst gap {worst:.1e}, invariants hold {invariants}"))
}

fn criterion_10() -> Outcome {
    let scene = SceneSpec::random(4, 1.0);
    let frames = make_sequence(&scene, &linear_trajectory([-0.1, 0.0, 0.0], [1.0, 0.0, 0.2], 0.05, 0.0, 4), 16).unwrap();
    let mut identical = true;
    for mode in [Mode::Supervised, Mode::Selfsup] {
        let cfg = TrainConfig {
            mode,
            height: 16,
            cube_side: 16,
            widths: [4, 4, 8, 8],
            posenet_widths: [4, 4, 8, 8],
            batch: 2,
            iterations: Some(4),
            rotation_noise_deg: 20.0,
            ..Default::default()
        };
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for dir in &dirs {
            match mode {
                Mode::Supervised => train_supervised(cfg.clone(), &frames, Some(dir.path())).map(|_| ()),
                Mode::Selfsup => train_selfsup(cfg.clone(), &frames, Some(dir.path())).map(|_| ()),
            }
            .unwrap();
        }
        for name in ["checkpoint.bin", "runlog.jsonl"] {
            let read = |i: usize| std::fs::read(dirs[i].path().join(name)).unwrap();
            identical &= read(0) == read(1);
        }
    }
    outcome(identical, format!("checkpoints and run logs byte-identical: {identical}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, Criterion); 10] = [
        ("geometry roundtrips", criterion_1),
        ("resampling fidelity", criterion_2),
        ("gradient suite", criterion_3),
        ("warp identity and oracle", criterion_4),
        ("loss oracles", criterion_5),
        ("supervised overfit", criterion_6),
        ("self-supervised run", criterion_7),
        ("CAPL vs SPL on textureless walls", criterion_8),
        ("metrics oracle", criterion_9),
        ("determinism", criterion_10),
    ];
    // ACCEPTANCE_CRITERIA=1,2,5 runs a subset; the rest print SKIP.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_CRITERIA").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            println!("SKIP {:2} {name}", i + 1);
            continue;
        }
        let o = f();
        println!("{} {:2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
