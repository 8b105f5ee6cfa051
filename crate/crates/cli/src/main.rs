use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use spherefuse::geometry::relative_pose;
use spherefuse::io::{read_pfm, read_png, write_pfm, write_png};
use spherefuse::metrics::export_pointcloud;
use spherefuse::pipeline::{evaluate, load_depthnet, train_selfsup, train_supervised, write_report, Mode, TrainConfig};
use spherefuse::resample::{c2e, e2c, warp_to_reference, CubemapImage, EquirectImage};
use spherefuse::synth::{linear_trajectory, load_dataset, make_sequence, write_dataset, FrameRecord, SceneSpec};
use spherefuse::tensor::Tensor;
use spherefuse::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "spherefuse", version, about = "360-degree depth estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic box-room sequence to a dataset directory.
    GenSynth(GenSynth),
    /// Train DepthNet (and PoseNet in self-supervised mode).
    Train(Train),
    /// Evaluate a checkpoint against ground-truth depth.
    Eval(Eval),
    /// Convert between equirectangular and cubemap images.
    Convert(Convert),
    /// Warp one dataset frame into another's view using ground-truth depth and poses.
    Warp(Warp),
    /// Write a depth map and its colors as a binary PLY point cloud.
    ExportPly(ExportPly),
    /// Check analytic gradients of every operation against finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Camera translation per frame in meters.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Camera yaw per frame in degrees.
    #[arg(long, default_value_t = 0.0)]
    yaw_step: f64,
    #[arg(long, default_value_t = 1.0)]
    texture_strength: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Color samples per pixel along each axis (box filter).
    #[arg(long, default_value_t = 1)]
    supersample: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Manifest file, relative to the dataset directory.
    #[arg(long, default_value = "manifest.txt")]
    manifest: PathBuf,
}

#[derive(Args)]
struct Train {
    /// JSON training configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    cube_side: Option<usize>,
    #[arg(long)]
    rotation_noise_deg: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Use ground-truth poses instead of PoseNet (oracle mode).
    #[arg(long)]
    oracle_poses: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training configuration; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Median-align predictions before scoring.
    #[arg(long)]
    align: bool,
    #[arg(long)]
    report: PathBuf,
    /// Directory for per-frame point clouds.
    #[arg(long)]
    ply_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    E2c,
    C2e,
}

#[derive(Args)]
struct Convert {
    direction: Direction,
    /// PNG (color) or PFM (one channel). Cubemaps are horizontal strips of
    /// six faces in the order B, D, F, L, R, U.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Face side for e2c, panorama height for c2e.
    #[arg(long)]
    size: usize,
}

#[derive(Args)]
struct Warp {
    #[command(flatten)]
    data: DataArgs,
    /// Index of the frame whose view is synthesized.
    #[arg(long)]
    reference: usize,
    /// Index of the frame that is sampled.
    #[arg(long)]
    target: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ExportPly {
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let io = e.is_io() || matches!(e, Error::Ingestion { .. });
            ExitCode::from(if io { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Convert(a) => convert(a)?,
        Command::Warp(a) => warp(a)?,
        Command::ExportPly(a) => export_ply(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let mut scene = SceneSpec::random(a.seed, a.texture_strength);
    scene.noise_std = a.noise_std;
    scene.supersample = a.supersample;
    let dir = [0.894_427_190_999_915_9, 0.0, 0.447_213_595_499_957_9];
    let half = a.step * a.frames.saturating_sub(1) as f64 / 2.0;
    let start = [-half * dir[0], 0.0, -half * dir[2]];
    let traj = linear_trajectory(start, dir, a.step, a.yaw_step.to_radians(), a.frames);
    let frames = make_sequence(&scene, &traj, a.height)?;
    write_dataset(&a.out, &frames)?;
    std::fs::write(a.out.join("scene.json"), serde_json::to_string_pretty(&scene)?)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn load_frames(d: &DataArgs) -> Result<Vec<FrameRecord>> {
    load_dataset(&d.data, &d.manifest)?.collect()
}

/// Reads a JSON config file, applies flag overrides by key, then validates;
/// unknown keys are rejected.
fn build_config(path: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<TrainConfig> {
    let mut obj = match path {
        Some(p) => match serde_json::from_str::<Value>(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))? {
            Value::Object(m) => m,
            _ => return Err(Error::Config("configuration must be a JSON object".into())),
        },
        None => Map::new(),
    };
    for (k, v) in overrides {
        if let Some(v) = v {
            obj.insert(k.to_string(), v);
        }
    }
    TrainConfig::from_json(&Value::Object(obj).to_string())
}

fn train(a: Train) -> Result<()> {
    let cfg = build_config(
        a.config.as_deref(),
        vec![
            ("mode", a.mode.map(Value::from)),
            ("loss", a.loss.map(Value::from)),
            ("lr", a.lr.map(Value::from)),
            ("batch", a.batch.map(Value::from)),
            ("epochs", a.epochs.map(Value::from)),
            ("iterations", a.iterations.map(Value::from)),
            ("seed", a.seed.map(Value::from)),
            ("height", a.height.map(Value::from)),
            ("cube_side", a.cube_side.map(Value::from)),
            ("rotation_noise_deg", a.rotation_noise_deg.map(Value::from)),
            ("checkpoint_every", a.checkpoint_every.map(Value::from)),
            ("oracle_poses", a.oracle_poses.then_some(Value::Bool(true))),
        ],
    )?;
    let frames = load_frames(&a.data)?;
    if let Some(f) = frames.iter().find(|f| f.rgb.height() != cfg.height) {
        return Err(Error::Config(format!("frame {} has height {}, config expects {}", f.index, f.rgb.height(), cfg.height)));
    }
    let t = match cfg.mode {
        Mode::Supervised => train_supervised(cfg, &frames, Some(&a.out))?,
        Mode::Selfsup => train_selfsup(cfg, &frames, Some(&a.out))?,
    };
    let losses = t.log.losses();
    println!("trained {} steps, final loss {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let cfg_path = a.config.clone().unwrap_or_else(|| a.checkpoint.with_file_name("config.json"));
    let cfg = TrainConfig::from_json(&std::fs::read_to_string(&cfg_path)?)?;
    let net = load_depthnet(&cfg, &a.checkpoint)?;
    let frames = load_frames(&a.data)?;
    let report = evaluate(&net, &frames, a.align, a.ply_dir.as_deref())?;
    write_report(&report, &a.report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn is_pfm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// Planar image data, channel count, width and height.
fn read_image(p: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    if is_pfm(p) {
        let (d, w, h) = read_pfm(p)?;
        Ok((d.iter().map(|&x| x as f64).collect(), 1, w, h))
    } else {
        let (d, w, h) = read_png(p)?;
        Ok((d, 3, w, h))
    }
}

fn write_image(p: &Path, data: &[f64], channels: usize, w: usize, h: usize) -> Result<()> {
    if is_pfm(p) {
        if channels != 1 {
            return Err(Error::InvalidInput("PFM output holds one channel".into()));
        }
        write_pfm(File::create(p)?, &data.iter().map(|&x| x as f32).collect::<Vec<_>>(), w, h)
    } else if channels == 3 {
        write_png(p, data, w, h)
    } else {
        let rgb: Vec<f64> = (0..3).flat_map(|_| data.iter().copied()).collect();
        write_png(p, &rgb, w, h)
    }
}

fn convert(a: Convert) -> Result<()> {
    let (data, c, w, h) = read_image(&a.input)?;
    match a.direction {
        Direction::E2c => {
            let img = EquirectImage::new(Tensor::from_f64(data, &[c, h, w])?)?;
            let cube = e2c(&img, a.size)?;
            let (s, faces) = (a.size, cube.tensor().to_vec_f64());
            // [6, C, s, s] to a [C, s, 6s] strip.
            let mut strip = vec![0.0; c * s * 6 * s];
            for f in 0..6 {
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            strip[ch * s * 6 * s + y * 6 * s + f * s + x] = faces[((f * c + ch) * s + y) * s + x];
                        }
                    }
                }
            }
            write_image(&a.output, &strip, c, 6 * s, s)
        }
        Direction::C2e => {
            if w != 6 * h {
                return Err(Error::ingest(&a.input, format!("cubemap strip must be 6w x w, got {w}x{h}")));
            }
            let s = h;
            let mut faces = vec![0.0; 6 * c * s * s];
            for f in 0..6 {
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            faces[((f * c + ch) * s + y) * s + x] = data[ch * s * w + y * w + f * s + x];
                        }
                    }
                }
            }
            let cube = CubemapImage::new(Tensor::from_f64(faces, &[6, c, s, s])?)?;
            let pano = c2e(&cube, a.size)?;
            write_image(&a.output, &pano.tensor().to_vec_f64(), c, pano.width(), pano.height())
        }
    }
}

fn warp(a: Warp) -> Result<()> {
    let ds = load_dataset(&a.data.data, &a.data.manifest)?;
    for i in [a.reference, a.target] {
        if i >= ds.len() {
            return Err(Error::InvalidInput(format!("frame {i} out of range for {} frames", ds.len())));
        }
    }
    let (r, t) = (ds.load(a.reference)?, ds.load(a.target)?);
    let depth = r.depth.as_ref().ok_or_else(|| Error::InvalidInput("reference frame has no depth".into()))?;
    let (pr, pt) = match (r.pose, t.pose) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidInput("both frames need poses".into())),
    };
    let (warped, valid) = warp_to_reference(&t.rgb, depth, &relative_pose(&pr, &pt))?;
    let (wv, rv, mv) = (warped.tensor().to_vec_f64(), r.rgb.tensor().to_vec_f64(), valid.to_vec_f64());
    let n = mv.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &m) in mv.iter().enumerate() {
        if m > 0.0 {
            sum += (0..3).map(|c| (wv[c * n + i] - rv[c * n + i]).abs()).sum::<f64>() / 3.0;
            count += 1;
        }
    }
    write_image(&a.output, &wv, 3, warped.width(), warped.height())?;
    println!("mean residual {:.6} over {count} valid pixels", sum / count.max(1) as f64);
    Ok(())
}

fn export_ply(a: ExportPly) -> Result<()> {
    let (d, dc, dw, dh) = read_image(&a.depth)?;
    if dc != 1 {
        return Err(Error::InvalidInput("depth must be a PFM file".into()));
    }
    let (rgb, c, w, h) = read_image(&a.rgb)?;
    let depth = EquirectImage::new(Tensor::from_f64(d, &[1, dh, dw])?)?;
    let color = EquirectImage::new(Tensor::from_f64(rgb, &[c, h, w])?)?;
    let n = export_pointcloud(&depth, &color, &a.output)?;
    println!("wrote {n} points to {}", a.output.display());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<ExitCode> {
    let checks = gradsuite::run(a.seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        println!("{:<22} max_rel_error {:.3e}  tolerance {:.0e}  {}", c.op, c.max_rel_error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
