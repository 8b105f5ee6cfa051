//! Training, evaluation and checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthnet::{DepthNet, DepthNetConfig};
use crate::error::{Error, Result};
use crate::geometry::{relative_pose, RotationAxis};
use crate::losses::{berhu, self_supervised_loss, LossParts, LossWeights, PhotometricLoss, ScaleTerms};
use crate::metrics::{compute_metrics, export_pointcloud, median_align, DepthMetrics, EvalMask, MAX_EVAL_DEPTH};
use crate::posenet::{PoseNet, PoseNetConfig};
use crate::resample::{e2c_batch, pyramid, rotate_batch, warp_batch, EquirectImage};
use crate::synth::FrameRecord;
use crate::tensor::{
    load_module, load_optimizer, module_records, optimizer_records, read_checkpoint, write_checkpoint, Adam, CheckpointRecord, DType,
    Module, Tensor,
};

pub const NUM_SCALES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Selfsup,
}

/// Learning-rate schedule over the step budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the budget.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Photometric term for self-supervised training.
    pub loss: PhotometricLoss,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    /// Passes over the data; mode default (100 supervised, 60 self-supervised) when unset.
    pub epochs: Option<usize>,
    /// Fixed step budget; overrides `epochs`.
    pub iterations: Option<usize>,
    pub w1: f64,
    pub w2: f64,
    pub seed: u64,
    pub height: usize,
    pub cube_side: usize,
    pub widths: [usize; 4],
    pub posenet_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dtype: DType,
    /// Half-range in degrees of the random rotation applied to each
    /// supervised sample; 0 disables it.
    pub rotation_noise_deg: f64,
    pub rotation_axis: RotationAxis,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Validate on the training frames every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Oracle mode: replace PoseNet motions with ground-truth relative poses.
    pub oracle_poses: bool,
    /// Add elapsed seconds to RunLog records (breaks byte-identical logs).
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            loss: PhotometricLoss::Capl,
            lr: 3e-4,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            epochs: None,
            iterations: None,
            w1: 0.1,
            w2: 0.01,
            seed: 0,
            height: 64,
            cube_side: 32,
            widths: [16, 32, 64, 128],
            posenet_widths: [16, 32, 64, 128],
            blocks_per_stage: 1,
            alpha: 10.0,
            beta: 0.01,
            dtype: DType::F32,
            rotation_noise_deg: 0.0,
            rotation_axis: RotationAxis::Pitch,
            checkpoint_every: 0,
            eval_every: 0,
            oracle_poses: false,
            log_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.depthnet_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.rotation_noise_deg >= 0.0 && self.rotation_noise_deg <= 180.0) {
            return Err(Error::Config(format!("rotation noise {} outside [0, 180] degrees", self.rotation_noise_deg)));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.posenet_widths.contains(&0) {
            return Err(Error::Config("posenet widths must be positive".into()));
        }
        Ok(())
    }

    pub fn depthnet_config(&self) -> DepthNetConfig {
        DepthNetConfig {
            widths: self.widths,
            blocks_per_stage: self.blocks_per_stage,
            height: self.height,
            cube_side: self.cube_side,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn posenet_config(&self) -> PoseNetConfig {
        PoseNetConfig { widths: self.posenet_widths, blocks_per_stage: self.blocks_per_stage }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { w1: self.w1, w2: self.w2 }
    }

    /// Step budget for `samples` training samples.
    pub fn total_iterations(&self, samples: usize) -> usize {
        self.iterations.unwrap_or_else(|| {
            let epochs = self.epochs.unwrap_or(match self.mode {
                Mode::Supervised => 100,
                Mode::Selfsup => 60,
            });
            epochs * samples.div_ceil(self.batch)
        })
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        iter: usize,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        parts: Option<LossParts>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        elapsed_s: Option<f64>,
    },
    Validation {
        iter: usize,
        metrics: DepthMetrics,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        elapsed_s: Option<f64>,
    },
}

/// Append-only record of a run, serialized as line-delimited JSON.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Loss of every step record, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log records serialize") + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Area-averaged ground truth over valid pixels: `[N, 1, H, W]` to half size.
/// A coarse pixel is valid when any of its four children is.
pub fn downsample_depth(gt: &[f64], valid: &[bool], n: usize, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; n * h2 * w2];
    let mut ok = vec![false; n * h2 * w2];
    for b in 0..n {
        for y in 0..h2 {
            for x in 0..w2 {
                let (mut s, mut c) = (0.0, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = b * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if valid[i] {
                        s += gt[i];
                        c += 1;
                    }
                }
                let o = b * h2 * w2 + y * w2 + x;
                if c > 0 {
                    out[o] = s / c as f64;
                    ok[o] = true;
                }
            }
        }
    }
    (out, ok)
}

/// Ground truth at the four training scales as `(depth, validity)` tensors.
fn depth_targets(gt: &[f64], n: usize, h: usize, w: usize, dtype: DType) -> Result<Vec<(Tensor, Tensor)>> {
    let mut valid: Vec<bool> = gt.iter().map(|&d| d.is_finite() && d > 0.0).collect();
    let mut cur: Vec<f64> = gt.iter().zip(&valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    let (mut hs, mut ws) = (h, w);
    let mut out = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        if s > 0 {
            (cur, valid) = downsample_depth(&cur, &valid, n, hs, ws);
            hs /= 2;
            ws /= 2;
        }
        let m: Vec<f64> = valid.iter().map(|&v| f64::from(u8::from(v))).collect();
        out.push((Tensor::from_slice(&cur, &[n, 1, hs, ws], dtype)?, Tensor::from_slice(&m, &[n, 1, hs, ws], dtype)?));
    }
    Ok(out)
}

fn stack(images: &[&EquirectImage], dtype: DType) -> Result<Tensor> {
    let b: Vec<Tensor> = images.iter().map(|i| i.batched().map(|t| t.to_dtype(dtype))).collect::<Result<_>>()?;
    Tensor::concat(&b.iter().collect::<Vec<_>>(), 0)
}

fn pose_tensors(poses: &[crate::geometry::PoseSE3], dtype: DType) -> Result<(Tensor, Tensor)> {
    let r: Vec<f64> = poses.iter().flat_map(|p| p.r.iter().flatten().copied()).collect();
    let t: Vec<f64> = poses.iter().flat_map(|p| p.t).collect();
    Ok((Tensor::from_slice(&r, &[poses.len(), 3, 3], dtype)?, Tensor::from_slice(&t, &[poses.len(), 3], dtype)?))
}

/// Warped neighbors for one self-supervised step.
pub struct Views<'a> {
    /// Image pyramids, finest first.
    pub reference: &'a [Tensor],
    pub prev: &'a [Tensor],
    pub next: &'a [Tensor],
}

/// Objective of one self-supervised step given depths, motions (reference
/// to neighbor) and occlusion masks at every scale.
pub fn selfsup_objective(
    views: &Views<'_>,
    depths: &[Tensor],
    to_prev: (&Tensor, &Tensor),
    to_next: (&Tensor, &Tensor),
    masks: &[Tensor],
    kind: PhotometricLoss,
    weights: LossWeights,
) -> Result<(Tensor, LossParts)> {
    let mut warped = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        let (wp, vp) = warp_batch(&views.prev[s], &depths[s], to_prev.0, to_prev.1)?;
        let (wn, vn) = warp_batch(&views.next[s], &depths[s], to_next.0, to_next.1)?;
        warped.push((wp, wn, masks[s].mul(&vp.mul(&vn)?)?));
    }
    let terms: Vec<ScaleTerms> = (0..NUM_SCALES)
        .map(|s| ScaleTerms {
            reference: &views.reference[s],
            warp_prev: &warped[s].0,
            warp_next: &warped[s].1,
            mask: &warped[s].2,
            raw_mask: Some(&masks[s]),
            depth: &depths[s],
        })
        .collect();
    self_supervised_loss(&terms, kind, weights)
}

/// Photometric objective of a triplet with ground-truth depth and poses in
/// place of network outputs and all-ones masks.
pub fn oracle_objective(triplet: [&FrameRecord; 3], kind: PhotometricLoss, dtype: DType) -> Result<LossParts> {
    let [prev, reference, next] = triplet;
    let need = |f: &FrameRecord| f.pose.ok_or_else(|| Error::Config(format!("frame {} has no pose", f.index)));
    let (pp, pr, pn) = (need(prev)?, need(reference)?, need(next)?);
    let gt = reference.depth.as_ref().ok_or_else(|| Error::Config("reference frame has no depth".into()))?;
    let (h, w) = (gt.height(), gt.width());
    let depths: Vec<Tensor> = depth_targets(&gt.tensor().to_vec_f64(), 1, h, w, dtype)?.into_iter().map(|(d, _)| d).collect();
    let r = pyramid(&stack(&[&reference.rgb], dtype)?, NUM_SCALES)?;
    let p = pyramid(&stack(&[&prev.rgb], dtype)?, NUM_SCALES)?;
    let n = pyramid(&stack(&[&next.rgb], dtype)?, NUM_SCALES)?;
    let (rp, tp) = pose_tensors(&[relative_pose(&pr, &pp)], dtype)?;
    let (rn, tn) = pose_tensors(&[relative_pose(&pr, &pn)], dtype)?;
    let masks: Vec<Tensor> = depths.iter().map(|d| Tensor::ones(d.shape(), dtype)).collect();
    let views = Views { reference: &r, prev: &p, next: &n };
    Ok(selfsup_objective(&views, &depths, (&rp, &tp), (&rn, &tn), &masks, kind, LossWeights::default())?.1)
}

/// Networks, optimizer state and log of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub depthnet: DepthNet,
    pub posenet: Option<PoseNet>,
    pub adam: Adam,
    pub log: RunLog,
    rng: ChaCha8Rng,
    iter: usize,
    /// Step budget used by the learning-rate schedule.
    pub budget: usize,
    start: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let depthnet = DepthNet::new(cfg.depthnet_config(), cfg.dtype, cfg.seed)?;
        let posenet = match cfg.mode {
            Mode::Supervised => None,
            Mode::Selfsup => Some(PoseNet::new(cfg.posenet_config(), cfg.dtype, cfg.seed.wrapping_add(1))?),
        };
        Ok(Self {
            adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4ed),
            cfg,
            depthnet,
            posenet,
            log: RunLog::default(),
            iter: 0,
            budget: 0,
            start: Instant::now(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    fn elapsed(&self) -> Option<f64> {
        self.cfg.log_wall_clock.then(|| self.start.elapsed().as_secs_f64())
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module> {
        let mut v: Vec<&mut dyn Module> = vec![&mut self.depthnet];
        if let Some(p) = self.posenet.as_mut() {
            v.push(p);
        }
        v
    }

    fn modules(&self) -> Vec<&dyn Module> {
        let mut v: Vec<&dyn Module> = vec![&self.depthnet];
        if let Some(p) = self.posenet.as_ref() {
            v.push(p);
        }
        v
    }

    fn apply_update(&mut self) -> Result<()> {
        let mut adam = self.adam.clone();
        adam.lr = match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine => {
                let frac = (self.iter as f64 / self.budget.max(1) as f64).min(1.0);
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        };
        adam.step(&mut self.modules_mut())?;
        self.adam = adam;
        Ok(())
    }

    /// Optional rotation noise: the same random rotation for color and depth of each sample.
    pub fn augment(&mut self, rgb: &Tensor, depth: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.cfg.rotation_noise_deg == 0.0 {
            return Ok((rgb.clone(), depth.clone()));
        }
        let n = rgb.shape()[0];
        let range = self.cfg.rotation_noise_deg.to_radians();
        let (mut rs, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for b in 0..n {
            let m = self.cfg.rotation_axis.matrix(self.rng.random_range(-range..=range))?;
            rs.push(rotate_batch(&rgb.narrow(0, b, 1)?, &m)?);
            ds.push(rotate_batch(&depth.narrow(0, b, 1)?, &m)?);
        }
        Ok((Tensor::concat(&rs.iter().collect::<Vec<_>>(), 0)?, Tensor::concat(&ds.iter().collect::<Vec<_>>(), 0)?))
    }

    /// One supervised step on `frames`; returns the loss.
    pub fn step_supervised(&mut self, frames: &[&FrameRecord]) -> Result<f64> {
        let dtype = self.cfg.dtype;
        let depths: Vec<&EquirectImage> =
            frames.iter().map(|f| f.depth.as_ref().ok_or_else(|| Error::Config(format!("frame {} has no depth", f.index)))).collect::<Result<_>>()?;
        let rgb = stack(&frames.iter().map(|f| &f.rgb).collect::<Vec<_>>(), dtype)?;
        let gt = stack(&depths, DType::F64)?;
        let (rgb, gt) = self.augment(&rgb, &gt)?;
        let (n, _, h, w) = rgb.dims4()?;
        let out = self.depthnet.forward(&rgb, &e2c_batch(&rgb, self.cfg.cube_side)?)?;
        let targets = depth_targets(&gt.to_vec_f64(), n, h, w, dtype)?;
        let mut loss: Option<Tensor> = None;
        for (d, (g, m)) in out.scales.iter().zip(&targets) {
            let l = berhu(d, g, m)?;
            loss = Some(match loss {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let loss = loss.expect("four scales");
        let value = loss.to_scalar()?;
        loss.backward()?;
        self.apply_update()?;
        self.iter += 1;
        let elapsed_s = self.elapsed();
        self.log.push(LogRecord::Step { iter: self.iter, loss: value, parts: None, elapsed_s });
        Ok(value)
    }

    /// One self-supervised step on `(prev, reference, next)` triplets.
    pub fn step_selfsup(&mut self, triplets: &[[&FrameRecord; 3]]) -> Result<LossParts> {
        let dtype = self.cfg.dtype;
        let posenet = self.posenet.as_ref().ok_or_else(|| Error::Config("self-supervised step without a pose network".into()))?;
        let pick = |k: usize| stack(&triplets.iter().map(|t| &t[k].rgb).collect::<Vec<_>>(), dtype);
        let (prev, reference, next) = (pick(0)?, pick(1)?, pick(2)?);
        let out = self.depthnet.forward(&reference, &e2c_batch(&reference, self.cfg.cube_side)?)?;
        let pose = posenet.forward(&prev, &reference, &next)?;
        let oracle = if self.cfg.oracle_poses {
            let rel = |k: usize| -> Result<Vec<_>> {
                triplets
                    .iter()
                    .map(|t| match (t[1].pose, t[k].pose) {
                        (Some(a), Some(b)) => Ok(relative_pose(&a, &b)),
                        _ => Err(Error::Config("oracle poses need ground-truth poses".into())),
                    })
                    .collect()
            };
            Some((pose_tensors(&rel(0)?, dtype)?, pose_tensors(&rel(2)?, dtype)?))
        } else {
            None
        };
        let (to_prev, to_next) = match &oracle {
            Some(((rp, tp), (rn, tn))) => ((rp, tp), (rn, tn)),
            None => ((&pose.prev.r, &pose.prev.t), (&pose.next.r, &pose.next.t)),
        };
        let (pr, pp, pn) = (pyramid(&reference, NUM_SCALES)?, pyramid(&prev, NUM_SCALES)?, pyramid(&next, NUM_SCALES)?);
        let views = Views { reference: &pr, prev: &pp, next: &pn };
        let (loss, parts) = selfsup_objective(&views, &out.scales, to_prev, to_next, &pose.masks, self.cfg.loss, self.cfg.weights())?;
        loss.backward()?;
        self.apply_update()?;
        self.iter += 1;
        let elapsed_s = self.elapsed();
        self.log.push(LogRecord::Step { iter: self.iter, loss: parts.total, parts: Some(parts), elapsed_s });
        Ok(parts)
    }

    /// Finest-scale depth for one panorama.
    pub fn predict(&self, rgb: &EquirectImage) -> Result<Vec<f64>> {
        predict(&self.depthnet, rgb)
    }

    pub fn validate_on(&mut self, frames: &[FrameRecord], align: bool) -> Result<DepthMetrics> {
        let report = evaluate(&self.depthnet, frames, align, None)?;
        let elapsed_s = self.elapsed();
        self.log.push(LogRecord::Validation { iter: self.iter, metrics: report.mean, elapsed_s });
        Ok(report.mean)
    }

    pub fn checkpoint_records(&self) -> Vec<CheckpointRecord> {
        let mut r = Vec::new();
        for m in self.modules() {
            r.extend(module_records(m));
        }
        r.extend(optimizer_records(&self.adam, &self.modules()));
        r
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.checkpoint_records())
    }

    /// Rebuilds a trainer from `cfg` and restores parameters and optimizer state.
    pub fn restore(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let records = read_checkpoint(BufReader::new(File::open(path)?))?;
        let mut t = Self::new(cfg)?;
        for m in t.modules_mut() {
            load_module(m, &records)?;
        }
        let mut adam = t.adam.clone();
        load_optimizer(&mut adam, &mut t.modules_mut(), &records)?;
        t.adam = adam;
        t.iter = t.adam.steps_taken() as usize;
        Ok(t)
    }

    fn write_outputs(&self, dir: &Path, name: &str) -> Result<()> {
        self.save(&dir.join(name))?;
        std::fs::write(dir.join("runlog.jsonl"), self.log.to_jsonl())?;
        Ok(())
    }
}

/// Loads only the depth network from a checkpoint.
pub fn load_depthnet(cfg: &TrainConfig, path: &Path) -> Result<DepthNet> {
    let records = read_checkpoint(BufReader::new(File::open(path)?))?;
    let mut net = DepthNet::new(cfg.depthnet_config(), cfg.dtype, cfg.seed)?;
    load_module(&mut net, &records)?;
    Ok(net)
}

pub fn predict(net: &DepthNet, rgb: &EquirectImage) -> Result<Vec<f64>> {
    let mut dt = DType::F32;
    net.visit(&mut |p| dt = p.tensor().dtype());
    let x = stack(&[rgb], dt)?;
    let out = net.forward(&x, &e2c_batch(&x, net.config.cube_side)?)?;
    Ok(out.scales[0].to_vec_f64())
}

fn prepare_output(out: Option<&Path>, cfg: &TrainConfig) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    Ok(())
}

fn batches(rng: &mut ChaCha8Rng, order: &mut Vec<usize>, pool: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch.min(pool) {
        if order.is_empty() {
            *order = (0..pool).collect();
            order.shuffle(rng);
            order.reverse();
        }
        out.push(order.pop().expect("refilled"));
    }
    out
}

fn after_step(t: &mut Trainer, frames: &[FrameRecord], out: Option<&Path>, align: bool) -> Result<()> {
    let i = t.iteration();
    if t.cfg.eval_every > 0 && i.is_multiple_of(t.cfg.eval_every) && frames.iter().all(|f| f.depth.is_some()) {
        t.validate_on(frames, align)?;
    }
    if let Some(dir) = out {
        if t.cfg.checkpoint_every > 0 && i.is_multiple_of(t.cfg.checkpoint_every) {
            t.save(&dir.join(format!("ckpt_{i:06}.bin")))?;
        }
    }
    Ok(())
}

/// Supervised training with multi-scale berHu. Writes `config.json`,
/// `checkpoint.bin` and `runlog.jsonl` to `out` when given.
pub fn train_supervised(cfg: TrainConfig, frames: &[FrameRecord], out: Option<&Path>) -> Result<Trainer> {
    if cfg.mode != Mode::Supervised {
        return Err(Error::Config("train_supervised needs mode = supervised".into()));
    }
    if frames.is_empty() {
        return Err(Error::EmptyBatch("no training frames".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.depth.is_none()) {
        return Err(Error::Config(format!("supervised training needs depth; frame {} has none", f.index)));
    }
    prepare_output(out, &cfg)?;
    let total = cfg.total_iterations(frames.len());
    let mut t = Trainer::new(cfg)?;
    t.budget = total;
    let mut order = Vec::new();
    for _ in 0..total {
        let idx = batches(&mut t.rng, &mut order, frames.len(), t.cfg.batch);
        let batch: Vec<&FrameRecord> = idx.iter().map(|&i| &frames[i]).collect();
        t.step_supervised(&batch)?;
        after_step(&mut t, frames, out, false)?;
    }
    if let Some(dir) = out {
        t.write_outputs(dir, "checkpoint.bin")?;
    }
    Ok(t)
}

/// Self-supervised training on consecutive triplets of `frames`.
pub fn train_selfsup(cfg: TrainConfig, frames: &[FrameRecord], out: Option<&Path>) -> Result<Trainer> {
    if cfg.mode != Mode::Selfsup {
        return Err(Error::Config("train_selfsup needs mode = selfsup".into()));
    }
    if frames.len() < 3 {
        return Err(Error::ingest("<sequence>", format!("self-supervised training needs at least 3 frames, got {}", frames.len())));
    }
    prepare_output(out, &cfg)?;
    let centers = frames.len() - 2;
    let total = cfg.total_iterations(centers);
    let mut t = Trainer::new(cfg)?;
    t.budget = total;
    let mut order = Vec::new();
    for _ in 0..total {
        let idx = batches(&mut t.rng, &mut order, centers, t.cfg.batch);
        let triplets: Vec<[&FrameRecord; 3]> = idx.iter().map(|&i| [&frames[i], &frames[i + 1], &frames[i + 2]]).collect();
        t.step_selfsup(&triplets)?;
        after_step(&mut t, frames, out, true)?;
    }
    if let Some(dir) = out {
        t.write_outputs(dir, "checkpoint.bin")?;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aligned: bool,
    pub per_frame: Vec<(usize, DepthMetrics)>,
    pub mean: DepthMetrics,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("frames {}  median alignment {}\n", self.per_frame.len(), if self.aligned { "on" } else { "off" });
        let row = |m: &DepthMetrics| {
            format!(
                "{:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>8.4} {:>8.4} {:>8.4}",
                m.mae, m.mre, m.rmse, m.rmse_log10, m.delta1, m.delta2, m.delta3
            )
        };
        s += &format!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}\n", "frame", "mae", "mre", "rmse", "rmse_log", "d1", "d2", "d3");
        for (i, m) in &self.per_frame {
            s += &format!("{i:>6} {}\n", row(m));
        }
        s += &format!("{:>6} {}\n", "mean", row(&self.mean));
        s
    }
}

/// Metrics of a predicted depth map against ground truth, optionally median-aligned first.
pub fn frame_metrics(pred: &[f64], gt: &[f64], align: bool) -> Result<(DepthMetrics, Vec<f64>)> {
    let mask = EvalMask::from_truth(gt, MAX_EVAL_DEPTH);
    let d = if align { median_align(pred, gt, &mask)? } else { pred.to_vec() };
    Ok((compute_metrics(&d, gt, &mask)?, d))
}

/// Per-frame metrics and their unweighted mean. With `ply_dir`, also writes
/// one point cloud per frame from the (aligned) prediction.
pub fn evaluate(net: &DepthNet, frames: &[FrameRecord], align: bool, ply_dir: Option<&Path>) -> Result<EvalReport> {
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let gt = f.depth.as_ref().ok_or_else(|| Error::Config(format!("frame {} has no ground-truth depth", f.index)))?;
        let pred = predict(net, &f.rgb)?;
        let (m, d) = frame_metrics(&pred, &gt.tensor().to_vec_f64(), align)?;
        if let Some(dir) = ply_dir {
            std::fs::create_dir_all(dir)?;
            let depth = EquirectImage::new(Tensor::from_f64(d, &[1, gt.height(), gt.width()])?)?;
            export_pointcloud(&depth, &f.rgb, &dir.join(format!("frame_{:04}.ply", f.index)))?;
        }
        per_frame.push((f.index, m));
    }
    let mean = DepthMetrics::mean(&per_frame.iter().map(|(_, m)| *m).collect::<Vec<_>>())?;
    Ok(EvalReport { aligned: align, per_frame, mean })
}

/// Saves a report as text next to its JSON form.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(report.to_text().as_bytes())?;
    let json: PathBuf = path.with_extension("json");
    std::fs::write(json, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{linear_trajectory, make_sequence, SceneSpec};

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            height: 16,
            cube_side: 16,
            widths: [4, 4, 4, 4],
            posenet_widths: [4, 4, 4, 4],
            batch: 2,
            iterations: Some(3),
            ..Default::default()
        }
    }

    fn frames(n: usize) -> Vec<FrameRecord> {
        let scene = SceneSpec::random(2, 1.0);
        make_sequence(&scene, &linear_trajectory([0.0; 3], [1.0, 0.0, 0.3], 0.05, 0.01, n), 16).unwrap()
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(TrainConfig::from_json(r#"{"lerning_rate": 0.1}"#), Err(Error::Config(_))));
        let c = TrainConfig::from_json(r#"{"mode": "selfsup", "loss": "spl", "batch": 2}"#).unwrap();
        assert_eq!((c.mode, c.loss, c.batch, c.lr), (Mode::Selfsup, PhotometricLoss::Spl, 2, 3e-4));
        assert_eq!(c.total_iterations(10), 60 * 5);
    }

    #[test]
    fn downsample_averages_valid_children() {
        let gt = [1.0, 3.0, 0.0, 5.0, 2.0, 2.0, 0.0, 0.0];
        let valid = [true, true, false, true, true, true, false, false];
        let (d, v) = downsample_depth(&gt, &valid, 1, 2, 4);
        assert_eq!(d, vec![2.0, 5.0]);
        assert_eq!(v, vec![true, true]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let f = frames(2);
        let cfg = TrainConfig { lr: 0.0, ..tiny(Mode::Supervised) };
        let before = crate::tensor::snapshot(&Trainer::new(cfg.clone()).unwrap().depthnet);
        let t = train_supervised(cfg, &f, None).unwrap();
        assert_eq!(crate::tensor::snapshot(&t.depthnet), before);
    }

    #[test]
    fn supervised_rejects_missing_depth() {
        let mut f = frames(2);
        f[1].depth = None;
        assert!(matches!(train_supervised(tiny(Mode::Supervised), &f, None), Err(Error::Config(_))));
    }

    #[test]
    fn selfsup_needs_three_frames() {
        assert!(matches!(train_selfsup(tiny(Mode::Selfsup), &frames(2), None), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn selfsup_runs_and_is_deterministic() {
        let f = frames(4);
        let a = train_selfsup(tiny(Mode::Selfsup), &f, None).unwrap();
        let b = train_selfsup(tiny(Mode::Selfsup), &f, None).unwrap();
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.log.losses().len(), 3);
        assert!(a.log.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_rotation_noise_is_identity() {
        let mut t = Trainer::new(tiny(Mode::Supervised)).unwrap();
        let f = frames(1);
        let x = f[0].rgb.batched().unwrap();
        let d = f[0].depth.as_ref().unwrap().batched().unwrap();
        let (x2, d2) = t.augment(&x, &d).unwrap();
        assert_eq!(x2.storage(), x.storage());
        assert_eq!(d2.storage(), d.storage());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let f = frames(2);
        let cfg = tiny(Mode::Supervised);
        let t = train_supervised(cfg.clone(), &f, Some(dir.path())).unwrap();
        let before = evaluate(&t.depthnet, &f, false, None).unwrap();
        let net = load_depthnet(&cfg, &dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(evaluate(&net, &f, false, None).unwrap(), before);
        let restored = Trainer::restore(cfg.clone(), &dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(restored.iteration(), 3);
        let wider = TrainConfig { widths: [8, 4, 4, 4], ..cfg };
        assert!(matches!(load_depthnet(&wider, &dir.path().join("checkpoint.bin")), Err(Error::Checkpoint(_))));
        let log = RunLog::parse(&std::fs::read_to_string(dir.path().join("runlog.jsonl")).unwrap()).unwrap();
        assert_eq!(log, t.log);
    }

    #[test]
    fn oracle_objective_is_small() {
        let f = frames(3);
        let parts = oracle_objective([&f[0], &f[1], &f[2]], PhotometricLoss::Capl, DType::F64).unwrap();
        assert!(parts.photometric < 1e-2, "{parts:?}");
    }
}
