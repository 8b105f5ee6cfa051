//! Bi-projection depth network: twin residual encoders over the equirect and
//! cubemap inputs, a fusion module after every stage, and a pixel-shuffle
//! decoder with sigmoid-lifted depth heads at four scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Stage};
use crate::resample::{c2e_batch, e2c_batch};
use crate::tensor::{DType, Module, PadMode, Parameter, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthNetConfig {
    /// Channel width of each of the four encoder stages.
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
    /// Equirect input height; the width is twice this.
    pub height: usize,
    /// Cubemap face side of the input.
    pub cube_side: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128], blocks_per_stage: 1, height: 64, cube_side: 32, alpha: 10.0, beta: 0.01 }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!("alpha and beta must be positive, got {} and {}", self.alpha, self.beta)));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.height == 0 || !self.height.is_multiple_of(16) {
            return Err(Error::Config(format!("height {} must be a positive multiple of 16", self.height)));
        }
        if self.cube_side == 0 || !self.cube_side.is_multiple_of(16) {
            return Err(Error::Config(format!("cube side {} must be a positive multiple of 16", self.cube_side)));
        }
        Ok(())
    }
}

/// `d = 1 / (α·sigmoid(f) + β)`.
pub fn lift_depth(f: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    f.sigmoid()?.affine(alpha, beta)?.recip()
}

/// The three fusion convolutions of one stage.
pub struct FusionModule {
    pub h_e: Conv2d,
    pub h_c: Conv2d,
    pub h_f: Conv2d,
}

/// Result of [`FusionModule::fuse`].
pub struct Fused {
    pub equi: Tensor,
    pub cube: Tensor,
    pub fuse: Tensor,
}

impl FusionModule {
    pub fn new(name: &str, c: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mk = |n: &str, rng: &mut ChaCha8Rng| Conv2d::new(&format!("{name}.{n}"), 2 * c, c, 3, 1, PadMode::WrapLongitude, dtype, rng);
        Ok(Self { h_e: mk("h_e", rng)?, h_c: mk("h_c", rng)?, h_f: mk("h_f", rng)? })
    }

    pub fn zeros(name: &str, c: usize, dtype: DType) -> Result<Self> {
        let mk = |n: &str| Conv2d::zeros(&format!("{name}.{n}"), 2 * c, c, 3, PadMode::WrapLongitude, dtype);
        Ok(Self { h_e: mk("h_e")?, h_c: mk("h_c")?, h_f: mk("h_f")? })
    }

    /// `f_equi [N,C,h,2h]`, `f_cube [6N,C,w,w]`:
    ///
    /// ```text
    /// x      = f_equi ⊕ C2E(f_cube)
    /// equi'  = f_equi + H_e(x)
    /// cube'  = E2C(C2E(f_cube) + H_c(x))
    /// fuse   = H_f(x)
    /// ```
    pub fn fuse(&self, f_equi: &Tensor, f_cube: &Tensor) -> Result<Fused> {
        self.fuse_inner(f_equi, f_cube, true)
    }

    /// Same as [`fuse`](Self::fuse) with the `H_e` and `H_c` terms dropped.
    pub fn fuse_without_exchange(&self, f_equi: &Tensor, f_cube: &Tensor) -> Result<Fused> {
        self.fuse_inner(f_equi, f_cube, false)
    }

    fn fuse_inner(&self, f_equi: &Tensor, f_cube: &Tensor, exchange: bool) -> Result<Fused> {
        let (n, c, h, w2) = f_equi.dims4()?;
        let (n6, cc, side, _) = f_cube.dims4()?;
        if n6 != 6 * n {
            return Err(Error::dim("batch", format!("{n} panoramas need {} faces, got {n6}", 6 * n)));
        }
        if cc != c {
            return Err(Error::dim("channel", format!("equirect has {c} channels, cube has {cc}")));
        }
        let from_cube = c2e_batch(f_cube, h)?;
        if from_cube.shape()[3] != w2 {
            return Err(Error::dim("width", format!("C2E gives width {}, equirect has {w2}", from_cube.shape()[3])));
        }
        let x = Tensor::concat(&[f_equi, &from_cube], 1)?;
        let fuse = self.h_f.forward(&x)?;
        if !exchange {
            return Ok(Fused { equi: f_equi.clone(), cube: e2c_batch(&from_cube, side)?, fuse });
        }
        let equi = f_equi.add(&self.h_e.forward(&x)?)?;
        let cube = e2c_batch(&from_cube.add(&self.h_c.forward(&x)?)?, side)?;
        Ok(Fused { equi, cube, fuse })
    }
}

impl Module for FusionModule {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.h_e.visit(f);
        self.h_c.visit(f);
        self.h_f.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.h_e.visit_mut(f);
        self.h_c.visit_mut(f);
        self.h_f.visit_mut(f);
    }
}

struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Encoder {
    fn new(name: &str, cfg: &DepthNetConfig, mode: PadMode, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = cfg.widths;
        let stem = Conv2d::new(&format!("{name}.stem"), 3, w[0], 3, 2, mode, dtype, rng)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (cin, stride) = if s == 0 { (w[0], 1) } else { (w[s - 1], 2) };
            stages.push(Stage::new(&format!("{name}.stage{}", s + 1), cin, w[s], stride, cfg.blocks_per_stage, mode, dtype, rng)?);
        }
        Ok(Self { stem, stages })
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        self.stages.iter().for_each(|s| s.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
    }
}

/// One decoder step: upsample ×2 by pixel shuffle, merge the skip, predict depth.
struct DecoderStage {
    up: Conv2d,
    merge: Conv2d,
    head: Conv2d,
}

impl Module for DecoderStage {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.up.visit(f);
        self.merge.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.up.visit_mut(f);
        self.merge.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Depths at four scales, finest first: `scales[s]` has height `H / 2^s`.
#[derive(Clone, Debug)]
pub struct MultiScaleDepth {
    pub scales: Vec<Tensor>,
    /// Head outputs before lifting, same layout.
    pub logits: Vec<Tensor>,
}

pub struct DepthNet {
    pub config: DepthNetConfig,
    enc_e: Encoder,
    enc_c: Encoder,
    pub fusion: Vec<FusionModule>,
    decoder: Vec<DecoderStage>,
}

impl DepthNet {
    pub fn new(config: DepthNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths;
        let enc_e = Encoder::new("depthnet.enc_e", &config, PadMode::WrapLongitude, dtype, &mut rng)?;
        let enc_c = Encoder::new("depthnet.enc_c", &config, PadMode::Zero, dtype, &mut rng)?;
        let fusion =
            (0..4).map(|s| FusionModule::new(&format!("depthnet.fuse{}", s + 1), w[s], dtype, &mut rng)).collect::<Result<_>>()?;
        // Decoder steps from the bottleneck (scale 4) to full resolution (scale 1).
        let plan = [(w[3], w[2], w[2]), (w[2], w[1], w[1]), (w[1], w[0], w[0]), (w[0], w[0], 0)];
        let mut decoder = Vec::with_capacity(4);
        for (i, &(cin, cout, skip)) in plan.iter().enumerate() {
            let s = 4 - i;
            let name = |n: &str| format!("depthnet.dec.{n}{s}");
            let wrap = PadMode::WrapLongitude;
            decoder.push(DecoderStage {
                up: Conv2d::new(&name("up"), cin, 4 * cout, 3, 1, wrap, dtype, &mut rng)?,
                merge: Conv2d::new(&name("merge"), cout + skip, cout, 3, 1, wrap, dtype, &mut rng)?,
                head: Conv2d::new(&name("head"), cout, 1, 1, 1, wrap, dtype, &mut rng)?,
            });
        }
        Ok(Self { config, enc_e, enc_c, fusion, decoder })
    }

    /// `equi [N,3,H,2H]` and its cubemap `cube [6N,3,w,w]`.
    pub fn forward(&self, equi: &Tensor, cube: &Tensor) -> Result<MultiScaleDepth> {
        self.forward_inner(equi, cube, true)
    }

    /// Forward pass with the cross-projection exchange (`H_e`, `H_c`) disabled.
    pub fn forward_without_exchange(&self, equi: &Tensor, cube: &Tensor) -> Result<MultiScaleDepth> {
        self.forward_inner(equi, cube, false)
    }

    fn forward_inner(&self, equi: &Tensor, cube: &Tensor, exchange: bool) -> Result<MultiScaleDepth> {
        let (n, c, h, w) = equi.dims4()?;
        if c != 3 {
            return Err(Error::dim("channel", format!("depthnet expects RGB input, got {c} channels")));
        }
        if h != self.config.height || w != 2 * h {
            return Err(Error::dim("spatial", format!("configured for {}x{}, got {h}x{w}", self.config.height, 2 * self.config.height)));
        }
        let (n6, c6, side, side2) = cube.dims4()?;
        if n6 != 6 * n || c6 != 3 || side != self.config.cube_side || side2 != side {
            return Err(Error::dim("cube", format!("expected [{},3,{s},{s}], got {:?}", 6 * n, cube.shape(), s = self.config.cube_side)));
        }
        let mut fe = self.enc_e.stem.forward(equi)?.relu()?;
        let mut fc = self.enc_c.stem.forward(cube)?.relu()?;
        let mut skips = Vec::with_capacity(4);
        for s in 0..4 {
            let e = self.enc_e.stages[s].forward(&fe)?;
            let c = self.enc_c.stages[s].forward(&fc)?;
            let fused = if exchange { self.fusion[s].fuse(&e, &c)? } else { self.fusion[s].fuse_without_exchange(&e, &c)? };
            fe = fused.equi;
            fc = fused.cube;
            skips.push(fused.fuse);
        }
        let mut x = skips[3].clone();
        let mut scales = Vec::with_capacity(4);
        let mut logits = Vec::with_capacity(4);
        for (i, stage) in self.decoder.iter().enumerate() {
            let up = stage.up.forward(&x)?.pixel_shuffle(2)?.relu()?;
            let merged = if i < 3 { Tensor::concat(&[&up, &skips[2 - i]], 1)? } else { up };
            x = stage.merge.forward(&merged)?.relu()?;
            let f = stage.head.forward(&x)?;
            scales.push(lift_depth(&f, self.config.alpha, self.config.beta)?);
            logits.push(f);
        }
        scales.reverse();
        logits.reverse();
        Ok(MultiScaleDepth { scales, logits })
    }
}

impl Module for DepthNet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.enc_e.visit(f);
        self.enc_c.visit(f);
        self.fusion.iter().for_each(|m| m.visit(f));
        self.decoder.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.enc_e.visit_mut(f);
        self.enc_c.visit_mut(f);
        self.fusion.iter_mut().for_each(|m| m.visit_mut(f));
        self.decoder.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Storage;

    fn small() -> DepthNetConfig {
        DepthNetConfig { widths: [4, 4, 8, 8], height: 32, cube_side: 16, ..Default::default() }
    }

    fn inputs(n: usize, h: usize, side: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let e: Vec<f64> = (0..n * 3 * h * 2 * h).map(|_| rng.random()).collect();
        let equi = Tensor::from_slice(&e, &[n, 3, h, 2 * h], DType::F32).unwrap();
        let cube = e2c_batch(&equi, side).unwrap();
        (equi, cube)
    }

    #[test]
    fn zero_head_gives_reference_depth() {
        let f = Tensor::zeros(&[1, 1, 2, 4], DType::F64);
        let d = lift_depth(&f, 10.0, 0.01).unwrap().to_vec_f64();
        assert!(d.iter().all(|&x| (x - 1.0 / 5.01).abs() < 1e-15));
    }

    #[test]
    fn zero_exchange_is_identity() {
        let m = FusionModule::zeros("f", 4, DType::F64).unwrap();
        let e = Tensor::from_f64((0..4 * 8 * 16).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 4, 8, 16]).unwrap();
        let c = Tensor::from_f64((0..6 * 4 * 4 * 4).map(|i| (i as f64 * 0.11).cos()).collect(), &[6, 4, 4, 4]).unwrap();
        let out = m.fuse(&e, &c).unwrap();
        assert_eq!(out.equi.to_vec_f64(), e.to_vec_f64());
        let rt = e2c_batch(&c2e_batch(&c, 8).unwrap(), 4).unwrap();
        assert_eq!(out.cube.to_vec_f64(), rt.to_vec_f64());
        assert!(out.fuse.to_vec_f64().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = FusionModule::new("f", 16, DType::F32, &mut rng).unwrap();
        let out = m.fuse(&Tensor::zeros(&[1, 16, 32, 64], DType::F32), &Tensor::zeros(&[6, 16, 16, 16], DType::F32)).unwrap();
        assert_eq!(out.equi.shape(), &[1, 16, 32, 64]);
        assert_eq!(out.cube.shape(), &[6, 16, 16, 16]);
        assert_eq!(out.fuse.shape(), &[1, 16, 32, 64]);
        assert!(m.fuse(&Tensor::zeros(&[1, 16, 32, 64], DType::F32), &Tensor::zeros(&[6, 8, 16, 16], DType::F32)).is_err());
    }

    #[test]
    fn scales_shapes_range_and_determinism() {
        let net = DepthNet::new(small(), DType::F32, 1).unwrap();
        let (e, c) = inputs(2, 32, 16);
        let a = net.forward(&e, &c).unwrap();
        let shapes: Vec<_> = a.scales.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 1, 32, 64], vec![2, 1, 16, 32], vec![2, 1, 8, 16], vec![2, 1, 4, 8]]);
        for s in &a.scales {
            assert!(s.to_vec_f64().iter().all(|&d| d > 1.0 / 10.01 && d < 100.0));
        }
        let b = net.forward(&e, &c).unwrap();
        for (x, y) in a.scales.iter().zip(&b.scales) {
            assert_eq!(x.storage(), y.storage());
        }
    }

    #[test]
    fn zeroed_exchange_matches_ablation() {
        let mut net = DepthNet::new(small(), DType::F64, 2).unwrap();
        net.visit_mut(&mut |p| {
            if p.name().contains(".h_e.") || p.name().contains(".h_c.") {
                p.set_data(Storage::zeros(DType::F64, p.tensor().numel())).unwrap();
            }
        });
        let (e, c) = inputs(1, 32, 16);
        let (e, c) = (e.to_dtype(DType::F64), c.to_dtype(DType::F64));
        let a = net.forward(&e, &c).unwrap();
        let b = net.forward_without_exchange(&e, &c).unwrap();
        for (x, y) in a.scales.iter().zip(&b.scales) {
            assert_eq!(x.storage(), y.storage());
        }
    }

    #[test]
    fn wrong_input_rejected() {
        let net = DepthNet::new(small(), DType::F32, 1).unwrap();
        let (e, c) = inputs(1, 32, 16);
        assert!(matches!(net.forward(&e, &c.narrow(0, 0, 5).unwrap()), Err(Error::Dim { .. })));
        assert!(matches!(net.forward(&e.narrow(1, 0, 2).unwrap(), &c), Err(Error::Dim { .. })));
    }
}
