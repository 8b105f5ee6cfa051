//! Convolution layers shared by the networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Conv2dSpec, DType, Module, PadMode, Parameter, Storage, Tensor};

/// Convolution with bias, uniformly initialized in `±1/√fan_in`.
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub spec: Conv2dSpec,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64, dtype: DType) -> Storage {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Storage::from_f64(dtype, &v)
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        mode: PadMode,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = Parameter::new(format!("{name}.w"), uniform(rng, cout * cin * k * k, bound, dtype), &[cout, cin, k, k])?;
        let bias = Parameter::new(format!("{name}.b"), uniform(rng, cout, bound, dtype), &[cout])?;
        Ok(Self { weight, bias, spec: Conv2dSpec::same(k, k, stride, mode) })
    }

    /// All-zero weights and bias.
    pub fn zeros(name: &str, cin: usize, cout: usize, k: usize, mode: PadMode, dtype: DType) -> Result<Self> {
        let weight = Parameter::new(format!("{name}.w"), Storage::zeros(dtype, cout * cin * k * k), &[cout, cin, k, k])?;
        let bias = Parameter::new(format!("{name}.b"), Storage::zeros(dtype, cout), &[cout])?;
        Ok(Self { weight, bias, spec: Conv2dSpec::same(k, k, 1, mode) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(self.weight.tensor(), Some(self.bias.tensor()), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// `relu(conv2(relu(conv1(x))) + skip(x))`; `skip` is a strided 1×1
/// projection when the shape changes, identity otherwise.
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, mode: PadMode, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, mode, dtype, rng)?;
        let conv2 = Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, mode, dtype, rng)?;
        let skip = if cin != cout || stride != 1 {
            Some(Conv2d::new(&format!("{name}.skip"), cin, cout, 1, stride, mode, dtype, rng)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, skip })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        y.add(&s)?.relu()
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// A stage of `blocks` residual blocks, the first one strided.
pub struct Stage {
    pub blocks: Vec<ResBlock>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, blocks: usize, mode: PadMode, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut v = Vec::with_capacity(blocks);
        for b in 0..blocks.max(1) {
            let (ci, s) = if b == 0 { (cin, stride) } else { (cout, 1) };
            v.push(ResBlock::new(&format!("{name}.block{b}"), ci, cout, s, mode, dtype, rng)?);
        }
        Ok(Self { blocks: v })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

impl Module for Stage {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new("c", 4, 8, 3, 1, PadMode::Zero, DType::F64, &mut rng).unwrap();
        let bound = 1.0 / 6.0;
        assert!(c.weight.tensor().to_vec_f64().iter().all(|w| w.abs() < bound));
        assert_eq!(c.num_parameters(), 8 * 4 * 9 + 8);
    }

    #[test]
    fn names_follow_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Stage::new("enc.stage1", 4, 8, 2, 2, PadMode::WrapLongitude, DType::F32, &mut rng).unwrap();
        let mut names = Vec::new();
        s.visit(&mut |p| names.push(p.name().to_string()));
        assert_eq!(names[0], "enc.stage1.block0.conv1.w");
        assert!(names.contains(&"enc.stage1.block0.skip.w".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("enc.stage1.block1.skip")));
    }

    #[test]
    fn strided_block_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ResBlock::new("b", 3, 6, 2, PadMode::WrapLongitude, DType::F32, &mut rng).unwrap();
        let y = b.forward(&Tensor::ones(&[2, 3, 8, 16], DType::F32)).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 8]);
    }
}
