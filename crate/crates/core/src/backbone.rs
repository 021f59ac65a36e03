//! Small hierarchical encoders producing the four-level feature pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Init, LayerNorm, Module};
use crate::ssm::{Ss2d, Ss2dConfig};
use crate::tensor::init::Rng;
use crate::tensor::{Conv2dOptions, Float, Tensor};

const INIT: Init = Init::TruncNormal(0.02);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Residual 3x3 conv blocks.
    #[default]
    Conv,
    /// Pre-norm residual scan blocks.
    Ss2d,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(EncoderKind::Conv),
            "ss2d" => Ok(EncoderKind::Ss2d),
            other => Err(Error::InvalidArgument(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub channels: Vec<usize>,
    pub depths: Vec<usize>,
    pub ss2d: Ss2dConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conv,
            channels: vec![96, 192, 384, 768],
            depths: vec![2, 2, 4, 2],
            ss2d: Ss2dConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn micro() -> Self {
        EncoderConfig {
            channels: vec![8, 16, 32, 64],
            ss2d: Ss2dConfig { d_state: 8, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.depths.len() != 4 {
            return Err(Error::Config("encoder needs 4 widths and 4 depths".into()));
        }
        if self.channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return Err(Error::Config(format!("encoder widths {:?} must be even and >= 2", self.channels)));
        }
        Ok(())
    }
}

/// Two stride-2 3x3 convs to quarter resolution.
#[derive(Debug, Clone)]
pub struct Stem<T: Float> {
    pub conv1: Conv2d<T>,
    pub norm1: LayerNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Float> Stem<T> {
    pub fn new(rng: &mut Rng, channels: usize) -> Self {
        let mid = channels / 2;
        Stem {
            conv1: Conv2d::new(rng, 3, mid, 3, Conv2dOptions::strided(2, 1), true, INIT),
            norm1: LayerNorm::new(mid),
            conv2: Conv2d::new(rng, mid, channels, 3, Conv2dOptions::strided(2, 1), true, INIT),
            norm2: LayerNorm::new(channels),
        }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("stem expects 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be a positive multiple of 32")));
        }
        let x = self.norm1.forward(&self.conv1.forward(image)?)?.silu();
        self.norm2.forward(&self.conv2.forward(&x)?)
    }
}

impl<T: Float> Module<T> for Stem<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }
}

#[derive(Debug, Clone)]
pub enum Block<T: Float> {
    /// `x + conv(silu(norm(conv(x))))`
    Conv { conv1: Conv2d<T>, norm: LayerNorm<T>, conv2: Conv2d<T> },
    /// `x + ss2d(norm(x))`
    Scan { norm: LayerNorm<T>, scan: Box<Ss2d<T>> },
}

impl<T: Float> Block<T> {
    fn new(rng: &mut Rng, kind: EncoderKind, c: usize, ss2d: Ss2dConfig) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Conv => Block::Conv {
                conv1: Conv2d::new(rng, c, c, 3, Conv2dOptions::padded(1), true, INIT),
                norm: LayerNorm::new(c),
                conv2: Conv2d::new(rng, c, c, 3, Conv2dOptions::padded(1), true, INIT),
            },
            EncoderKind::Ss2d => Block::Scan { norm: LayerNorm::new(c), scan: Box::new(Ss2d::new(rng, c, ss2d)?) },
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = match self {
            Block::Conv { conv1, norm, conv2 } => conv2.forward(&norm.forward(&conv1.forward(x)?)?.silu())?,
            Block::Scan { norm, scan } => scan.forward(&norm.forward(x)?)?,
        };
        x.add(&r)
    }
}

impl<T: Float> Module<T> for Block<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Block::Conv { conv1, norm, conv2 } => {
                conv1.visit(&join(prefix, "conv1"), f);
                norm.visit(&join(prefix, "norm"), f);
                conv2.visit(&join(prefix, "conv2"), f);
            }
            Block::Scan { norm, scan } => {
                norm.visit(&join(prefix, "norm"), f);
                scan.visit(&join(prefix, "scan"), f);
            }
        }
    }
}

/// Stride-2 3x3 conv and norm between stages.
#[derive(Debug, Clone)]
pub struct Downsample<T: Float> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Float> Module<T> for Downsample<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Float> {
    pub cfg: EncoderConfig,
    pub stem: Stem<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub downsamples: Vec<Downsample<T>>,
}

impl<T: Float> Encoder<T> {
    pub fn new(rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Stem::new(rng, cfg.channels[0]);
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for l in 0..4 {
            let c = cfg.channels[l];
            stages.push((0..cfg.depths[l]).map(|_| Block::new(rng, cfg.kind, c, cfg.ss2d)).collect::<Result<_>>()?);
            if l < 3 {
                let next = cfg.channels[l + 1];
                downsamples.push(Downsample {
                    conv: Conv2d::new(rng, c, next, 3, Conv2dOptions::strided(2, 1), true, INIT),
                    norm: LayerNorm::new(next),
                });
            }
        }
        Ok(Encoder { cfg: cfg.clone(), stem, stages, downsamples })
    }

    /// `[E_1, E_2, E_3, E_4]` at strides 4, 8, 16 and 32.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = self.stem.forward(image)?;
        let mut pyramid = Vec::with_capacity(4);
        for (l, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(&x)?;
            }
            pyramid.push(x.clone());
            if let Some(d) = self.downsamples.get(l) {
                x = d.norm.forward(&d.conv.forward(&x)?)?;
            }
        }
        Ok(pyramid)
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.iter_mut().enumerate().for_each(|(l, s)| s.visit(&join(prefix, &format!("stages.{l}")), f));
        self.downsamples.visit(&join(prefix, "downsamples"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_strides() {
        let mut rng = Rng::seeded(1);
        let stem = Stem::<f32>::new(&mut rng, 8);
        let y = stem.forward(&Tensor::zeros(&[1, 3, 64, 128])).unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 32]);
        assert!(stem.forward(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let mut rng = Rng::seeded(2);
        let stem = Stem::<f64>::new(&mut rng, 8);
        let y = stem.forward(&Tensor::full(&[1, 3, 64, 64], 0.7)).unwrap();
        // Zero padding only touches the outer ring of each stride-2 conv.
        for c in 0..8 {
            let plane = &y.data()[c * 256..(c + 1) * 256];
            let v = plane[16 + 1];
            for i in 1..16 {
                for j in 1..16 {
                    assert!((plane[i * 16 + j] - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn both_kinds_give_identical_pyramid_shapes() {
        let mut rng = Rng::seeded(3);
        let img = rng.normal_tensor::<f32>(&[2, 3, 64, 128], 1.0);
        let mut shapes = Vec::new();
        for kind in [EncoderKind::Conv, EncoderKind::Ss2d] {
            let cfg = EncoderConfig { kind, depths: vec![1, 1, 1, 1], ..EncoderConfig::micro() };
            let p = Encoder::<f32>::new(&mut rng, &cfg).unwrap().forward(&img).unwrap();
            shapes.push(p.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
        }
        assert_eq!(shapes[0], shapes[1]);
        assert_eq!(shapes[0], vec![vec![2, 8, 16, 32], vec![2, 16, 8, 16], vec![2, 32, 4, 8], vec![2, 64, 2, 4]]);
        assert!("mlp".parse::<EncoderKind>().is_err());
    }
}
