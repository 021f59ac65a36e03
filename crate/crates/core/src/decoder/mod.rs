//! Four-stage fusion decoder and segmentation head.

mod block;
mod shuffle;

use serde::{Deserialize, Serialize};

pub use block::{BlockOptions, DmfBlock, EncoderBranch, FusionLayer, Output, Upsample};

use crate::deform::Modulation;
use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Init, LayerNorm, Module};
use crate::ssm::Ss2dConfig;
use crate::tensor::init::Rng;
use crate::tensor::{Conv2dOptions, Float, ResizeKind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Encoder widths `C_1..C_4` at strides 4, 8, 16, 32.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Number of depthwise-conv/norm/SiLU layers after concatenation.
    pub fusion_depth: usize,
    pub ss2d: Ss2dConfig,
    pub deformable: bool,
    pub modulation: Modulation,
    pub upsample: Upsample,
    /// Project the last stage's `2 C_1` channels back to `C_1`.
    pub final_proj: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: vec![96, 192, 384, 768],
            num_classes: 13,
            fusion_depth: 2,
            ss2d: Ss2dConfig::default(),
            deformable: true,
            modulation: Modulation::Sigmoid,
            upsample: Upsample::PixelShuffle,
            final_proj: true,
        }
    }
}

impl DecoderConfig {
    /// Tiny widths for tests and desk experiments.
    pub fn micro(num_classes: usize) -> Self {
        DecoderConfig {
            channels: vec![8, 16, 32, 64],
            num_classes,
            ss2d: Ss2dConfig { d_state: 8, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Config(format!("decoder needs 4 stage widths, got {}", self.channels.len())));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(Error::Config(format!("stage width {c} must be positive and even")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("class ids must fit below the ignore label 255".into()));
        }
        Ok(())
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            ss2d: self.ss2d,
            deformable: self.deformable,
            modulation: self.modulation,
            fusion_depth: self.fusion_depth,
            upsample: self.upsample,
            final_proj: self.final_proj,
        }
    }

    /// Width entering block `stage` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels[4 - stage]
    }

    /// Width of the feature handed to the head.
    pub fn out_channels(&self) -> usize {
        if self.final_proj {
            self.channels[0]
        } else {
            2 * self.channels[0]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Float> {
    pub cfg: DecoderConfig,
    pub blocks: Vec<DmfBlock<T>>,
}

impl<T: Float> Decoder<T> {
    pub fn new(rng: &mut Rng, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let opts = cfg.block_options();
        let blocks = (1..=4)
            .map(|s| {
                let next = if s < 4 { cfg.stage_channels(s + 1) } else { cfg.channels[0] };
                DmfBlock::new(rng, s, cfg.stage_channels(s), next, &opts)
            })
            .collect::<Result<_>>()?;
        Ok(Decoder { cfg: cfg.clone(), blocks })
    }

    /// Runs the blocks over `[E_1, E_2, E_3, E_4]`, starting from `D_0 = E_4`.
    pub fn forward(&self, pyramid: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.forward_stages(pyramid).map(|mut s| s.pop().expect("four stages"))
    }

    /// `[D_1, D_2, D_3, D_4]`.
    pub fn forward_stages(&self, pyramid: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if pyramid.len() != 4 {
            return Err(Error::InvalidArgument(format!("pyramid must have 4 levels, got {}", pyramid.len())));
        }
        let mut d = pyramid[3].clone();
        let mut out = Vec::with_capacity(4);
        for (s, block) in self.blocks.iter().enumerate() {
            d = block.forward(&pyramid[3 - s], &d)?;
            out.push(d.clone());
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
    }
}

/// Pointwise projection, norm and SiLU, a 3x3 classifier, then bilinear x4
/// up to input resolution.
#[derive(Debug, Clone)]
pub struct SegHead<T: Float> {
    pub linear: Conv2d<T>,
    pub norm: LayerNorm<T>,
    pub classifier: Conv2d<T>,
}

impl<T: Float> SegHead<T> {
    pub fn new(rng: &mut Rng, channels: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(SegHead {
            linear: Conv2d::pointwise(rng, channels, channels, true, Init::FanIn),
            norm: LayerNorm::new(channels),
            classifier: Conv2d::new(rng, channels, num_classes, 3, Conv2dOptions::padded(1), true, Init::FanIn),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm.forward(&self.linear.forward(x)?)?.silu();
        self.classifier.forward(&h)?.resize(4, ResizeKind::Bilinear)
    }
}

impl<T: Float> Module<T> for SegHead<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid<T: Float>(rng: &mut Rng, channels: &[usize], h: usize, w: usize) -> Vec<Tensor<T>> {
        channels
            .iter()
            .enumerate()
            .map(|(l, &c)| rng.normal_tensor(&[1, c, h >> (l + 2), w >> (l + 2)], 1.0))
            .collect()
    }

    #[test]
    fn micro_stage_shapes() {
        let mut rng = Rng::seeded(1);
        let cfg = DecoderConfig::micro(5);
        let dec = Decoder::<f32>::new(&mut rng, &cfg).unwrap();
        for (h, w) in [(32, 32), (64, 128), (128, 64)] {
            let p = pyramid(&mut rng, &cfg.channels, h, w);
            let stages = dec.forward_stages(&p).unwrap();
            assert_eq!(stages[0].shape(), p[2].shape());
            assert_eq!(stages[1].shape(), p[1].shape());
            assert_eq!(stages[2].shape(), p[0].shape());
            assert_eq!(stages[3].shape(), &[1, 8, h / 4, w / 4]);
        }
        assert!(dec.forward(&pyramid(&mut rng, &cfg.channels, 32, 32)[..3]).is_err());
    }

    #[test]
    fn ablation_variants_keep_shapes() {
        let mut rng = Rng::seeded(2);
        for (deformable, upsample, final_proj) in [
            (false, Upsample::PixelShuffle, true),
            (true, Upsample::Bilinear, true),
            (true, Upsample::Bicubic, false),
        ] {
            let cfg = DecoderConfig { deformable, upsample, final_proj, ..DecoderConfig::micro(4) };
            let dec = Decoder::<f32>::new(&mut rng, &cfg).unwrap();
            let y = dec.forward(&pyramid(&mut rng, &cfg.channels, 64, 64)).unwrap();
            assert_eq!(y.shape(), &[1, cfg.out_channels(), 16, 16]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn head_output_and_errors() {
        let mut rng = Rng::seeded(3);
        let head = SegHead::<f32>::new(&mut rng, 8, 6).unwrap();
        let x = rng.normal_tensor::<f32>(&[2, 8, 4, 6], 1.0);
        assert_eq!(head.forward(&x).unwrap().shape(), &[2, 6, 16, 24]);
        assert!(SegHead::<f32>::new(&mut rng, 8, 1).is_err());
        assert!(DecoderConfig { channels: vec![8, 16, 32], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mismatched_stage_inputs_rejected() {
        let mut rng = Rng::seeded(4);
        let dec = Decoder::<f32>::new(&mut rng, &DecoderConfig::micro(3)).unwrap();
        let mut p = pyramid(&mut rng, &[8, 16, 32, 64], 64, 64);
        p[2] = rng.normal_tensor(&[1, 32, 3, 3], 1.0);
        assert!(matches!(dec.forward(&p), Err(Error::Shape(_))));
    }
}
