//! Deformable Mamba fusion block.

use serde::{Deserialize, Serialize};

use crate::deform::{DeformConv2d, Modulation};
use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Init, LayerNorm, Module};
use crate::ssm::{Ss2d, Ss2dConfig};
use crate::tensor::init::Rng;
use crate::tensor::{Conv2dOptions, Float, ResizeKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    PixelShuffle,
    Bilinear,
    Bicubic,
}

impl Upsample {
    pub fn name(self) -> &'static str {
        match self {
            Upsample::PixelShuffle => "pixelshuffle",
            Upsample::Bilinear => "bilinear",
            Upsample::Bicubic => "bicubic",
        }
    }
}

impl std::str::FromStr for Upsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Upsample::PixelShuffle, Upsample::Bilinear, Upsample::Bicubic]
            .into_iter()
            .find(|u| u.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown upsample method {s:?}")))
    }
}

/// Settings shared by every block of a decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub ss2d: Ss2dConfig,
    pub deformable: bool,
    pub modulation: Modulation,
    pub fusion_depth: usize,
    pub upsample: Upsample,
    pub final_proj: bool,
}

/// Encoder-side branch: deformable or, for the ablation, a plain 3x3 conv.
#[derive(Debug, Clone)]
pub enum EncoderBranch<T: Float> {
    Deformable(DeformConv2d<T>),
    Plain(Conv2d<T>),
}

impl<T: Float> EncoderBranch<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            EncoderBranch::Deformable(d) => d.forward(x),
            EncoderBranch::Plain(c) => c.forward(x),
        }
    }
}

/// Depthwise 3x3 conv, channel layer norm, SiLU.
#[derive(Debug, Clone)]
pub struct FusionLayer<T: Float> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Float> FusionLayer<T> {
    fn new(rng: &mut Rng, channels: usize) -> Self {
        FusionLayer {
            conv: Conv2d::new(rng, channels, channels, 3, Conv2dOptions::depthwise(channels, 1), true, Init::FanIn),
            norm: LayerNorm::new(channels),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu())
    }
}

/// How the fused `2c` map leaves the block.
#[derive(Debug, Clone)]
pub enum Output<T: Float> {
    /// Pixel shuffle to `c/2` channels at twice the resolution, then a 1x1
    /// projection to the next stage width.
    Shuffle { proj: Conv2d<T> },
    /// Interpolate, reduce `2c -> c/2` with a 1x1 conv, then project.
    Interpolate { kind: ResizeKind, reduce: Conv2d<T>, proj: Conv2d<T> },
    /// Last stage: resolution kept, optional 1x1 projection.
    Final { proj: Option<Conv2d<T>> },
}

#[derive(Debug, Clone)]
pub struct DmfBlock<T: Float> {
    /// 1-based; stage `j` fuses `E_{4-j+1}` with `D_{j-1}`.
    pub stage: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub scan: Ss2d<T>,
    pub encoder_branch: EncoderBranch<T>,
    pub fusion: Vec<FusionLayer<T>>,
    pub output: Output<T>,
}

impl<T: Float> DmfBlock<T> {
    /// `next_channels` is the width of the following stage; ignored for
    /// the last stage, whose projection (if any) maps to `final_channels`.
    pub fn new(
        rng: &mut Rng,
        stage: usize,
        channels: usize,
        next_channels: usize,
        opts: &BlockOptions,
    ) -> Result<Self> {
        if !(1..=4).contains(&stage) {
            return Err(Error::InvalidArgument(format!("stage {stage} not in 1..=4")));
        }
        if channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!("stage width {channels} must be even")));
        }
        let scan = Ss2d::new(rng, channels, opts.ss2d)?;
        let encoder_branch = if opts.deformable {
            EncoderBranch::Deformable(DeformConv2d::new(rng, channels, channels, opts.modulation))
        } else {
            EncoderBranch::Plain(Conv2d::new(rng, channels, channels, 3, Conv2dOptions::padded(1), true, Init::FanIn))
        };
        let fused = 2 * channels;
        let fusion = (0..opts.fusion_depth).map(|_| FusionLayer::new(rng, fused)).collect();
        let half = channels / 2;
        let (output, out_channels) = if stage == 4 {
            let proj = opts.final_proj.then(|| Conv2d::pointwise(rng, fused, next_channels, true, Init::FanIn));
            let out = if opts.final_proj { next_channels } else { fused };
            (Output::Final { proj }, out)
        } else {
            let out = match opts.upsample {
                Upsample::PixelShuffle => {
                    Output::Shuffle { proj: Conv2d::pointwise(rng, half, next_channels, true, Init::FanIn) }
                }
                Upsample::Bilinear | Upsample::Bicubic => Output::Interpolate {
                    kind: if opts.upsample == Upsample::Bilinear { ResizeKind::Bilinear } else { ResizeKind::Bicubic },
                    reduce: Conv2d::pointwise(rng, fused, half, false, Init::FanIn),
                    proj: Conv2d::pointwise(rng, half, next_channels, true, Init::FanIn),
                },
            };
            (out, next_channels)
        };
        Ok(DmfBlock { stage, channels, out_channels, scan, encoder_branch, fusion, output })
    }

    /// Fuses encoder feature `e` with decoder feature `d`.
    pub fn forward(&self, e: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
        if e.shape() != d.shape() {
            return Err(Error::Shape(format!(
                "stage {} inputs disagree: encoder {:?} vs decoder {:?}",
                self.stage,
                e.shape(),
                d.shape()
            )));
        }
        let a = self.scan.forward(d)?;
        let b = self.encoder_branch.forward(e)?;
        let mut x = Tensor::concat(&[a, b], 1)?;
        for layer in &self.fusion {
            x = layer.forward(&x)?;
        }
        match &self.output {
            Output::Shuffle { proj } => proj.forward(&x.pixel_shuffle()?),
            Output::Interpolate { kind, reduce, proj } => proj.forward(&reduce.forward(&x.resize(2, *kind)?)?),
            Output::Final { proj: Some(p) } => p.forward(&x),
            Output::Final { proj: None } => Ok(x),
        }
    }
}

impl<T: Float> Module<T> for DmfBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.scan.visit(&join(prefix, "scan"), f);
        match &mut self.encoder_branch {
            EncoderBranch::Deformable(d) => d.visit(&join(prefix, "dcn"), f),
            EncoderBranch::Plain(c) => c.visit(&join(prefix, "conv"), f),
        }
        for (i, l) in self.fusion.iter_mut().enumerate() {
            let p = join(prefix, &format!("fusion.{i}"));
            l.conv.visit(&join(&p, "conv"), f);
            l.norm.visit(&join(&p, "norm"), f);
        }
        match &mut self.output {
            Output::Shuffle { proj } => proj.visit(&join(prefix, "proj"), f),
            Output::Interpolate { reduce, proj, .. } => {
                reduce.visit(&join(prefix, "reduce"), f);
                proj.visit(&join(prefix, "proj"), f);
            }
            Output::Final { proj } => proj.visit(&join(prefix, "proj"), f),
        }
    }
}
