//! Gradient checks of whole layers in 64-bit, parameters included.

use serde::{Deserialize, Serialize};

use crate::decoder::{BlockOptions, DecoderConfig, DmfBlock};
use crate::deform::{DeformConv2d, Modulation, TAPS};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, SegModel};
use crate::ssm::{Ss2d, Ss2dConfig};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::init::Rng;
use crate::tensor::{Conv2dOptions, Tensor};

/// Error bound a check must stay under.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckTarget {
    Conv2d,
    Linear,
    Ss2d,
    Dcn,
    PixelShuffle,
    Dmf,
    Model,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 7] = [
        CheckTarget::Conv2d,
        CheckTarget::Linear,
        CheckTarget::Ss2d,
        CheckTarget::Dcn,
        CheckTarget::PixelShuffle,
        CheckTarget::Dmf,
        CheckTarget::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Conv2d => "conv2d",
            CheckTarget::Linear => "linear",
            CheckTarget::Ss2d => "ss2d",
            CheckTarget::Dcn => "dcn",
            CheckTarget::PixelShuffle => "pixel_shuffle",
            CheckTarget::Dmf => "dmf",
            CheckTarget::Model => "model",
        }
    }
}

impl std::str::FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckTarget::ALL
            .into_iter()
            .find(|t| t.name() == s || (s == "shuffle" && *t == CheckTarget::PixelShuffle))
            .ok_or_else(|| {
                let names: Vec<_> = CheckTarget::ALL.iter().map(|t| t.name()).collect();
                Error::InvalidArgument(format!("unknown module {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Checks `forward` with respect to its inputs and every parameter of `m`.
fn module_check<M, F>(m: &M, inputs: Vec<Tensor<f64>>, eps: f64, max_coords: Option<usize>, forward: F) -> Result<f64>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(m.named_params().into_iter().map(|(_, t)| t));
    grad_check(
        |v| {
            let mut mm = m.clone();
            let mut i = n_in;
            mm.visit("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            forward(&mm, &v[..n_in])
        },
        &all,
        eps,
        max_coords,
    )
}

/// Moves every deformable predictor off its zero init: fractional constant
/// offsets keep samples between pixel centres, where bilinear weights are
/// smooth, and random modulation logits break the symmetry.
fn jitter_predictors<M: Module<f64>>(m: &mut M, rng: &mut Rng) {
    m.visit("", &mut |name, t| {
        if name.ends_with("predictor.bias") {
            let data = (0..t.numel())
                .map(|i| if i < 2 * TAPS { rng.uniform(0.15, 0.35) } else { rng.uniform(-1.0, 1.0) })
                .collect();
            *t = Tensor::param(data, t.shape()).expect("same shape");
        }
    });
}

fn small_ss2d() -> Ss2dConfig {
    Ss2dConfig { d_state: 4, ..Default::default() }
}

/// Largest relative error for `target`.
pub fn check(target: CheckTarget, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = Rng::seeded(seed);
    match target {
        CheckTarget::Conv2d => {
            let x = rng.normal_tensor(&[2, 3, 5, 6], 1.0);
            let w = rng.normal_tensor(&[4, 3, 3, 3], 0.5);
            let b = rng.normal_tensor(&[4], 0.5);
            let strided = grad_check(|v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dOptions::strided(2, 1)), &[x.clone(), w.clone(), b.clone()], eps, None)?;
            let padded = grad_check(|v| v[0].conv2d(&v[1], Some(&v[2]), Conv2dOptions::padded(1)), &[x, w, b], eps, None)?;
            Ok(strided.max(padded))
        }
        CheckTarget::Linear => {
            let x = rng.normal_tensor(&[2, 3, 5], 1.0);
            let w = rng.normal_tensor(&[4, 5], 0.5);
            let b = rng.normal_tensor(&[4], 0.5);
            grad_check(|v| v[0].linear(&v[1], Some(&v[2])), &[x, w, b], eps, None)
        }
        CheckTarget::Ss2d => {
            let m = Ss2d::<f64>::new(&mut rng, 6, small_ss2d())?;
            let x = rng.normal_tensor(&[1, 6, 3, 4], 1.0);
            module_check(&m, vec![x], eps, Some(16), |m, v| m.forward(&v[0]))
        }
        CheckTarget::Dcn => {
            let mut worst = 0.0f64;
            for modulation in [Modulation::Sigmoid, Modulation::Raw] {
                let mut m = DeformConv2d::<f64>::new(&mut rng, 3, 4, modulation);
                jitter_predictors(&mut m, &mut rng);
                let x = rng.normal_tensor(&[2, 3, 4, 5], 1.0);
                worst = worst.max(module_check(&m, vec![x], eps, Some(40), |m, v| m.forward(&v[0]))?);
            }
            Ok(worst)
        }
        CheckTarget::PixelShuffle => {
            let x = rng.normal_tensor(&[2, 8, 3, 2], 1.0);
            grad_check(|v| v[0].pixel_shuffle(), &[x], eps, None)
        }
        CheckTarget::Dmf => {
            let opts = BlockOptions { ss2d: small_ss2d(), ..DecoderConfig::default().block_options() };
            let mut worst = 0.0f64;
            // A shuffling stage and the final stage.
            for (stage, next) in [(2, 4), (4, 4)] {
                let mut m = DmfBlock::<f64>::new(&mut rng, stage, 8, next, &opts)?;
                jitter_predictors(&mut m, &mut rng);
                let e = rng.normal_tensor(&[1, 8, 4, 4], 1.0);
                let d = rng.normal_tensor(&[1, 8, 4, 4], 1.0);
                worst = worst.max(module_check(&m, vec![e, d], eps, Some(8), |m, v| m.forward(&v[0], &v[1]))?);
            }
            Ok(worst)
        }
        CheckTarget::Model => {
            let mut m = SegModel::<f64>::new(seed, &ModelConfig::micro(3))?;
            jitter_predictors(&mut m, &mut rng);
            let x = rng.uniform_tensor(&[1, 3, 32, 32], 0.0, 1.0);
            module_check(&m, vec![x], eps, Some(3), |m, v| m.forward(&v[0]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        for t in CheckTarget::ALL {
            assert_eq!(t.name().parse::<CheckTarget>().unwrap(), t);
        }
        assert!("mlp".parse::<CheckTarget>().is_err());
    }

    #[test]
    fn cheap_targets_pass() {
        for t in [CheckTarget::Conv2d, CheckTarget::Linear, CheckTarget::PixelShuffle] {
            let err = check(t, 1e-5, 0).unwrap();
            assert!(err < TOLERANCE, "{}: {err}", t.name());
        }
    }
}
