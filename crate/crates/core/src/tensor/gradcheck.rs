//! Finite-difference verification of backward passes.

use super::init::Rng;
use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Largest relative error between analytic and central-difference
/// gradients of `f` at `inputs`.
///
/// Non-scalar outputs are reduced by a fixed random projection. The relative
/// error of one coordinate is `|a - n| / max(1, |a|, |n|)`. With
/// `max_coords = Some(k)` only `k` evenly spaced coordinates of each input
/// are perturbed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps}")));
    }
    let params: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let out = f(&params)?;
    let mut rng = Rng::seeded(0x6772_6164);
    let proj = Tensor::from_fn(out.shape(), |_| rng.uniform(0.5, 1.5));
    let loss = out.mul(&proj)?.sum();
    if !loss.all_finite() {
        return Err(Error::NonFinite("gradient check loss".into()));
    }
    let grads = loss.backward()?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        no_grad(|| {
            let o = f(values)?;
            Ok(o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
        })
    };

    let mut worst = 0.0f64;
    for (idx, p) in params.iter().enumerate() {
        let analytic = grads.get(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let mut probe: Vec<Tensor<f64>> = params.iter().map(Tensor::detach).collect();
            let mut plus = p.to_vec();
            plus[i] += eps;
            probe[idx] = Tensor::new(plus, p.shape())?;
            let fp = eval(&probe)?;
            let mut minus = p.to_vec();
            minus[i] -= eps;
            probe[idx] = Tensor::new(minus, p.shape())?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {idx} at {i}")));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
