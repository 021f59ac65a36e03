//! Parameter containers shared by the encoder and decoder.

use crate::error::Result;
use crate::tensor::init::{full_param, zeros_param, Rng};
use crate::tensor::{Conv2dOptions, Float, Tensor};

/// Anything holding trainable tensors.
pub trait Module<T: Float> {
    /// Calls `f` on every learnable tensor with its dotted path.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)>
    where
        Self: Clone,
    {
        let mut out = Vec::new();
        self.clone().visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_params(&self) -> usize
    where
        Self: Clone,
    {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    TruncNormal(f64),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub opts: Conv2dOptions,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        k: usize,
        opts: Conv2dOptions,
        bias: bool,
        init: Init,
    ) -> Self {
        let shape = [cout, cin / opts.groups, k, k];
        let fan_in = (cin / opts.groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = match init {
            Init::FanIn => rng.uniform_param(&shape, bound),
            Init::TruncNormal(std) => rng.trunc_normal_param(&shape, std),
            Init::Zeros => zeros_param(&shape),
        };
        let bias = bias.then(|| match init {
            Init::FanIn => rng.uniform_param(&[cout], bound),
            _ => zeros_param(&[cout]),
        });
        Conv2d { weight, bias, opts }
    }

    /// Pointwise projection.
    pub fn pointwise(rng: &mut Rng, cin: usize, cout: usize, bias: bool, init: Init) -> Self {
        Self::new(rng, cin, cout, 1, Conv2dOptions::default(), bias, init)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.opts)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.opts.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Layer normalisation across channels of a `[B, C, H, W]` map.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        LayerNorm { gamma: full_param(&[channels], 1.0), beta: zeros_param(&[channels]), eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm_channels(&self.gamma, &self.beta, self.eps)
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count() {
        let mut rng = Rng::seeded(0);
        let c = Conv2d::<f32>::new(&mut rng, 16, 32, 3, Conv2dOptions::padded(1), true, Init::FanIn);
        assert_eq!(c.num_params(), 4640);
        let names: Vec<String> = c.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
    }

    #[test]
    fn nested_names() {
        let mut layers = vec![LayerNorm::<f32>::new(3), LayerNorm::new(3)];
        let mut names = Vec::new();
        layers.visit("norms", &mut |n, _| names.push(n));
        assert_eq!(names, ["norms.0.gamma", "norms.0.beta", "norms.1.gamma", "norms.1.beta"]);
    }
}
