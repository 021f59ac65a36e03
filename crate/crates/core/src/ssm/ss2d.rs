//! Multi-directional 2-D selective-scan block.

use serde::{Deserialize, Serialize};

use super::path::{directions, scan_paths};
use super::scan::{selective_scan, ScanMode};
use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Init, LayerNorm, Module};
use crate::tensor::init::{full_param, Rng};
use crate::tensor::{Conv2dOptions, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ss2dConfig {
    pub d_state: usize,
    /// `d_inner = expand * channels`.
    pub expand: usize,
    /// Rank of the step-size projection; `None` means `ceil(channels / 16)`.
    pub dt_rank: Option<usize>,
    /// 1, 2 or 4 traversal directions.
    pub directions: usize,
    pub scan_mode: ScanMode,
}

impl Default for Ss2dConfig {
    fn default() -> Self {
        Ss2dConfig { d_state: 16, expand: 1, dt_rank: None, directions: 4, scan_mode: ScanMode::Fast }
    }
}

impl Ss2dConfig {
    pub fn d_inner(&self, channels: usize) -> usize {
        self.expand * channels
    }

    pub fn rank(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| channels.div_ceil(16)).max(1)
    }
}

/// Learnables of one scan direction.
#[derive(Debug, Clone)]
pub struct ScanParams<T: Float> {
    /// Emits the step-size features, `B` and `C` per token: `d_inner -> rank + 2N`.
    pub x_proj: Conv2d<T>,
    /// `rank -> d_inner` plus the step bias; softplus follows.
    pub dt_proj: Conv2d<T>,
    /// `[d_inner, N]`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub d_state: usize,
    pub d_inner: usize,
    pub dt_rank: usize,
}

impl<T: Float> ScanParams<T> {
    pub fn new(rng: &mut Rng, d_inner: usize, d_state: usize, dt_rank: usize) -> Self {
        let x_proj = Conv2d::pointwise(rng, d_inner, dt_rank + 2 * d_state, false, Init::FanIn);
        let mut dt_proj = Conv2d::pointwise(rng, dt_rank, d_inner, true, Init::Zeros);
        dt_proj.weight = rng.uniform_param(&[d_inner, dt_rank, 1, 1], (dt_rank as f64).powf(-0.5));
        // Initial steps log-uniform in [1e-3, 0.1]; the bias is their softplus inverse.
        let bias: Vec<T> = (0..d_inner)
            .map(|_| {
                let dt = rng.uniform(1e-3f64.ln(), 0.1f64.ln()).exp().max(1e-4);
                T::from_f64c(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        dt_proj.bias = Some(Tensor::param(bias, &[d_inner]).expect("bias shape"));
        let a_log = Tensor::param(
            (0..d_inner).flat_map(|_| (1..=d_state).map(|s| T::from_f64c((s as f64).ln()))).collect(),
            &[d_inner, d_state],
        )
        .expect("a_log shape");
        ScanParams { x_proj, dt_proj, a_log, d_skip: full_param(&[d_inner], 1.0), d_state, d_inner, dt_rank }
    }
}

impl<T: Float> Module<T> for ScanParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.x_proj.visit(&join(prefix, "x_proj"), f);
        self.dt_proj.visit(&join(prefix, "dt_proj"), f);
        f(join(prefix, "a_log"), &mut self.a_log);
        f(join(prefix, "d_skip"), &mut self.d_skip);
    }
}

/// Input projection with a gate branch, depthwise 3x3 conv and SiLU, one
/// selective scan per direction, summed, normalised, gated and projected.
#[derive(Debug, Clone)]
pub struct Ss2d<T: Float> {
    pub cfg: Ss2dConfig,
    pub channels: usize,
    pub d_inner: usize,
    pub in_proj: Conv2d<T>,
    pub dwconv: Conv2d<T>,
    pub dirs: Vec<ScanParams<T>>,
    pub norm: LayerNorm<T>,
    pub out_proj: Conv2d<T>,
}

impl<T: Float> Ss2d<T> {
    pub fn new(rng: &mut Rng, channels: usize, cfg: Ss2dConfig) -> Result<Self> {
        let count = directions(cfg.directions)?.len();
        if cfg.d_state == 0 || cfg.expand == 0 {
            return Err(Error::InvalidArgument("d_state and expand must be positive".into()));
        }
        let di = cfg.d_inner(channels);
        let rank = cfg.rank(channels);
        Ok(Ss2d {
            cfg,
            channels,
            d_inner: di,
            in_proj: Conv2d::pointwise(rng, channels, 2 * di, false, Init::FanIn),
            dwconv: Conv2d::new(rng, di, di, 3, Conv2dOptions::depthwise(di, 1), true, Init::FanIn),
            dirs: (0..count).map(|_| ScanParams::new(rng, di, cfg.d_state, rank)).collect(),
            norm: LayerNorm::new(di),
            out_proj: Conv2d::pointwise(rng, di, channels, false, Init::FanIn),
        })
    }

    /// Post-activation scan input and gate, both `[B, d_inner, H, W]`.
    pub fn prepare(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("ss2d built for {} channels, got {c}", self.channels)));
        }
        let xz = self.in_proj.forward(x)?;
        let xs = xz.narrow(1, 0, self.d_inner)?;
        let z = xz.narrow(1, self.d_inner, self.d_inner)?;
        Ok((self.dwconv.forward(&xs)?.silu(), z))
    }

    /// One `[B, d_inner, H, W]` output per enabled direction, in grid order.
    pub fn scan_branch(&self, xs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (b, di, h, w) = xs.dims4()?;
        let l = h * w;
        let u = xs.reshape(&[b, di, l])?;
        let dirs = directions(self.cfg.directions)?;
        let mut outs = Vec::with_capacity(dirs.len());
        for (&dir, p) in dirs.iter().zip(&self.dirs) {
            let path = scan_paths(h, w, dir)?;
            let seq = |t: &Tensor<T>, ch: usize| -> Result<Tensor<T>> {
                let flat = t.reshape(&[b, ch, l])?;
                if dir == 1 {
                    Ok(flat)
                } else {
                    flat.gather_last(&path.perm)
                }
            };
            let (r, n) = (p.dt_rank, p.d_state);
            let proj = p.x_proj.forward(xs)?;
            let delta = p.dt_proj.forward(&proj.narrow(1, 0, r)?)?.softplus();
            let y = selective_scan(
                &if dir == 1 { u.clone() } else { u.gather_last(&path.perm)? },
                &seq(&delta, di)?,
                &p.a_log,
                &seq(&proj.narrow(1, r, n)?, n)?,
                &seq(&proj.narrow(1, r + n, n)?, n)?,
                &p.d_skip,
                self.cfg.scan_mode,
            )?;
            let y = if dir == 1 { y } else { y.gather_last(&path.inv_perm)? };
            outs.push(y.reshape(&[b, di, h, w])?);
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (xs, z) = self.prepare(x)?;
        let mut parts = self.scan_branch(&xs)?.into_iter();
        let first = parts.next().expect("at least one direction");
        let y = parts.try_fold(first, |acc, p| acc.add(&p))?;
        let y = self.norm.forward(&y)?.mul(&z.silu())?;
        self.out_proj.forward(&y)
    }
}

impl<T: Float> Module<T> for Ss2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.dirs.visit(&join(prefix, "dirs"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn block(directions: usize, seed: u64) -> Ss2d<f64> {
        let cfg = Ss2dConfig { d_state: 4, directions, ..Default::default() };
        Ss2d::new(&mut Rng::seeded(seed), 6, cfg).unwrap()
    }

    #[test]
    fn output_shape_and_direction_counts() {
        let x = Rng::seeded(1).normal_tensor::<f64>(&[2, 6, 3, 5], 1.0);
        for n in [1, 2, 4] {
            let y = block(n, 2).forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
        }
        let cfg = Ss2dConfig { directions: 3, ..Default::default() };
        assert!(Ss2d::<f64>::new(&mut Rng::seeded(0), 6, cfg).is_err());
    }

    #[test]
    fn single_pixel_directions_coincide() {
        let mut m = block(4, 3);
        let shared = m.dirs[0].clone();
        m.dirs.iter_mut().for_each(|d| *d = shared.clone());
        let x = Rng::seeded(4).normal_tensor::<f64>(&[1, 6, 1, 1], 1.0);
        let (xs, _) = m.prepare(&x).unwrap();
        let parts = m.scan_branch(&xs).unwrap();
        for p in &parts[1..] {
            assert_eq!(p.data(), parts[0].data());
        }
    }

    #[test]
    fn permutation_round_trip_is_exact() {
        let x = Rng::seeded(5).normal_tensor::<f64>(&[2, 3, 4, 5], 1.0);
        let flat = x.reshape(&[2, 3, 20]).unwrap();
        for d in 1..=4 {
            let p = scan_paths(4, 5, d).unwrap();
            let back = flat.gather_last(&p.perm).unwrap().gather_last(&p.inv_perm).unwrap();
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn frozen_steps_leave_skip_path() {
        let mut m = block(4, 6);
        for d in &mut m.dirs {
            // softplus(-1e4) underflows to exactly zero.
            d.dt_proj.weight = Tensor::zeros(d.dt_proj.weight.shape());
            d.dt_proj.bias = Some(Tensor::full(&[m.d_inner], -1e4));
        }
        let x = Rng::seeded(7).normal_tensor::<f64>(&[1, 6, 2, 3], 1.0);
        let (xs, _) = m.prepare(&x).unwrap();
        for (p, d) in m.scan_branch(&xs).unwrap().iter().zip(&m.dirs) {
            for (i, v) in p.data().iter().enumerate() {
                let ch = i / 6;
                assert_eq!(*v, d.d_skip.data()[ch] * xs.data()[i]);
            }
        }
    }

    #[test]
    fn block_gradients() {
        let m = block(4, 8);
        let x = Rng::seeded(9).normal_tensor::<f64>(&[1, 6, 2, 3], 1.0);
        let names: Vec<(String, Tensor<f64>)> = m.named_params();
        let mut inputs = vec![x];
        inputs.extend(names.iter().map(|(_, t)| t.clone()));
        let err = grad_check(
            |v| {
                let mut mm = m.clone();
                let mut i = 1;
                mm.visit("", &mut |_, t| {
                    *t = v[i].clone();
                    i += 1;
                });
                mm.forward(&v[0])
            },
            &inputs,
            1e-5,
            Some(12),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
