//! Modulated deformable 3x3 convolution with a learned offset predictor.
//!
//! Output at pixel `p` is `sum_k w_k * m_k(p) * x(p + p_k + dp_k(p))` over the
//! nine taps `p_k` of a dilation-1 3x3 grid. Samples are bilinear with zero
//! padding. Offset channel `2k` is the row displacement of tap `k` and `2k+1`
//! the column displacement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Init, Module};
use crate::tensor::init::Rng;
use crate::tensor::{gemm, Conv2dOptions, Float, Tensor};

pub const TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Sigmoid,
    /// Raw predictor output, unbounded.
    Raw,
}

/// Corner weights and indices of one bilinear sample.
struct Corners {
    y0: isize,
    x0: isize,
    ly: f64,
    lx: f64,
}

impl Corners {
    fn at(y: f64, x: f64) -> Self {
        let (y0, x0) = (y.floor(), x.floor());
        Corners { y0: y0 as isize, x0: x0 as isize, ly: y - y0, lx: x - x0 }
    }

    /// `[(row, col, weight)]`; out-of-range corners are skipped.
    fn taps(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (ly, lx) = (self.ly, self.lx);
        [(0, 0, (1.0 - ly) * (1.0 - lx)), (0, 1, (1.0 - ly) * lx), (1, 0, ly * (1.0 - lx)), (1, 1, ly * lx)]
            .into_iter()
            .filter_map(move |(dy, dx, wt)| {
                let (r, c) = (self.y0 + dy, self.x0 + dx);
                (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| (r as usize * w + c as usize, wt))
            })
    }

    fn corner(&self, plane: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
        let (r, c) = (self.y0 + dy, self.x0 + dx);
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            plane[r as usize * w + c as usize]
        } else {
            0.0
        }
    }
}

/// Bilinear read of a `C x H x W` feature at fractional column `x`, row `y`;
/// zero outside the grid.
pub fn bilinear_sample<T: Float>(feature: &[T], shape: [usize; 3], x: f64, y: f64) -> Vec<T> {
    let [c, h, w] = shape;
    let corners = Corners::at(y, x);
    (0..c)
        .map(|ch| {
            let plane = &feature[ch * h * w..(ch + 1) * h * w];
            let v: f64 = corners.taps(h, w).map(|(i, wt)| wt * plane[i].to_f64c()).sum();
            T::from_f64c(v)
        })
        .collect()
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
}

impl Geometry {
    fn npix(&self) -> usize {
        self.h * self.w
    }

    /// Sampling location of tap `k` at pixel `p` of image `n`.
    fn location<T: Float>(&self, offsets: &[T], n: usize, k: usize, p: usize) -> (f64, f64) {
        let np = self.npix();
        let (i, j) = (p / self.w, p % self.w);
        let dy = offsets[(n * 2 * TAPS + 2 * k) * np + p].to_f64c();
        let dx = offsets[(n * 2 * TAPS + 2 * k + 1) * np + p].to_f64c();
        (i as f64 + (k / 3) as f64 - 1.0 + dy, j as f64 + (k % 3) as f64 - 1.0 + dx)
    }
}

/// Modulated sampling matrix of image `n`: `[cin * 9, H * W]`.
fn deform_columns<T: Float>(g: &Geometry, x: &[T], offsets: &[T], mask: &[T], n: usize) -> Vec<T> {
    let np = g.npix();
    let mut col = vec![T::zero(); g.cin * TAPS * np];
    for k in 0..TAPS {
        for p in 0..np {
            let (y, xx) = g.location(offsets, n, k, p);
            let m = mask[(n * TAPS + k) * np + p];
            let corners = Corners::at(y, xx);
            let mut taps = [(0usize, 0.0f64); 4];
            let mut count = 0;
            for t in corners.taps(g.h, g.w) {
                taps[count] = t;
                count += 1;
            }
            for ci in 0..g.cin {
                let plane = &x[(n * g.cin + ci) * np..][..np];
                let v: f64 = taps[..count].iter().map(|&(i, wt)| wt * plane[i].to_f64c()).sum();
                col[(ci * TAPS + k) * np + p] = m * T::from_f64c(v);
            }
        }
    }
    col
}

impl<T: Float> Tensor<T> {
    /// Deformable 3x3 convolution, stride 1, padding 1.
    ///
    /// `offsets` is `[B, 18, H, W]`, `mask` is `[B, 9, H, W]` and `weight`
    /// is `[C_out, C_in, 3, 3]`.
    pub fn deform_conv2d(
        &self,
        offsets: &Tensor<T>,
        mask: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let (batch, cin, h, w) = self.dims4()?;
        let &[cout, wcin, 3, 3] = weight.shape() else {
            return Err(Error::Shape(format!("deformable weight must be [O, I, 3, 3], got {:?}", weight.shape())));
        };
        if wcin != cin {
            return Err(Error::Shape(format!("weight expects {wcin} input channels, input has {cin}")));
        }
        if offsets.shape() != [batch, 2 * TAPS, h, w] || mask.shape() != [batch, TAPS, h, w] {
            return Err(Error::Shape(format!(
                "offsets {:?} / mask {:?} for input {:?} and {TAPS} taps",
                offsets.shape(),
                mask.shape(),
                self.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let g = Geometry { batch, cin, h, w, cout };
        let np = g.npix();
        let rows = cin * TAPS;
        let mut out = vec![T::zero(); batch * cout * np];
        for n in 0..batch {
            let col = deform_columns(&g, self.data(), offsets.data(), mask.data(), n);
            let o = &mut out[n * cout * np..(n + 1) * cout * np];
            if let Some(b) = bias {
                for (co, &bv) in b.data().iter().enumerate() {
                    o[co * np..(co + 1) * np].iter_mut().for_each(|v| *v = bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(false, false, cout, np, rows, T::one(), weight.data(), &col, beta, o);
        }
        let mut inputs = vec![self.clone(), offsets.clone(), mask.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let g = Arc::new(g);
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, h, w],
            "deform_conv2d",
            inputs,
            Box::new(move |args| backward(&g, args.inputs, args.grad)),
        ))
    }
}

fn backward<T: Float>(g: &Geometry, inputs: &[Tensor<T>], grad: &[T]) -> Vec<Option<Vec<T>>> {
    let (x, offsets, mask, weight) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
    let np = g.npix();
    let rows = g.cin * TAPS;
    let mut gx = vec![0.0f64; x.len()];
    let mut goff = vec![T::zero(); offsets.len()];
    let mut gmask = vec![T::zero(); mask.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gcol = vec![T::zero(); rows * np];
    let mut plane = vec![0.0f64; np];
    for n in 0..g.batch {
        let go = &grad[n * g.cout * np..(n + 1) * g.cout * np];
        let col = deform_columns(g, x, offsets, mask, n);
        gemm(false, true, g.cout, rows, np, T::one(), go, &col, T::one(), &mut gw);
        gemm(true, false, rows, np, g.cout, T::one(), weight, go, T::zero(), &mut gcol);
        for ci in 0..g.cin {
            let src = &x[(n * g.cin + ci) * np..][..np];
            plane.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64c());
            let gplane = &mut gx[(n * g.cin + ci) * np..][..np];
            for k in 0..TAPS {
                for p in 0..np {
                    let gc = gcol[(ci * TAPS + k) * np + p].to_f64c();
                    if gc == 0.0 {
                        continue;
                    }
                    let (y, xx) = g.location(offsets, n, k, p);
                    let mi = (n * TAPS + k) * np + p;
                    let m = mask[mi].to_f64c();
                    let c = Corners::at(y, xx);
                    let mut val = 0.0;
                    for (i, wt) in c.taps(g.h, g.w) {
                        gplane[i] += gc * m * wt;
                        val += wt * plane[i];
                    }
                    gmask[mi] += T::from_f64c(gc * val);
                    let v00 = c.corner(&plane, g.h, g.w, 0, 0);
                    let v01 = c.corner(&plane, g.h, g.w, 0, 1);
                    let v10 = c.corner(&plane, g.h, g.w, 1, 0);
                    let v11 = c.corner(&plane, g.h, g.w, 1, 1);
                    let dvdy = (1.0 - c.lx) * (v10 - v00) + c.lx * (v11 - v01);
                    let dvdx = (1.0 - c.ly) * (v01 - v00) + c.ly * (v11 - v10);
                    let oy = (n * 2 * TAPS + 2 * k) * np + p;
                    goff[oy] += T::from_f64c(gc * m * dvdy);
                    goff[oy + np] += T::from_f64c(gc * m * dvdx);
                }
            }
        }
    }
    let mut res = vec![Some(gx.into_iter().map(T::from_f64c).collect()), Some(goff), Some(gmask), Some(gw)];
    if inputs.len() == 5 {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.batch {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += grad[(n * g.cout + co) * np..][..np].iter().copied().sum::<T>();
            }
        }
        res.push(Some(gb));
    }
    res
}

/// Deformable conv layer whose offsets and modulation come from a 3x3 conv
/// over the same input.
#[derive(Debug, Clone)]
pub struct DeformConv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// `C_in -> 3 * 9` channels: 18 offsets, then 9 modulation logits.
    pub predictor: Conv2d<T>,
    pub modulation: Modulation,
}

impl<T: Float> DeformConv2d<T> {
    /// The predictor starts at zero: no displacement, and modulation 0.5
    /// (sigmoid) or 1 (raw, via a unit bias on the modulation channels).
    pub fn new(rng: &mut Rng, cin: usize, cout: usize, modulation: Modulation) -> Self {
        let conv = Conv2d::new(rng, cin, cout, 3, Conv2dOptions::padded(1), true, Init::FanIn);
        let mut predictor = Conv2d::new(rng, cin, 3 * TAPS, 3, Conv2dOptions::padded(1), true, Init::Zeros);
        if modulation == Modulation::Raw {
            let b: Vec<T> = (0..3 * TAPS).map(|i| if i < 2 * TAPS { T::zero() } else { T::one() }).collect();
            predictor.bias = Some(Tensor::param(b, &[3 * TAPS]).expect("bias shape"));
        }
        DeformConv2d { weight: conv.weight, bias: conv.bias.expect("bias requested"), predictor, modulation }
    }

    /// `(offsets [B, 18, H, W], modulation [B, 9, H, W])`.
    pub fn predict_offsets(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let raw = self.predictor.forward(x)?;
        let offsets = raw.narrow(1, 0, 2 * TAPS)?;
        let logits = raw.narrow(1, 2 * TAPS, TAPS)?;
        let mask = match self.modulation {
            Modulation::Sigmoid => logits.sigmoid(),
            Modulation::Raw => logits,
        };
        Ok((offsets, mask))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (offsets, mask) = self.predict_offsets(x)?;
        x.deform_conv2d(&offsets, &mask, &self.weight, Some(&self.bias))
    }
}

impl<T: Float> Module<T> for DeformConv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        self.predictor.visit(&join(prefix, "predictor"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    fn grid() -> Vec<f64> {
        vec![1.0, 2.0, 3.0, 4.0]
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(bilinear_sample(&grid(), [1, 2, 2], 1.0, 0.0), vec![2.0]);
        assert_eq!(bilinear_sample(&grid(), [1, 2, 2], 0.5, 0.5), vec![2.5]);
        assert_eq!(bilinear_sample(&grid(), [1, 2, 2], -5.0, -5.0), vec![0.0]);
        // Half a pixel past the edge blends with the zero padding.
        assert_eq!(bilinear_sample(&grid(), [1, 2, 2], 1.5, 0.0), vec![1.0]);
    }

    /// Direct evaluation of the defining sum.
    fn loop_oracle(x: &Tensor<f64>, off: &Tensor<f64>, m: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (bn, cin, h, wd) = x.dims4().unwrap();
        let cout = w.shape()[0];
        let np = h * wd;
        let mut out = vec![0.0; bn * cout * np];
        for n in 0..bn {
            let feat = &x.data()[n * cin * np..(n + 1) * cin * np];
            for i in 0..h {
                for j in 0..wd {
                    let p = i * wd + j;
                    for k in 0..9 {
                        let dy = off.data()[((n * 18) + 2 * k) * np + p];
                        let dx = off.data()[((n * 18) + 2 * k + 1) * np + p];
                        let yy = i as f64 + (k / 3) as f64 - 1.0 + dy;
                        let xx = j as f64 + (k % 3) as f64 - 1.0 + dx;
                        let s = bilinear_sample(feat, [cin, h, wd], xx, yy);
                        let mk = m.data()[(n * 9 + k) * np + p];
                        for co in 0..cout {
                            for (ci, sv) in s.iter().enumerate() {
                                out[(n * cout + co) * np + p] += w.data()[(co * cin + ci) * 9 + k] * mk * sv;
                            }
                        }
                    }
                    for co in 0..cout {
                        out[(n * cout + co) * np + p] += b.data()[co];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::seeded(1);
        let x = rng.normal_tensor::<f64>(&[2, 3, 5, 4], 1.0);
        let off = rng.normal_tensor::<f64>(&[2, 18, 5, 4], 1.5);
        let m = rng.uniform_tensor::<f64>(&[2, 9, 5, 4], 0.0, 1.0);
        let w = rng.normal_tensor::<f64>(&[4, 3, 3, 3], 1.0);
        let b = rng.normal_tensor::<f64>(&[4], 1.0);
        let y = x.deform_conv2d(&off, &m, &w, Some(&b)).unwrap();
        let want = loop_oracle(&x, &off, &m, &w, &b);
        let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn zero_offsets_unit_mask_is_plain_conv() {
        let mut rng = Rng::seeded(2);
        for _ in 0..10 {
            let x = rng.normal_tensor::<f64>(&[1, 3, 4, 6], 1.0);
            let w = rng.normal_tensor::<f64>(&[2, 3, 3, 3], 1.0);
            let b = rng.normal_tensor::<f64>(&[2], 1.0);
            let y = x
                .deform_conv2d(&Tensor::zeros(&[1, 18, 4, 6]), &Tensor::ones(&[1, 9, 4, 6]), &w, Some(&b))
                .unwrap();
            let c = x.conv2d(&w, Some(&b), Conv2dOptions::padded(1)).unwrap();
            let diff = y.data().iter().zip(c.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn zero_mask_leaves_bias() {
        let mut rng = Rng::seeded(3);
        let x = rng.normal_tensor::<f64>(&[1, 2, 3, 3], 1.0);
        let off = rng.normal_tensor::<f64>(&[1, 18, 3, 3], 1.0);
        let w = rng.normal_tensor::<f64>(&[2, 2, 3, 3], 1.0);
        let b = Tensor::new(vec![0.25, -1.0], &[2]).unwrap();
        let y = x.deform_conv2d(&off, &Tensor::zeros(&[1, 9, 3, 3]), &w, Some(&b)).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.25));
        assert!(y.data()[9..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn fresh_predictor_is_neutral() {
        let mut rng = Rng::seeded(4);
        let layer = DeformConv2d::<f64>::new(&mut rng, 4, 4, Modulation::Sigmoid);
        assert_eq!(layer.predictor.out_channels(), 27);
        let x = rng.normal_tensor::<f64>(&[1, 4, 3, 5], 1.0);
        let (off, m) = layer.predict_offsets(&x).unwrap();
        assert!(off.data().iter().all(|&v| v == 0.0));
        assert!(m.data().iter().all(|&v| v == 0.5));
        let raw = DeformConv2d::<f64>::new(&mut rng, 4, 4, Modulation::Raw);
        assert!(raw.predict_offsets(&x).unwrap().1.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradients_reach_everything() {
        let mut rng = Rng::seeded(5);
        let x = rng.normal_tensor::<f64>(&[2, 2, 4, 3], 1.0);
        // Keep samples away from integer crossings where bilinear kinks.
        let off = rng.uniform_tensor::<f64>(&[2, 18, 4, 3], 0.1, 0.4);
        let m = rng.uniform_tensor::<f64>(&[2, 9, 4, 3], 0.0, 1.0);
        let w = rng.normal_tensor::<f64>(&[3, 2, 3, 3], 1.0);
        let b = rng.normal_tensor::<f64>(&[3], 1.0);
        let err = grad_check(|v| v[0].deform_conv2d(&v[1], &v[2], &v[3], Some(&v[4])), &[x, off, m, w, b], 1e-5, None)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(x.deform_conv2d(&Tensor::zeros(&[1, 16, 3, 3]), &Tensor::zeros(&[1, 9, 3, 3]), &w, None).is_err());
        assert!(x
            .deform_conv2d(&Tensor::zeros(&[1, 18, 3, 3]), &Tensor::zeros(&[1, 9, 3, 3]), &Tensor::zeros(&[2, 3, 3, 3]), None)
            .is_err());
    }
}
