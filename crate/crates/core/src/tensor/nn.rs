//! Layer-level differentiable primitives: affine maps, channel layer
//! normalisation, separable resampling and the segmentation loss.

use std::sync::Arc;

use super::{gemm, Float, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeKind {
    Bilinear,
    Bicubic,
}

/// `[out_len, in_len]` interpolation matrix (half-pixel centres).
fn resize_matrix(in_len: usize, out_len: usize, kind: ResizeKind) -> Vec<f64> {
    let scale = out_len as f64 / in_len as f64;
    let mut m = vec![0.0; out_len * in_len];
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) / scale - 0.5;
        let row = &mut m[o * in_len..(o + 1) * in_len];
        match kind {
            ResizeKind::Bilinear => {
                let src = src.max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let l = src - i0 as f64;
                row[i0] += 1.0 - l;
                row[i1] += l;
            }
            ResizeKind::Bicubic => {
                const A: f64 = -0.75;
                let i = src.floor();
                let t = src - i;
                let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
                let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
                let w = [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)];
                for (k, wk) in w.iter().enumerate() {
                    row[clamp(i as isize - 1 + k as isize)] += wk;
                }
            }
        }
    }
    m
}

impl<T: Float> Tensor<T> {
    /// Affine map over the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let &[out_dim, in_dim] = weight.shape() else {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", weight.shape())));
        };
        if self.shape().last() != Some(&in_dim) {
            return Err(Error::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [out_dim] {
                return Err(Error::Shape(format!("linear bias {:?} for {out_dim} outputs", b.shape())));
            }
        }
        let rows = self.numel() / in_dim.max(1);
        let mut out = vec![T::zero(); rows * out_dim];
        gemm(false, true, rows, out_dim, in_dim, T::one(), self.data(), weight.data(), T::zero(), &mut out);
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_dim;
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            shape,
            "linear",
            inputs,
            Box::new(move |args| {
                let (x, w) = (&args.inputs[0], &args.inputs[1]);
                let g = args.grad;
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); rows * in_dim];
                    gemm(false, false, rows, in_dim, out_dim, T::one(), g, w.data(), T::zero(), &mut gx);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); out_dim * in_dim];
                    gemm(true, false, out_dim, in_dim, rows, T::one(), g, x.data(), T::zero(), &mut gw);
                    gw
                });
                let mut res = vec![gx, gw];
                if args.inputs.len() == 3 {
                    let mut gb = vec![T::zero(); out_dim];
                    for r in 0..rows {
                        gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]).for_each(|(a, &b)| *a += b);
                    }
                    res.push(Some(gb));
                }
                res
            }),
        ))
    }

    /// Layer normalisation across the channel axis of a `[B, C, H, W]` map.
    pub fn layer_norm_channels(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer norm affine {:?}/{:?} for {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        let npix = h * w;
        let eps = T::from_f64c(eps);
        let cf = T::from_f64c(c as f64);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); b * npix];
        for n in 0..b {
            let base = n * c * npix;
            for p in 0..npix {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += x[base + ch * npix + p];
                }
                mean /= cf;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = x[base + ch * npix + p] - mean;
                    var += d * d;
                }
                let is = T::one() / (var / cf + eps).sqrt();
                inv_std[n * npix + p] = is;
                for ch in 0..c {
                    let i = base + ch * npix + p;
                    out[i] = (x[i] - mean) * is * gamma.data()[ch] + beta.data()[ch];
                }
            }
        }
        let inv_std = Arc::new(inv_std);
        Ok(Tensor::from_op(
            out,
            vec![b, c, h, w],
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let gamma = args.inputs[1].data();
                let g = args.grad;
                let mut gx = vec![T::zero(); x.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                for n in 0..b {
                    let base = n * c * npix;
                    for p in 0..npix {
                        let is = inv_std[n * npix + p];
                        let mut mean = T::zero();
                        for ch in 0..c {
                            mean += x[base + ch * npix + p];
                        }
                        mean /= cf;
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let i = base + ch * npix + p;
                            xhat[ch] = (x[i] - mean) * is;
                            let gh = g[i] * gamma[ch];
                            m1 += gh;
                            m2 += gh * xhat[ch];
                            gg[ch] += g[i] * xhat[ch];
                            gb[ch] += g[i];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for ch in 0..c {
                            let i = base + ch * npix + p;
                            gx[i] = is * (g[i] * gamma[ch] - m1 - xhat[ch] * m2);
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Resamples the spatial axes of `[B, C, H, W]` by an integer factor.
    pub fn resize(&self, factor: usize, kind: ResizeKind) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if factor == 0 {
            return Err(Error::InvalidArgument("resize factor must be positive".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let rh: Arc<Vec<T>> = Arc::new(resize_matrix(h, ho, kind).into_iter().map(T::from_f64c).collect());
        let rw: Arc<Vec<T>> = Arc::new(resize_matrix(w, wo, kind).into_iter().map(T::from_f64c).collect());
        let planes = b * c;
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut tmp = vec![T::zero(); ho * w];
        for p in 0..planes {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            gemm(false, false, ho, w, h, T::one(), &rh, src, T::zero(), &mut tmp);
            gemm(false, true, ho, wo, w, T::one(), &tmp, &rw, T::zero(), &mut out[p * ho * wo..(p + 1) * ho * wo]);
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, ho, wo],
            "resize",
            vec![self.clone()],
            Box::new(move |args| {
                let mut gx = vec![T::zero(); planes * h * w];
                let mut tmp = vec![T::zero(); ho * w];
                for p in 0..planes {
                    let g = &args.grad[p * ho * wo..(p + 1) * ho * wo];
                    gemm(false, false, ho, w, wo, T::one(), g, &rw, T::zero(), &mut tmp);
                    gemm(true, false, h, w, ho, T::one(), &rh, &tmp, T::zero(), &mut gx[p * h * w..(p + 1) * h * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax across channels of `[B, K, H, W]` logits (not differentiable).
    pub fn softmax_channels(&self) -> Result<Vec<T>> {
        let (b, k, h, w) = self.dims4()?;
        let npix = h * w;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for n in 0..b {
            for p in 0..npix {
                let idx = |c: usize| (n * k + c) * npix + p;
                let m = (0..k).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for c in 0..k {
                    let e = (x[idx(c)] - m).exp();
                    out[idx(c)] = e;
                    s += e;
                }
                for c in 0..k {
                    out[idx(c)] /= s;
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel arg-max over channels of `[B, K, H, W]`.
    pub fn argmax_channels(&self) -> Result<Vec<u8>> {
        let (b, k, h, w) = self.dims4()?;
        let npix = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(b * npix);
        for n in 0..b {
            for p in 0..npix {
                let mut best = 0;
                for c in 1..k {
                    if x[(n * k + c) * npix + p] > x[(n * k + best) * npix + p] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        Ok(out)
    }

    /// Mean pixel cross-entropy of `[B, K, H, W]` logits against labels,
    /// skipping [`IGNORE_LABEL`].
    pub fn cross_entropy(&self, labels: &[u8]) -> Result<Tensor<T>> {
        let (b, k, h, w) = self.dims4()?;
        let npix = h * w;
        if labels.len() != b * npix {
            return Err(Error::Shape(format!("{} labels for logits {:?}", labels.len(), self.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} with {k} classes")));
        }
        let probs = Arc::new(self.softmax_channels()?);
        let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        let mut loss = 0.0f64;
        for n in 0..b {
            for p in 0..npix {
                let l = labels[n * npix + p];
                if l != IGNORE_LABEL {
                    let pr = probs[(n * k + l as usize) * npix + p].to_f64c();
                    loss -= pr.max(1e-300).ln();
                }
            }
        }
        let denom = valid.max(1) as f64;
        let labels: Arc<Vec<u8>> = Arc::new(labels.to_vec());
        Ok(Tensor::from_op(
            vec![T::from_f64c(loss / denom)],
            vec![],
            "cross_entropy",
            vec![self.clone()],
            Box::new(move |args| {
                let scale = args.grad[0] / T::from_f64c(denom);
                let mut g = vec![T::zero(); probs.len()];
                for n in 0..b {
                    for p in 0..npix {
                        let l = labels[n * npix + p];
                        if l == IGNORE_LABEL {
                            continue;
                        }
                        for c in 0..k {
                            let i = (n * k + c) * npix + p;
                            let target = if c == l as usize { T::one() } else { T::zero() };
                            g[i] = (probs[i] - target) * scale;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
