//! 2-D cross-correlation via im2col and GEMM, with a direct depthwise path.

use std::sync::Arc;

use super::{gemm, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOptions {
    pub fn padded(padding: usize) -> Self {
        Conv2dOptions { padding, ..Default::default() }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Conv2dOptions { stride, padding, ..Default::default() }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Conv2dOptions { padding, groups: channels, ..Default::default() }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOptions,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.opts.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.opts.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.opts.groups == self.cin && self.cout == self.cin
    }

    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.opts.stride + k * self.opts.dilation) as isize - self.opts.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out_extent(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Unfolds one group of one image into `[cin_g * kh * kw, ho * wo]`.
fn im2col<T: Float>(g: &Geometry, image: &[T], group: usize, cols: &mut [T]) {
    let plane = g.h * g.w;
    let npix = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let src = &image[(group * g.cin_g() + c) * plane..][..plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, i, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, j, g.w) {
                                    Some(ix) => src[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<T: Float>(g: &Geometry, cols: &[T], group: usize, image: &mut [T]) {
    let plane = g.h * g.w;
    let npix = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let dst = &mut image[(group * g.cin_g() + c) * plane..][..plane];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, i, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, j, g.w) {
                            dst[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Float>(g: &Geometry, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let npix = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * npix];
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let dst = &mut out[(b * g.cout + c) * npix..][..npix];
                let k = &wt[c * g.kh * g.kw..][..g.kh * g.kw];
                for i in 0..g.kh {
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        for j in 0..g.kw {
                            let kv = k[i * g.kw + j];
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    dst[oy * g.wo + ox] += kv * src[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let rows = g.col_rows();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * npix] };
        for b in 0..g.batch {
            let image = &x[b * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
            for grp in 0..g.opts.groups {
                let colref: &[T] = if g.is_pointwise() {
                    &image[grp * g.cin_g() * npix..][..rows * npix]
                } else {
                    im2col(g, image, grp, &mut cols);
                    &cols
                };
                let wg = &wt[grp * g.cout_g() * rows..][..g.cout_g() * rows];
                let dst = &mut out[(b * g.cout + grp * g.cout_g()) * npix..][..g.cout_g() * npix];
                gemm(false, false, g.cout_g(), npix, rows, T::one(), wg, colref, T::zero(), dst);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let bv = bias[c];
                out[(b * g.cout + c) * npix..][..npix].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients with respect to input and weight.
fn backward<T: Float>(g: &Geometry, x: &[T], wt: &[T], gout: &[T], need_x: bool, need_w: bool) -> (Vec<T>, Vec<T>) {
    let npix = g.ho * g.wo;
    let plane = g.h * g.w;
    let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![T::zero(); wt.len()] } else { Vec::new() };
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * plane..][..plane];
                let go = &gout[(b * g.cout + c) * npix..][..npix];
                for i in 0..g.kh {
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        for j in 0..g.kw {
                            let kidx = c * g.kh * g.kw + i * g.kw + j;
                            let kv = wt[kidx];
                            let mut acc = T::zero();
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    let gv = go[oy * g.wo + ox];
                                    acc += gv * src[iy * g.w + ix];
                                    if need_x {
                                        gx[(b * g.cin + c) * plane + iy * g.w + ix] += gv * kv;
                                    }
                                }
                            }
                            if need_w {
                                gw[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
        return (gx, gw);
    }
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * npix];
    let mut gcols = vec![T::zero(); rows * npix];
    for b in 0..g.batch {
        let image = &x[b * g.cin * plane..][..g.cin * plane];
        for grp in 0..g.opts.groups {
            let go = &gout[(b * g.cout + grp * g.cout_g()) * npix..][..g.cout_g() * npix];
            let wg = &wt[grp * g.cout_g() * rows..][..g.cout_g() * rows];
            if need_w {
                let colref: &[T] = if g.is_pointwise() {
                    &image[grp * g.cin_g() * npix..][..rows * npix]
                } else {
                    im2col(g, image, grp, &mut cols);
                    &cols
                };
                let gwg = &mut gw[grp * g.cout_g() * rows..][..g.cout_g() * rows];
                gemm(false, true, g.cout_g(), rows, npix, T::one(), go, colref, T::one(), gwg);
            }
            if need_x {
                if g.is_pointwise() {
                    let dst = &mut gx[b * g.cin * plane + grp * g.cin_g() * npix..][..rows * npix];
                    gemm(true, false, rows, npix, g.cout_g(), T::one(), wg, go, T::one(), dst);
                } else {
                    gemm(true, false, rows, npix, g.cout_g(), T::one(), wg, go, T::zero(), &mut gcols);
                    col2im(g, &gcols, grp, &mut gx[b * g.cin * plane..][..g.cin * plane]);
                }
            }
        }
    }
    (gx, gw)
}

impl<T: Float> Tensor<T> {
    /// Batched 2-D cross-correlation.
    ///
    /// `weight` is `[out, in / groups, kh, kw]`; `bias` is `[out]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, opts: Conv2dOptions) -> Result<Tensor<T>> {
        let (batch, cin, h, w) = self.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        if opts.stride == 0 || opts.dilation == 0 || opts.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride, dilation and groups must be positive: {opts:?}"
            )));
        }
        if cin % opts.groups != 0 || cout % opts.groups != 0 || cin_g * opts.groups != cin {
            return Err(Error::Shape(format!(
                "conv2d: input channels {cin}, weight {:?}, groups {}",
                weight.shape(),
                opts.groups
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let ho = conv_out_extent(h, kh, opts.stride, opts.padding, opts.dilation);
        let wo = conv_out_extent(w, kw, opts.stride, opts.padding, opts.dilation);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit {h}x{w} with {opts:?}"
            )));
        };
        let geo = Geometry { batch, cin, h, w, cout, kh, kw, ho, wo, opts };
        let data = forward(&geo, self.data(), weight.data(), bias.map(|b| b.data()));
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let geo = Arc::new(geo);
        Ok(Tensor::from_op(
            data,
            vec![batch, cout, ho, wo],
            "conv2d",
            inputs,
            Box::new(move |args| {
                let (x, wt) = (&args.inputs[0], &args.inputs[1]);
                let (gx, gw) =
                    backward(&geo, x.data(), wt.data(), args.grad, x.requires_grad(), wt.requires_grad());
                let mut out = vec![x.requires_grad().then_some(gx), wt.requires_grad().then_some(gw)];
                if args.inputs.len() == 3 {
                    let npix = geo.ho * geo.wo;
                    let mut gb = vec![T::zero(); geo.cout];
                    for b in 0..geo.batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            *acc += args.grad[(b * geo.cout + c) * npix..][..npix].iter().copied().sum();
                        }
                    }
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::init::Rng;

    /// Quadruple-loop direct convolution.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: Option<&Tensor<f64>>, o: Conv2dOptions) -> Vec<f64> {
        let (b, cin, h, w) = x.dims4().unwrap();
        let (cout, cin_g, kh, kw) = wt.dims4().unwrap();
        let ho = (h + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
        let wo = (w + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
        let cout_g = cout / o.groups;
        let mut out = vec![0.0; b * cout * ho * wo];
        for n in 0..b {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * o.stride + i * o.dilation) as isize - o.padding as isize;
                                    let ix = (ox * o.stride + j * o.dilation) as isize - o.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((n * cin + c) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((co * cin_g + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let wt = Tensor::new(k, &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&wt, None, Conv2dOptions::padded(1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_channels() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let wt = Tensor::<f64>::ones(&[1, 2, 1, 1]);
        let y = x.conv2d(&wt, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::seeded(11);
        let cases = [
            (Conv2dOptions::padded(1), 4, 3),
            (Conv2dOptions::strided(2, 1), 6, 3),
            (Conv2dOptions { stride: 1, padding: 2, dilation: 2, groups: 1 }, 5, 3),
            (Conv2dOptions { stride: 1, padding: 1, dilation: 1, groups: 2 }, 6, 3),
            (Conv2dOptions::depthwise(4, 1), 4, 3),
            (Conv2dOptions::default(), 5, 1),
        ];
        for (opts, cout, k) in cases {
            let x = rng.normal_tensor::<f64>(&[2, 4, 8, 8], 1.0);
            let wt = rng.normal_tensor::<f64>(&[cout, 4 / opts.groups, k, k], 1.0);
            let b = rng.normal_tensor::<f64>(&[cout], 1.0);
            let y = x.conv2d(&wt, Some(&b), opts).unwrap();
            let want = conv_oracle(&x, &wt, Some(&b), opts);
            let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "{opts:?}: {diff}");
        }
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 1, 9, 7]);
        let wt = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let o = Conv2dOptions { stride: 2, padding: 1, dilation: 2, groups: 1 };
        let y = x.conv2d(&wt, None, o).unwrap();
        // floor((H + 2p - d(k-1) - 1) / s) + 1
        assert_eq!(y.shape(), &[1, 1, (9 + 2 - 4 - 1) / 2 + 1, (7 + 2 - 4 - 1) / 2 + 1]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let wt = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
        assert!(x.conv2d(&wt, None, Conv2dOptions { stride: 0, ..Default::default() }).is_err());
        assert!(x.conv2d(&wt, None, Conv2dOptions { dilation: 0, ..Default::default() }).is_err());
        let bad = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(x.conv2d(&bad, None, Conv2dOptions::padded(1)).is_err());
        let big = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        assert!(x.conv2d(&big, None, Conv2dOptions::default()).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = Rng::seeded(5);
        for opts in [
            Conv2dOptions::padded(1),
            Conv2dOptions::strided(2, 1),
            Conv2dOptions::depthwise(3, 1),
            Conv2dOptions::default(),
        ] {
            let k = if opts == Conv2dOptions::default() { 1 } else { 3 };
            let x = rng.normal_tensor::<f64>(&[2, 3, 5, 5], 1.0);
            let wt = rng.normal_tensor::<f64>(&[3, 3 / opts.groups, k, k], 1.0);
            let b = rng.normal_tensor::<f64>(&[3], 1.0);
            let err = grad_check(|v| v[0].conv2d(&v[1], Some(&v[2]), opts), &[x, wt, b], 1e-5, None).unwrap();
            assert!(err < 1e-5, "{opts:?}: {err}");
        }
    }
}
