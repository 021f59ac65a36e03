//! Factor-2 sub-pixel rearrangement.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// `[B, 4C, H, W] -> [B, C, 2H, 2W]` with
    /// `out[c, 2i+di, 2j+dj] = in[4c + 2di + dj, i, j]`.
    pub fn pixel_shuffle(&self) -> Result<Tensor<T>> {
        let (b, c4, h, w) = self.dims4()?;
        if c4 % 4 != 0 {
            return Err(Error::Shape(format!("pixel shuffle needs channels divisible by 4, got {c4}")));
        }
        let c = c4 / 4;
        let mut src = Vec::with_capacity(self.numel());
        for n in 0..b {
            for ch in 0..c {
                for oi in 0..2 * h {
                    for oj in 0..2 * w {
                        let sc = 4 * ch + 2 * (oi % 2) + oj % 2;
                        src.push(((n * c4 + sc) * h + oi / 2) * w + oj / 2);
                    }
                }
            }
        }
        Ok(self.reindex(src, vec![b, c, 2 * h, 2 * w], "pixel_shuffle"))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self) -> Result<Tensor<T>> {
        let (b, c, h2, w2) = self.dims4()?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(Error::Shape(format!("pixel unshuffle needs even extents, got {h2}x{w2}")));
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let mut src = Vec::with_capacity(self.numel());
        for n in 0..b {
            for sc in 0..4 * c {
                let (ch, di, dj) = (sc / 4, (sc % 4) / 2, sc % 2);
                for i in 0..h {
                    for j in 0..w {
                        src.push(((n * c + ch) * h2 + 2 * i + di) * w2 + 2 * j + dj);
                    }
                }
            }
        }
        Ok(self.reindex(src, vec![b, 4 * c, h, w], "pixel_unshuffle"))
    }

    /// `out[i] = self[src[i]]` for a bijective `src`.
    fn reindex(&self, src: Vec<usize>, shape: Vec<usize>, op: &'static str) -> Tensor<T> {
        let data = src.iter().map(|&i| self.data()[i]).collect();
        let src = Arc::new(src);
        Tensor::from_op(
            data,
            shape,
            op,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); args.grad.len()];
                for (o, &i) in src.iter().enumerate() {
                    g[i] = args.grad[o];
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::init::Rng;

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]).unwrap();
        let y = x.pixel_shuffle().unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_and_round_trip() {
        let x = Rng::seeded(1).normal_tensor::<f32>(&[2, 12, 3, 5], 1.0);
        let y = x.pixel_shuffle().unwrap();
        assert_eq!(y.shape(), &[2, 3, 6, 10]);
        assert_eq!(y.pixel_unshuffle().unwrap().data(), x.data());
        let mut a = x.to_vec();
        let mut b = y.to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert!(Tensor::<f32>::zeros(&[1, 6, 2, 2]).pixel_shuffle().is_err());
    }

    #[test]
    fn gradient() {
        let x = Rng::seeded(2).normal_tensor::<f64>(&[1, 8, 2, 3], 1.0);
        assert!(grad_check(|v| v[0].pixel_shuffle(), &[x], 1e-5, None).unwrap() < 1e-8);
    }
}
