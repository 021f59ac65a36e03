//! Pointwise, broadcasting and layout operations.

use std::sync::Arc;

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    if x > T::from_f64c(20.0) {
        x
    } else {
        x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
    }
}

pub(crate) fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

/// Output shape when both operands expand leading or unit axes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// For each output element, the flat index into an operand of `shape`.
fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let n = numel(out_shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

impl<T: Float> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: fn(T, T) -> T,
        // partial derivatives (d/da, d/db) given (a, b)
        df: fn(T, T) -> (T, T),
    ) -> Result<Tensor<T>> {
        if self.shape() == other.shape() {
            let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_op(
                data,
                self.shape().to_vec(),
                op,
                vec![self.clone(), other.clone()],
                Box::new(move |args| {
                    let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                    let mut ga = Vec::with_capacity(a.len());
                    let mut gb = Vec::with_capacity(b.len());
                    for i in 0..a.len() {
                        let (da, db) = df(a[i], b[i]);
                        ga.push(args.grad[i] * da);
                        gb.push(args.grad[i] * db);
                    }
                    vec![Some(ga), Some(gb)]
                }),
            ));
        }
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let ia = Arc::new(broadcast_index(self.shape(), &out_shape));
        let ib = Arc::new(broadcast_index(other.shape(), &out_shape));
        let data = ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| f(self.data()[i], other.data()[j]))
            .collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            op,
            vec![self.clone(), other.clone()],
            Box::new(move |args| {
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); b.len()];
                for ((g, &i), &j) in args.grad.iter().zip(ia.iter()).zip(ib.iter()) {
                    let (da, db) = df(a[i], b[j]);
                    ga[i] += *g * da;
                    gb[j] += *g * db;
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let g = x
                    .iter()
                    .zip(args.output)
                    .zip(args.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary("silu", silu, |x, _| {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn mul_scalar(&self, k: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * k).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul_scalar",
            vec![self.clone()],
            Box::new(move |args| vec![Some(args.grad.iter().map(|&g| g * k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + k).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add_scalar",
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![s],
            vec![],
            "sum",
            vec![self.clone()],
            Box::new(|args| vec![Some(vec![args.grad[0]; args.inputs[0].numel()])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64c(self.numel().max(1) as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let in_shape = self.shape();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        // source index for every output element
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..n {
            src.push(flat);
            for d in (0..rank).rev() {
                counter[d] += 1;
                flat += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                flat -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let data = src.iter().map(|&i| self.data()[i]).collect();
        let src = Arc::new(src);
        Ok(Tensor::from_op(
            data,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); args.grad.len()];
                for (o, &i) in src.iter().enumerate() {
                    g[i] = args.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along `dim`; all other extents must agree.
    pub fn concat(tensors: &[Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.rank();
        if dim >= rank {
            return Err(Error::InvalidArgument(format!("concat dim {dim} >= rank {rank}")));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along {dim}: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[dim] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in tensors.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = tensors.iter().map(|t| t.shape()[dim]).sum();
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            tensors.to_vec(),
            Box::new(move |args| {
                let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&args.grad[pos..pos + w]);
                        pos += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if dim >= self.rank() || start + len > self.shape()[dim] {
            return Err(Error::Shape(format!(
                "narrow(dim={dim}, start={start}, len={len}) on {:?}",
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..dim].iter().product();
        let inner: usize = self.shape()[dim + 1..].iter().product();
        let full = self.shape()[dim] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * full];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    let src = &args.grad[o * len * inner..(o + 1) * len * inner];
                    g[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Reorders the last axis: `out[.., t] = in[.., perm[t]]`.
    pub fn gather_last(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let len = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("gather_last on a scalar".into()))?;
        if perm.len() != len || perm.iter().any(|&p| p >= len) {
            return Err(Error::Shape(format!(
                "permutation of length {} for last axis {len}",
                perm.len()
            )));
        }
        let rows = self.numel() / len.max(1);
        let mut data = Vec::with_capacity(self.numel());
        for r in 0..rows {
            let row = &self.data()[r * len..(r + 1) * len];
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let perm: Arc<Vec<usize>> = Arc::new(perm.to_vec());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "gather_last",
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); args.grad.len()];
                for r in 0..rows {
                    for (t, &p) in perm.iter().enumerate() {
                        g[r * len + p] += args.grad[r * len + t];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Dispatches one of the pointwise kinds; binary kinds take two operands.
    pub fn elementwise(kind: ElementwiseKind, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let arity = match kind {
            ElementwiseKind::Add | ElementwiseKind::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        Ok(match kind {
            ElementwiseKind::Add => args[0].add(args[1])?,
            ElementwiseKind::Mul => args[0].mul(args[1])?,
            ElementwiseKind::Silu => args[0].silu(),
            ElementwiseKind::Sigmoid => args[0].sigmoid(),
            ElementwiseKind::Softplus => args[0].softplus(),
            ElementwiseKind::Exp => args[0].exp(),
        })
    }
}
