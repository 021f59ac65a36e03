//! Diagonal selective-scan recurrence.
//!
//! Layouts: `u`, `delta`, `y` are `[B, D, L]`; the input-dependent `b` and
//! `c` are `[B, N, L]`; `a_log` is `[D, N]` and `d` is `[D]`.
//!
//! ```text
//! A      = -exp(a_log)
//! A_bar  = exp(delta * A)
//! B_bar  = delta * b
//! h_t    = A_bar_t * h_{t-1} + B_bar_t * u_t      (h_0 = 0)
//! y_t    = <c_t, h_t> + d * u_t
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Strictly sequential evaluation.
    Reference,
    /// Chunked associative combination of `(A_bar, B_bar * u)` pairs.
    #[default]
    Fast,
}

/// Chunk length of the fast path.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub len: usize,
}

impl ScanDims {
    fn check<T: Float>(
        u: &Tensor<T>,
        delta: &Tensor<T>,
        a_log: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        d: &Tensor<T>,
    ) -> Result<Self> {
        let &[batch, d_inner, len] = u.shape() else {
            return Err(Error::Shape(format!("scan input must be [B, D, L], got {:?}", u.shape())));
        };
        let &[_, d_state] = a_log.shape() else {
            return Err(Error::Shape(format!("a_log must be [D, N], got {:?}", a_log.shape())));
        };
        let ok = delta.shape() == u.shape()
            && a_log.shape() == [d_inner, d_state]
            && b.shape() == [batch, d_state, len]
            && c.shape() == [batch, d_state, len]
            && d.shape() == [d_inner];
        if !ok {
            return Err(Error::Shape(format!(
                "scan operands u {:?} delta {:?} a_log {:?} b {:?} c {:?} d {:?}",
                u.shape(),
                delta.shape(),
                a_log.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        if len == 0 {
            return Err(Error::InvalidArgument("scan over an empty sequence".into()));
        }
        Ok(ScanDims { batch, d_inner, d_state, len })
    }
}

fn check_delta<T: Float>(delta: &[T]) -> Result<()> {
    match delta.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
        Some(v) if !v.is_finite() => Err(Error::NonFinite(format!("step size {v}"))),
        Some(v) => Err(Error::InvalidArgument(format!("step size must be non-negative, got {v}"))),
        None => Ok(()),
    }
}

/// `[B, N, L]` to `[B, L, N]` so the state loop reads contiguously.
fn to_time_major<T: Float>(x: &[T], batch: usize, n: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        for s in 0..n {
            for t in 0..len {
                out[(bi * len + t) * n + s] = x[(bi * n + s) * len + t];
            }
        }
    }
    out
}

fn from_time_major<T: Float>(x: &[T], batch: usize, n: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        for t in 0..len {
            for s in 0..n {
                out[(bi * n + s) * len + t] = x[(bi * len + t) * n + s];
            }
        }
    }
    out
}

/// Zero-order hold on `A`, Euler step on `B`.
///
/// Returns `(A_bar, B_bar)`, each `[B, D, L, N]`. A zero step freezes the
/// state (`A_bar = 1`, `B_bar = 0`); negative steps are rejected.
pub fn discretize<T: Float>(a_log: &Tensor<T>, delta: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[d_inner, d_state], &[batch, d2, len]) = (a_log.shape(), delta.shape()) else {
        return Err(Error::Shape(format!("a_log {:?} / delta {:?}", a_log.shape(), delta.shape())));
    };
    if d2 != d_inner || b.shape() != [batch, d_state, len] {
        return Err(Error::Shape(format!(
            "a_log {:?} delta {:?} b {:?}",
            a_log.shape(),
            delta.shape(),
            b.shape()
        )));
    }
    check_delta(delta.data())?;
    let shape = [batch, d_inner, len, d_state];
    let mut a_bar = Vec::with_capacity(shape.iter().product());
    let mut b_bar = Vec::with_capacity(a_bar.capacity());
    for bi in 0..batch {
        for di in 0..d_inner {
            for t in 0..len {
                let dl = delta.data()[(bi * d_inner + di) * len + t];
                for s in 0..d_state {
                    let a = -a_log.data()[di * d_state + s].exp();
                    a_bar.push((dl * a).exp());
                    b_bar.push(dl * b.data()[(bi * d_state + s) * len + t]);
                }
            }
        }
    }
    Ok((Tensor::new(a_bar, &shape)?, Tensor::new(b_bar, &shape)?))
}

struct Raw<'a, T> {
    dims: ScanDims,
    u: &'a [T],
    delta: &'a [T],
    a_log: &'a [T],
    /// `[B, L, N]`
    bt: &'a [T],
    /// `[B, L, N]`
    ct: &'a [T],
    d: &'a [T],
}

impl<T: Float> Raw<'_, T> {
    fn decay(&self, di: usize) -> Vec<T> {
        let n = self.dims.d_state;
        (0..n).map(|s| -self.a_log[di * n + s].exp()).collect()
    }

    fn forward_ref(&self, y: &mut [T]) {
        let ScanDims { batch, d_inner, d_state: n, len } = self.dims;
        let mut h = vec![T::zero(); n];
        for bi in 0..batch {
            for di in 0..d_inner {
                let a = self.decay(di);
                h.iter_mut().for_each(|v| *v = T::zero());
                let row = (bi * d_inner + di) * len;
                for t in 0..len {
                    let (dl, x) = (self.delta[row + t], self.u[row + t]);
                    let bt = &self.bt[(bi * len + t) * n..][..n];
                    let ct = &self.ct[(bi * len + t) * n..][..n];
                    let mut acc = T::zero();
                    for s in 0..n {
                        h[s] = (dl * a[s]).exp() * h[s] + dl * bt[s] * x;
                        acc += ct[s] * h[s];
                    }
                    y[row + t] = acc + self.d[di] * x;
                }
            }
        }
    }

    /// Each chunk is first reduced to one affine map `h -> p*h + q`; an
    /// exclusive scan over those maps gives every chunk its incoming state,
    /// and a final pass expands the chunk from that state. Chunks are the
    /// outer loop so the `b`, `c` slices of a chunk stay in cache across
    /// channels; the decay is recomputed in the last pass rather than stored.
    fn forward_fast(&self, y: &mut [T]) {
        let ScanDims { batch, d_inner, d_state: n, len } = self.dims;
        let chunks = len.div_ceil(CHUNK);
        let decay: Vec<Vec<T>> = (0..d_inner).map(|di| self.decay(di)).collect();
        // [chunk][channel][state]
        let at = |k: usize, di: usize| (k * d_inner + di) * n;
        let mut p = vec![T::one(); chunks * d_inner * n];
        let mut q = vec![T::zero(); chunks * d_inner * n];
        let mut h_in = vec![T::zero(); chunks * d_inner * n];
        let mut h = vec![T::zero(); d_inner * n];
        for bi in 0..batch {
            p.iter_mut().for_each(|v| *v = T::one());
            q.iter_mut().for_each(|v| *v = T::zero());
            for k in 0..chunks {
                let span = k * CHUNK..((k + 1) * CHUNK).min(len);
                for (di, a) in decay.iter().enumerate() {
                    let row = (bi * d_inner + di) * len;
                    let o = at(k, di);
                    let (pk, qk) = (&mut p[o..o + n], &mut q[o..o + n]);
                    for t in span.clone() {
                        let (dl, x) = (self.delta[row + t], self.u[row + t]);
                        let bt = &self.bt[(bi * len + t) * n..][..n];
                        for s in 0..n {
                            // (p, q) then (a_t, b_t) composes to (p*a_t, a_t*q + b_t).
                            let da = (dl * a[s]).exp();
                            pk[s] *= da;
                            qk[s] = da * qk[s] + dl * bt[s] * x;
                        }
                    }
                }
            }
            h.iter_mut().for_each(|v| *v = T::zero());
            for k in 0..chunks {
                let o = at(k, 0);
                h_in[o..o + d_inner * n].copy_from_slice(&h);
                for (i, hv) in h.iter_mut().enumerate() {
                    *hv = p[o + i] * *hv + q[o + i];
                }
            }
            for k in 0..chunks {
                let span = k * CHUNK..((k + 1) * CHUNK).min(len);
                for (di, a) in decay.iter().enumerate() {
                    let row = (bi * d_inner + di) * len;
                    let o = at(k, di);
                    let hs = &mut h_in[o..o + n];
                    for t in span.clone() {
                        let (dl, x) = (self.delta[row + t], self.u[row + t]);
                        let bt = &self.bt[(bi * len + t) * n..][..n];
                        let ct = &self.ct[(bi * len + t) * n..][..n];
                        let mut acc = T::zero();
                        for s in 0..n {
                            hs[s] = (dl * a[s]).exp() * hs[s] + dl * bt[s] * x;
                            acc += ct[s] * hs[s];
                        }
                        y[row + t] = acc + self.d[di] * x;
                    }
                }
            }
        }
    }
}

fn run<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    mode: ScanMode,
) -> Result<(ScanDims, Vec<T>)> {
    let dims = ScanDims::check(u, delta, a_log, b, c, d)?;
    check_delta(delta.data())?;
    let bt = to_time_major(b.data(), dims.batch, dims.d_state, dims.len);
    let ct = to_time_major(c.data(), dims.batch, dims.d_state, dims.len);
    let raw = Raw { dims, u: u.data(), delta: delta.data(), a_log: a_log.data(), bt: &bt, ct: &ct, d: d.data() };
    let mut y = vec![T::zero(); u.numel()];
    match mode {
        ScanMode::Reference => raw.forward_ref(&mut y),
        ScanMode::Fast => raw.forward_fast(&mut y),
    }
    Ok((dims, y))
}

/// Sequential oracle; records no graph.
pub fn selective_scan_ref<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, y) = run(u, delta, a_log, b, c, d, ScanMode::Reference)?;
    Tensor::new(y, u.shape())
}

/// Chunked evaluation; records no graph.
pub fn selective_scan_fast<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, y) = run(u, delta, a_log, b, c, d, ScanMode::Fast)?;
    Tensor::new(y, u.shape())
}

/// Differentiable scan with respect to all six operands.
pub fn selective_scan<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let (dims, y) = run(u, delta, a_log, b, c, d, mode)?;
    let dims = Arc::new(dims);
    Ok(Tensor::from_op(
        y,
        u.shape().to_vec(),
        "selective_scan",
        vec![u.clone(), delta.clone(), a_log.clone(), b.clone(), c.clone(), d.clone()],
        Box::new(move |args| {
            let grads = backward(&dims, args.inputs, args.grad);
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Reverse recurrence. The forward states are recomputed per channel rather
/// than kept alive in the graph.
fn backward<T: Float>(dims: &ScanDims, inputs: &[Tensor<T>], gy: &[T]) -> Vec<Vec<T>> {
    let ScanDims { batch, d_inner, d_state: n, len } = *dims;
    let (u, delta, a_log, d) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[5].data());
    let bt = to_time_major(inputs[3].data(), batch, n, len);
    let ct = to_time_major(inputs[4].data(), batch, n, len);
    let mut gu = vec![T::zero(); u.len()];
    let mut gdelta = vec![T::zero(); u.len()];
    let mut ga = vec![T::zero(); d_inner * n];
    let mut gbt = vec![T::zero(); bt.len()];
    let mut gct = vec![T::zero(); ct.len()];
    let mut gd = vec![T::zero(); d_inner];
    let mut hs = vec![T::zero(); len * n];
    let mut das = vec![T::zero(); len * n];
    let mut gh = vec![T::zero(); n];
    for bi in 0..batch {
        for di in 0..d_inner {
            let a: Vec<T> = (0..n).map(|s| -a_log[di * n + s].exp()).collect();
            let row = (bi * d_inner + di) * len;
            for t in 0..len {
                let (dl, x) = (delta[row + t], u[row + t]);
                let b_t = &bt[(bi * len + t) * n..][..n];
                for s in 0..n {
                    let prev = if t > 0 { hs[(t - 1) * n + s] } else { T::zero() };
                    das[t * n + s] = (dl * a[s]).exp();
                    hs[t * n + s] = das[t * n + s] * prev + dl * b_t[s] * x;
                }
            }
            gh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let (dl, x, g) = (delta[row + t], u[row + t], gy[row + t]);
                let base = (bi * len + t) * n;
                let mut gx = g * d[di];
                gd[di] += g * x;
                let mut gdl = T::zero();
                for s in 0..n {
                    gct[base + s] += g * hs[t * n + s];
                    gh[s] += ct[base + s] * g;
                    let prev = if t > 0 { hs[(t - 1) * n + s] } else { T::zero() };
                    let da = das[t * n + s];
                    let g_da = gh[s] * prev * da;
                    gdl += g_da * a[s] + gh[s] * bt[base + s] * x;
                    ga[di * n + s] += g_da * dl;
                    gbt[base + s] += gh[s] * dl * x;
                    gx += gh[s] * dl * bt[base + s];
                    gh[s] *= da;
                }
                gu[row + t] = gx;
                gdelta[row + t] = gdl;
            }
        }
    }
    // dL/dA to dL/da_log through A = -exp(a_log).
    for (i, g) in ga.iter_mut().enumerate() {
        *g *= -a_log[i].exp();
    }
    let gb = from_time_major(&gbt, batch, n, len);
    let gc = from_time_major(&gct, batch, n, len);
    vec![gu, gdelta, ga, gb, gc, gd]
}
