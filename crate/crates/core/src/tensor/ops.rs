//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{self, Exec};
use super::{Real, Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Result};

fn unary<'t, T: Real>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let out = xv.map(f);
    x.tape().record(out, &[x], move |g, _| {
        let d = Tensor::new(
            g.shape(),
            g.data()
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| df(g, x))
                .collect(),
        )
        .unwrap();
        vec![Some(d)]
    })
}

fn same_tape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) {
    debug_assert!(std::ptr::eq(a.tape(), b.tape()), "vars from different tapes");
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .tape()
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape().record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape().record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        }))
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        unary(self, move |x| x * c, move |g, _| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        unary(self, move |x| x + c, |g, _| g)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &s);
        let (x, sv) = (self.value(), s.value());
        if sv.len() != 1 {
            return dim_err(format!("scalar operand has shape {:?}", sv.shape()));
        }
        let k = sv.item();
        let out = x.map(|v| v * k);
        Ok(self.tape().record(out, &[self, s], move |g, need| {
            let ds = need[1].then(|| {
                let mut acc = T::zero();
                for (&g, &x) in g.data().iter().zip(x.data()) {
                    acc += g * x;
                }
                Tensor::scalar(acc)
            });
            vec![need[0].then(|| g.map(|g| g * k)), ds]
        }))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (T::one() - y)).unwrap())]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::lit(slope);
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * s },
            move |g, x| if x > T::zero() { g } else { g * s },
        )
    }

    pub fn softplus(self) -> Var<'t, T> {
        unary(self, softplus, |g, x| g * sigmoid(x))
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.exp());
        let y = out.clone();
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y).unwrap())]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        unary(
            self,
            move |x| x.max(lo).min(hi),
            move |g, x| if x >= lo && x <= hi { g } else { T::zero() },
        )
    }

    /// Left-to-right sum to a one-element tensor.
    pub fn sum(self) -> Var<'t, T> {
        let xv = self.value();
        let out = Tensor::scalar(xv.sum_all());
        let shape = xv.shape().to_vec();
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean squared difference over all elements.
    pub fn mse(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        a.check_same_shape(&b)?;
        let n = T::lit(a.len().max(1) as f64);
        let mut acc = T::zero();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = x - y;
            acc += d * d;
        }
        let out = Tensor::scalar(acc / n);
        Ok(self.tape().record(out, &[self, other], move |g, need| {
            let k = g.item() * T::lit(2.0) / n;
            let d = a.zip_map(&b, |x, y| k * (x - y)).unwrap();
            let neg = need[1].then(|| d.map(|v| -v));
            vec![need[0].then_some(d), neg]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        }))
    }

    /// 2-d cross-correlation; see [`kernels::conv2d_forward`].
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (_, c, h, wd) = x.dims4()?;
        let (o, ci, k, k2) = w.dims4()?;
        if ci != c || k != k2 || b.shape() != [o] {
            return dim_err(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        if k % 2 == 0 || stride == 0 {
            return contract_err(format!("conv2d: kernel {k} must be odd and stride positive"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return dim_err(format!("conv2d: {h}×{wd} input too small for kernel {k}"));
        }
        let exec = Exec::default();
        let out = kernels::conv2d_forward(exec, &x, &w, &b, stride, pad);
        Ok(self
            .tape()
            .record(out, &[self, weight, bias], move |g, need| {
                let (dx, dw, db) = kernels::conv2d_backward(
                    exec,
                    &x,
                    &w,
                    g,
                    stride,
                    pad,
                    need[0],
                    need[1] || need[2],
                );
                vec![dx, dw, db]
            }))
    }

    /// Bilinear backward warp with clamp-to-edge borders. `flow` is
    /// `N×2×H×W` in pixels, channel 0 horizontal.
    pub fn warp(self, flow: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &flow);
        let (f, fl) = (self.value(), flow.value());
        let (n, _, h, w) = f.dims4()?;
        if fl.shape() != [n, 2, h, w] {
            return dim_err(format!(
                "warp: feature {:?} vs flow {:?}",
                f.shape(),
                fl.shape()
            ));
        }
        let exec = Exec::default();
        let out = kernels::warp_forward(exec, &f, &fl);
        Ok(self.tape().record(out, &[self, flow], move |g, need| {
            let (a, b) = kernels::warp_backward(exec, &f, &fl, g, need[0], need[1]);
            vec![a, b]
        }))
    }

    /// 2×2 average pooling; extents must be even.
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("avg_pool2 needs even extents, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        d[(p * h + y) * w + xx] = g.data()[(p * ho + y / 2) * wo + xx / 2] * q;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], d).unwrap())]
        }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        d[(p * h + y / 2) * w + xx / 2] += g.data()[(p * ho + y) * wo + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], d).unwrap())]
        }))
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, hi, wi) = x.dims4()?;
        if h > hi || w > wi {
            return dim_err(format!("crop {h}×{w} exceeds {hi}×{wi}"));
        }
        if (h, w) == (hi, wi) {
            return Ok(self);
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = (p * hi + y) * wi;
                out.extend_from_slice(&x.data()[row..row + w]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); n * c * hi * wi];
            for p in 0..n * c {
                for y in 0..h {
                    let row = (p * hi + y) * wi;
                    d[row..row + w].copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                }
            }
            vec![Some(Tensor::new(&[n, c, hi, wi], d).unwrap())]
        }))
    }

    /// Channels `[start, start+len)`.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if start + len > c {
            return dim_err(format!("channel slice {start}+{len} exceeds {c}"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let out = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); n * c * hw];
            for b in 0..n {
                d[(b * c + start) * hw..(b * c + start + len) * hw]
                    .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
            }
            vec![Some(Tensor::new(&[n, c, h, w], d).unwrap())]
        }))
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Broadcasts a length-`C` vector to `n×C×h×w`.
    pub fn expand_channels(self, n: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape().len() != 1 {
            return dim_err(format!("expand_channels needs a vector, got {:?}", x.shape()));
        }
        let c = x.len();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for &v in x.data() {
                out.extend(std::iter::repeat(v).take(hw));
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); c];
            for b in 0..n {
                for (ch, acc) in d.iter_mut().enumerate() {
                    for &v in &g.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        *acc += v;
                    }
                }
            }
            vec![Some(Tensor::new(&[c], d).unwrap())]
        }))
    }
}

/// Concatenates 4-d tensors along the channel axis.
pub fn concat_channels<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let Some(first) = parts.first() else {
        return contract_err("concat of zero tensors");
    };
    let tape: &'t Tape<T> = first.tape();
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (n, _, h, w) = vals[0].dims4()?;
    let mut chans = Vec::with_capacity(vals.len());
    for v in &vals {
        let (vn, vc, vh, vw) = v.dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return dim_err(format!(
                "concat: {:?} vs {:?}",
                vals[0].shape(),
                v.shape()
            ));
        }
        chans.push(vc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (v, &c) in vals.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let out = Tensor::new(&[n, total, h, w], out)?;
    Ok(tape.record(out, parts, move |g, need| {
        let mut offset = 0;
        chans
            .iter()
            .zip(need)
            .map(|(&c, &need)| {
                let start = offset;
                offset += c;
                need.then(|| {
                    let mut d = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let base = (b * total + start) * hw;
                        d.extend_from_slice(&g.data()[base..base + c * hw]);
                    }
                    Tensor::new(&[n, c, h, w], d).unwrap()
                })
            })
            .collect()
    }))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
