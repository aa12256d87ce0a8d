//! Reference quality adaptation: spatially variant filtering with
//! per-position kernels predicted from the reference frame.
//!
//! A 3×3 convolution maps the reference frame to `k²` channels; channel
//! `u·k + v` holds tap `(u, v)` of the filter for every output position.
//! The same filter is shared by all channels of the filtered feature.

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::kernels::{for_chunks, Exec};
use crate::tensor::{Real, Tensor, Var};

/// Filter size used by the codec.
pub const FILTER_SIZE: usize = 3;

/// Per-position `k×k` filters, stored as an `N×k²×H×W` tensor.
#[derive(Clone, Copy, Debug)]
pub struct DynamicFilterBank<'t, T: Real> {
    pub taps: Var<'t, T>,
    pub k: usize,
    pub stride: usize,
}

impl<T: Real> DynamicFilterBank<'_, T> {
    /// Spatial extent `(H, W)` of the bank.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.taps.shape();
        (s[2], s[3])
    }

    /// The filters of batch item `n` rearranged as `H×W×k×k`.
    pub fn to_hwkk(&self, n: usize) -> Tensor<T> {
        let t = self.taps.value();
        let (_, kk, h, w) = t.dims4().unwrap();
        let mut out = Vec::with_capacity(h * w * kk);
        for i in 0..h {
            for j in 0..w {
                for tap in 0..kk {
                    out.push(t.at4(n, tap, i, j));
                }
            }
        }
        Tensor::new(&[h, w, self.k, self.k], out).unwrap()
    }
}

/// Builds a bank from the reference frame with a `k²×3×3×3` generator
/// convolution at the given stride (1 or 2), padding 1.
pub fn generate_filters<'t, T: Real>(
    reference: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    stride: usize,
) -> Result<DynamicFilterBank<'t, T>> {
    if stride != 1 && stride != 2 {
        return contract_err(format!("filter generator stride must be 1 or 2, got {stride}"));
    }
    let ws = weight.shape();
    let k = (ws[0] as f64).sqrt().round() as usize;
    if k * k != ws[0] || k % 2 == 0 {
        return contract_err(format!(
            "generator must emit k² channels for odd k, got {}",
            ws[0]
        ));
    }
    let taps = reference.conv2d(weight, bias, stride, 1)?;
    Ok(DynamicFilterBank { taps, k, stride })
}

/// `O(i,j,c) = Σ_{u,v} W(i,j,u,v) · I(i+u, j+v, c)` with zero padding.
pub fn svf_apply<'t, T: Real>(
    feature: Var<'t, T>,
    bank: &DynamicFilterBank<'t, T>,
) -> Result<Var<'t, T>> {
    let (f, b) = (feature.value(), bank.taps.value());
    let (n, _, h, w) = f.dims4()?;
    let (bn, kk, bh, bw) = b.dims4()?;
    if (bn, bh, bw) != (n, h, w) || kk != bank.k * bank.k {
        return dim_err(format!(
            "svf: feature {:?} vs bank {:?}",
            f.shape(),
            b.shape()
        ));
    }
    let k = bank.k;
    let exec = Exec::default();
    let out = svf_forward(exec, &f, &b, k);
    Ok(feature
        .tape()
        .record(out, &[feature, bank.taps], move |g, need| {
            let (df, db) = svf_backward(exec, &f, &b, g, k, need[0], need[1]);
            vec![df, db]
        }))
}

/// Offsets `(dy, dx)` of tap index `t` for filter size `k`.
#[inline]
fn offsets(t: usize, k: usize) -> (isize, isize) {
    let r = (k / 2) as isize;
    ((t / k) as isize - r, (t % k) as isize - r)
}

/// Valid output range along one axis for an offset `d`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi)
}

pub fn svf_forward<T: Real>(exec: Exec, feature: &Tensor<T>, bank: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = feature.dims4().unwrap();
    let hw = h * w;
    let kk = k * k;
    let mut out = vec![T::zero(); n * c * hw];
    for_chunks(exec, &mut out, hw, |nc, plane| {
        let bi = nc / c;
        let src = &feature.data()[nc * hw..(nc + 1) * hw];
        let taps = &bank.data()[bi * kk * hw..(bi + 1) * kk * hw];
        for t in 0..kk {
            let (dy, dx) = offsets(t, k);
            let tw = &taps[t * hw..(t + 1) * hw];
            let (y0, y1) = span(dy, h);
            let (x0, x1) = span(dx, w);
            for i in y0..y1 {
                let si = (i as isize + dy) as usize * w;
                for j in x0..x1 {
                    let sj = (j as isize + dx) as usize;
                    plane[i * w + j] += tw[i * w + j] * src[si + sj];
                }
            }
        }
    });
    Tensor::new(feature.shape(), out).unwrap()
}

#[allow(clippy::type_complexity)]
pub fn svf_backward<T: Real>(
    exec: Exec,
    feature: &Tensor<T>,
    bank: &Tensor<T>,
    gout: &Tensor<T>,
    k: usize,
    need_feature: bool,
    need_bank: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = feature.dims4().unwrap();
    let hw = h * w;
    let kk = k * k;
    let dfeat = need_feature.then(|| {
        let mut d = vec![T::zero(); n * c * hw];
        for_chunks(exec, &mut d, hw, |nc, plane| {
            let bi = nc / c;
            let go = &gout.data()[nc * hw..(nc + 1) * hw];
            let taps = &bank.data()[bi * kk * hw..(bi + 1) * kk * hw];
            for t in 0..kk {
                let (dy, dx) = offsets(t, k);
                let tw = &taps[t * hw..(t + 1) * hw];
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                for i in y0..y1 {
                    let si = (i as isize + dy) as usize * w;
                    for j in x0..x1 {
                        let sj = (j as isize + dx) as usize;
                        plane[si + sj] += tw[i * w + j] * go[i * w + j];
                    }
                }
            }
        });
        Tensor::new(feature.shape(), d).unwrap()
    });
    let dbank = need_bank.then(|| {
        let mut d = vec![T::zero(); n * kk * hw];
        for_chunks(exec, &mut d, hw, |bt, plane| {
            let (bi, t) = (bt / kk, bt % kk);
            let (dy, dx) = offsets(t, k);
            let (y0, y1) = span(dy, h);
            let (x0, x1) = span(dx, w);
            for ch in 0..c {
                let nc = bi * c + ch;
                let src = &feature.data()[nc * hw..(nc + 1) * hw];
                let go = &gout.data()[nc * hw..(nc + 1) * hw];
                for i in y0..y1 {
                    let si = (i as isize + dy) as usize * w;
                    for j in x0..x1 {
                        let sj = (j as isize + dx) as usize;
                        plane[i * w + j] += go[i * w + j] * src[si + sj];
                    }
                }
            }
        });
        Tensor::new(&[n, kk, h, w], d).unwrap()
    });
    (dfeat, dbank)
}
