//! Raw forward/backward kernels over dense slices.
//!
//! Each data-parallel kernel takes an [`Exec`] policy. Parallel execution
//! only splits work across independent outputs, so both policies produce
//! bit-identical results.

use super::{Real, Tensor};

/// Execution policy for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_chunks<T: Send, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    match exec {
        Exec::Sequential => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c))
        }
    }
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k)×(Ho·Wo)` patch matrix.
pub fn im2col<T: Real>(exec: Exec, g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.cols();
    let kk = g.k * g.k;
    for_chunks(exec, cols, kk * p, |ci, block| {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut block[(ky * g.k + kx) * p..(ky * g.k + kx + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    });
}

/// Folds a patch matrix back onto an image, accumulating overlaps.
pub fn col2im<T: Real>(exec: Exec, g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let p = g.cols();
    let kk = g.k * g.k;
    for_chunks(exec, img, g.h * g.w, |ci, plane| {
        let block = &cols[ci * kk * p..(ci + 1) * kk * p];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &block[(ky * g.k + kx) * p..(ky * g.k + kx + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    });
}

/// Cross-correlation with zero padding. `input` is `N×C×H×W`, `weight`
/// `O×C×k×k`, `bias` `O`.
pub fn conv2d_forward<T: Real>(
    exec: Exec,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, w) = input.dims4().expect("4-d input");
    let (o, _, k, _) = weight.dims4().expect("4-d weight");
    let g = ConvGeom::new(c, h, w, k, stride, pad);
    let (rows, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for b in 0..n {
        let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let patches: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(exec, &g, img, &mut cols);
            &cols
        };
        let dst = &mut out[b * o * p..(b + 1) * o * p];
        for (oc, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        gemm_rows(exec, o, rows, p, weight.data(), patches, dst);
    }
    Tensor::new(&[n, o, g.ho, g.wo], out).expect("conv output shape")
}

/// `c += a·b` with `a` `m×k`, `b` `k×n`; parallel over row blocks of `c`.
fn gemm_rows<T: Real>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const BLOCK: usize = 16;
    if exec == Exec::Sequential || m <= BLOCK {
        T::gemm(m, k, n, a, false, b, false, T::one(), c, n);
        return;
    }
    for_chunks(exec, c, BLOCK * n, |i, cb| {
        let rows = cb.len() / n;
        let ab = &a[i * BLOCK * k..(i * BLOCK + rows) * k];
        T::gemm(rows, k, n, ab, false, b, false, T::one(), cb, n);
    });
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    exec: Exec,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = input.dims4().expect("4-d input");
    let (o, _, k, _) = weight.dims4().expect("4-d weight");
    let g = ConvGeom::new(c, h, w, k, stride, pad);
    let (rows, p) = (g.rows(), g.cols());
    let mut dx = need_input.then(|| vec![T::zero(); n * c * h * w]);
    let mut dw = need_params.then(|| vec![T::zero(); o * rows]);
    let mut db = need_params.then(|| vec![T::zero(); o]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let mut dcols = vec![T::zero(); if need_input { rows * p } else { 0 }];
    for b in 0..n {
        let go = &gout.data()[b * o * p..(b + 1) * o * p];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
            let patches: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(exec, &g, img, &mut cols);
                &cols
            };
            T::gemm(o, p, rows, go, false, patches, true, T::one(), dw, rows);
            for (oc, row) in go.chunks(p).enumerate() {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                db[oc] += acc;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * c * h * w..(b + 1) * c * h * w];
            if g.is_pointwise() {
                T::gemm(rows, o, p, weight.data(), true, go, false, T::zero(), dimg, p);
            } else {
                T::gemm(rows, o, p, weight.data(), true, go, false, T::zero(), &mut dcols, p);
                col2im(exec, &g, &dcols, dimg);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(input.shape(), d).unwrap()),
        dw.map(|d| Tensor::new(weight.shape(), d).unwrap()),
        db.map(|d| Tensor::new(&[o], d).unwrap()),
    )
}

/// Bilinear sample position with clamp-to-edge handling along one axis.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    inside: bool,
}

#[inline]
fn tap(pos: f64, extent: usize) -> Tap {
    let hi = (extent - 1) as f64;
    let inside = pos > 0.0 && pos < hi;
    let s = pos.clamp(0.0, hi);
    let i0 = (s.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    Tap {
        i0,
        i1,
        frac: s - i0 as f64,
        inside,
    }
}

#[inline]
fn taps<T: Real>(flow: &[T], hw: usize, w: usize, h: usize, y: usize, x: usize) -> (Tap, Tap) {
    let i = y * w + x;
    let dx = flow[i].f64();
    let dy = flow[hw + i].f64();
    (tap(x as f64 + dx, w), tap(y as f64 + dy, h))
}

/// Samples `feature` (`N×C×H×W`) at `(x+dx, y+dy)` with `flow` `N×2×H×W`.
pub fn warp_forward<T: Real>(exec: Exec, feature: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = feature.dims4().expect("4-d feature");
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for_chunks(exec, &mut out, hw, |nc, plane| {
        let b = nc / c;
        let src = &feature.data()[nc * hw..(nc + 1) * hw];
        let fl = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let (tx, ty) = taps(fl, hw, w, h, y, x);
                let (ax, ay) = (T::lit(tx.frac), T::lit(ty.frac));
                let one = T::one();
                let top = (one - ax) * src[ty.i0 * w + tx.i0] + ax * src[ty.i0 * w + tx.i1];
                let bot = (one - ax) * src[ty.i1 * w + tx.i0] + ax * src[ty.i1 * w + tx.i1];
                plane[y * w + x] = (one - ay) * top + ay * bot;
            }
        }
    });
    Tensor::new(feature.shape(), out).unwrap()
}

/// Gradients of [`warp_forward`] with respect to feature and flow.
pub fn warp_backward<T: Real>(
    exec: Exec,
    feature: &Tensor<T>,
    flow: &Tensor<T>,
    gout: &Tensor<T>,
    need_feature: bool,
    need_flow: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = feature.dims4().expect("4-d feature");
    let hw = h * w;
    let one = T::one();
    let dfeat = need_feature.then(|| {
        let mut d = vec![T::zero(); n * c * hw];
        for_chunks(exec, &mut d, hw, |nc, plane| {
            let b = nc / c;
            let go = &gout.data()[nc * hw..(nc + 1) * hw];
            let fl = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let (tx, ty) = taps(fl, hw, w, h, y, x);
                    let (ax, ay) = (T::lit(tx.frac), T::lit(ty.frac));
                    let g = go[y * w + x];
                    plane[ty.i0 * w + tx.i0] += g * (one - ay) * (one - ax);
                    plane[ty.i0 * w + tx.i1] += g * (one - ay) * ax;
                    plane[ty.i1 * w + tx.i0] += g * ay * (one - ax);
                    plane[ty.i1 * w + tx.i1] += g * ay * ax;
                }
            }
        });
        Tensor::new(feature.shape(), d).unwrap()
    });
    let dflow = need_flow.then(|| {
        let mut d = vec![T::zero(); n * 2 * hw];
        for_chunks(exec, &mut d, 2 * hw, |b, dfl| {
            let fl = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let (tx, ty) = taps(fl, hw, w, h, y, x);
                    let (ax, ay) = (T::lit(tx.frac), T::lit(ty.frac));
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let nc = b * c + ch;
                        let src = &feature.data()[nc * hw..(nc + 1) * hw];
                        let g = gout.data()[nc * hw + y * w + x];
                        let v00 = src[ty.i0 * w + tx.i0];
                        let v01 = src[ty.i0 * w + tx.i1];
                        let v10 = src[ty.i1 * w + tx.i0];
                        let v11 = src[ty.i1 * w + tx.i1];
                        gx += g * ((one - ay) * (v01 - v00) + ay * (v11 - v10));
                        gy += g * ((one - ax) * (v10 - v00) + ax * (v11 - v01));
                    }
                    dfl[y * w + x] = if tx.inside { gx } else { T::zero() };
                    dfl[hw + y * w + x] = if ty.inside { gy } else { T::zero() };
                }
            }
        });
        Tensor::new(flow.shape(), d).unwrap()
    });
    (dfeat, dflow)
}
