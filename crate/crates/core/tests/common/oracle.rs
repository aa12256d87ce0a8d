//! Brute-force nested-loop references.

use ctxc::tensor::Tensor;

fn at(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * o * ho * wo);
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += at(w, oc, ic, u, v) * at(x, bi, ic, y as usize, xx as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gate(context: &Tensor<f64>, maps: &Tensor<f64>) -> Tensor<f64> {
    let data = context.data().iter().zip(maps.data()).map(|(c, m)| c * m).collect();
    Tensor::new(context.shape(), data).unwrap()
}

pub fn concat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let cb = b.shape()[1];
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for bi in 0..n {
        out.extend_from_slice(&a.data()[bi * ca * h * w..(bi + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[bi * cb * h * w..(bi + 1) * cb * h * w]);
    }
    Tensor::new(&[n, ca + cb, h, w], out).unwrap()
}

pub fn confidence_maps(
    context: &Tensor<f64>,
    intermediate: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
) -> Tensor<f64> {
    let z = conv2d(&concat(context, intermediate), w, b, 1, 1);
    Tensor::new(z.shape(), z.data().iter().map(|&v| sigmoid(v)).collect()).unwrap()
}

/// `O(i,j,c) = Σ_{u,v} W(i,j,u,v) · I(i+u-r, j+v-r, c)` with zero padding;
/// `taps` is `N×k²×H×W` with tap `u·k + v`.
pub fn svf(feature: &Tensor<f64>, taps: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let (n, c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2], feature.shape()[3]);
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(feature.len());
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let y = i as isize + u as isize - r;
                            let x = j as isize + v as isize - r;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            acc += at(taps, bi, u * k + v, i, j) * at(feature, bi, ch, y as usize, x as usize);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(feature.shape(), out).unwrap()
}

/// Bilinear sample at `(x + dx, y + dy)` with the position clamped into
/// the image.
pub fn warp(feature: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2], feature.shape()[3]);
    let mut out = Vec::with_capacity(feature.len());
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x as f64 + at(flow, bi, 0, y, x)).clamp(0.0, (w - 1) as f64);
                    let sy = (y as f64 + at(flow, bi, 1, y, x)).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
                    let p = |yy, xx| at(feature, bi, ch, yy, xx);
                    out.push(
                        (1.0 - ay) * ((1.0 - ax) * p(y0, x0) + ax * p(y0, x1))
                            + ay * ((1.0 - ax) * p(y1, x0) + ax * p(y1, x1)),
                    );
                }
            }
        }
    }
    Tensor::new(feature.shape(), out).unwrap()
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Bits of one Laplace bin by integrating the density with Simpson's
/// rule.
pub fn laplace_bits_quadrature(v: f64, mu: f64, b: f64) -> f64 {
    let n = 2000;
    let (lo, hi) = (v - 0.5, v + 0.5);
    let hstep = (hi - lo) / n as f64;
    let pdf = |x: f64| (-(x - mu).abs() / b).exp() / (2.0 * b);
    let mut s = pdf(lo) + pdf(hi);
    for i in 1..n {
        let x = lo + i as f64 * hstep;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
    }
    -(s * hstep / 3.0).log2()
}
