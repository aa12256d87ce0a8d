//! Quality metrics, rate accounting and the Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize)> {
    let (n, c, h, w) = a.dims4()?;
    if a.shape() != b.shape() || c != 3 || n != 1 {
        return dim_err(format!(
            "PSNR needs two 1×3×H×W frames, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok((h, w))
}

/// `10·log10(1/MSE)` over all RGB samples of two `[0, 1]` frames.
pub fn psnr_rgb(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(psnr_from_mse(acc / a.len() as f64))
}

/// Full-range BT.601 `(Y, Cb, Cr)` of one RGB sample.
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 0.5,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 0.5,
    ]
}

/// Per-plane `(Y, U, V)` PSNR.
pub fn psnr_yuv(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<[f64; 3]> {
    let (h, w) = check_pair(a, b)?;
    let hw = h * w;
    let (da, db) = (a.data(), b.data());
    let mut acc = [0.0; 3];
    for i in 0..hw {
        let ya = rgb_to_ycbcr(da[i] as f64, da[hw + i] as f64, da[2 * hw + i] as f64);
        let yb = rgb_to_ycbcr(db[i] as f64, db[hw + i] as f64, db[2 * hw + i] as f64);
        for c in 0..3 {
            let d = ya[c] - yb[c];
            acc[c] += d * d;
        }
    }
    Ok(acc.map(|s| psnr_from_mse(s / hw as f64)))
}

/// `(6·PSNR_Y + PSNR_U + PSNR_V) / 8`.
pub fn psnr_yuv_compound(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let [y, u, v] = psnr_yuv(a, b)?;
    Ok((6.0 * y + u + v) / 8.0)
}

/// Bits per pixel of a stream of `bytes` covering `frames` frames.
pub fn bpp(bytes: usize, width: usize, height: usize, frames: usize) -> f64 {
    bytes as f64 * 8.0 / (width * height * frames) as f64
}

/// One operating point of a rate-distortion curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
    pub label: String,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64, label: impl Into<String>) -> Self {
        RdPoint {
            bpp,
            quality,
            label: label.into(),
        }
    }
}

/// Coefficients (lowest order first) of the least-squares polynomial of
/// `degree` through `(x, y)`.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() <= degree {
        return contract_err(format!(
            "polynomial fit of degree {degree} needs more than {degree} points, got {}",
            x.len()
        ));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| crate::Error::Contract(format!("polynomial fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// Definite integral of a polynomial over `[lo, hi]`.
pub fn poly_integral(coeffs: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * x.powi(k as i32 + 1) / (k as f64 + 1.0))
            .sum::<f64>()
    };
    prim(hi) - prim(lo)
}

/// Points sorted by rate; quality must then increase strictly.
fn prepared(curve: &[RdPoint], name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 4 {
        return contract_err(format!("{name} curve has {} points, at least 4 required", curve.len()));
    }
    let mut pts: Vec<&RdPoint> = curve.iter().collect();
    pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    for p in &pts {
        if !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite()) {
            return contract_err(format!("{name} curve has invalid point {p:?}"));
        }
    }
    for w in pts.windows(2) {
        if w[1].quality <= w[0].quality {
            return contract_err(format!(
                "{name} curve quality is not strictly increasing with rate ({} then {})",
                w[0].quality, w[1].quality
            ));
        }
    }
    Ok((
        pts.iter().map(|p| p.quality).collect(),
        pts.iter().map(|p| p.bpp.ln()).collect(),
    ))
}

/// Average rate difference of `test` against `anchor` at equal quality,
/// in percent; negative means `test` needs fewer bits.
///
/// Log-rate is fitted as a cubic polynomial of quality for each curve and
/// both fits are integrated over the common quality interval.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let (qa, ra) = prepared(anchor, "anchor")?;
    let (qt, rt) = prepared(test, "test")?;
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if hi <= lo {
        return contract_err(format!("curves do not overlap in quality ({lo} ≥ {hi})"));
    }
    // Quality is mapped onto [-1, 1] over the common interval before fitting.
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let norm = |q: &[f64]| q.iter().map(|v| (v - mid) / half).collect::<Vec<_>>();
    let pa = polyfit(&norm(&qa), &ra, 3)?;
    let pt = polyfit(&norm(&qt), &rt, 3)?;
    let avg = (poly_integral(&pt, -1.0, 1.0) - poly_integral(&pa, -1.0, 1.0)) / 2.0;
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pairs: &[(f64, f64)]) -> Vec<RdPoint> {
        pairs.iter().map(|&(r, q)| RdPoint::new(r, q, "")).collect()
    }

    #[test]
    fn psnr_basics() {
        let a = Tensor::full(&[1, 3, 4, 4], 0.5f32);
        assert_eq!(psnr_rgb(&a, &a).unwrap(), PSNR_CAP);
        let b = Tensor::full(&[1, 3, 4, 4], 0.6f32);
        assert!((psnr_rgb(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr_yuv_compound(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr_rgb(&a, &Tensor::zeros(&[1, 3, 4, 2])).is_err());
    }

    #[test]
    fn grey_is_neutral_chroma() {
        let [y, cb, cr] = rgb_to_ycbcr(0.3, 0.3, 0.3);
        assert!((y - 0.3).abs() < 1e-12);
        assert!((cb - 0.5).abs() < 1e-12 && (cr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bd_rate_identity_and_halving() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 38.5)]);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let half: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bpp / 2.0, p.quality, "")).collect();
        assert!((bd_rate(&a, &half).unwrap() + 50.0).abs() < 1e-6);
    }

    #[test]
    fn bd_rate_rejects_bad_curves() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 38.5)]);
        let short = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)]);
        let flat = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 33.0), (0.8, 38.5)]);
        let apart = curve(&[(0.1, 50.0), (0.2, 53.0), (0.4, 56.0), (0.8, 58.5)]);
        for bad in [&short, &flat, &apart] {
            assert!(matches!(bd_rate(&a, bad), Err(crate::Error::Contract(_))));
        }
    }

    #[test]
    fn polyfit_recovers_cubic() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v + 0.25 * v * v * v).collect();
        let c = polyfit(&x, &y, 3).unwrap();
        for (got, want) in c.iter().zip([1.0, -2.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-10);
        }
    }
}
