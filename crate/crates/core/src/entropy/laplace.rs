//! Discretized Laplace probability model.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor, Var};

/// Lower bound applied to every Laplace scale.
pub const B_MIN: f64 = 1e-3;

/// Probability floor of the continuous rate model (2⁻¹⁶).
pub const P_MIN: f64 = 1.0 / 65536.0;

/// Location and scale of a per-element Laplace distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceParams<T: Real = f32> {
    pub mu: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> LaplaceParams<T> {
    /// Scales below [`B_MIN`] are clamped.
    pub fn new(mu: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        mu.check_same_shape(&b)?;
        let floor = T::lit(B_MIN);
        let b = b.map(|v| if v < floor || v.is_nan() { floor } else { v });
        Ok(LaplaceParams { mu, b })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `(μ, b)` of element `i` in double precision.
    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.mu.data()[i].f64(), self.b.data()[i].f64())
    }
}

/// Probability mass of the unit bin centred on `v` plus its derivatives
/// with respect to `v` and `b` (the derivative in `μ` is the negated
/// derivative in `v`). No floor is applied here.
pub fn bin_mass(v: f64, mu: f64, b: f64) -> (f64, f64, f64) {
    let a = v - mu;
    let s = a.abs();
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    let lower = s - 0.5;
    let upper = s + 0.5;
    if lower >= 0.0 {
        let el = (-lower / b).exp();
        let eu = (-upper / b).exp();
        let p = 0.5 * el * -(-1.0 / b).exp_m1();
        let dp_ds = -p / b;
        let dp_db = 0.5 * (el * lower - eu * upper) / (b * b);
        (p, sign * dp_ds, dp_db)
    } else {
        let eu = (-upper / b).exp();
        let el = (lower / b).exp();
        let p = 1.0 - 0.5 * (eu + el);
        let dp_ds = 0.5 * (eu - el) / b;
        let dp_db = -0.5 * (eu * upper - el * lower) / (b * b);
        (p, sign * dp_ds, dp_db)
    }
}

/// `−log2 p` for the bin of `v` under Laplace(μ, b), with `b` clamped to
/// [`B_MIN`] and `p` clamped to `[2⁻¹⁶, 1]`.
pub fn laplace_bits(v: f64, mu: f64, b: f64) -> f64 {
    let (p, _, _) = bin_mass(v, mu, b.max(B_MIN));
    -p.clamp(P_MIN, 1.0).log2()
}

/// Sum of [`laplace_bits`] over an integer latent.
pub fn estimate_rate<T: Real>(latent: &[i32], params: &LaplaceParams<T>) -> Result<f64> {
    if latent.len() != params.len() {
        return dim_err(format!(
            "rate estimate: {} symbols vs {} parameters",
            latent.len(),
            params.len()
        ));
    }
    let mut bits = 0.0;
    for (i, &v) in latent.iter().enumerate() {
        let (mu, b) = params.get(i);
        bits += laplace_bits(v as f64, mu, b);
    }
    Ok(bits)
}

/// Element-wise differentiable [`laplace_bits`] on the tape.
///
/// Gradients flow to `v` (the noisy latent during training), `mu` and `b`.
pub fn laplace_bits_var<'t, T: Real>(
    v: Var<'t, T>,
    mu: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (vv, mv, bv) = (v.value(), mu.value(), b.value());
    vv.check_same_shape(&mv)?;
    vv.check_same_shape(&bv)?;
    let n = vv.len();
    let mut bits = Vec::with_capacity(n);
    let mut dv = Vec::with_capacity(n);
    let mut db = Vec::with_capacity(n);
    let ln2 = std::f64::consts::LN_2;
    for i in 0..n {
        let raw_b = bv.data()[i].f64();
        let clamped = !(raw_b >= B_MIN);
        let bb = if clamped { B_MIN } else { raw_b };
        let (p, dp_dv, dp_db) = bin_mass(vv.data()[i].f64(), mv.data()[i].f64(), bb);
        if p < P_MIN {
            bits.push(T::lit(-P_MIN.log2()));
            dv.push(T::zero());
            db.push(T::zero());
        } else if p > 1.0 {
            bits.push(T::zero());
            dv.push(T::zero());
            db.push(T::zero());
        } else {
            let k = -1.0 / (p * ln2);
            bits.push(T::lit(-p.log2()));
            dv.push(T::lit(k * dp_dv));
            db.push(if clamped { T::zero() } else { T::lit(k * dp_db) });
        }
    }
    let shape = vv.shape().to_vec();
    let out = Tensor::new(&shape, bits)?;
    let dv = Tensor::new(&shape, dv)?;
    let db = Tensor::new(&shape, db)?;
    Ok(v.tape().record(out, &[v, mu, b], move |g, need| {
        let gv = g.zip_map(&dv, |g, d| g * d).unwrap();
        vec![
            need[0].then(|| gv.clone()),
            need[1].then(|| gv.map(|x| -x)),
            need[2].then(|| g.zip_map(&db, |g, d| g * d).unwrap()),
        ]
    }))
}
