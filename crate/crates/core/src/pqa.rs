//! Prediction quality adaptation: confidence gating of temporal contexts.
//!
//! For every context scale a single 3×3 convolution over
//! `concat(context, intermediate)` followed by a sigmoid yields one
//! confidence map per context channel. The gated context is the
//! element-wise product of map and context. Encoder and decoder own
//! separate convolutions.

use crate::error::{dim_err, Result};
use crate::tensor::{concat_channels, Real, Var};

/// Number of context scales that are gated.
pub const SCALES: usize = 3;

/// Which half of the codec a set of confidence maps belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Per-scale confidence maps for one side; every value lies in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct ConfidenceMaps<'t, T: Real> {
    pub side: Side,
    pub maps: Vec<Var<'t, T>>,
}

/// Gated contexts `w ⊙ C`, one per scale.
#[derive(Clone, Debug)]
pub struct GatedContexts<'t, T: Real> {
    pub scales: Vec<Var<'t, T>>,
}

/// `sigmoid(conv3x3(concat(context, intermediate)))`.
///
/// `weight` is `M×(M+C')×3×3` and `bias` `M`, where `M` is the number of
/// context channels and `C'` the intermediate channel count.
pub fn confidence_maps<'t, T: Real>(
    context: Var<'t, T>,
    intermediate: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cs = context.shape();
    let is = intermediate.shape();
    if cs.len() != 4 || is.len() != 4 || cs[0] != is[0] || cs[2..] != is[2..] {
        return dim_err(format!(
            "confidence maps: context {cs:?} vs intermediate {is:?}"
        ));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != cs[1] {
        return dim_err(format!(
            "confidence maps: weight {ws:?} must produce {} maps",
            cs[1]
        ));
    }
    let joined = concat_channels(&[context, intermediate])?;
    Ok(joined.conv2d(weight, bias, 1, 1)?.sigmoid())
}

/// Channel-wise gating `Ĉ^m = w^m ⊙ C^m`.
pub fn gate<'t, T: Real>(context: Var<'t, T>, maps: Var<'t, T>) -> Result<Var<'t, T>> {
    if context.shape() != maps.shape() {
        return dim_err(format!(
            "gate: context {:?} vs maps {:?}",
            context.shape(),
            maps.shape()
        ));
    }
    maps.mul(context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn zero_params_give_half_confidence() {
        let tape = Tape::<f64>::new();
        let ctx = tape.constant(Tensor::from_fn(&[1, 4, 3, 3], |i| i as f64 * 0.1 - 1.0));
        let inter = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 6, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let m = confidence_maps(ctx, inter, w, b).unwrap();
        assert!(m.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_bias_saturates() {
        let tape = Tape::<f64>::new();
        let ctx = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let inter = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 5, 3, 3]));
        let b = tape.constant(Tensor::full(&[2], 20.0));
        let m = confidence_maps(ctx, inter, w, b).unwrap();
        assert!(m.value().data().iter().all(|&v| (1.0 - v).abs() < 1e-8 && v < 1.0));
    }

    #[test]
    fn spatial_mismatch_is_dimension_error() {
        let tape = Tape::<f64>::new();
        let ctx = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let inter = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 5, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            confidence_maps(ctx, inter, w, b),
            Err(crate::Error::Dimension(_))
        ));
        assert!(matches!(gate(ctx, inter), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn gate_identity_and_zero() {
        let tape = Tape::<f64>::new();
        let ctx = tape.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 5.5));
        let ones = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        let zeros = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert_eq!(*gate(ctx, ones).unwrap().value(), *ctx.value());
        assert!(gate(ctx, zeros).unwrap().value().data().iter().all(|&v| v == 0.0));
    }
}
