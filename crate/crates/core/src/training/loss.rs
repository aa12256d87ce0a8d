//! Rate-distortion objectives.

use crate::codec::{Net, PFrame, Quantizer, Reference};
use crate::error::{contract_err, Result};
use crate::tensor::{Real, Var};

/// The four basic Lagrange multipliers, lowest rate first.
pub const LAMBDAS: [f64; 4] = [85.0, 170.0, 380.0, 840.0];

/// Hierarchical distortion weights, indexed by `p mod 4`.
pub const WEIGHT_CYCLE: [f64; 4] = [0.5, 1.2, 0.5, 0.9];

/// Distortion weight of the `p`-th inter frame (1-based).
pub fn hierarchical_weight(p: usize) -> Result<f64> {
    if p < 1 {
        return contract_err("inter frame index starts at 1");
    }
    Ok(WEIGHT_CYCLE[p % 4])
}

/// Training objectives. The first five are per-frame; the last two span a
/// rollout of several frames on one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `w·λ·D_me`
    MeD,
    /// `w·λ·D_me + R_me`
    MeRD,
    /// `w·λ·D_rec`
    RecD,
    /// `w·λ·D_rec + R_rec`
    RecRD,
    /// `w·λ·D_rec + R_me + R_rec`
    All,
    /// Mean of per-frame `All` losses over a cascaded rollout.
    Cascade,
    /// Cascade after repeated coding of the first inter frame.
    RepeatLong,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::MeD => "me_d",
            LossKind::MeRD => "me_rd",
            LossKind::RecD => "rec_d",
            LossKind::RecRD => "rec_rd",
            LossKind::All => "all",
            LossKind::Cascade => "cascade",
            LossKind::RepeatLong => "repeat_long",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "me_d" => LossKind::MeD,
            "me_rd" => LossKind::MeRD,
            "rec_d" => LossKind::RecD,
            "rec_rd" => LossKind::RecRD,
            "all" => LossKind::All,
            "cascade" => LossKind::Cascade,
            "repeat_long" => LossKind::RepeatLong,
            _ => return contract_err(format!("unknown loss {s:?}")),
        })
    }

    pub fn is_rollout(self) -> bool {
        matches!(self, LossKind::Cascade | LossKind::RepeatLong)
    }
}

/// Distortion and rate terms of one coded frame. Rates are in bits per
/// pixel; distortions are MSE on `[0, 1]` samples.
#[derive(Clone, Copy, Debug)]
pub struct FrameTerms<'t, T: Real> {
    pub d_me: Option<Var<'t, T>>,
    pub d_rec: Option<Var<'t, T>>,
    pub r_me: Option<Var<'t, T>>,
    pub r_rec: Option<Var<'t, T>>,
}

impl<'t, T: Real> From<&PFrame<'t, T>> for FrameTerms<'t, T> {
    fn from(f: &PFrame<'t, T>) -> Self {
        FrameTerms {
            d_me: Some(f.d_me),
            d_rec: Some(f.d_rec),
            r_me: Some(f.rate_motion),
            r_rec: Some(f.rate_context),
        }
    }
}

fn need<'t, T: Real>(v: Option<Var<'t, T>>, what: &str) -> Result<Var<'t, T>> {
    match v {
        Some(v) => Ok(v),
        None => contract_err(format!("loss needs {what}")),
    }
}

/// Per-frame loss of `kind` with weight `w` and multiplier `lambda`.
/// Rollout kinds use the `All` form.
pub fn frame_loss<'t, T: Real>(
    kind: LossKind,
    terms: &FrameTerms<'t, T>,
    w: f64,
    lambda: f64,
) -> Result<Var<'t, T>> {
    let wl = w * lambda;
    match kind {
        LossKind::MeD => Ok(need(terms.d_me, "D_me")?.scale(wl)),
        LossKind::MeRD => need(terms.d_me, "D_me")?.scale(wl).add(need(terms.r_me, "R_me")?),
        LossKind::RecD => Ok(need(terms.d_rec, "D_rec")?.scale(wl)),
        LossKind::RecRD => need(terms.d_rec, "D_rec")?.scale(wl).add(need(terms.r_rec, "R_rec")?),
        LossKind::All | LossKind::Cascade | LossKind::RepeatLong => need(terms.d_rec, "D_rec")?
            .scale(wl)
            .add(need(terms.r_me, "R_me")?)?
            .add(need(terms.r_rec, "R_rec")?),
    }
}

/// Arithmetic mean of exactly `t` frame losses, summed in order.
pub fn loss_cascade<'t, T: Real>(losses: &[Var<'t, T>], t: usize) -> Result<Var<'t, T>> {
    if losses.len() != t || t == 0 {
        return contract_err(format!("cascade over {t} frames got {} losses", losses.len()));
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = acc.add(l)?;
    }
    Ok(acc.scale(1.0 / t as f64))
}

/// Inputs shared by the rollout losses.
pub struct Rollout<'a, 'm, 't, T: Real> {
    pub net: &'a Net<'m, 't, T>,
    /// Frames of the training clip; frame 0 is the lossless intra frame.
    pub frames: &'a [Var<'t, T>],
    pub rate: f64,
    pub lambda: f64,
}

impl<'t, T: Real> Rollout<'_, '_, 't, T> {
    /// Reference after the lossless intra frame.
    pub fn intra_reference(&self) -> Result<Reference<'t, T>> {
        let x0 = self.frames[0];
        Ok(Reference {
            frame: x0,
            feature: self.net.intra_feature(x0)?,
        })
    }

    /// `L_T^all` over inter frames `1..=t`, without detaching references.
    pub fn cascade(&self, t: usize, quant: &mut Quantizer) -> Result<Var<'t, T>> {
        if self.frames.len() < t + 1 {
            return contract_err(format!(
                "cascade over {t} frames needs {} frames, got {}",
                t + 1,
                self.frames.len()
            ));
        }
        let mut reference = self.intra_reference()?;
        let mut losses = Vec::with_capacity(t);
        for p in 1..=t {
            let out = self.net.forward_p_frame(self.frames[p], &reference, self.rate, p, quant)?;
            let w = hierarchical_weight(p)?;
            losses.push(frame_loss(LossKind::All, &(&out).into(), w, self.lambda)?);
            reference = out.reference();
        }
        loss_cascade(&losses, t)
    }

    /// Codes inter frame 1, re-codes its own reconstruction `repeats`
    /// more times, then returns the cascade loss over inter frames
    /// `2..=t+1` together with the number of passes spent on frame 1.
    pub fn repeat_long(
        &self,
        t: usize,
        repeats: usize,
        quant: &mut Quantizer,
    ) -> Result<(Var<'t, T>, usize)> {
        if self.frames.len() < t + 2 {
            return contract_err(format!(
                "repeat-long over {t} frames needs {} frames, got {}",
                t + 2,
                self.frames.len()
            ));
        }
        let intra = self.intra_reference()?;
        let mut out = self.net.forward_p_frame(self.frames[1], &intra, self.rate, 1, quant)?;
        let mut passes = 1;
        for _ in 0..repeats {
            let again = out.reference();
            out = self.net.forward_p_frame(again.frame, &again, self.rate, 1, quant)?;
            passes += 1;
        }
        let mut reference = out.reference();
        let mut losses = Vec::with_capacity(t);
        for p in 2..t + 2 {
            let out = self.net.forward_p_frame(self.frames[p], &reference, self.rate, p, quant)?;
            let w = hierarchical_weight(p)?;
            losses.push(frame_loss(LossKind::All, &(&out).into(), w, self.lambda)?);
            reference = out.reference();
        }
        Ok((loss_cascade(&losses, t)?, passes))
    }
}
