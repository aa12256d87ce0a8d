//! The inter-frame coding graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{
    rate_blend, Net, CONTEXT_CHANNELS, CONTEXT_LATENT, HYPER_LATENT,
    MOTION_LATENT, RATE_POINTS,
};
use crate::entropy::laplace::laplace_bits_var;
use crate::entropy::range_coder::{SYMBOL_MAX, SYMBOL_MIN};
use crate::error::{contract_err, dim_err, Result};
use crate::pqa;
use crate::rqa;
use crate::tensor::{concat_channels, Real, Tensor, Var};

const SLOPE: f64 = 0.1;

/// Quantization behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Train,
    /// Round half away from zero, clamped to the coder alphabet.
    Eval,
}

/// Quantizer with its noise source and a count of clamped symbols.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub mode: Mode,
    rng: ChaCha8Rng,
    pub clamped: usize,
}

impl Quantizer {
    pub fn train(seed: u64) -> Self {
        Quantizer {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clamped: 0,
        }
    }

    pub fn eval() -> Self {
        Quantizer {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            clamped: 0,
        }
    }

    pub fn apply<'t, T: Real>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.mode {
            Mode::Train => {
                let v = x.value();
                let noise = Tensor::from_fn(v.shape(), |_| T::lit(self.rng.gen_range(-0.5..0.5)));
                x.add(x.tape().constant(noise))
            }
            Mode::Eval => {
                let v = x.value();
                let (lo, hi) = (SYMBOL_MIN as f64, SYMBOL_MAX as f64);
                let mut data = Vec::with_capacity(v.len());
                for &e in v.data() {
                    let r = round_half_away(e.f64());
                    if !(lo..=hi).contains(&r) {
                        self.clamped += 1;
                    }
                    data.push(T::lit(if r.is_nan() { 0.0 } else { r.clamp(lo, hi) }));
                }
                let q = Tensor::new(v.shape(), data)?;
                Ok(x.tape().constant(q))
            }
        }
    }
}

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// A quantized latent with its hyper latent and the Laplace parameters
/// both are coded with.
#[derive(Clone, Copy, Debug)]
pub struct CodedLatent<'t, T: Real> {
    /// Quantized latent, in step units.
    pub symbols: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub b: Var<'t, T>,
    pub hyper: Var<'t, T>,
    pub hyper_mu: Var<'t, T>,
    pub hyper_b: Var<'t, T>,
    /// Estimated bits of latent plus hyper latent.
    pub bits: Var<'t, T>,
}

/// Extent produced by one stride-2, pad-1, 3×3 convolution.
fn half_up(n: usize) -> usize {
    n.div_ceil(2)
}

/// Spatial extent of the hyper latent for a latent of extent `(h, w)`.
pub fn hyper_extent(h: usize, w: usize) -> (usize, usize) {
    (half_up(half_up(h)), half_up(half_up(w)))
}

impl<'m, 't, T: Real> Net<'m, 't, T> {
    fn conv(&self, x: Var<'t, T>, layer: &str, stride: usize) -> Result<Var<'t, T>> {
        x.conv2d(
            self.p(&format!("{layer}.w")),
            self.p(&format!("{layer}.b")),
            stride,
            1,
        )
    }

    fn conv_act(&self, x: Var<'t, T>, layer: &str, stride: usize) -> Result<Var<'t, T>> {
        Ok(self.conv(x, layer, stride)?.leaky_relu(SLOPE))
    }

    fn up_conv(&self, x: Var<'t, T>, layer: &str) -> Result<Var<'t, T>> {
        self.conv(x.upsample2()?, layer, 1)
    }

    /// `exp(±log step)` at a continuous rate index, differentiable in the
    /// stored log steps.
    pub fn step_factor(&self, name: &str, rate: f64, inverse: bool) -> Result<Var<'t, T>> {
        let logq = self.p(name);
        let lv = logq.value();
        if lv.len() != RATE_POINTS {
            return dim_err(format!("{name}: {} steps", lv.len()));
        }
        let (i, f) = rate_blend(rate);
        let sign = if inverse { -1.0 } else { 1.0 };
        let l = (1.0 - f) * lv.data()[i].f64() + f * lv.data()[i + 1].f64();
        let k = (sign * l).exp();
        let out = Tensor::scalar(T::lit(k));
        Ok(self.tape().record(out, &[logq], move |g, _| {
            let mut d = vec![T::zero(); RATE_POINTS];
            let gk = g.item().f64() * k * sign;
            d[i] = T::lit(gk * (1.0 - f));
            d[i + 1] += T::lit(gk * f);
            vec![Some(Tensor::new(&[RATE_POINTS], d).unwrap())]
        }))
    }

    /// Laplace parameters of a latent of extent `(h, w)` from its quantized
    /// hyper latent.
    pub fn hyper_params(
        &self,
        prefix: &str,
        hyper: Var<'t, T>,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let t = self.conv_act(hyper.upsample2()?, &format!("{prefix}.d1"), 1)?;
        let t = self.up_conv(t, &format!("{prefix}.d2"))?.crop(h, w)?;
        let mu = t.slice_channels(0, channels)?;
        let b = t.slice_channels(channels, channels)?.softplus();
        Ok((mu, b))
    }

    /// Fixed learned prior of a hyper latent, broadcast to its shape.
    pub fn hyper_prior(
        &self,
        prefix: &str,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mu = self.p(&format!("{prefix}.prior_mu")).expand_channels(n, h, w)?;
        let b = self
            .p(&format!("{prefix}.prior_b"))
            .softplus()
            .expand_channels(n, h, w)?;
        Ok((mu, b))
    }

    /// Quantizes a step-scaled latent and its hyper latent and estimates
    /// the bits of both.
    fn code_latent(
        &self,
        prefix: &str,
        scaled: Var<'t, T>,
        quant: &mut Quantizer,
    ) -> Result<CodedLatent<'t, T>> {
        let (n, c, h, w) = scaled.value().dims4()?;
        let z = self.conv_act(scaled, &format!("{prefix}.e1"), 2)?;
        let z = self.conv(z, &format!("{prefix}.e2"), 2)?;
        let hyper = quant.apply(z)?;
        let (hh, hw) = hyper_extent(h, w);
        let (hyper_mu, hyper_b) = self.hyper_prior(prefix, n, hh, hw)?;
        let (mu, b) = self.hyper_params(prefix, hyper, c, h, w)?;
        let symbols = quant.apply(scaled)?;
        let bits = laplace_bits_var(symbols, mu, b)?
            .sum()
            .add(laplace_bits_var(hyper, hyper_mu, hyper_b)?.sum())?;
        Ok(CodedLatent {
            symbols,
            mu,
            b,
            hyper,
            hyper_mu,
            hyper_b,
            bits,
        })
    }

    /// Pixel-unit flow from `x` towards the previous reconstruction.
    pub fn estimate_motion(&self, x: Var<'t, T>, x_prev: Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape() != x_prev.shape() {
            return dim_err(format!(
                "motion estimation: {:?} vs {:?}",
                x.shape(),
                x_prev.shape()
            ));
        }
        let a = x.avg_pool2()?.avg_pool2()?;
        let b = x_prev.avg_pool2()?.avg_pool2()?;
        let mut t = concat_channels(&[a, b])?;
        for layer in ["me.c1", "me.c2", "me.c3", "me.c4"] {
            t = self.conv_act(t, layer, 1)?;
        }
        let flow = self.conv(t, "me.c5", 1)?.scale(4.0);
        flow.upsample2()?.upsample2()
    }

    /// Flow reconstructed from the quantized motion latent.
    pub fn decode_motion(&self, symbols: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        let q = self.step_factor("q.motion", rate, false)?;
        let mut t = symbols.mul_scalar(q)?;
        for layer in ["mv.d1", "mv.d2", "mv.d3"] {
            t = self.up_conv(t, layer)?.leaky_relu(SLOPE);
        }
        self.up_conv(t, "mv.d4")
    }

    /// Codes `flow`; returns the decoded flow and the coded latent.
    pub fn code_motion(
        &self,
        flow: Var<'t, T>,
        rate: f64,
        quant: &mut Quantizer,
    ) -> Result<(Var<'t, T>, CodedLatent<'t, T>)> {
        let mut t = flow;
        for layer in ["mv.e1", "mv.e2", "mv.e3"] {
            t = self.conv_act(t, layer, 2)?;
        }
        let y = self.conv(t, "mv.e4", 2)?;
        let scaled = y.mul_scalar(self.step_factor("q.motion", rate, true)?)?;
        let coded = self.code_latent("hm", scaled, quant)?;
        let flow_hat = self.decode_motion(coded.symbols, rate)?;
        Ok((flow_hat, coded))
    }

    /// Three-scale temporal contexts from the previous feature.
    pub fn mine_contexts(
        &self,
        feature_prev: Var<'t, T>,
        flow: Var<'t, T>,
        variant: usize,
    ) -> Result<TemporalContexts<'t, T>> {
        if variant >= 4 {
            return contract_err(format!("context variant {variant} outside 0..4"));
        }
        let c0 = self.conv(feature_prev.warp(flow)?, &format!("cm.first{variant}"), 1)?;
        let flow1 = flow.avg_pool2()?.scale(0.5);
        let flow2 = flow1.avg_pool2()?.scale(0.5);
        let p1 = self.conv_act(feature_prev.avg_pool2()?, "cm.d1", 1)?;
        let p2 = self.conv_act(p1.avg_pool2()?, "cm.d2", 1)?;
        let c1 = self.conv(p1.warp(flow1)?, "cm.c1", 1)?;
        let c2 = self.conv(p2.warp(flow2)?, "cm.c2", 1)?;
        Ok(TemporalContexts {
            scales: [c0, c1, c2],
        })
    }

    /// Context gated by the named confidence layer, or passed through
    /// when the model has no PQA.
    fn gated(&self, layer: &str, context: Var<'t, T>, inter: Var<'t, T>) -> Result<Var<'t, T>> {
        if !self.config().pqa {
            return Ok(context);
        }
        let maps = pqa::confidence_maps(
            context,
            inter,
            self.p(&format!("{layer}.w")),
            self.p(&format!("{layer}.b")),
        )?;
        pqa::gate(context, maps)
    }

    /// Confidence maps of one side, in scale order; empty without PQA.
    pub fn confidence_maps(
        &self,
        side: pqa::Side,
        contexts: &TemporalContexts<'t, T>,
        intermediates: [Var<'t, T>; 3],
    ) -> Result<pqa::ConfidenceMaps<'t, T>> {
        let mut maps = Vec::new();
        if self.config().pqa {
            let tag = match side {
                pqa::Side::Encoder => "e",
                pqa::Side::Decoder => "d",
            };
            for (i, (&c, inter)) in contexts.scales.iter().zip(intermediates).enumerate() {
                maps.push(pqa::confidence_maps(
                    c,
                    inter,
                    self.p(&format!("pqa.{tag}{i}.w")),
                    self.p(&format!("pqa.{tag}{i}.b")),
                )?);
            }
        }
        Ok(pqa::ConfidenceMaps { side, maps })
    }

    fn filter(&self, feature: Var<'t, T>, x_prev: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        match self.filter_bank(x_prev, stride)? {
            Some(bank) => rqa::svf_apply(feature, &bank),
            None => Ok(feature),
        }
    }

    /// Filter bank of the encoder (`stride` 2) or decoder (`stride` 1).
    pub fn filter_bank(
        &self,
        x_prev: Var<'t, T>,
        stride: usize,
    ) -> Result<Option<rqa::DynamicFilterBank<'t, T>>> {
        if !self.config().rqa {
            return Ok(None);
        }
        let layer = if stride == 2 { "rqa.enc" } else { "rqa.dec" };
        rqa::generate_filters(
            x_prev,
            self.p(&format!("{layer}.w")),
            self.p(&format!("{layer}.b")),
            stride,
        )
        .map(Some)
    }

    /// Contextual encoder; returns the coded context latent.
    pub fn encode_frame(
        &self,
        x: Var<'t, T>,
        contexts: &TemporalContexts<'t, T>,
        x_prev: Var<'t, T>,
        rate: f64,
        quant: &mut Quantizer,
    ) -> Result<CodedLatent<'t, T>> {
        let [c0, c1, c2] = contexts.scales;
        check_contexts(x, contexts)?;
        let g0 = self.gated("pqa.e0", c0, x)?;
        let h1 = self.conv_act(concat_channels(&[x, g0])?, "enc.c1", 2)?;
        let h1 = self.filter(h1, x_prev, 2)?;
        let g1 = self.gated("pqa.e1", c1, h1)?;
        let h2 = self.conv_act(concat_channels(&[h1, g1])?, "enc.c2", 2)?;
        let g2 = self.gated("pqa.e2", c2, h2)?;
        let h3 = self.conv_act(concat_channels(&[h2, g2])?, "enc.c3", 2)?;
        let y = self.conv(h3, "enc.c4", 2)?;
        let scaled = y.mul_scalar(self.step_factor("q.context", rate, true)?)?;
        self.code_latent("hc", scaled, quant)
    }

    /// Contextual decoder; returns the unclamped frame and `F̂`.
    ///
    /// The frame head adds its output to `prediction`, the reference frame
    /// warped by the decoded flow.
    pub fn decode_frame(
        &self,
        symbols: Var<'t, T>,
        contexts: &TemporalContexts<'t, T>,
        x_prev: Var<'t, T>,
        prediction: Var<'t, T>,
        rate: f64,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let [c0, c1, c2] = contexts.scales;
        let q = self.step_factor("q.context", rate, false)?;
        let t = self.up_conv(symbols.mul_scalar(q)?, "dec.c1")?.leaky_relu(SLOPE);
        let d2 = self.up_conv(t, "dec.c2")?.leaky_relu(SLOPE);
        let g2 = self.gated("pqa.d2", c2, d2)?;
        let d1 = self
            .conv_act(concat_channels(&[d2, g2])?, "dec.c3", 1)?
            .upsample2()?;
        let g1 = self.gated("pqa.d1", c1, d1)?;
        let d0 = self
            .conv_act(concat_channels(&[d1, g1])?, "dec.c4", 1)?
            .upsample2()?;
        let g0 = self.gated("pqa.d0", c0, d0)?;
        let f = self.conv_act(concat_channels(&[d0, g0])?, "dec.c5", 1)?;
        let feature = self.filter(f, x_prev, 1)?;
        let x_hat = self.conv(feature, "head", 1)?.add(prediction)?;
        Ok((x_hat, feature))
    }

    /// Reference feature of an intra frame.
    pub fn intra_feature(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.conv(x, "intra.f", 1)
    }

    /// One inter frame end to end.
    pub fn forward_p_frame(
        &self,
        x: Var<'t, T>,
        reference: &Reference<'t, T>,
        rate: f64,
        p_index: usize,
        quant: &mut Quantizer,
    ) -> Result<PFrame<'t, T>> {
        check_frame(x)?;
        if p_index == 0 {
            return contract_err("inter frame index starts at 1");
        }
        let (n, _, h, w) = x.value().dims4()?;
        let pixels = (n * h * w) as f64;
        let flow = self.estimate_motion(x, reference.frame)?;
        let (flow_hat, motion) = self.code_motion(flow, rate, quant)?;
        let contexts = self.mine_contexts(reference.feature, flow_hat, p_index % 4)?;
        let context = self.encode_frame(x, &contexts, reference.frame, rate, quant)?;
        let prediction = reference.frame.warp(flow_hat)?;
        let (raw, feature) = self.decode_frame(context.symbols, &contexts, reference.frame, prediction, rate)?;
        let x_hat = raw.clamp(0.0, 1.0);
        let d_me = x.mse(prediction)?;
        let d_rec = match quant.mode {
            Mode::Train => x.mse(raw)?,
            Mode::Eval => x.mse(x_hat)?,
        };
        Ok(PFrame {
            x_hat,
            feature,
            flow_hat,
            contexts,
            motion,
            context,
            rate_motion: motion.bits.scale(1.0 / pixels),
            rate_context: context.bits.scale(1.0 / pixels),
            d_me,
            d_rec,
        })
    }
}

fn check_frame<T: Real>(x: Var<'_, T>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 || s[3] == 0 {
        return dim_err(format!("frames must be N×3×H×W with H, W multiples of 16, got {s:?}"));
    }
    Ok(())
}

fn check_contexts<T: Real>(x: Var<'_, T>, contexts: &TemporalContexts<'_, T>) -> Result<()> {
    check_frame(x)?;
    let s = x.shape();
    for (i, c) in contexts.scales.iter().enumerate() {
        let cs = c.shape();
        let want = [s[0], CONTEXT_CHANNELS[i], s[2] >> i, s[3] >> i];
        if cs != want {
            return dim_err(format!("context {i} is {cs:?}, expected {want:?}"));
        }
    }
    Ok(())
}

/// Multi-scale temporal contexts at full, half and quarter resolution.
#[derive(Clone, Copy, Debug)]
pub struct TemporalContexts<'t, T: Real> {
    pub scales: [Var<'t, T>; 3],
}

/// Previous reconstruction and its feature.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'t, T: Real> {
    pub frame: Var<'t, T>,
    pub feature: Var<'t, T>,
}

/// Everything produced while coding one inter frame.
#[derive(Clone, Copy, Debug)]
pub struct PFrame<'t, T: Real> {
    pub x_hat: Var<'t, T>,
    pub feature: Var<'t, T>,
    pub flow_hat: Var<'t, T>,
    pub contexts: TemporalContexts<'t, T>,
    pub motion: CodedLatent<'t, T>,
    pub context: CodedLatent<'t, T>,
    /// Motion bits per pixel, hyper latent included.
    pub rate_motion: Var<'t, T>,
    /// Context bits per pixel, hyper latent included.
    pub rate_context: Var<'t, T>,
    /// MSE between the frame and the reference warped by the decoded flow.
    pub d_me: Var<'t, T>,
    /// MSE of the unclamped output in training mode, of `x_hat` in eval mode.
    pub d_rec: Var<'t, T>,
}

impl<'t, T: Real> PFrame<'t, T> {
    pub fn reference(&self) -> Reference<'t, T> {
        Reference {
            frame: self.x_hat,
            feature: self.feature,
        }
    }
}

/// Latent shapes of one `h×w` frame: motion, motion hyper, context,
/// context hyper.
pub fn latent_shapes(h: usize, w: usize) -> [[usize; 4]; 4] {
    let (lh, lw) = (h / 16, w / 16);
    let (hh, hw) = hyper_extent(lh, lw);
    [
        [1, MOTION_LATENT, lh, lw],
        [1, HYPER_LATENT, hh, hw],
        [1, CONTEXT_LATENT, lh, lw],
        [1, HYPER_LATENT, hh, hw],
    ]
}
