//! Whole-sequence encoding and decoding through the container format.

use super::graph::{latent_shapes, Quantizer, Reference};
use super::model::{ModelState, Net, CONTEXT_LATENT, MOTION_LATENT};
use crate::entropy::bitstream::{Bitstream, FrameChunk, Header, InterPayload};
use crate::entropy::laplace::LaplaceParams;
use crate::entropy::range_coder::{quantized_bits, range_decode, range_encode};
use crate::error::{contract_err, dim_err, format_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Frame kind chosen for position `i` under an intra period (`-1` or `0`
/// means only the first frame is intra).
pub fn is_intra(i: usize, intra_period: i32) -> bool {
    i == 0 || (intra_period > 0 && i % intra_period as usize == 0)
}

/// Per-sequence encoder bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeStats {
    /// Latent entries that fell outside the coder alphabet and were clamped.
    pub clamped: usize,
    /// Payload bits per frame.
    pub frame_bits: Vec<u64>,
    /// Bits predicted by the quantized CDFs for each frame's payload
    /// (intra frames report their raw size).
    pub estimated_bits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Encoder-side reconstructions, `1×3×H×W` in `[0, 1]`.
    pub recon: Vec<Tensor<f32>>,
    pub stats: EncodeStats,
}

/// Quantizes a frame to 8 bits per sample.
pub fn to_rgb8(frame: &Tensor<f32>) -> Vec<u8> {
    frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[1, 3, h, w], bytes.iter().map(|&b| b as f32 / 255.0).collect()).unwrap()
}

fn symbols_of(v: Var<'_, f32>) -> Vec<i32> {
    v.value().data().iter().map(|&x| x as i32).collect()
}

fn params_of(mu: Var<'_, f32>, b: Var<'_, f32>) -> Result<LaplaceParams<f32>> {
    LaplaceParams::new((*mu.value()).clone(), (*b.value()).clone())
}

struct RefTensors {
    frame: Tensor<f32>,
    feature: Tensor<f32>,
}

impl RefTensors {
    fn bind<'t>(&self, tape: &'t Tape<f32>) -> Reference<'t, f32> {
        Reference {
            frame: tape.constant(self.frame.clone()),
            feature: tape.constant(self.feature.clone()),
        }
    }
}

fn intra_reference(model: &ModelState, recon: &Tensor<f32>) -> Result<RefTensors> {
    let tape = Tape::inference();
    let net = model.bind(&tape, |_| false);
    let feature = net.intra_feature(tape.constant(recon.clone()))?;
    let feature = (*feature.value()).clone();
    Ok(RefTensors {
        frame: recon.clone(),
        feature,
    })
}

fn frame_extent(frames: &[Tensor<f32>]) -> Result<(usize, usize)> {
    let Some(first) = frames.first() else {
        return contract_err("cannot encode an empty sequence");
    };
    let (n, c, h, w) = first.dims4()?;
    if n != 1 || c != 3 || h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return dim_err(format!(
            "frames must be 1×3×H×W with H, W positive multiples of 16, got {:?}",
            first.shape()
        ));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize || frames.len() > u16::MAX as usize {
        return contract_err("sequence too large for the container");
    }
    for f in frames {
        if f.shape() != first.shape() {
            return dim_err(format!("frame {:?} vs {:?}", f.shape(), first.shape()));
        }
    }
    Ok((h, w))
}

/// Encodes `frames` at a continuous rate index in `[0, 3]`.
pub fn encode_sequence(
    model: &ModelState,
    frames: &[Tensor<f32>],
    rate: f32,
    intra_period: i32,
) -> Result<Encoded> {
    let (h, w) = frame_extent(frames)?;
    if !(0.0..=3.0).contains(&rate) {
        return contract_err(format!("rate index {rate} outside [0, 3]"));
    }
    let r = rate as f64;
    let mut chunks = Vec::with_capacity(frames.len());
    let mut recon = Vec::with_capacity(frames.len());
    let mut stats = EncodeStats::default();
    let mut reference: Option<RefTensors> = None;
    let mut p_index = 0;
    for (i, x) in frames.iter().enumerate() {
        if is_intra(i, intra_period) {
            let rgb = to_rgb8(x);
            let xr = from_rgb8(&rgb, h, w);
            reference = Some(intra_reference(model, &xr)?);
            let bits = 8 * rgb.len() as u64;
            stats.frame_bits.push(bits);
            stats.estimated_bits.push(bits as f64);
            chunks.push(FrameChunk::Intra(rgb));
            recon.push(xr);
            p_index = 0;
            continue;
        }
        p_index += 1;
        let prev = reference.as_ref().unwrap();
        let tape = Tape::inference();
        let net = model.bind(&tape, |_| false);
        let mut quant = Quantizer::eval();
        let out = net.forward_p_frame(tape.constant(x.clone()), &prev.bind(&tape), r, p_index, &mut quant)?;
        stats.clamped += quant.clamped;
        let segments = [
            (out.motion.hyper, out.motion.hyper_mu, out.motion.hyper_b),
            (out.motion.symbols, out.motion.mu, out.motion.b),
            (out.context.hyper, out.context.hyper_mu, out.context.hyper_b),
            (out.context.symbols, out.context.mu, out.context.b),
        ];
        let mut coded = Vec::with_capacity(4);
        let mut estimate = 0.0;
        for (sym, mu, b) in segments {
            let s = symbols_of(sym);
            let p = params_of(mu, b)?;
            estimate += quantized_bits(&s, &p)?;
            coded.push(range_encode(&s, &p)?);
        }
        let [hyper_motion, motion, hyper_context, context]: [Vec<u8>; 4] = coded.try_into().unwrap();
        let payload = InterPayload {
            hyper_motion,
            motion,
            hyper_context,
            context,
        };
        stats.frame_bits.push(8 * payload.byte_len() as u64);
        stats.estimated_bits.push(estimate);
        chunks.push(FrameChunk::Inter(payload));
        let next = RefTensors {
            frame: (*out.x_hat.value()).clone(),
            feature: (*out.feature.value()).clone(),
        };
        recon.push(next.frame.clone());
        reference = Some(next);
    }
    let bitstream = Bitstream {
        header: Header {
            width: w as u16,
            height: h as u16,
            frame_count: frames.len() as u16,
            rate,
        },
        frames: chunks,
    };
    Ok(Encoded {
        bitstream,
        recon,
        stats,
    })
}

/// Decodes one inter frame from its payload; needs nothing but the
/// previous reference.
fn decode_inter<'t>(
    net: &Net<'_, 't, f32>,
    payload: &InterPayload,
    reference: &Reference<'t, f32>,
    rate: f64,
    p_index: usize,
    h: usize,
    w: usize,
) -> Result<(Var<'t, f32>, Var<'t, f32>)> {
    let tape = net.tape();
    let [m_shape, hm_shape, c_shape, hc_shape] = latent_shapes(h, w);
    let decode = |bytes: &[u8], shape: &[usize; 4], mu: Var<'t, f32>, b: Var<'t, f32>| -> Result<Var<'t, f32>> {
        let p = params_of(mu, b)?;
        let count = shape.iter().product();
        let s = range_decode(bytes, &p, count)?;
        Ok(tape.constant(Tensor::new(shape, s.into_iter().map(|v| v as f32).collect())?))
    };
    let (pm, pb) = net.hyper_prior("hm", 1, hm_shape[2], hm_shape[3])?;
    let hm = decode(&payload.hyper_motion, &hm_shape, pm, pb)?;
    let (mu, b) = net.hyper_params("hm", hm, MOTION_LATENT, m_shape[2], m_shape[3])?;
    let m = decode(&payload.motion, &m_shape, mu, b)?;
    let flow = net.decode_motion(m, rate)?;
    let contexts = net.mine_contexts(reference.feature, flow, p_index % 4)?;
    let (pm, pb) = net.hyper_prior("hc", 1, hc_shape[2], hc_shape[3])?;
    let hc = decode(&payload.hyper_context, &hc_shape, pm, pb)?;
    let (mu, b) = net.hyper_params("hc", hc, CONTEXT_LATENT, c_shape[2], c_shape[3])?;
    let y = decode(&payload.context, &c_shape, mu, b)?;
    let prediction = reference.frame.warp(flow)?;
    let (raw, feature) = net.decode_frame(y, &contexts, reference.frame, prediction, rate)?;
    Ok((raw.clamp(0.0, 1.0), feature))
}

/// Reconstructs every frame of a container.
pub fn decode_sequence(model: &ModelState, bitstream: &Bitstream) -> Result<Vec<Tensor<f32>>> {
    let hdr = bitstream.header;
    let (h, w) = (hdr.height as usize, hdr.width as usize);
    if bitstream.frames.len() != hdr.frame_count as usize {
        return format_err(format!(
            "header announces {} frames, container holds {}",
            hdr.frame_count,
            bitstream.frames.len()
        ));
    }
    let rate = hdr.rate as f64;
    let mut out = Vec::with_capacity(bitstream.frames.len());
    let mut reference: Option<RefTensors> = None;
    let mut p_index = 0;
    for (i, chunk) in bitstream.frames.iter().enumerate() {
        match chunk {
            FrameChunk::Intra(rgb) => {
                if rgb.len() != 3 * h * w {
                    return format_err(format!("frame {i}: intra payload of {} bytes", rgb.len()));
                }
                let x = from_rgb8(rgb, h, w);
                reference = Some(intra_reference(model, &x)?);
                out.push(x);
                p_index = 0;
            }
            FrameChunk::Inter(payload) => {
                let Some(prev) = reference.as_ref() else {
                    return format_err("stream starts with an inter frame");
                };
                p_index += 1;
                let tape = Tape::inference();
                let net = model.bind(&tape, |_| false);
                let (x_hat, feature) =
                    decode_inter(&net, payload, &prev.bind(&tape), rate, p_index, h, w)?;
                let next = RefTensors {
                    frame: (*x_hat.value()).clone(),
                    feature: (*feature.value()).clone(),
                };
                out.push(next.frame.clone());
                reference = Some(next);
            }
        }
    }
    Ok(out)
}
