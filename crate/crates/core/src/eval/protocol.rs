//! Held-out test content, rate-distortion curves and per-frame curves.

use std::io::Write;

use super::metrics::{psnr_rgb, RdPoint};
use super::synthetic::{generate, Generator, SequenceSpec};
use crate::codec::{encode_sequence, Encoded, ModelState};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Test sequences whose seeds never collide with training clips.
pub fn held_out_sequences(spec: &SequenceSpec, count: usize, seed: u64) -> Result<Vec<Vec<Tensor<f32>>>> {
    (0..count)
        .map(|i| {
            let generator = Generator::ALL[i % Generator::ALL.len()];
            let s = (seed ^ 0x7e57_0000_0000_0000).wrapping_add(i as u64).wrapping_mul(0xa076_1d64_78bd_642f);
            generate(spec, generator, s)
        })
        .collect()
}

/// Quality and cost of one coded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub intra: bool,
    pub psnr: f64,
    pub bits: u64,
}

/// Codes `frames` and measures every frame.
pub fn frame_records(
    model: &ModelState,
    frames: &[Tensor<f32>],
    rate: f32,
    intra_period: i32,
) -> Result<(Encoded, Vec<FrameRecord>)> {
    let enc = encode_sequence(model, frames, rate, intra_period)?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, (x, chunk)) in frames.iter().zip(&enc.bitstream.frames).enumerate() {
        records.push(FrameRecord {
            frame: i,
            intra: chunk.is_intra(),
            psnr: psnr_rgb(x, &enc.recon[i])?,
            bits: enc.stats.frame_bits[i],
        });
    }
    Ok((enc, records))
}

/// Writes `frame,psnr,bits` rows.
pub fn write_frame_csv(records: &[FrameRecord], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "psnr", "bits"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.frame.to_string(), format!("{:.6}", r.psnr), r.bits.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-frame quality and bit cost of one sequence as CSV.
pub fn per_frame_curves(
    model: &ModelState,
    frames: &[Tensor<f32>],
    rate: f32,
    intra_period: i32,
    out: &mut dyn Write,
) -> Result<Vec<FrameRecord>> {
    let (_, records) = frame_records(model, frames, rate, intra_period)?;
    write_frame_csv(&records, out)?;
    Ok(records)
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => crate::Error::Io(e),
        other => crate::Error::Format(format!("{other:?}")),
    }
}

/// Least-squares slope of PSNR against frame index over inter frames in
/// `from..=to`.
pub fn psnr_slope(records: &[FrameRecord], from: usize, to: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.intra && r.frame >= from && r.frame <= to)
        .map(|r| (r.frame as f64, r.psnr))
        .collect();
    if pts.len() < 2 {
        return contract_err(format!("slope needs two inter frames in {from}..={to}"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Accumulated measurements of one rate point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateTotals {
    pub inter_bits: u64,
    pub inter_frames: usize,
    pub inter_psnr_sum: f64,
    pub stream_bytes: usize,
    pub pixels: usize,
    pub frames: usize,
}

impl RateTotals {
    pub fn add(&mut self, enc: &Encoded, records: &[FrameRecord]) {
        let hdr = enc.bitstream.header;
        let hw = hdr.width as usize * hdr.height as usize;
        for r in records.iter().filter(|r| !r.intra) {
            self.inter_bits += r.bits;
            self.inter_frames += 1;
            self.inter_psnr_sum += r.psnr;
        }
        self.stream_bytes += enc.bitstream.byte_len();
        self.pixels += hw * records.len();
        self.frames += records.len();
    }

    /// Operating point over inter frames: payload bits per pixel and mean PSNR.
    pub fn inter_point(&self, label: impl Into<String>) -> RdPoint {
        let pixels_per_frame = self.pixels / self.frames.max(1);
        RdPoint::new(
            self.inter_bits as f64 / (pixels_per_frame * self.inter_frames) as f64,
            self.inter_psnr_sum / self.inter_frames as f64,
            label,
        )
    }

    /// Bits per pixel of the complete containers.
    pub fn stream_bpp(&self) -> f64 {
        self.stream_bytes as f64 * 8.0 / self.pixels as f64
    }
}

/// One rate-distortion point per rate index, measured on inter frames of
/// `sequences`.
pub fn rd_curve(
    model: &ModelState,
    sequences: &[Vec<Tensor<f32>>],
    rates: &[f32],
    intra_period: i32,
) -> Result<Vec<RdPoint>> {
    rates
        .iter()
        .map(|&rate| {
            let mut totals = RateTotals::default();
            for seq in sequences {
                let (enc, records) = frame_records(model, seq, rate, intra_period)?;
                totals.add(&enc, &records);
            }
            if totals.inter_frames == 0 {
                return contract_err("rate-distortion points need inter frames");
            }
            Ok(totals.inter_point(format!("rate={rate}")))
        })
        .collect()
}
