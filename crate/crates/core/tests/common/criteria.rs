//! Checks shared by the topic suites (small sizes) and the acceptance
//! target (full sizes).

use std::path::PathBuf;

use ctxc::codec::{decode_sequence, encode_sequence, Group, ModelConfig, ModelState, Net, Quantizer};
use ctxc::entropy::range_coder::{RangeDecoder, RangeEncoder, ALPHABET, SYMBOL_MAX, SYMBOL_MIN};
use ctxc::entropy::{laplace_bits_var, quantized_bits, range_decode, range_encode, Bitstream, LaplaceParams, QuantizedCdf};
use ctxc::eval::ablation::{median, run_ablation, AblationRow, AblationSettings, AblationTable, EvalConfig};
use ctxc::eval::metrics::{bd_rate, RdPoint};
use ctxc::eval::protocol::{frame_records, held_out_sequences, RateTotals};
use ctxc::eval::synthetic::{generate, Generator, SequenceSpec};
use ctxc::pqa::{confidence_maps, gate};
use ctxc::rqa::{generate_filters, svf_apply, DynamicFilterBank};
use ctxc::tensor::{Tape, Tensor};
use ctxc::training::{
    frame_loss, hierarchical_weight, loss_cascade, Corpus, FrameTerms, LossKind, Rollout, ScheduleStage, Subset,
    TrainConfig, Trainer, LAMBDAS, WEIGHT_CYCLE,
};
use ctxc::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::max_rel_error;
use super::oracle;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Flow whose fractional parts stay away from sample-grid kinks.
pub fn smooth_flow(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 2, h, w], |_| {
        let whole = rng.gen_range(-2..=2) as f64;
        whole + rng.gen_range(0.1..0.9)
    })
}

// ---------------------------------------------------------------- gradients

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Worst relative gradient error of each differentiable operation over
/// `instances` random inputs.
pub fn gradient_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut worst = |name: &'static str, errs: Vec<f64>| out.push((name, errs.into_iter().fold(0.0, f64::max)));

    worst(
        "conv2d",
        (0..instances)
            .map(|_| {
                let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
                let k = [1, 3][r.gen_range(0..2)];
                let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
                let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
                let inputs = [
                    uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
                    uniform(&mut r, &[o, c, k, k], -1.0, 1.0),
                    uniform(&mut r, &[o], -1.0, 1.0),
                ];
                max_rel_error(move |_, v| v[0].conv2d(v[1], v[2], stride, pad), &inputs)
            })
            .collect(),
    );
    worst(
        "sigmoid",
        (0..instances)
            .map(|_| {
                let x = uniform(&mut r, &[1, 2, 3, 3], -5.0, 5.0);
                max_rel_error(|_, v| Ok(v[0].sigmoid()), &[x])
            })
            .collect(),
    );
    worst(
        "warp",
        (0..instances)
            .map(|_| {
                let (n, c, h, w) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5));
                let inputs = [uniform(&mut r, &[n, c, h, w], -1.0, 1.0), smooth_flow(&mut r, n, h, w)];
                max_rel_error(|_, v| v[0].warp(v[1]), &inputs)
            })
            .collect(),
    );
    worst(
        "gate",
        (0..instances)
            .map(|_| {
                let shape = [1, r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
                let inputs = [uniform(&mut r, &shape, -2.0, 2.0), uniform(&mut r, &shape, 0.0, 1.0)];
                max_rel_error(|_, v| gate(v[0], v[1]), &inputs)
            })
            .collect(),
    );
    worst(
        "confidence_maps",
        (0..instances)
            .map(|_| {
                let (n, m, ci, h, w) = (
                    r.gen_range(1..=2),
                    r.gen_range(1..=3),
                    r.gen_range(1..=3),
                    r.gen_range(2..=4),
                    r.gen_range(2..=4),
                );
                let inputs = [
                    uniform(&mut r, &[n, m, h, w], -1.0, 1.0),
                    uniform(&mut r, &[n, ci, h, w], -1.0, 1.0),
                    uniform(&mut r, &[m, m + ci, 3, 3], -0.5, 0.5),
                    uniform(&mut r, &[m], -0.5, 0.5),
                ];
                max_rel_error(|_, v| confidence_maps(v[0], v[1], v[2], v[3]), &inputs)
            })
            .collect(),
    );
    worst(
        "generate_filters",
        (0..instances)
            .map(|_| {
                let stride = r.gen_range(1..=2);
                let k = [1, 3][r.gen_range(0..2)];
                let (h, w) = (2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3));
                let inputs = [
                    uniform(&mut r, &[1, 3, h, w], 0.0, 1.0),
                    uniform(&mut r, &[k * k, 3, 3, 3], -0.5, 0.5),
                    uniform(&mut r, &[k * k], -0.5, 0.5),
                ];
                max_rel_error(
                    move |_, v| Ok(generate_filters(v[0], v[1], v[2], stride)?.taps),
                    &inputs,
                )
            })
            .collect(),
    );
    worst(
        "svf_apply",
        (0..instances)
            .map(|_| {
                let k = [1, 3, 5][r.gen_range(0..3)];
                let (n, c, h, w) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5));
                let inputs = [
                    uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
                    uniform(&mut r, &[n, k * k, h, w], -1.0, 1.0),
                ];
                max_rel_error(
                    move |_, v| svf_apply(v[0], &DynamicFilterBank { taps: v[1], k, stride: 1 }),
                    &inputs,
                )
            })
            .collect(),
    );
    worst(
        "laplace_bits",
        (0..instances)
            .map(|_| {
                let shape = [1, 1, 3, 4];
                let b = uniform(&mut r, &shape, 0.3, 3.0);
                let mu = uniform(&mut r, &shape, -3.0, 3.0);
                let v = Tensor::from_fn(&shape, |i| {
                    let off = loop {
                        let o: f64 = r.gen_range(-2.5..2.5) * b.data()[i];
                        if (o.abs() - 0.5).abs() > 0.01 {
                            break o;
                        }
                    };
                    mu.data()[i] + off
                });
                max_rel_error(|_, v| laplace_bits_var(v[0], v[1], v[2]), &[v, mu, b])
            })
            .collect(),
    );
    worst(
        "losses",
        (0..instances)
            .map(|i| {
                let t = r.gen_range(1..=3);
                let kind = [
                    LossKind::MeD,
                    LossKind::MeRD,
                    LossKind::RecD,
                    LossKind::RecRD,
                    LossKind::All,
                    LossKind::Cascade,
                    LossKind::RepeatLong,
                ][i % 7];
                let lambda = LAMBDAS[r.gen_range(0..4)];
                let mut inputs = Vec::new();
                for _ in 0..t {
                    inputs.push(uniform(&mut r, &[1, 3, 2, 2], 0.0, 1.0));
                    inputs.push(uniform(&mut r, &[1, 3, 2, 2], 0.0, 1.0));
                    inputs.push(uniform(&mut r, &[1], 0.0, 1.0));
                }
                max_rel_error(
                    move |_, v| {
                        let mut losses = Vec::new();
                        for f in 0..t {
                            let (a, b, r) = (v[3 * f], v[3 * f + 1], v[3 * f + 2]);
                            let terms = FrameTerms {
                                d_me: Some(a.mse(b.scale(0.5))?),
                                d_rec: Some(a.mse(b)?),
                                r_me: Some(r),
                                r_rec: Some(r.mul(r)?),
                            };
                            losses.push(frame_loss(kind, &terms, hierarchical_weight(f + 1)?, lambda)?);
                        }
                        loss_cascade(&losses, t)
                    },
                    &inputs,
                )
            })
            .collect(),
    );
    out
}

pub fn criterion1(instances: usize) -> Outcome {
    let errs = gradient_errors(instances, 1);
    let pass = errs.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE);
    let worst = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("{instances} instances per op; worst rel err: {worst}"))
}

// ------------------------------------------------------------------ oracles

pub const ORACLE_TOLERANCE: f64 = 1e-12;

pub fn oracle_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let tape = Tape::<f64>::inference();
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let (mut conv, mut svf, mut gt, mut conf, mut warp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (n, ch, o) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
        let (h, w) = (r.gen_range(k.max(2)..=9), r.gen_range(k.max(2)..=9));
        let x = uniform(&mut r, &[n, ch, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[o, ch, k, k], -1.0, 1.0);
        let b = uniform(&mut r, &[o], -1.0, 1.0);
        let got = c(&x).conv2d(c(&wt), c(&b), stride, pad).unwrap().value();
        conv = conv.max(oracle::max_rel_diff(&got, &oracle::conv2d(&x, &wt, &b, stride, pad)));

        let taps = uniform(&mut r, &[n, k * k, h, w], -1.0, 1.0);
        let bank = DynamicFilterBank {
            taps: c(&taps),
            k,
            stride: 1,
        };
        let got = svf_apply(c(&x), &bank).unwrap().value();
        svf = svf.max(oracle::max_rel_diff(&got, &oracle::svf(&x, &taps, k)));

        let maps = uniform(&mut r, &[n, ch, h, w], 0.0, 1.0);
        let got = gate(c(&x), c(&maps)).unwrap().value();
        gt = gt.max(oracle::max_rel_diff(&got, &oracle::gate(&x, &maps)));

        let ci = r.gen_range(1..=4);
        let inter = uniform(&mut r, &[n, ci, h, w], -1.0, 1.0);
        let cw = uniform(&mut r, &[ch, ch + ci, 3, 3], -0.5, 0.5);
        let cb = uniform(&mut r, &[ch], -0.5, 0.5);
        let got = confidence_maps(c(&x), c(&inter), c(&cw), c(&cb)).unwrap().value();
        conf = conf.max(oracle::max_rel_diff(&got, &oracle::confidence_maps(&x, &inter, &cw, &cb)));

        let flow = uniform(&mut r, &[n, 2, h, w], -3.0, 3.0);
        let got = c(&x).warp(c(&flow)).unwrap().value();
        warp = warp.max(oracle::max_rel_diff(&got, &oracle::warp(&x, &flow)));
    }
    vec![
        ("conv2d", conv),
        ("svf_apply", svf),
        ("gate", gt),
        ("confidence_maps", conf),
        ("bilinear_warp", warp),
    ]
}

pub fn criterion2(instances: usize) -> Outcome {
    let errs = oracle_errors(instances, 2);
    let pass = errs.iter().all(|(_, e)| *e <= ORACLE_TOLERANCE);
    let worst = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("{instances} instances per op; worst diff: {worst}"))
}

// ------------------------------------------------------------------ entropy

/// Laplace sample rounded to the alphabet.
pub fn laplace_symbol(r: &mut ChaCha8Rng, mu: f64, b: f64) -> i32 {
    let u: f64 = r.gen_range(-0.5..0.5);
    let x = mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
    (x.round() as i64).clamp(SYMBOL_MIN as i64, SYMBOL_MAX as i64) as i32
}

/// Parameter sets covering narrow, wide and off-centre distributions.
pub fn laplace_set(r: &mut ChaCha8Rng) -> (f64, f64) {
    let mu = r.gen_range(-40.0..40.0);
    let b = 10f64.powf(r.gen_range(-2.5..2.0));
    (mu, b)
}

/// Extreme parameters for the alphabet sweep.
pub fn extreme_params() -> Vec<(f64, f64)> {
    let mus = [-1e9, -300.0, -255.5, -3.7, 0.0, 0.5, 255.5, 300.0, 1e9, f64::NAN, f64::INFINITY];
    let bs = [0.0, 1e-9, 1e-3, 0.3, 1.0, 50.0, 1e4, 1e12, f64::NAN];
    mus.iter().flat_map(|&m| bs.iter().map(move |&b| (m, b))).collect()
}

/// Every symbol is codable under `cdf` and decodes back.
pub fn alphabet_round_trips(cdf: &QuantizedCdf) -> bool {
    let total: u64 = (SYMBOL_MIN..=SYMBOL_MAX).map(|s| cdf.freq(s) as u64).sum();
    if total != 1 << 16 || (SYMBOL_MIN..=SYMBOL_MAX).any(|s| cdf.freq(s) == 0) {
        return false;
    }
    let mut enc = RangeEncoder::new();
    for s in SYMBOL_MIN..=SYMBOL_MAX {
        enc.encode_symbol(cdf, s).unwrap();
    }
    let bytes = enc.finish();
    let Ok(mut dec) = RangeDecoder::new(&bytes) else {
        return false;
    };
    (SYMBOL_MIN..=SYMBOL_MAX).all(|s| dec.decode_symbol(cdf).ok() == Some(s)) && dec.finish().is_ok()
}

pub fn criterion3(sets: usize, symbols: usize) -> Outcome {
    let mut r = rng(3);
    let mut worst_gap = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..sets {
        let (mu, b) = laplace_set(&mut r);
        let syms: Vec<i32> = (0..symbols).map(|_| laplace_symbol(&mut r, mu, b)).collect();
        let params = LaplaceParams::new(Tensor::full(&[symbols], mu), Tensor::full(&[symbols], b)).unwrap();
        let bytes = range_encode(&syms, &params).unwrap();
        if range_decode(&bytes, &params, symbols).ok().as_deref() != Some(&syms[..]) {
            failures.push(format!("set {i} (μ={mu:.2}, b={b:.3}) did not round trip"));
            continue;
        }
        let estimate = quantized_bits(&syms, &params).unwrap();
        let measured = 8.0 * bytes.len() as f64;
        let gap = (measured - estimate).abs();
        let allowed = (0.01 * estimate).max(32.0);
        worst_gap = worst_gap.max(gap / allowed);
        if gap > allowed {
            failures.push(format!("set {i}: {measured} bits vs estimate {estimate:.1}"));
        }
    }
    let sweep = extreme_params();
    let stuck = sweep.iter().filter(|&&(m, b)| !alphabet_round_trips(&QuantizedCdf::laplace(m, b))).count();
    if stuck > 0 {
        failures.push(format!("{stuck} extreme tables lose symbols"));
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{sets}×{symbols} symbols round trip; worst gap {:.2} of allowance; {} extreme tables × {ALPHABET} symbols{}",
            worst_gap,
            sweep.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- bitstream

/// A random untrained model, sequence, rate and intra period.
pub fn random_case(r: &mut ChaCha8Rng) -> (ModelState, Vec<Tensor<f32>>, f32, i32) {
    let config = ModelConfig {
        pqa: r.gen(),
        rqa: r.gen(),
    };
    let model = ModelState::new(config, r.gen());
    let (h, w) = (16 * r.gen_range(1..=2), 16 * r.gen_range(1..=2));
    let spec = SequenceSpec::new(w, h, r.gen_range(2..=5));
    let gen = Generator::ALL[r.gen_range(0..Generator::ALL.len())];
    let frames = generate(&spec, gen, r.gen()).unwrap();
    let rate = if r.gen_bool(0.5) { r.gen_range(0..=3) as f32 } else { r.gen_range(0.0..=3.0) };
    let intra = [-1, 0, 2, 3][r.gen_range(0..4)];
    (model, frames, rate, intra)
}

pub fn bits_of(frames: &[Tensor<f32>]) -> Vec<Vec<u32>> {
    frames.iter().map(|f| f.data().iter().map(|v| v.to_bits()).collect()).collect()
}

/// Byte offsets of every chunk length field.
pub fn length_fields(bytes: &[u8]) -> Vec<usize> {
    let mut fields = Vec::new();
    let mut pos = 15;
    while pos + 5 <= bytes.len() {
        fields.push(pos + 1);
        let len = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
        pos += 5 + len;
    }
    fields
}

/// Structural corruptions of a serialized container; each must be
/// rejected with a format error.
pub fn corruptions(bytes: &[u8], r: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    out.push(bytes[..r.gen_range(0..bytes.len())].to_vec());
    let mut b = bytes.to_vec();
    b[r.gen_range(0..4)] ^= 1 << r.gen_range(0..8);
    out.push(b);
    let mut b = bytes.to_vec();
    b[4] = r.gen_range(2..=255);
    out.push(b);
    for at in [5, 7] {
        let mut b = bytes.to_vec();
        let v = u16::from_le_bytes([b[at], b[at + 1]]);
        let bad = loop {
            let c = r.gen::<u16>();
            if c % 16 != 0 || c == 0 || c != v {
                break if c % 16 == 0 && c != 0 { c + 1 } else { c };
            }
        };
        b[at..at + 2].copy_from_slice(&bad.to_le_bytes());
        out.push(b);
    }
    let mut b = bytes.to_vec();
    let fc = u16::from_le_bytes([b[9], b[10]]);
    let bad = if r.gen_bool(0.5) { fc + r.gen_range(1..100) } else { fc - r.gen_range(1..=fc) };
    b[9..11].copy_from_slice(&bad.to_le_bytes());
    out.push(b);
    let mut b = bytes.to_vec();
    b[11..15].copy_from_slice(&[3.5f32, -1.0, f32::NAN][r.gen_range(0..3)].to_le_bytes());
    out.push(b);
    let fields = length_fields(bytes);
    let at = fields[r.gen_range(0..fields.len())];
    let mut b = bytes.to_vec();
    let len = u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
    let bad = match r.gen_range(0..3) {
        0 => len.wrapping_add(r.gen_range(1..1000)),
        1 => len.saturating_sub(r.gen_range(1..=len.max(1))),
        _ => u32::MAX - r.gen_range(0..16),
    };
    b[at..at + 4].copy_from_slice(&bad.to_le_bytes());
    if bad != len {
        out.push(b);
    }
    let mut b = bytes.to_vec();
    b[fields[r.gen_range(0..fields.len())] - 1] = r.gen_range(2..=255);
    out.push(b);
    let mut b = bytes.to_vec();
    b.extend((0..r.gen_range(1..9)).map(|_| r.gen::<u8>()));
    out.push(b);
    out.push((0..r.gen_range(0..64)).map(|_| r.gen::<u8>()).collect());
    out
}

pub fn criterion4(sequences: usize, dir: &std::path::Path) -> Outcome {
    let mut r = rng(4);
    let mut failures = Vec::new();
    let mut fuzzed = 0;
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..sequences {
        let (model, frames, rate, intra) = random_case(&mut r);
        let enc = encode_sequence(&model, &frames, rate, intra).unwrap();
        let memory = decode_sequence(&model, &enc.bitstream).unwrap();
        let path = dir.join(format!("seq{i}.ctxc"));
        std::fs::write(&path, enc.bitstream.serialize()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let disk = decode_sequence(&model, &Bitstream::deserialize(&bytes).unwrap()).unwrap();
        if bits_of(&disk) != bits_of(&memory) || bits_of(&memory) != bits_of(&enc.recon) {
            failures.push(format!("sequence {i} differs after the file round trip"));
        }
        for bad in corruptions(&bytes, &mut r) {
            fuzzed += 1;
            match Bitstream::deserialize(&bad) {
                Err(Error::Format(_)) => {}
                Err(e) => failures.push(format!("sequence {i}: corruption gave {e}")),
                Ok(_) => failures.push(format!("sequence {i}: corruption accepted")),
            }
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{sequences} sequences bit-exact through the file system; {fuzzed} corruptions rejected{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ----------------------------------------------------------------- BD-rate

/// Monotone four-point curve with rates spanning roughly a decade.
pub fn random_curve(r: &mut ChaCha8Rng) -> Vec<RdPoint> {
    let mut rate = r.gen_range(0.02..0.2);
    let mut q = r.gen_range(25.0..35.0);
    (0..4)
        .map(|_| {
            let p = RdPoint::new(rate, q, "");
            rate *= r.gen_range(1.5..2.5);
            q += r.gen_range(1.0..3.0);
            p
        })
        .collect()
}

/// The anchor with rates scaled by a smooth quality-dependent factor.
pub fn perturbed(anchor: &[RdPoint], r: &mut ChaCha8Rng) -> Vec<RdPoint> {
    let (s, t) = (r.gen_range(0.6..1.4), r.gen_range(-0.03..0.03));
    let dq = r.gen_range(-1.0..1.0);
    anchor
        .iter()
        .map(|p| RdPoint::new(p.bpp * s * (t * (p.quality - 30.0)).exp(), p.quality + dq, ""))
        .collect()
}

/// Least-squares cubic of `y` in `x` by normal equations and Gaussian
/// elimination, lowest order first.
fn cubic_fit(x: &[f64], y: &[f64]) -> [f64; 4] {
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        for row in 0..4 {
            for col in 0..4 {
                a[row][col] += xi.powi((row + col) as i32);
            }
            a[row][4] += yi * xi.powi(row as i32);
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..4 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..5 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    [0, 1, 2, 3].map(|i| a[i][4] / a[i][i])
}

/// BD-rate by cubic fits in centred quality and dense midpoint quadrature.
pub fn bd_rate_oracle(anchor: &[RdPoint], test: &[RdPoint]) -> f64 {
    let q = |c: &[RdPoint]| c.iter().map(|p| p.quality).collect::<Vec<_>>();
    let lr = |c: &[RdPoint]| c.iter().map(|p| p.bpp.ln()).collect::<Vec<_>>();
    let (qa, qt) = (q(anchor), q(test));
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min(&qa).max(min(&qt)), max(&qa).min(max(&qt)));
    let c = 0.5 * (lo + hi);
    let centre = |v: &[f64]| v.iter().map(|x| x - c).collect::<Vec<_>>();
    let fa = cubic_fit(&centre(&qa), &lr(anchor));
    let ft = cubic_fit(&centre(&qt), &lr(test));
    let eval = |f: &[f64; 4], x: f64| f[0] + x * (f[1] + x * (f[2] + x * f[3]));
    let n = 100_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * h - c;
        acc += eval(&ft, x) - eval(&fa, x);
    }
    ((acc * h / (hi - lo)).exp() - 1.0) * 100.0
}

pub fn criterion7(pairs: usize) -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = random_curve(&mut r);
        let b = perturbed(&a, &mut r);
        let got = bd_rate(&a, &b).unwrap();
        worst = worst.max((got - bd_rate_oracle(&a, &b)).abs());
    }
    let a = random_curve(&mut r);
    let same = bd_rate(&a, &a).unwrap();
    let halved: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bpp / 2.0, p.quality, "")).collect();
    let half = bd_rate(&a, &halved).unwrap();
    Outcome::new(
        worst < 0.1 && same == 0.0 && (half + 50.0).abs() < 1e-6,
        format!("worst gap to quadrature {worst:.2e} pp over {pairs} pairs; identical {same}; halved {half:.9}"),
    )
}

// ----------------------------------------------------------------- training

/// Groups each subset/loss combination must update.
pub fn expected_trained(subset: Subset, loss: LossKind) -> Vec<Group> {
    match (subset, loss) {
        (Subset::Inter, LossKind::MeD) => vec![Group::MotionNet],
        (Subset::Inter, LossKind::MeRD) => vec![Group::MotionNet, Group::MotionEntropy],
        (Subset::Recon, LossKind::RecD) => vec![Group::ReconNet],
        (Subset::Recon, LossKind::RecRD) => vec![Group::ReconNet, Group::ReconEntropy],
        (Subset::All, _) => Group::ALL.to_vec(),
        other => panic!("no expectation for {other:?}"),
    }
}

fn group_bits(model: &ModelState, group: Group) -> Vec<u32> {
    model
        .params()
        .iter()
        .filter(|p| p.group == group)
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// `w·λ·D + R_me + R_rec` and the cascade mean checked bit-for-bit on
/// random inputs; returns the number of mismatches.
pub fn loss_algebra_mismatches(cases: usize) -> usize {
    let mut r = rng(9);
    let mut bad = 0;
    for _ in 0..cases {
        let tape = Tape::<f64>::new();
        let t = r.gen_range(1..=20);
        let lambda = LAMBDAS[r.gen_range(0..4)];
        let mut losses = Vec::new();
        let mut manual = Vec::new();
        for p in 1..=t {
            let (dm, dr, rm, rr) = (r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>());
            let s = |v: f64| Some(tape.constant(Tensor::scalar(v)));
            let terms = FrameTerms {
                d_me: s(dm),
                d_rec: s(dr),
                r_me: s(rm),
                r_rec: s(rr),
            };
            let w = WEIGHT_CYCLE[p % 4];
            let wl = w * lambda;
            let expect = [
                (LossKind::MeD, dm * wl),
                (LossKind::MeRD, dm * wl + rm),
                (LossKind::RecD, dr * wl),
                (LossKind::RecRD, dr * wl + rr),
                (LossKind::All, dr * wl + rm + rr),
            ];
            for (kind, want) in expect {
                if frame_loss(kind, &terms, w, lambda).unwrap().value().item() != want {
                    bad += 1;
                }
            }
            if hierarchical_weight(p).unwrap() != w {
                bad += 1;
            }
            losses.push(frame_loss(LossKind::All, &terms, w, lambda).unwrap());
            manual.push(dr * wl + rm + rr);
        }
        let mean = manual.iter().skip(1).fold(manual[0], |a, b| a + b) * (1.0 / t as f64);
        if loss_cascade(&losses, t).unwrap().value().item() != mean {
            bad += 1;
        }
    }
    bad
}

/// Runs a short stage of every subset/loss combination and returns the
/// combinations whose frozen groups moved or trained groups stayed put.
pub fn freezing_violations(seed: u64) -> Vec<String> {
    let corpus = Corpus::new(16, 16, 4, 2, seed);
    let combos = [
        (Subset::Inter, LossKind::MeD),
        (Subset::Inter, LossKind::MeRD),
        (Subset::Recon, LossKind::RecD),
        (Subset::Recon, LossKind::RecRD),
        (Subset::All, LossKind::All),
        (Subset::All, LossKind::Cascade),
    ];
    let mut out = Vec::new();
    for (subset, loss) in combos {
        let model = ModelState::new(ModelConfig { pqa: true, rqa: true }, seed);
        let before = model.clone();
        let mut trainer = Trainer::new(model, seed);
        let stage = ScheduleStage::new(3, subset, loss, 1e-3, 1.0);
        trainer.run_stage(0, &stage, &corpus).unwrap();
        let trained = expected_trained(subset, loss);
        for g in Group::ALL {
            let moved = group_bits(&before, g) != group_bits(&trainer.model, g);
            if moved != trained.contains(&g) {
                out.push(format!("{}/{}: {g:?} moved={moved}", subset.name(), loss.name()));
            }
        }
    }
    out
}

/// Repeat-long with no repeats against a hand-built cascade on the same
/// noise stream; returns whether loss and every gradient agree bit-for-bit.
pub fn repeat_long_matches_cascade(seed: u64, t: usize) -> bool {
    let model = ModelState::new(ModelConfig { pqa: true, rqa: true }, seed);
    let clip = Corpus::new(16, 16, t + 2, 1, seed).clip(0).unwrap();
    let run = |manual: bool| {
        let tape = Tape::<f32>::new();
        let net: Net<'_, '_, f32> = model.bind(&tape, |_| true);
        let frames: Vec<_> = clip.iter().map(|f| tape.constant(f.clone())).collect();
        let rollout = Rollout {
            net: &net,
            frames: &frames,
            rate: 1.0,
            lambda: 380.0,
        };
        let mut quant = Quantizer::train(seed);
        let loss = if manual {
            let intra = rollout.intra_reference().unwrap();
            let first = net.forward_p_frame(frames[1], &intra, 1.0, 1, &mut quant).unwrap();
            let mut reference = first.reference();
            let mut losses = Vec::new();
            for p in 2..t + 2 {
                let out = net.forward_p_frame(frames[p], &reference, 1.0, p, &mut quant).unwrap();
                let w = hierarchical_weight(p).unwrap();
                losses.push(frame_loss(LossKind::All, &(&out).into(), w, 380.0).unwrap());
                reference = out.reference();
            }
            loss_cascade(&losses, t).unwrap()
        } else {
            rollout.repeat_long(t, 0, &mut quant).unwrap().0
        };
        let value = loss.value().item().to_bits();
        let grads = tape.backward(loss).unwrap();
        let g: Vec<u32> = net
            .vars()
            .iter()
            .flat_map(|&v| grads.get_or_zeros(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        (value, g)
    };
    run(false) == run(true)
}

pub fn criterion9(cases: usize) -> Outcome {
    let algebra = loss_algebra_mismatches(cases);
    let frozen = freezing_violations(11);
    let repeat = (1..=2).all(|s| repeat_long_matches_cascade(s, 3));
    Outcome::new(
        algebra == 0 && frozen.is_empty() && repeat,
        format!(
            "{cases} random loss cases, {algebra} mismatches; freezing violations: {}; repeat-long N=0 bit-equal: {repeat}",
            if frozen.is_empty() { "none".to_string() } else { frozen.join(", ") }
        ),
    )
}

// ----------------------------------------------------------------- ablation

pub const ABLATION_ROWS: [&str; 4] = ["M1", "M2", "M3", "M8"];
pub const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

pub fn cache_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/ctxc-cache"))
}

pub fn ablation_settings() -> AblationSettings {
    AblationSettings {
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
        cache: Some(cache_dir()),
    }
}

pub fn ablation_table(progress: &mut dyn FnMut(&str)) -> AblationTable {
    let rows: Vec<AblationRow> = ABLATION_ROWS.iter().map(|n| AblationRow::by_name(n).unwrap()).collect();
    run_ablation(&rows, &ABLATION_SEEDS, &ablation_settings(), progress).expect("ablation runs")
}

pub fn criterion5(table: &AblationTable) -> Outcome {
    let m8 = table.bd_rates("M8");
    let (med2, med3, med8) = (table.median_bd_rate("M2"), table.median_bd_rate("M3"), table.median_bd_rate("M8"));
    let pass = m8.iter().all(|&b| b < 0.0) && med8 <= med3 && med3 <= 0.0 && med2 <= 0.0;
    let fmt = |v: &[f64]| v.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>().join("/");
    Outcome::new(
        pass,
        format!(
            "BD-rate vs M1 per seed: M2 {} (median {med2:.2}%), M3 {} (median {med3:.2}%), M8 {} (median {med8:.2}%)",
            fmt(&table.bd_rates("M2")),
            fmt(&table.bd_rates("M3")),
            fmt(&m8),
        ),
    )
}

fn slope_medians(table: &AblationTable, row: &str) -> Vec<f64> {
    ABLATION_SEEDS.iter().map(|&s| median(&table.cell(row, s).unwrap().slopes)).collect()
}

pub fn criterion6(table: &AblationTable) -> Outcome {
    let (with, without) = (slope_medians(table, "M8"), slope_medians(table, "M1"));
    let pass = with.iter().zip(&without).all(|(a, b)| a > b);
    let (m3, m2) = (slope_medians(table, "M3"), slope_medians(table, "M2"));
    let fmt = |v: &[f64]| v.iter().map(|b| format!("{b:+.4}")).collect::<Vec<_>>().join("/");
    Outcome::new(
        pass,
        format!(
            "median PSNR slope dB/frame per seed: M8 {} vs M1 {}; informational M3 {} vs M2 {}",
            fmt(&with),
            fmt(&without),
            fmt(&m3),
            fmt(&m2)
        ),
    )
}

/// Inter-frame operating points of `model` on one fixed test sequence at
/// the four trained rates and two interpolated midpoints.
pub fn variable_rate_points(model: &ModelState, eval: &EvalConfig) -> Vec<(f32, RdPoint)> {
    let seq = held_out_sequences(&eval.spec(), 1, eval.seed).unwrap().remove(0);
    [0.0, 0.5, 1.0, 2.0, 2.5, 3.0]
        .into_iter()
        .map(|rate| {
            let (enc, records) = frame_records(model, &seq, rate, eval.intra_period).unwrap();
            let mut totals = RateTotals::default();
            totals.add(&enc, &records);
            (rate, totals.inter_point(format!("rate={rate}")))
        })
        .collect()
}

pub fn criterion8(points: &[(f32, RdPoint)]) -> Outcome {
    let at = |r: f32| &points.iter().find(|p| p.0 == r).unwrap().1;
    let trained: Vec<&RdPoint> = [0.0, 1.0, 2.0, 3.0].iter().map(|&r| at(r)).collect();
    let bpp_up = trained.windows(2).all(|w| w[1].bpp > w[0].bpp);
    let psnr_up = trained.windows(2).all(|w| w[1].quality > w[0].quality);
    let between = |m: f32, lo: f32, hi: f32| at(lo).bpp < at(m).bpp && at(m).bpp < at(hi).bpp;
    let mids = between(0.5, 0.0, 1.0) && between(2.5, 2.0, 3.0);
    let list = points
        .iter()
        .map(|(r, p)| format!("{r}: {:.4} bpp {:.2} dB", p.bpp, p.quality))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(bpp_up && psnr_up && mids, list)
}
