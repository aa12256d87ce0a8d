//! 64-bit renormalizing range coder over quantized Laplace CDFs.
//!
//! Byte-oriented carry-propagating coder: `low` keeps one carry bit above
//! 64, a cached byte plus a run of pending `0xFF` bytes absorb carries.
//! The range never drops below 2⁵⁶, so splitting it into 2¹⁶ units loses
//! well under 10⁻⁶ bits per symbol. The leading byte of such a coder is
//! always zero and is not written; the flush writes a single byte and the
//! decoder reads exactly seven implicit zero bytes past the end of a
//! well-formed stream.

use super::laplace::{LaplaceParams, B_MIN};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Real;

/// Smallest codable symbol.
pub const SYMBOL_MIN: i32 = -255;
/// Largest codable symbol.
pub const SYMBOL_MAX: i32 = 255;
/// Alphabet size.
pub const ALPHABET: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
/// log2 of the CDF total.
pub const PRECISION_BITS: u32 = 16;
const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u64 = 1 << 56;
const LOW_MASK: u128 = (1 << 56) - 1;
const TAIL_PADDING: usize = 7;

/// 16-bit quantized CDF of a discretized Laplace over the alphabet.
///
/// Every symbol gets at least one unit; the remaining units follow the
/// bin probabilities, with leftovers from flooring handed out by largest
/// remainder (ties to the smaller symbol).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn laplace(mu: f64, b: f64) -> Self {
        let b = if b >= B_MIN { b } else { B_MIN };
        let mu = if mu.is_finite() { mu } else { 0.0 };
        let probs = bin_probabilities(mu, b);
        let spare = (TOTAL as usize - ALPHABET) as f64;
        let mut freq = [0u32; ALPHABET];
        let mut rem = [0f64; ALPHABET];
        let mut assigned: i64 = 0;
        for s in 0..ALPHABET {
            let raw = probs[s] * spare;
            let f = raw.floor();
            freq[s] = f as u32;
            rem[s] = raw - f;
            assigned += f as i64;
        }
        let mut left = spare as i64 - assigned;
        if left > 0 {
            let mut order: Vec<u16> = (0..ALPHABET as u16).collect();
            let by_rem = |a: &u16, b: &u16| {
                rem[*b as usize]
                    .total_cmp(&rem[*a as usize])
                    .then(a.cmp(b))
            };
            let take = left as usize;
            if take < ALPHABET {
                order.select_nth_unstable_by(take, by_rem);
            }
            for &s in &order[..take.min(ALPHABET)] {
                freq[s as usize] += 1;
            }
            left = 0;
        }
        while left < 0 {
            // Rounding pushed the floors above the budget; shave the largest.
            let s = (0..ALPHABET).max_by_key(|&s| (freq[s], std::cmp::Reverse(s))).unwrap();
            freq[s] -= 1;
            left += 1;
        }
        let mut cum = Vec::with_capacity(ALPHABET + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            acc += f + 1;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        QuantizedCdf { cum }
    }

    /// Frequency of a symbol; always at least 1.
    pub fn freq(&self, symbol: i32) -> u32 {
        let s = (symbol - SYMBOL_MIN) as usize;
        self.cum[s + 1] - self.cum[s]
    }

    /// Ideal code length of a symbol under this table.
    pub fn bits(&self, symbol: i32) -> f64 {
        PRECISION_BITS as f64 - (self.freq(symbol) as f64).log2()
    }

    fn interval(&self, symbol: i32) -> (u32, u32) {
        let s = (symbol - SYMBOL_MIN) as usize;
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Bin masses over the alphabet; the extreme symbols absorb the tails.
fn bin_probabilities(mu: f64, b: f64) -> [f64; ALPHABET] {
    // Lower-tail mass F(x) and upper-tail mass 1-F(x) at each bin edge.
    let edge = |j: usize| SYMBOL_MIN as f64 - 0.5 + j as f64;
    let mut lower = [0f64; ALPHABET + 1];
    let mut upper = [0f64; ALPHABET + 1];
    for j in 1..ALPHABET {
        let x = edge(j) - mu;
        if x < 0.0 {
            lower[j] = 0.5 * (x / b).exp();
            upper[j] = 1.0 - lower[j];
        } else {
            upper[j] = 0.5 * (-x / b).exp();
            lower[j] = 1.0 - upper[j];
        }
    }
    lower[ALPHABET] = 1.0;
    upper[0] = 1.0;
    let mut p = [0f64; ALPHABET];
    for s in 0..ALPHABET {
        let (lo, hi) = (edge(s) - mu, edge(s + 1) - mu);
        p[s] = if s + 1 < ALPHABET && hi <= 0.0 {
            lower[s + 1] - lower[s]
        } else if s > 0 && lo >= 0.0 {
            upper[s] - upper[s + 1]
        } else {
            (1.0 - lower[s] - upper[s + 1]).max(0.0)
        };
    }
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Byte-oriented range encoder.
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u64) < 0xFF00_0000_0000_0000 || (self.low >> 64) != 0 {
            let carry = (self.low >> 64) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 56) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & LOW_MASK) << 8;
    }

    /// Codes the interval `[cum, cum+freq)` of a 2¹⁶ total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u128 * cum as u128;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, symbol: i32) -> Result<()> {
        check_symbol(symbol)?;
        let (cum, freq) = cdf.interval(symbol);
        self.encode(cum, freq);
        Ok(())
    }

    /// Pins a value inside the final interval whose low 56 bits are zero
    /// and writes out the byte above them.
    pub fn finish(mut self) -> Vec<u8> {
        self.low = (self.low + LOW_MASK) & !LOW_MASK;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

/// Decoder matching [`RangeEncoder`].
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    padded: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            bytes,
            pos: 0,
            padded: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.bytes.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else {
            self.padded += 1;
            if self.padded > TAIL_PADDING {
                return Err(Error::Decode(format!(
                    "range coded segment truncated after {} bytes",
                    self.bytes.len()
                )));
            }
            Ok(0)
        }
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let r = self.range >> PRECISION_BITS;
        let target = (self.code / r).min(TOTAL as u64 - 1) as u32;
        let s = cdf.lookup(target);
        let (cum, freq) = (cdf.cum[s] as u64, (cdf.cum[s + 1] - cdf.cum[s]) as u64);
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u64;
            self.range <<= 8;
        }
        Ok(s as i32 + SYMBOL_MIN)
    }

    /// Checks that the whole segment was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() || self.padded != TAIL_PADDING {
            return Err(Error::Decode(format!(
                "range coded segment of {} bytes ended after {} (+{} implicit)",
                self.bytes.len(),
                self.pos,
                self.padded
            )));
        }
        Ok(())
    }
}

fn check_symbol(symbol: i32) -> Result<()> {
    if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&symbol) {
        return Err(Error::Range {
            symbol,
            min: SYMBOL_MIN,
            max: SYMBOL_MAX,
        });
    }
    Ok(())
}

/// Keeps the most recently built table for runs of identical parameters.
struct CdfCache {
    key: Option<(u64, u64)>,
    cdf: Option<QuantizedCdf>,
}

impl CdfCache {
    fn new() -> Self {
        CdfCache { key: None, cdf: None }
    }

    fn get(&mut self, mu: f64, b: f64) -> &QuantizedCdf {
        let key = (mu.to_bits(), b.to_bits());
        if self.key != Some(key) {
            self.key = Some(key);
            self.cdf = Some(QuantizedCdf::laplace(mu, b));
        }
        self.cdf.as_ref().unwrap()
    }
}

/// Range codes `symbols`, each under its own Laplace parameters.
pub fn range_encode<T: Real>(symbols: &[i32], params: &LaplaceParams<T>) -> Result<Vec<u8>> {
    if symbols.len() != params.len() {
        return dim_err(format!(
            "range encode: {} symbols vs {} parameters",
            symbols.len(),
            params.len()
        ));
    }
    let mut enc = RangeEncoder::new();
    let mut cache = CdfCache::new();
    for (i, &s) in symbols.iter().enumerate() {
        let (mu, b) = params.get(i);
        enc.encode_symbol(cache.get(mu, b), s)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`].
pub fn range_decode<T: Real>(bytes: &[u8], params: &LaplaceParams<T>, count: usize) -> Result<Vec<i32>> {
    if count != params.len() {
        return dim_err(format!(
            "range decode: {count} symbols requested with {} parameters",
            params.len()
        ));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut cache = CdfCache::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (mu, b) = params.get(i);
        out.push(dec.decode_symbol(cache.get(mu, b))?);
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal code length of `symbols` under the quantized tables the coder uses.
pub fn quantized_bits<T: Real>(symbols: &[i32], params: &LaplaceParams<T>) -> Result<f64> {
    if symbols.len() != params.len() {
        return dim_err("quantized bits: length mismatch");
    }
    let mut cache = CdfCache::new();
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        check_symbol(s)?;
        let (mu, b) = params.get(i);
        bits += cache.get(mu, b).bits(s);
    }
    Ok(bits)
}
