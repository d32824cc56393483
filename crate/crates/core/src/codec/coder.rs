//! Range coding over 16-bit quantized CDFs.
//!
//! Every model has `n` symbols where the last one is an escape: values
//! outside the modelled support are sent as the escape symbol followed by
//! their zigzag code in two raw 16-bit chunks.

use pcic_nn::special::std_normal_cdf;

use super::entropy::{FactorizedDensity, SIGMA_MIN};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
/// Widest support (in symbols, escape excluded) any table may have.
pub const MAX_SUPPORT: usize = 2049;
/// Two-sided tail mass left outside the Gaussian support.
pub const TAIL_MASS: f64 = 1e-9;
/// `Φ⁻¹(1 − TAIL_MASS / 2)`.
const TAIL_Z: f64 = 6.109410204869;
const TOP: u32 = 1 << 24;

/// LZMA-style encoder: 32-bit range, carry propagated through a cached byte.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    symbols: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            symbols: 0,
        }
    }

    /// Code the interval `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        self.symbols += 1;
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flush the coder state. A stream with no symbols is empty.
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols == 0 {
            return Vec::new();
        }
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
            r: 0,
        };
        if !bytes.is_empty() {
            for _ in 0..5 {
                d.code = (d.code << 8) | d.next_byte() as u32;
            }
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed past the end of the payload.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.bytes.len())
    }

    /// Scaled target in `[0, TOTAL)`; must be followed by [`Self::consume`].
    pub fn target(&mut self) -> u32 {
        self.r = self.range >> PRECISION;
        (self.code / self.r.max(1)).min(TOTAL - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.code = self.code.wrapping_sub(self.r * cum);
        self.range = self.r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }
}

/// A quantized discrete distribution over `n` symbols (last = escape).
pub trait SymbolModel {
    /// Lowest value in the support; symbol `i` stands for `lowest + i`.
    fn lowest(&self) -> i32;
    fn n(&self) -> usize;
    /// Cumulative frequency before symbol `i`, `0 ≤ i ≤ n`.
    fn cum(&self, i: usize) -> u32;

    fn freq(&self, i: usize) -> u32 {
        self.cum(i + 1) - self.cum(i)
    }
}

/// Frequency table from a continuous CDF: both tails fold into the edge
/// symbols, the escape keeps frequency 1.
fn quantized_cum(n: usize, i: usize, cdf_at_lower_edge: impl FnOnce() -> f64) -> u32 {
    if i == 0 {
        0
    } else if i == n {
        TOTAL
    } else if i == n - 1 {
        TOTAL - 1
    } else {
        let f = cdf_at_lower_edge().clamp(0.0, 1.0);
        (f * (TOTAL as usize - n) as f64).floor() as u32 + i as u32
    }
}

/// Zero-mean Gaussian on integer offsets, evaluated lazily.
#[derive(Debug, Clone, Copy)]
pub struct GaussianModel {
    sigma: f64,
    half_width: i32,
}

impl GaussianModel {
    pub fn new(sigma: f64) -> Self {
        let sigma = if sigma.is_finite() { sigma.max(SIGMA_MIN) } else { SIGMA_MIN };
        let k = (TAIL_Z * sigma).ceil().max(1.0);
        let half_width = k.min(((MAX_SUPPORT - 1) / 2) as f64) as i32;
        Self { sigma, half_width }
    }
}

impl SymbolModel for GaussianModel {
    fn lowest(&self) -> i32 {
        -self.half_width
    }

    fn n(&self) -> usize {
        2 * self.half_width as usize + 2
    }

    fn cum(&self, i: usize) -> u32 {
        quantized_cum(self.n(), i, || {
            std_normal_cdf((self.lowest() as f64 + i as f64 - 0.5) / self.sigma)
        })
    }
}

/// Precomputed table for one channel of the factorized density.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableModel {
    lowest: i32,
    cum: Vec<u32>,
}

impl TableModel {
    /// Support covers `[F⁻¹(tail/2), F⁻¹(1 − tail/2)]`, found by bisection.
    pub fn from_density(density: &FactorizedDensity, channel: usize) -> Self {
        let cdf = |x: f64| density.cdf(channel, x);
        let quantile = |target: f64| {
            let (mut lo, mut hi) = (-1.0f64, 1.0f64);
            while cdf(lo) > target && lo > -1e6 {
                lo *= 2.0;
            }
            while cdf(hi) < target && hi < 1e6 {
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let mut lowest = quantile(TAIL_MASS / 2.0).floor() as i64;
        let mut highest = quantile(1.0 - TAIL_MASS / 2.0).ceil() as i64;
        if highest - lowest + 1 > MAX_SUPPORT as i64 {
            let mid = (lowest + highest) / 2;
            lowest = mid - (MAX_SUPPORT as i64 - 1) / 2;
            highest = lowest + MAX_SUPPORT as i64 - 1;
        }
        let n = (highest - lowest + 1) as usize + 1;
        let cum = (0..=n)
            .map(|i| quantized_cum(n, i, || cdf(lowest as f64 + i as f64 - 0.5)))
            .collect();
        Self {
            lowest: lowest as i32,
            cum,
        }
    }
}

impl SymbolModel for TableModel {
    fn lowest(&self) -> i32 {
        self.lowest
    }

    fn n(&self) -> usize {
        self.cum.len() - 1
    }

    fn cum(&self, i: usize) -> u32 {
        self.cum[i]
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

pub fn encode_value(enc: &mut RangeEncoder, model: &impl SymbolModel, value: i32) {
    let n = model.n();
    let idx = value as i64 - model.lowest() as i64;
    if (0..n as i64 - 1).contains(&idx) {
        let i = idx as usize;
        enc.encode(model.cum(i), model.freq(i));
    } else {
        enc.encode(model.cum(n - 1), 1);
        let raw = zigzag(value);
        enc.encode(raw >> 16, 1);
        enc.encode(raw & 0xFFFF, 1);
    }
}

pub fn decode_value(dec: &mut RangeDecoder<'_>, model: &impl SymbolModel) -> i32 {
    let target = dec.target();
    // Largest i with cum(i) ≤ target.
    let (mut lo, mut hi) = (0usize, model.n());
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if model.cum(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dec.consume(model.cum(lo), model.freq(lo));
    if lo + 1 < model.n() {
        return model.lowest() + lo as i32;
    }
    let hi16 = dec.target();
    dec.consume(hi16, 1);
    let lo16 = dec.target();
    dec.consume(lo16, 1);
    unzigzag((hi16 << 16) | lo16)
}

/// Ideal code length of `value` under the quantized model, in bits.
pub fn model_bits(model: &impl SymbolModel, value: i32) -> f64 {
    let n = model.n();
    let idx = value as i64 - model.lowest() as i64;
    let freq = if (0..n as i64 - 1).contains(&idx) {
        model.freq(idx as usize)
    } else {
        return PRECISION as f64 * 3.0;
    };
    PRECISION as f64 - (freq as f64).log2()
}
