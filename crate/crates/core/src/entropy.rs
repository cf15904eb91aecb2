//! Lossless layer: a 32-bit range coder over static integer frequency tables.
//!
//! Frequencies sum to `2^16`. The encoder keeps a 33-bit `low` with
//! byte-wise carry propagation; the first emitted byte is always zero and is
//! dropped, and the flush writes the shortest suffix that identifies the final
//! interval (the decoder reads zeros past the end).

use serde::{Deserialize, Serialize};

use crate::{GmtcError, Result};

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;
/// Support cap: the `MAX_SUPPORT + 1` folded symbols must each fit a unit of
/// the symmetric table.
pub const MAX_SUPPORT: i64 = 1 << 14;

/// Cumulative frequency table summing to [`TOTAL`], every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    cum: Vec<u32>,
}

impl FrequencyTable {
    /// Largest-remainder rounding of `probs` onto the `2^16` grid with a
    /// minimum count of 1 per symbol.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let freq = largest_remainder(probs, TOTAL)?;
        Ok(Self::from_freqs(&freq))
    }

    /// Table for a pmf over `-T..=T` with `P(k) = P(-k)` preserved exactly:
    /// the folded distribution `(p_0, 2 p_1, .., 2 p_T)` is rounded onto
    /// `2^15` units, the centre taking two counts per unit.
    pub fn symmetric(pmf: &[f64]) -> Result<Self> {
        if pmf.len().is_multiple_of(2) {
            return Err(GmtcError::InvalidArgument("symmetric pmf needs odd length".into()));
        }
        let t = pmf.len() / 2;
        let folded: Vec<f64> = (0..=t)
            .map(|k| if k == 0 { pmf[t] } else { pmf[t + k] + pmf[t - k] })
            .collect();
        let units = largest_remainder(&folded, TOTAL / 2)?;
        let mut freq: Vec<u32> = units[1..].iter().rev().copied().collect();
        freq.push(2 * units[0]);
        freq.extend_from_slice(&units[1..]);
        Ok(Self::from_freqs(&freq))
    }

    fn from_freqs(freq: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(freq.len() + 1);
        cum.push(0);
        for f in freq {
            cum.push(cum.last().unwrap() + f);
        }
        debug_assert_eq!(*cum.last().unwrap(), TOTAL);
        Self { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, i: usize) -> u32 {
        self.cum[i + 1] - self.cum[i]
    }

    pub fn cum(&self, i: usize) -> u32 {
        self.cum[i]
    }

    /// Symbol index whose interval contains `v < TOTAL`.
    fn lookup(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }

    /// Expected code length in bits when symbols follow `pmf`.
    pub fn cross_entropy(&self, pmf: &[f64]) -> f64 {
        pmf.iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| -p * (self.freq(i) as f64 / TOTAL as f64).log2())
            .sum()
    }

    /// Entropy of the quantised distribution in bits.
    pub fn entropy(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let p = self.freq(i) as f64 / TOTAL as f64;
                -p * p.log2()
            })
            .sum()
    }
}

/// Integer counts summing to `total`, each at least 1; leftover units go to
/// the largest fractional parts, ties to the lower index.
fn largest_remainder(probs: &[f64], total: u32) -> Result<Vec<u32>> {
    let n = probs.len();
    if n == 0 || n > total as usize {
        return Err(GmtcError::InvalidArgument(format!("cannot tabulate {n} symbols")));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(GmtcError::InvalidArgument("probabilities must be finite and >= 0".into()));
    }
    let sum: f64 = probs.iter().sum();
    if !(sum > 0.0) {
        return Err(GmtcError::InvalidArgument("probabilities sum to zero".into()));
    }
    let spare = (total as usize - n) as f64;
    let scaled: Vec<f64> = probs.iter().map(|p| p / sum * spare).collect();
    let mut freq: Vec<u32> = scaled.iter().map(|s| 1 + s.floor() as u32).collect();
    let assigned: u32 = freq.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        freq[i] += 1;
    }
    Ok(freq)
}

/// Coding distribution for one symbol position.
#[derive(Clone, Debug, PartialEq)]
pub enum SymbolModel {
    /// Labels `0..K`.
    Categorical { table: FrequencyTable },
    /// Quantiser indices `-support..=support`.
    DiscretizedGaussian {
        sigma: f64,
        step: f64,
        support: i64,
        table: FrequencyTable,
    },
}

impl SymbolModel {
    pub fn categorical(pmf: &[f64]) -> Result<Self> {
        Ok(SymbolModel::Categorical {
            table: FrequencyTable::from_probabilities(pmf)?,
        })
    }

    /// Uniform mid-tread quantiser of step `step` applied to `N(0, sigma^2)`,
    /// support `ceil(8 sigma / step)` (capped at [`MAX_SUPPORT`]) with tails
    /// folded onto the end points.
    pub fn discretized_gaussian(sigma: f64, step: f64) -> Result<Self> {
        let pmf = discretized_gaussian_pmf(sigma, step)?;
        let support = (pmf.len() / 2) as i64;
        Ok(SymbolModel::DiscretizedGaussian {
            sigma,
            step,
            support,
            table: FrequencyTable::symmetric(&pmf)?,
        })
    }

    pub fn table(&self) -> &FrequencyTable {
        match self {
            SymbolModel::Categorical { table } | SymbolModel::DiscretizedGaussian { table, .. } => table,
        }
    }

    /// Inclusive symbol range.
    pub fn support(&self) -> (i64, i64) {
        match self {
            SymbolModel::Categorical { table } => (0, table.len() as i64 - 1),
            SymbolModel::DiscretizedGaussian { support, .. } => (-support, *support),
        }
    }

    fn index(&self, symbol: i64) -> Result<usize> {
        let (low, high) = self.support();
        if symbol < low || symbol > high {
            return Err(GmtcError::SymbolOutOfSupport { symbol, low, high });
        }
        Ok((symbol - low) as usize)
    }

    /// Modelled probability of `symbol` (quantised frequency over total).
    pub fn probability(&self, symbol: i64) -> Result<f64> {
        Ok(self.table().freq(self.index(symbol)?) as f64 / TOTAL as f64)
    }

    /// Ideal code length `-log2 P(symbol)`.
    pub fn ideal_bits(&self, symbol: i64) -> Result<f64> {
        Ok(0.0 - self.probability(symbol)?.log2())
    }
}

fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Probabilities for indices `-T..=T` (length `2T + 1`), exactly symmetric.
pub fn discretized_gaussian_pmf(sigma: f64, step: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !(step > 0.0) || !sigma.is_finite() || !step.is_finite() {
        return Err(GmtcError::InvalidArgument(format!(
            "need sigma > 0 and step > 0 (got {sigma}, {step})"
        )));
    }
    let a = step / sigma;
    let t = ((8.0 / a).ceil() as i64).clamp(1, MAX_SUPPORT);
    let mut half = Vec::with_capacity(t as usize + 1);
    half.push(libm::erf(a / (2.0 * std::f64::consts::SQRT_2)));
    for k in 1..t {
        let kf = k as f64;
        half.push(q_function((kf - 0.5) * a) - q_function((kf + 0.5) * a));
    }
    half.push(q_function((t as f64 - 0.5) * a));
    let mut pmf: Vec<f64> = half[1..].iter().rev().copied().collect();
    pmf.extend_from_slice(&half);
    Ok(pmf)
}

/// Range-coded payload.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
}

impl Bitstream {
    pub fn bit_length(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
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
        }
    }

    pub fn encode(&mut self, model: &SymbolModel, symbol: i64) -> Result<()> {
        let i = model.index(symbol)?;
        let t = model.table();
        self.encode_interval(t.cum(i), t.freq(i));
        Ok(())
    }

    /// Encodes a quantiser index. Indices at or beyond the support end point
    /// `T` send `+-T` followed by the Exp-Golomb coded excess `|i| - T`.
    pub fn encode_index(&mut self, model: &SymbolModel, index: i64) -> Result<()> {
        let (low, high) = model.support();
        if index > low && index < high {
            return self.encode(model, index);
        }
        let end = if index >= high { high } else { low };
        self.encode(model, end)?;
        let x = index.unsigned_abs() - high.unsigned_abs() + 1;
        let nbits = 64 - x.leading_zeros();
        for _ in 1..nbits {
            self.encode_bit(false);
        }
        for b in (0..nbits).rev() {
            self.encode_bit((x >> b) & 1 == 1);
        }
        Ok(())
    }

    fn encode_bit(&mut self, bit: bool) {
        self.encode_interval(if bit { TOTAL / 2 } else { 0 }, TOTAL / 2);
    }

    fn encode_interval(&mut self, cum: u32, freq: u32) {
        let r = self.range >> TOTAL_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
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

    pub fn finish(mut self) -> Bitstream {
        // pick the value in [low, low + range) with the most trailing zeros
        let end = self.low + self.range as u64;
        for b in (0..=32).rev() {
            let mask = (1u64 << b) - 1;
            let v = (self.low + mask) & !mask;
            if v < end {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        let mut bytes = self.out;
        debug_assert_eq!(bytes[0], 0);
        bytes.remove(0);
        while bytes.last() == Some(&0) {
            bytes.pop();
        }
        Bitstream { bytes }
    }
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, model: &SymbolModel) -> Result<i64> {
        let t = model.table();
        let r = self.range >> TOTAL_BITS;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(GmtcError::CorruptStream(format!(
                "code value {v} outside the frequency total"
            )));
        }
        let i = t.lookup(v);
        self.code -= r * t.cum(i);
        self.range = r * t.freq(i);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        Ok(model.support().0 + i as i64)
    }

    /// Inverse of [`RangeEncoder::encode_index`].
    pub fn decode_index(&mut self, model: &SymbolModel) -> Result<i64> {
        let (low, high) = model.support();
        let s = self.decode(model)?;
        if s > low && s < high {
            return Ok(s);
        }
        let mut zeros = 0;
        while !self.decode_bit()? {
            zeros += 1;
            if zeros > 63 {
                return Err(GmtcError::CorruptStream("escape prefix too long".into()));
            }
        }
        let mut x: u64 = 1;
        for _ in 0..zeros {
            x = (x << 1) | self.decode_bit()? as u64;
        }
        let excess = i64::try_from(x - 1)
            .ok()
            .and_then(|e| e.checked_add(high))
            .ok_or_else(|| GmtcError::CorruptStream("escape value overflows".into()))?;
        Ok(if s == high { excess } else { -excess })
    }

    fn decode_bit(&mut self) -> Result<bool> {
        let r = self.range >> TOTAL_BITS;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(GmtcError::CorruptStream(format!(
                "code value {v} outside the frequency total"
            )));
        }
        let bit = v >= TOTAL / 2;
        if bit {
            self.code -= r * (TOTAL / 2);
        }
        self.range = r * (TOTAL / 2);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        Ok(bit)
    }
}

/// Ideal code length of a quantiser index including any escape.
pub fn index_bits(model: &SymbolModel, index: i64) -> f64 {
    let (low, high) = model.support();
    if index > low && index < high {
        return model.ideal_bits(index).expect("inside support");
    }
    let end = if index >= high { high } else { low };
    let x = index.unsigned_abs() - high.unsigned_abs() + 1;
    let nbits = (64 - x.leading_zeros()) as f64;
    model.ideal_bits(end).expect("end point") + 2.0 * nbits - 1.0
}

/// Encodes `symbols[i]` under `models[i]`.
pub fn encode_symbols(models: &[&SymbolModel], symbols: &[i64]) -> Result<Bitstream> {
    if models.len() != symbols.len() {
        return Err(GmtcError::DimensionMismatch {
            expected: models.len(),
            actual: symbols.len(),
        });
    }
    let mut enc = RangeEncoder::new();
    for (m, &s) in models.iter().zip(symbols) {
        enc.encode(m, s)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(models: &[&SymbolModel], stream: &Bitstream) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(&stream.bytes);
    models.iter().map(|m| dec.decode(m)).collect()
}

/// `sum -log2 P(symbol)` under the quantised tables.
pub fn ideal_codelength(models: &[&SymbolModel], symbols: &[i64]) -> Result<f64> {
    models.iter().zip(symbols).map(|(m, &s)| m.ideal_bits(s)).sum()
}
