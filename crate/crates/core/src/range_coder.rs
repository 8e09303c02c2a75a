//! Byte-oriented range coder over 16-bit frequency tables.
//!
//! Carry propagation follows the LZMA scheme: a 64-bit `low` register, a
//! cached byte plus a run of pending `0xFF` bytes. The first byte the
//! scheme emits is always zero and is not written.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
/// Sum of every frequency table.
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequencies for symbols `lo ..= lo + len - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    lo: i32,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantize a pmf to frequencies summing to [`TOTAL`] with the largest
    /// remainder method. Every symbol gets frequency at least 1. Ties in the
    /// remainders go to the lower symbol, so the result is a pure function
    /// of the input.
    pub fn from_pmf(lo: i32, pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n > TOTAL as usize {
            return Err(Error::Coding(format!("alphabet of {n} symbols is not codable")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Coding("pmf has negative or non-finite entries".into()));
        }
        let mass: f64 = pmf.iter().sum();
        if mass <= 0.0 {
            return Err(Error::Coding("pmf has zero mass".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut freqs = Vec::with_capacity(n);
        let mut rems = Vec::with_capacity(n);
        let mut used = 0u64;
        for (i, &p) in pmf.iter().enumerate() {
            let exact = p / mass * spare;
            let base = exact.floor();
            freqs.push(1 + base as u32);
            rems.push((exact - base, i));
            used += base as u64;
        }
        let mut left = (TOTAL as u64 - n as u64).saturating_sub(used);
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in rems.iter().cycle() {
            if left == 0 {
                break;
            }
            freqs[i] += 1;
            left -= 1;
        }
        Self::from_freqs(lo, &freqs)
    }

    pub fn from_freqs(lo: i32, freqs: &[u32]) -> Result<Self> {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != TOTAL as u64 {
            return Err(Error::Coding(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(Self { lo, cum })
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.cum.len() as i32 - 2
    }

    pub fn freq(&self, symbol: i32) -> u32 {
        match self.index(symbol) {
            Some(i) => self.cum[i + 1] - self.cum[i],
            None => 0,
        }
    }

    /// Ideal code length of `symbol` under the quantized table.
    pub fn bits(&self, symbol: i32) -> f64 {
        -(self.freq(symbol) as f64 / TOTAL as f64).log2()
    }

    fn index(&self, symbol: i32) -> Option<usize> {
        let i = symbol.checked_sub(self.lo)?;
        (i >= 0 && (i as usize) + 1 < self.cum.len()).then_some(i as usize)
    }
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            first: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &FreqTable) -> Result<()> {
        let i = table.index(symbol).ok_or_else(|| {
            Error::Coding(format!("symbol {symbol} outside table [{}, {}]", table.lo(), table.hi()))
        })?;
        let (start, end) = (table.cum[i], table.cum[i + 1]);
        if end == start {
            return Err(Error::Coding(format!("symbol {symbol} has zero frequency")));
        }
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * (end - start);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                let b = byte.wrapping_add(carry);
                if self.first {
                    debug_assert_eq!(b, 0);
                    self.first = false;
                } else {
                    self.out.push(b);
                }
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self { code: 0, range: u32::MAX, input, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::CorruptStream("range coder payload truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<i32> {
        let r = self.range >> PRECISION_BITS;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(Error::CorruptStream("range coder value out of range".into()));
        }
        let i = table.cum.partition_point(|&c| c <= v) - 1;
        let (start, end) = (table.cum[i], table.cum[i + 1]);
        self.code -= r * start;
        self.range = r * (end - start);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(table.lo + i as i32)
    }

    /// Bytes not consumed yet. Zero after a well-formed stream is decoded.
    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }
}

/// Encode `symbols[i]` with `tables[i]`.
pub fn rc_encode(symbols: &[i32], tables: &[&FreqTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Usage(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

/// Decode `tables.len()` symbols; the payload must be consumed exactly.
pub fn rc_decode(bytes: &[u8], tables: &[&FreqTable]) -> Result<Vec<i32>> {
    let mut dec = Decoder::new(bytes)?;
    let out = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    if dec.remaining() != 0 {
        return Err(Error::CorruptStream(format!(
            "{} trailing bytes after range-coded payload",
            dec.remaining()
        )));
    }
    Ok(out)
}
