//! Binary range coder.
//!
//! Classic 32-bit low/range coder with byte-wise renormalization and
//! carry propagation through a cache of pending `0xFF` bytes. Symbol
//! probabilities are 16-bit quantized cumulative frequencies (total
//! `1 << 16`); every symbol must have frequency >= 1. The coder is exact:
//! decode(encode(s)) == s for any symbol sequence and any valid tables,
//! which the property tests exercise, and the compressed length exceeds
//! the quantized-model entropy by at most a few bytes of flush overhead.

/// Log2 of the total frequency mass of every table.
pub const PROB_BITS: u32 = 16;
/// Total frequency mass (`1 << PROB_BITS`).
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;

/// Streaming encoder producing a byte payload.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    symbols: u64,
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
        // the byte at bits 24..31 is now held in `cache`; drop it from low
        // by shifting within 32 bits
        self.low = ((self.low as u32) << 8) as u64;
    }

    /// Encode one symbol given its cumulative frequency interval
    /// `[cum, cum + freq)` out of [`PROB_TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!(cum + freq <= PROB_TOTAL);
        self.range >>= PROB_BITS;
        self.low += cum as u64 * self.range as u64;
        self.range *= freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        self.symbols += 1;
    }

    /// Encode symbol index `s` under a CDF table (`cdf.len() = n + 1`,
    /// `cdf[0] = 0`, `cdf[n] = PROB_TOTAL`, strictly increasing).
    pub fn encode_symbol(&mut self, cdf: &[u32], s: usize) {
        let cum = cdf[s];
        let freq = cdf[s + 1] - cum;
        self.encode(cum, freq);
    }

    /// Encode one raw byte at exactly 8 bits (uniform bypass lane).
    pub fn encode_bypass_byte(&mut self, b: u8) {
        self.encode(b as u32 * 256, 256);
    }

    /// Flush and return the payload. A coder that saw no symbols returns an
    /// empty payload.
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

/// Streaming decoder over a byte payload.
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Decode one symbol under a CDF table (same contract as
    /// [`RangeEncoder::encode_symbol`]).
    pub fn decode_symbol(&mut self, cdf: &[u32]) -> usize {
        self.range >>= PROB_BITS;
        let val = (self.code / self.range).min(PROB_TOTAL - 1);
        // greatest s with cdf[s] <= val
        let s = match cdf.binary_search(&val) {
            Ok(mut i) => {
                // step past duplicate-free boundary: cdf strictly increases,
                // so cdf[i] == val means symbol i starts exactly at val
                while i + 1 < cdf.len() && cdf[i + 1] == val {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        let cum = cdf[s];
        let freq = cdf[s + 1] - cum;
        self.code -= cum * self.range;
        self.range *= freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        s
    }

    /// Decode one bypass byte.
    pub fn decode_bypass_byte(&mut self) -> u8 {
        self.range >>= PROB_BITS;
        let val = (self.code / self.range).min(PROB_TOTAL - 1);
        let b = (val >> 8) as u8;
        self.code -= (b as u32 * 256) * self.range;
        self.range *= 256;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        b
    }

    /// Bytes consumed so far (for stream-position diagnostics).
    pub fn consumed(&self) -> usize {
        self.pos.min(self.data.len())
    }
}

/// Build a CDF (length `n + 1`) from integer frequencies summing to
/// [`PROB_TOTAL`].
pub fn cdf_from_freqs(freqs: &[u32]) -> Vec<u32> {
    let mut cdf = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for &f in freqs {
        acc += f;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, PROB_TOTAL, "frequencies must sum to PROB_TOTAL");
    cdf
}
