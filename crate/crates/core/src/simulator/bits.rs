//! Record bit streams.
//!
//! Pseudorandom records are derived bit-exactly from `(master_seed, trial, record)`:
//!
//! ```text
//! s0 = mix(master_seed ^ (trial  * 0x9E3779B97F4A7C15))
//! sr = mix(s0          ^ (record * 0xBF58476D1CE4E5B9))
//! ```
//!
//! where `mix` is the SplitMix64 finalizer and products wrap modulo 2^64.
//! The record's bits are then read most-significant first from successive
//! SplitMix64 outputs seeded with `sr`.

use crate::error::{Error, Result};

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
pub const RECORD_MULTIPLIER: u64 = 0xBF58_476D_1CE4_E5B9;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream for record `record` of trial `trial`.
#[inline]
pub fn stream_seed(master_seed: u64, trial: u64, record: u64) -> u64 {
    let s0 = mix64(master_seed ^ trial.wrapping_mul(GOLDEN_GAMMA));
    mix64(s0 ^ record.wrapping_mul(RECORD_MULTIPLIER))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }
}

/// Where a record's bits come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BitSource {
    /// A finite bit string; reading past its end is an error.
    Explicit(Vec<bool>),
    /// The deterministic stream identified by the triple.
    Stream { master_seed: u64, trial: u64, record: u64 },
}

impl BitSource {
    /// Parses a string of `0`/`1` characters.
    pub fn explicit(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::domain(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(BitSource::Explicit)
    }

    pub fn stream(master_seed: u64, trial: u64, record: u64) -> Self {
        BitSource::Stream {
            master_seed,
            trial,
            record,
        }
    }

    pub fn reader(&self, record: usize) -> BitReader<'_> {
        match self {
            BitSource::Explicit(bits) => BitReader::Explicit { bits, pos: 0, record },
            BitSource::Stream {
                master_seed,
                trial,
                record: r,
            } => BitReader::Stream(StreamBits::new(stream_seed(*master_seed, *trial, *r))),
        }
    }
}

/// Something that hands out bits one at a time.
pub trait BitRead {
    fn next_bit(&mut self) -> Result<bool>;
}

/// MSB-first bits of successive SplitMix64 outputs.
#[derive(Debug, Clone)]
pub struct StreamBits {
    rng: SplitMix64,
    word: u64,
    left: u32,
}

impl StreamBits {
    pub fn new(seed: u64) -> Self {
        StreamBits {
            rng: SplitMix64::new(seed),
            word: 0,
            left: 0,
        }
    }

    pub fn for_record(master_seed: u64, trial: u64, record: u64) -> Self {
        Self::new(stream_seed(master_seed, trial, record))
    }

    #[inline]
    pub fn bit(&mut self) -> bool {
        if self.left == 0 {
            self.word = self.rng.next_u64();
            self.left = 64;
        }
        self.left -= 1;
        (self.word >> self.left) & 1 == 1
    }

    /// Uniform integer in `0..m` by rejection on `ceil(log2 m)` bits.
    pub fn below(&mut self, m: u64) -> u64 {
        assert!(m > 0);
        if m == 1 {
            return 0;
        }
        let width = 64 - (m - 1).leading_zeros();
        loop {
            let mut v = 0u64;
            for _ in 0..width {
                v = (v << 1) | self.bit() as u64;
            }
            if v < m {
                return v;
            }
        }
    }
}

impl BitRead for StreamBits {
    #[inline]
    fn next_bit(&mut self) -> Result<bool> {
        Ok(self.bit())
    }
}

#[derive(Debug, Clone)]
pub enum BitReader<'a> {
    Explicit { bits: &'a [bool], pos: usize, record: usize },
    Stream(StreamBits),
}

impl BitRead for BitReader<'_> {
    fn next_bit(&mut self) -> Result<bool> {
        match self {
            BitReader::Explicit { bits, pos, record } => {
                let b = bits.get(*pos).copied().ok_or(Error::BitExhausted {
                    record: *record,
                    available: bits.len(),
                })?;
                *pos += 1;
                Ok(b)
            }
            BitReader::Stream(s) => Ok(s.bit()),
        }
    }
}

impl BitReader<'_> {
    /// Uniform integer in `0..m`, rejection-sampled from the reader's bits.
    pub fn below(&mut self, m: u64) -> Result<u64> {
        if m == 0 {
            return Err(Error::domain("cannot sample from an empty range"));
        }
        if m == 1 {
            return Ok(0);
        }
        let width = 64 - (m - 1).leading_zeros();
        loop {
            let mut v = 0u64;
            for _ in 0..width {
                v = (v << 1) | self.next_bit()? as u64;
            }
            if v < m {
                return Ok(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0 and 1234567.
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(g.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let mut g = SplitMix64::new(1_234_567);
        assert_eq!(g.next_u64(), 6_457_827_717_110_365_317);
        assert_eq!(g.next_u64(), 3_203_168_211_198_807_973);
    }

    #[test]
    fn stream_bits_are_msb_first() {
        let seed = stream_seed(42, 3, 7);
        let word = SplitMix64::new(seed).next_u64();
        let mut bits = StreamBits::new(seed);
        for i in (0..64).rev() {
            assert_eq!(bits.bit(), (word >> i) & 1 == 1);
        }
    }

    #[test]
    fn stream_seed_depends_on_every_coordinate() {
        let base = stream_seed(1, 2, 3);
        assert_ne!(base, stream_seed(0, 2, 3));
        assert_ne!(base, stream_seed(1, 0, 3));
        assert_ne!(base, stream_seed(1, 2, 0));
        assert_eq!(base, stream_seed(1, 2, 3));
    }

    #[test]
    fn explicit_source_errors_on_exhaustion() {
        let src = BitSource::explicit("10").unwrap();
        let mut r = src.reader(4);
        assert!(r.next_bit().unwrap());
        assert!(!r.next_bit().unwrap());
        assert_eq!(
            r.next_bit().unwrap_err(),
            Error::BitExhausted { record: 4, available: 2 }
        );
        assert!(BitSource::explicit("102").is_err());
    }

    #[test]
    fn below_is_in_range_and_covers_it() {
        let mut s = StreamBits::new(99);
        let mut seen = [0u32; 5];
        for _ in 0..5000 {
            seen[s.below(5) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
        assert_eq!(s.below(1), 0);
    }
}
