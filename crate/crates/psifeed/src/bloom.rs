//! Bloom filters over 32-byte group element encodings.
//!
//! The server ships its blinded set as a Bloom filter instead of a plain
//! list, so the client learns membership bits (and a bounded false
//! positive rate) rather than the set itself. Sizing follows the usual
//! optimum: `m = ceil(-n ln e / (ln 2)^2)` bits and `k = round((m/n) ln 2)`
//! hash probes, with floors of 8 bits and 1 probe so degenerate inputs
//! still produce a usable filter.
//!
//! Probe positions are drawn by re-hashing the element digest with the
//! probe index rather than by double hashing two digest words. Deriving
//! all k probes from two words caps the number of distinct probe layouts
//! at m*(m-1); small filters then collide entire layouts far more often
//! than the advertised rate, which downstream turns into phantom
//! intersection counts. Independent probes keep the realized rate at e
//! for every filter size.

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Lower bound on the target false positive rate. Keeps the probe count
/// small enough for its one-byte wire encoding.
pub const MIN_FP_RATE: f64 = 2.9387358770557188e-39; // 2^-128

#[derive(Debug, Error, PartialEq)]
pub enum BloomError {
    #[error("false positive rate {0} outside [2^-128, 0.5]")]
    FpRateOutOfRange(f64),
    #[error("filter would need {0} bits, more than the wire format can carry")]
    TooLarge(u64),
    #[error("bit storage length {got} does not match {want} for m={m}")]
    StorageMismatch { m: u32, want: usize, got: usize },
    #[error("probe count 0 is invalid")]
    ZeroProbes,
}

/// A fixed-size Bloom filter. Elements are 32-byte encodings; each is
/// hashed once with SHA-256, then probe position `i` is the first
/// 64-bit word of `SHA-256(digest || i)`, reduced mod `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct BloomFilter {
    m: u32,
    k_hashes: u8,
    fp_rate: f64,
    bits: Vec<u8>,
}

/// Computes `(m, k)` for an expected set size and target false positive
/// rate. An empty set is sized as if it held one element.
pub fn optimal_params(expected_items: usize, fp_rate: f64) -> Result<(u32, u8), BloomError> {
    if !(MIN_FP_RATE..=0.5).contains(&fp_rate) {
        return Err(BloomError::FpRateOutOfRange(fp_rate));
    }
    let n = expected_items.max(1) as f64;
    let ln2 = std::f64::consts::LN_2;
    let m = (-n * fp_rate.ln() / (ln2 * ln2)).ceil().max(8.0);
    if m > u32::MAX as f64 {
        return Err(BloomError::TooLarge(m as u64));
    }
    let m = m as u32;
    let k = ((m as f64 / n) * ln2).round().max(1.0) as u8;
    Ok((m, k))
}

impl BloomFilter {
    pub fn new(expected_items: usize, fp_rate: f64) -> Result<Self, BloomError> {
        let (m, k_hashes) = optimal_params(expected_items, fp_rate)?;
        Ok(BloomFilter {
            m,
            k_hashes,
            fp_rate,
            bits: vec![0u8; m.div_ceil(8) as usize],
        })
    }

    /// Rebuilds a filter from its wire fields.
    pub fn from_raw_parts(
        m: u32,
        k_hashes: u8,
        fp_rate: f64,
        bits: Vec<u8>,
    ) -> Result<Self, BloomError> {
        if !(MIN_FP_RATE..=0.5).contains(&fp_rate) {
            return Err(BloomError::FpRateOutOfRange(fp_rate));
        }
        if k_hashes == 0 {
            return Err(BloomError::ZeroProbes);
        }
        let want = m.div_ceil(8) as usize;
        if bits.len() != want {
            return Err(BloomError::StorageMismatch {
                m,
                want,
                got: bits.len(),
            });
        }
        Ok(BloomFilter {
            m,
            k_hashes,
            fp_rate,
            bits,
        })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn k_hashes(&self) -> u8 {
        self.k_hashes
    }

    pub fn fp_rate(&self) -> f64 {
        self.fp_rate
    }

    /// Raw bit storage, least significant bit first within each byte.
    pub fn raw_bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn insert(&mut self, element: &[u8; 32]) {
        let positions: Vec<u32> = self.positions(element).collect();
        for pos in positions {
            self.bits[(pos / 8) as usize] |= 1 << (pos % 8);
        }
    }

    pub fn contains(&self, element: &[u8; 32]) -> bool {
        self.positions(element)
            .all(|pos| self.bits[(pos / 8) as usize] & (1 << (pos % 8)) != 0)
    }

    fn positions(&self, element: &[u8; 32]) -> impl Iterator<Item = u32> + '_ {
        let digest = Sha256::digest(element);
        let m = self.m as u64;
        (0..self.k_hashes).map(move |i| {
            let probe = Sha256::new().chain_update(digest).chain_update([i]).finalize();
            let word = u64::from_be_bytes(probe[0..8].try_into().expect("8-byte slice"));
            (word % m) as u32
        })
    }
}
