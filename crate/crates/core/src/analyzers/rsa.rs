//! RSA private factor search: any byte window that divides the public modulus.
//!
//! Exact big-integer division is by far the most expensive step, so windows
//! first pass a cheap sieve. A divisor of the modulus cannot be divisible by
//! a small prime that does not divide the modulus, and residues of every
//! window modulo a product of small primes can be maintained incrementally as
//! the window slides. Only windows surviving the sieve are divided.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};

use super::{AnalyzerError, CandidateKind, KeyCandidate};
use crate::mem_model::Endianness;

const SIEVE_PRIMES: [u64; 8] = [3, 5, 7, 11, 13, 17, 19, 23];
/// The sieve primes split into two groups, each with a lookup table indexed
/// by the residue modulo the group product.
const SIEVE_A: u64 = 3 * 5 * 7 * 11 * 13;
const SIEVE_B: u64 = 17 * 19 * 23;
const SIEVE_MODULUS: u64 = SIEVE_A * SIEVE_B;
/// Largest number of bytes the residue advances by in one update.
const MAX_ROLL: usize = 8;

/// Multiplicative inverse of 256 modulo [`SIEVE_MODULUS`].
const fn inv256() -> u64 {
    // 256 * x = 1 mod M; M is odd so x exists. Brute force over the small
    // residue class k*M + 1 divisible by 256.
    let mut k = 0;
    loop {
        let v = k * SIEVE_MODULUS + 1;
        if v.is_multiple_of(256) {
            return v / 256;
        }
        k += 1;
    }
}
const INV_256: u64 = inv256();

fn le_int(bytes: &[u8]) -> u64 {
    bytes.iter().rev().fold(0, |a, &x| a << 8 | u64::from(x))
}

fn be_int(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0, |a, &x| a << 8 | u64::from(x))
}

fn pow_mod(base: u64, exp: usize) -> u64 {
    (0..exp).fold(1, |acc, _| acc * base % SIEVE_MODULUS)
}

/// Inverse of an odd `a` modulo 2^64 by Newton iteration.
fn inverse_mod_2_64(a: u64) -> u64 {
    // Correct to 3 bits to begin with; every step doubles the precision.
    let mut x = a;
    for _ in 0..5 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
    }
    x
}

/// Whether odd `v` divides `n` exactly (little-endian limbs, `v` without
/// leading zero limbs). Quotient limbs are recovered from the low end, so
/// the test needs no trial quotients; `n` divides evenly iff nothing is left.
fn divides_exactly(n: &[u64], v: &[u64], rest: &mut Vec<u64>) -> bool {
    let m = v.len();
    if m == 0 || m > n.len() || v[0] & 1 == 0 {
        return false;
    }
    let inv = inverse_mod_2_64(v[0]);
    rest.clear();
    rest.extend_from_slice(n);
    rest.push(0);
    for i in 0..=n.len() - m {
        let q = rest[i].wrapping_mul(inv);
        if q == 0 {
            continue;
        }
        // q * v[j] + carry < 2^128, and a borrow never coincides with a
        // saturated high word, so the carry fits one limb.
        let mut carry: u64 = 0;
        let (window, upper) = rest[i..].split_at_mut(m);
        for (r, &vj) in window.iter_mut().zip(v) {
            let p = u128::from(q) * u128::from(vj) + u128::from(carry);
            let (d, borrow) = r.overflowing_sub(p as u64);
            *r = d;
            carry = (p >> 64) as u64 + u64::from(borrow);
        }
        for limb in upper {
            if carry == 0 {
                break;
            }
            let (d, borrow) = limb.overflowing_sub(carry);
            *limb = d;
            carry = u64::from(borrow);
        }
    }
    rest.iter().all(|&x| x == 0)
}

/// A reusable scanner bound to one modulus.
#[derive(Debug, Clone)]
pub struct RsaScanner {
    modulus: BigUint,
    modulus_limbs: Vec<u64>,
    window: usize,
    endianness: Endianness,
    stride: usize,
    odd_only: bool,
    /// Residues modulo [`SIEVE_A`] and [`SIEVE_B`] that no active sieve
    /// prime divides. A prime is active when it does not divide the modulus.
    sieve_a: Vec<bool>,
    sieve_b: Vec<bool>,
    /// Indexed by byte count k: 256^k, 256^-k and 256^(window-k), all mod
    /// [`SIEVE_MODULUS`].
    pow: [u64; MAX_ROLL + 1],
    inv_pow: [u64; MAX_ROLL + 1],
    top: [u64; MAX_ROLL + 1],
    factor_bits: u32,
    balanced: Option<Balanced>,
}

/// Value range of a factor of exactly `factor_bits` bits whose cofactor has
/// at most `factor_bits` bits, with the leading 64 bits of each bound for a
/// quick test.
#[derive(Debug, Clone)]
struct Balanced {
    lower: BigUint,
    upper: BigUint,
    lower_top: u64,
    upper_top: u64,
}

impl RsaScanner {
    pub fn new(
        modulus: BigUint,
        factor_bits: u32,
        endianness: Endianness,
        stride: usize,
    ) -> Result<Self, AnalyzerError> {
        if modulus <= BigUint::from(3u32) {
            return Err(AnalyzerError::ModulusTooSmall);
        }
        if factor_bits < 2 {
            return Err(AnalyzerError::FactorBits(factor_bits));
        }
        if stride == 0 {
            return Err(AnalyzerError::ZeroStride);
        }
        let window = (factor_bits as usize).div_ceil(8);
        let odd_only = modulus.is_odd();
        let residue = (&modulus % SIEVE_MODULUS).to_u64().unwrap_or(0);
        let active: Vec<u64> = SIEVE_PRIMES
            .into_iter()
            .filter(|p| !residue.is_multiple_of(*p))
            .collect();
        let table = |m: u64| -> Vec<bool> {
            (0..m)
                .map(|r| active.iter().all(|p| !m.is_multiple_of(*p) || r % p != 0))
                .collect()
        };
        let pow = std::array::from_fn(|k| pow_mod(256, k));
        let inv_pow = std::array::from_fn(|k| pow_mod(INV_256, k));
        let top = std::array::from_fn(|k| pow_mod(256, window.saturating_sub(k)));
        Ok(RsaScanner {
            modulus_limbs: modulus.to_u64_digits(),
            modulus,
            window,
            endianness,
            stride,
            odd_only,
            sieve_a: table(SIEVE_A),
            sieve_b: table(SIEVE_B),
            pow,
            inv_pow,
            top,
            factor_bits,
            balanced: None,
        })
    }

    /// Restricts matches to balanced factors: exactly `factor_bits` bits long
    /// with a cofactor no longer than that.
    pub fn balanced(mut self) -> Self {
        let fb = u64::from(self.factor_bits);
        let lower = (&self.modulus >> fb) + 1u32;
        let lower = lower.max(BigUint::one() << (fb - 1));
        let upper = (BigUint::one() << fb) - 1u32;
        let top = |x: &BigUint| (x >> self.top_shift()).to_u64().unwrap_or(u64::MAX);
        self.balanced = Some(Balanced {
            lower_top: top(&lower),
            upper_top: top(&upper),
            lower,
            upper,
        });
        self
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced.is_some()
    }

    /// Bits below the leading 64 bits of a window value.
    fn top_shift(&self) -> usize {
        8 * self.window.saturating_sub(8)
    }

    /// Leading 64 bits of a window value.
    #[inline]
    fn window_top(&self, window: &[u8]) -> u64 {
        let n = window.len().min(8);
        match self.endianness {
            Endianness::Little => le_int(&window[window.len() - n..]),
            Endianness::Big => be_int(&window[..n]),
        }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn endianness(&self) -> Endianness {
        self.endianness
    }

    fn value_of(&self, bytes: &[u8]) -> BigUint {
        match self.endianness {
            Endianness::Little => BigUint::from_bytes_le(bytes),
            Endianness::Big => BigUint::from_bytes_be(bytes),
        }
    }

    fn initial_residue(&self, window: &[u8]) -> u64 {
        let fold = |r: u64, b: &u8| (r * 256 + u64::from(*b)) % SIEVE_MODULUS;
        match self.endianness {
            Endianness::Little => window.iter().rev().fold(0, fold),
            Endianness::Big => window.iter().fold(0, fold),
        }
    }

    #[inline]
    fn passes_sieve(&self, window: &[u8], residue: u64) -> bool {
        if self.odd_only {
            let low = match self.endianness {
                Endianness::Little => window[0],
                Endianness::Big => window[window.len() - 1],
            };
            if low & 1 == 0 {
                return false;
            }
        }
        self.sieve_a[(residue % SIEVE_A) as usize] && self.sieve_b[(residue % SIEVE_B) as usize]
    }

    /// Advances the residue of a window by `leaving.len()` bytes, where
    /// `entering` are the bytes that follow the old window.
    #[inline]
    fn roll(&self, residue: u64, leaving: &[u8], entering: &[u8]) -> u64 {
        let k = leaving.len();
        // Operands stay below 2^57, so one reduction at the end suffices.
        let (l, e) = if k == 1 {
            (u64::from(leaving[0]), u64::from(entering[0]))
        } else {
            let (l, e) = match self.endianness {
                Endianness::Little => (le_int(leaving), le_int(entering)),
                Endianness::Big => (be_int(leaving), be_int(entering)),
            };
            (l % SIEVE_MODULUS, e % SIEVE_MODULUS)
        };
        match self.endianness {
            Endianness::Little => {
                ((residue + SIEVE_MODULUS - l) * self.inv_pow[k] + e * self.top[k]) % SIEVE_MODULUS
            }
            Endianness::Big => {
                let kept = residue + SIEVE_MODULUS - l * self.top[k] % SIEVE_MODULUS;
                (kept * self.pow[k] + e) % SIEVE_MODULUS
            }
        }
    }

    fn exact_divisor(&self, window: &[u8], limbs: &mut Vec<u64>, rest: &mut Vec<u64>) -> bool {
        limbs.clear();
        match self.endianness {
            Endianness::Little => limbs.extend(window.chunks(8).map(|c| {
                let mut b = [0u8; 8];
                b[..c.len()].copy_from_slice(c);
                u64::from_le_bytes(b)
            })),
            Endianness::Big => limbs.extend(window.rchunks(8).map(|c| {
                let mut b = [0u8; 8];
                b[8 - c.len()..].copy_from_slice(c);
                u64::from_be_bytes(b)
            })),
        }
        while limbs.last() == Some(&0) {
            limbs.pop();
        }
        let divides = if limbs.first().is_some_and(|l| l & 1 == 1) {
            divides_exactly(&self.modulus_limbs, limbs, rest)
        } else {
            // Even windows of an even modulus.
            let v = self.value_of(window);
            !v.is_zero() && (&self.modulus % &v).is_zero()
        };
        divides && {
            let v = self.value_of(window);
            match &self.balanced {
                Some(b) => v >= b.lower && v <= b.upper && v < self.modulus,
                None => v > BigUint::one() && v < self.modulus,
            }
        }
    }

    /// All windows (at multiples of the stride) whose value is a nontrivial
    /// divisor of the modulus, ordered by offset.
    pub fn scan(&self, chunk: &[u8]) -> Vec<KeyCandidate> {
        let w = self.window;
        let mut out = Vec::new();
        if chunk.len() < w {
            return out;
        }
        let mut limbs = Vec::with_capacity(w / 8 + 1);
        let mut rest = Vec::with_capacity(self.modulus_limbs.len() + 1);
        let mut residue = self.initial_residue(&chunk[..w]);
        let last = chunk.len() - w;
        // Recomputing costs one pass over the window, rolling one pass over
        // the stride; take the cheaper.
        let recompute = self.stride >= w;
        let mut offset = 0;
        loop {
            let window = &chunk[offset..offset + w];
            let in_range = self.balanced.as_ref().is_none_or(|b| {
                let t = self.window_top(window);
                t >= b.lower_top && t <= b.upper_top
            });
            if in_range
                && self.passes_sieve(window, residue)
                && self.exact_divisor(window, &mut limbs, &mut rest)
            {
                out.push(KeyCandidate {
                    kind: CandidateKind::RsaFactor,
                    offset,
                    material: window.to_vec(),
                    footprint: w,
                    score: 0,
                });
            }
            let next = offset + self.stride;
            if next > last {
                break;
            }
            if recompute {
                residue = self.initial_residue(&chunk[next..next + w]);
            } else {
                let mut pos = offset;
                while pos < next {
                    let k = (next - pos).min(MAX_ROLL);
                    residue =
                        self.roll(residue, &chunk[pos..pos + k], &chunk[pos + w..pos + w + k]);
                    pos += k;
                }
            }
            offset = next;
        }
        out
    }

    /// Interprets a candidate's material as an integer.
    pub fn candidate_value(&self, candidate: &KeyCandidate) -> BigUint {
        self.value_of(&candidate.material)
    }
}

/// One-shot form of [`RsaScanner::scan`].
pub fn scan_rsa_factor(
    chunk: &[u8],
    modulus: &BigUint,
    factor_bits: u32,
    endianness: Endianness,
    stride: usize,
) -> Result<Vec<KeyCandidate>, AnalyzerError> {
    Ok(RsaScanner::new(modulus.clone(), factor_bits, endianness, stride)?.scan(chunk))
}

/// Given one factor, returns both factors in ascending order.
pub fn complete_rsa_key(
    factor: &BigUint,
    modulus: &BigUint,
) -> Result<(BigUint, BigUint), AnalyzerError> {
    if factor <= &BigUint::one() || factor >= modulus {
        return Err(AnalyzerError::NotADivisor(factor.to_str_radix(16)));
    }
    let (other, rem) = modulus.div_rem(factor);
    if !rem.is_zero() {
        return Err(AnalyzerError::NotADivisor(factor.to_str_radix(16)));
    }
    if &other < factor {
        Ok((other, factor.clone()))
    } else {
        Ok((factor.clone(), other))
    }
}
