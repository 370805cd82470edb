//! RSA key generation for fixtures and experiments.
//!
//! Generated keys keep their prime factors, which makes them an oracle for
//! the factor scanner.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaKey {
    pub modulus: BigUint,
    pub p: BigUint,
    pub q: BigUint,
}

impl RsaKey {
    pub fn from_hex(modulus: &str, p: &str, q: &str) -> Option<Self> {
        let parse = |s: &str| BigUint::parse_bytes(s.trim().as_bytes(), 16);
        let key = RsaKey {
            modulus: parse(modulus)?,
            p: parse(p)?,
            q: parse(q)?,
        };
        (&key.p * &key.q == key.modulus).then_some(key)
    }

    pub fn modulus_bits(&self) -> u64 {
        self.modulus.bits()
    }
}

/// Uniform integer with at most `bits` bits.
fn random_bits<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    let mut bytes = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill_bytes(&mut bytes);
    let excess = bytes.len() as u64 * 8 - bits;
    if let Some(top) = bytes.last_mut() {
        *top &= 0xff >> excess;
    }
    BigUint::from_bytes_le(&bytes)
}

/// Uniform integer in `[0, bound)` by rejection.
fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    loop {
        let x = random_bits(bound.bits(), rng);
        if &x < bound {
            return x;
        }
    }
}

/// Probabilistic primality test: trial division, then `rounds` Miller-Rabin
/// rounds with random bases.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: u32, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in SMALL_PRIMES.iter().chain(std::iter::once(&2)) {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = random_below(&(&n_minus_1 - 2u32), rng) + 2u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A random prime with exactly `bits` bits and its top two bits set.
pub fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime size too small");
    loop {
        let mut candidate = random_bits(bits, rng);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, 24, rng) {
            return candidate;
        }
    }
}

/// A key whose modulus has exactly `modulus_bits` bits, with two distinct
/// primes of half that size.
pub fn generate_rsa_key<R: Rng + ?Sized>(modulus_bits: u64, rng: &mut R) -> RsaKey {
    assert!(modulus_bits.is_multiple_of(2) && modulus_bits >= 16);
    loop {
        let p = random_prime(modulus_bits / 2, rng);
        let q = random_prime(modulus_bits / 2, rng);
        if p == q || !p.gcd(&q).is_one() {
            continue;
        }
        let modulus = &p * &q;
        return RsaKey { modulus, p, q };
    }
}
