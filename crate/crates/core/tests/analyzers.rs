use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmsift::analyzers::{
    aes_expand_key, complete_rsa_key, scan_aes_schedules, scan_key_context, scan_rsa_factor,
    verify_key_candidate, AesVariant, KnownAnswer,
};
use vmsift::keygen::generate_rsa_key;
use vmsift::mem_model::{Endianness, KEY_CONTEXT_LAYOUT};

const MIB: usize = 1 << 20;

fn random_chunk(len: usize, seed: u64) -> Vec<u8> {
    let mut chunk = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut chunk);
    chunk
}

#[test]
fn rsa_factor_planted_at_7777() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let key = generate_rsa_key(1024, &mut rng);
    let mut chunk = random_chunk(MIB, 78);
    let mut bytes = key.p.to_bytes_le();
    bytes.resize(64, 0);
    chunk[7777..7777 + 64].copy_from_slice(&bytes);
    let hits = scan_rsa_factor(&chunk, &key.modulus, 512, Endianness::Little, 1).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].offset, 7777);
    let (p, q) = complete_rsa_key(&key.p, &key.modulus).unwrap();
    let (lo, hi) = if key.p < key.q {
        (&key.p, &key.q)
    } else {
        (&key.q, &key.p)
    };
    assert_eq!((&p, &q), (lo, hi));
}

#[test]
fn aes_128_planted_at_1000() {
    let key: [u8; 16] = ChaCha8Rng::seed_from_u64(5).random();
    let schedule = aes_expand_key(&key, AesVariant::Aes128).unwrap();
    let mut chunk = random_chunk(MIB, 6);
    chunk[1000..1000 + schedule.len()].copy_from_slice(&schedule);
    let hits = scan_aes_schedules(&chunk, AesVariant::Aes128, 0, 1);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].offset, 1000);
    assert_eq!(hits[0].score, 0);
    assert_eq!(hits[0].material, key);
}

#[test]
fn key_context_false_rate_below_one_per_mib() {
    let mut total = 0;
    for i in 0..100 {
        total += scan_key_context(&random_chunk(MIB, 1000 + i), &KEY_CONTEXT_LAYOUT).len();
    }
    assert!(total < 100, "{total} false candidates in 100 MiB");
}

#[test]
fn planted_key_verifies_and_others_do_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let key: [u8; 32] = rng.random();
    let probe = KnownAnswer::new(&key, *b"known sector 000").unwrap();
    let schedule = aes_expand_key(&key, AesVariant::Aes256).unwrap();
    let mut chunk = random_chunk(4096, 10);
    chunk[512..512 + schedule.len()].copy_from_slice(&schedule);
    let hit = &scan_aes_schedules(&chunk, AesVariant::Aes256, 0, 16)[0];
    assert!(verify_key_candidate(hit, &probe).unwrap());

    let mut other = hit.clone();
    other.material = rng.random::<[u8; 32]>().to_vec();
    assert!(!verify_key_candidate(&other, &probe).unwrap());

    // Errors past the key words leave the recovered key intact.
    let mut flipped = schedule.clone();
    flipped[100] ^= 0x10;
    chunk[512..512 + schedule.len()].copy_from_slice(&flipped);
    let near = &scan_aes_schedules(&chunk, AesVariant::Aes256, 8, 16)[0];
    assert_eq!(near.score, 1);
    assert!(verify_key_candidate(near, &probe).unwrap());
}

#[test]
fn three_flipped_bits_need_tolerance() {
    let key: [u8; 16] = ChaCha8Rng::seed_from_u64(12).random();
    let mut schedule = aes_expand_key(&key, AesVariant::Aes128).unwrap();
    schedule[40] ^= 0x01;
    schedule[90] ^= 0x80;
    schedule[170] ^= 0x04;
    let mut chunk = random_chunk(8192, 13);
    chunk[2048..2048 + schedule.len()].copy_from_slice(&schedule);
    let hits = scan_aes_schedules(&chunk, AesVariant::Aes128, 4, 1);
    assert_eq!(hits.len(), 1);
    assert_eq!((hits[0].offset, hits[0].score), (2048, 3));
    assert!(scan_aes_schedules(&chunk, AesVariant::Aes128, 2, 1).is_empty());
}
