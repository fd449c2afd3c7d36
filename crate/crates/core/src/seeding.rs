//! Seed derivation. Every random stream in the pipeline descends from the
//! single configured seed through these functions:
//!
//! * per-prompt seed: `for_key(seed, qid)` for QA, `for_key(seed, video_id)` for NLQ
//! * per-run sampling seed: `for_index(prompt_seed, run_index)`
//! * vote tie-break seed: `for_key(for_index(seed, VOTE_STREAM), qid)`
//! * refinement jitter seed: `for_key(for_index(seed, JITTER_STREAM), qid)`

pub const VOTE_STREAM: u64 = 0x766f_7465;
pub const JITTER_STREAM: u64 = 0x6a69_7474;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn for_index(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn for_key(base: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for_index(base, h)
}
