/// Independent sub-generator tags. Equal sample seeds in different streams
/// produce unrelated draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Text = 0x7465_7874,
    Image = 0x696d_6167,
    Pair = 0x7061_6972,
    Eval = 0x6576_616c,
    Masking = 0x6d61_736b,
}

/// SplitMix64 finalizer over `seed + gamma * (tag + 1)`.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tag.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th sample of `stream` under `global`. Indices are a
/// counter, so disjoint index ranges never share a sample.
pub fn sample_seed(global: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(global, stream as u64), index)
}
