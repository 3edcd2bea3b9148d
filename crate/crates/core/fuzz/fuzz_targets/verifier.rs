#![no_main]

use libfuzzer_sys::fuzz_target;
use unmask::rng::from_seed;
use unmask::tasks::{generate, Difficulty, TaskKind};

// Input: kind selector, 8 seed bytes, then the generated window (one token per byte).
fuzz_target!(|data: &[u8]| {
    let Some((&k, rest)) = data.split_first() else {
        return;
    };
    let Some((seed, tokens)) = rest.split_first_chunk::<8>() else {
        return;
    };
    let kind = TaskKind::ALL[k as usize % TaskKind::ALL.len()];
    let inst = &generate(kind, &Difficulty::default_for(kind), &mut from_seed(u64::from_le_bytes(*seed)), 1).unwrap()[0];
    assert_eq!(inst.reward(&inst.gold), 1.0);
    let generated: Vec<usize> = tokens.iter().map(|&b| b as usize).collect();
    let r = inst.reward(&generated);
    assert!((0.0..=1.0).contains(&r));
});
