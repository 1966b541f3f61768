//! Synthetic inputs shared by the benchmarks.

use phonicl_core::corpus::{Example, Task};
use phonicl_core::rng::Xoshiro256StarStar;

/// A pseudo-word built from a small syllable inventory.
fn word(rng: &mut Xoshiro256StarStar) -> String {
    const SYL: [&str; 12] = ["ka", "ti", "mo", "ra", "shu", "ne", "pa", "lo", "zi", "chu", "be", "sa"];
    (0..1 + rng.below(3)).map(|_| SYL[rng.below(SYL.len() as u64) as usize]).collect()
}

pub fn sentence(rng: &mut Xoshiro256StarStar, len: usize) -> String {
    (0..len).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

/// `n` examples with script, a crude IPA-like variant and a romanization.
pub fn synthetic_pool(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = 6 + rng.below(20) as usize;
            let script = sentence(&mut rng, len);
            Example {
                id: format!("syn-{i:05}"),
                lang: "syn".into(),
                task: Task::Flores,
                ipa_text: script.replace("sh", "ʃ").replace("ch", "tʃ"),
                roman_text: Some(script.clone()),
                target_text: format!("target {i}"),
                script_text: script,
            }
        })
        .collect()
}
