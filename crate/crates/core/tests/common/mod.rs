#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use autfew::lm::{ToyLm, ToyLmConfig, Vocabulary};
use autfew::synth::{self, WorldConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "red", "green", "blue", "river", "stone", "cloud",
];

/// Small randomly initialized model over [`WORDS`]; a large init spread
/// keeps its distributions far from uniform.
pub fn tiny_model<F: autfew::lm::Scalar>(seed: u64) -> ToyLm<F> {
    let cfg = ToyLmConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_prompt_len: 48,
        max_cont_len: 8,
        init_std: 0.3,
    };
    ToyLm::new(cfg, Vocabulary::build([WORDS.join(" ").as_str()]), seed).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// The synthetic upstream model, pretrained once per target directory.
pub fn pretrained() -> &'static ToyLm<f32> {
    static MODEL: OnceLock<ToyLm<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("autfew-models");
        synth::pretrained_model(&WorldConfig::default(), Some(&dir)).expect("pretraining succeeds")
    })
}
