//! Helpers shared by the integration test targets. Each target includes
//! this module and uses a different subset of it.
#![allow(dead_code)]

use bisync_core::corpus::ParallelPair;
use bisync_core::decode::{greedy_decode, prefix_constrained_decode, BeamConfig, InferenceModel, OutputFilter};
use bisync_core::experiment::toy_pairs;
use bisync_core::model::{ModelConfig, TransformerParams};
use bisync_core::protocol::{validate_example, Triplet};
use bisync_core::subword::BpeModel;
use bisync_core::synthgen::{check_span_property, generate_dataset, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const METRIC_TOL: f64 = 0.01;

/// Values computed by hand-executing the BLEU (13a tokens, exp smoothing)
/// and TER (greedy block shifts) formulas.
pub const BLEU_FIXTURES: &[(&[&str], &[&str], f64)] = &[
    // Clipping: "the" counts once in a single-"the" reference; 2..4-grams
    // are smoothed (1/2·1/3, 1/4·1/2, 1/8·1/1); no brevity penalty.
    (&["the the the the"], &["the cat"], 15.9736),
    (&["the cat sat on the mat"], &["the cat sat on the mat"], 100.0),
    // Perfect precisions, brevity penalty exp(1 - 6/4).
    (&["the cat sat on"], &["the cat sat on the mat"], 60.6531),
    (&["the the the cat sat"], &["the cat sat on the mat"], 34.9833),
    // 13a tokenization splits the comma and final period.
    (&["Hello, world."], &["Hello world ."], 35.3553),
    (&["Le chat, le chien."], &["Le chat et le chien."], 37.9918),
    // Corpus level: statistics are pooled before the geometric mean.
    (&["a b c d e f", "the cat is here"], &["a b c d x f", "the cat was here"], 42.7287),
    // No 3-gram fits in a 2-word hypothesis.
    (&["the cat"], &["the cat sat on the mat"], 0.0),
    (&["x y z w"], &["a b c d"], 0.0),
];

pub const TER_FIXTURES: &[(&str, &str, f64)] = &[
    ("a b x d", "a b c d", 25.0),
    // One block shift of "c d".
    ("c d a b", "a b c d", 25.0),
    ("a b c", "a b c d", 25.0),
    ("a b c d e", "a b c d", 25.0),
    // Shift "a" to the front, then substitute x -> e.
    ("b c d a x", "a b c d e", 40.0),
    ("e a b c d", "a b c d e", 20.0),
    ("a c b d", "a b c d", 25.0),
    ("The Cat sat", "the cat sat", 0.0),
];

const FILLER_WORDS: &[&str] = &["ve", "ka", "lumo", "sira", "do", "pelu", "nu"];

/// Deterministic stand-in for a trained gap filler: a pseudo-random n-best
/// derived from the input, sometimes containing empty and duplicate
/// entries so that the skip paths get exercised.
pub fn mock_oracle(x: &str, y_gapped: &str, _lang: &str, n: usize) -> Vec<String> {
    let seed = x.bytes().chain(y_gapped.bytes()).fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0 => String::new(),
            _ => {
                let len = rng.gen_range(1..=3);
                (0..len).map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]).collect::<Vec<_>>().join(" ")
            }
        })
        .collect()
}

/// Synthesizes `n` triplets from the variation toy pair with the uniform
/// task mix and the mock oracle.
pub fn synth_sample(n: usize, seed: u64) -> (Vec<Triplet>, SynthConfig) {
    let pairs: Vec<ParallelPair> = toy_pairs(n * 3 / 5 + 64, 6, seed).unwrap();
    let cfg = SynthConfig { rng_seed: seed, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut triplets, _) = generate_dataset(&pairs, Some(&mock_oracle), &cfg, &mut rng).unwrap();
    triplets.truncate(n);
    assert_eq!(triplets.len(), n, "not enough pairs to synthesize {n} triplets");
    (triplets, cfg)
}

/// Triplets whose update spans break the task contract.
pub fn span_violations(triplets: &[Triplet], cfg: &SynthConfig) -> Vec<String> {
    triplets
        .iter()
        .filter_map(|t| check_span_property(t, cfg).err().map(|e| format!("{e}: {t:?}")))
        .collect()
}

/// Triplets whose encoding fails the structural validator.
pub fn protocol_violations(bpe: &BpeModel, triplets: &[Triplet]) -> Vec<String> {
    triplets
        .iter()
        .filter_map(|t| {
            let res = t.encode(bpe).and_then(|ex| validate_example(bpe, &ex));
            res.err().map(|e| format!("{e}: {t:?}"))
        })
        .collect()
}

/// A randomly initialised model small enough for thousands of decodes.
pub fn random_model(vocab_size: usize, seed: u64) -> InferenceModel {
    let cfg = ModelConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, ..ModelConfig::desk(vocab_size) };
    let params = TransformerParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    InferenceModel::from_params(&params).unwrap()
}

#[derive(Debug, Default)]
pub struct DecodeCaseReport {
    pub cases: usize,
    pub prefix_failures: Vec<String>,
    pub greedy_mismatches: Vec<String>,
}

/// `n` randomized cases: a random source from `sources`, a random forced
/// prefix of ordinary tokens and a random `k`. Checks that every returned
/// alternative starts with the prefix and that beam size 1 reproduces
/// greedy decoding.
pub fn decode_cases(model: &InferenceModel, bpe: &BpeModel, sources: &[Vec<u32>], n: usize, max_len: usize, seed: u64) -> DecodeCaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DecodeCaseReport { cases: n, ..Default::default() };
    let text_ids: Vec<u32> = (bpe.num_reserved()..bpe.vocab_size() as u32).collect();
    let filter = OutputFilter::text(bpe);
    for case in 0..n {
        let src = &sources[rng.gen_range(0..sources.len())];
        let prefix: Vec<u32> = (0..rng.gen_range(0..=6)).map(|_| text_ids[rng.gen_range(0..text_ids.len())]).collect();
        let k = rng.gen_range(1..=5);
        let cfg = BeamConfig { beam_size: rng.gen_range(1..=4), max_len, length_norm_alpha: 0.6 };
        let alts = prefix_constrained_decode(model, bpe, src, &prefix, k, &cfg).unwrap();
        if alts.is_empty() || alts.len() > k {
            report.prefix_failures.push(format!("case {case}: {} alternatives for k={k}", alts.len()));
        }
        for a in &alts {
            if !a.token_ids.starts_with(&prefix) {
                report.prefix_failures.push(format!("case {case}: {:?} lacks prefix {prefix:?}", a.token_ids));
            }
        }
        let one = BeamConfig { beam_size: 1, ..cfg };
        let beam = bisync_core::decode::beam_search(model, src, &one, &filter).unwrap();
        let greedy = greedy_decode(model, src, max_len, &filter).unwrap();
        if beam[0].token_ids != greedy.token_ids {
            report.greedy_mismatches.push(format!("case {case}: beam {:?} vs greedy {:?}", beam[0].token_ids, greedy.token_ids));
        }
    }
    report
}
