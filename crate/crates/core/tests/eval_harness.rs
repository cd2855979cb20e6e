//! Evaluation harness plumbing, exercised with a random model so that the
//! contracts (coverage, determinism, error paths) are checked quickly.

mod common;

use bisync_core::decode::{quantize_int8, BeamConfig, InferenceModel, OutputFilter};
use bisync_core::eval::{benchmark, evaluate, evaluate_closeness, evaluate_tasks, format_tables, SystemKind, TestSets, IDENTITY_ROW};
use bisync_core::experiment::{learn_toy_bpe, toy_pairs};
use bisync_core::protocol::TaskKind;
use common::synth_sample;

fn setup() -> (bisync_core::subword::BpeModel, TestSets) {
    let bpe = learn_toy_bpe(&toy_pairs(1_000, 6, 1).unwrap(), 150).unwrap();
    let (triplets, _) = synth_sample(200, 2);
    let mut tests = TestSets::default();
    for t in triplets {
        tests.sets.entry(t.task).or_default().push(t);
    }
    (bpe, tests)
}

const BEAM: BeamConfig = BeamConfig { beam_size: 2, max_len: 12, length_norm_alpha: 0.6 };

#[test]
fn reports_cover_every_task_and_are_deterministic() {
    let (bpe, tests) = setup();
    let model = common::random_model(bpe.vocab_size(), 1);
    let a = evaluate(&model, &bpe, &tests, SystemKind::BiSync, &BEAM).unwrap();
    let b = evaluate(&model, &bpe, &tests, SystemKind::BiSync, &BEAM).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.bleu.len(), 5);
    for k in ["INS", "DEL", "SUB"] {
        assert!(a.ter.contains_key(k));
    }
    assert_eq!(a.ter[IDENTITY_ROW], 0.0);
    let json = serde_json::to_string(&a).unwrap();
    let back: bisync_core::eval::EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}

#[test]
fn baseline_retranslates_and_skips_infilling() {
    let (bpe, tests) = setup();
    let model = common::random_model(bpe.vocab_size(), 2);
    let base = evaluate(&model, &bpe, &tests, SystemKind::Baseline, &BEAM).unwrap();
    assert!(!base.bleu.contains_key(&TaskKind::Bti));
    assert_eq!(base.bleu.len(), 4);
    let table = format_tables(&[&base]);
    assert!(table.lines().nth(1).unwrap().trim_end().ends_with('-'), "{table}");
    // Retranslation ignores y, so the per-task split of one closeness run
    // equals the standalone call.
    let ter = evaluate_closeness(&model, &bpe, &tests, SystemKind::Baseline, &BEAM).unwrap();
    assert_eq!(ter, base.ter);
}

#[test]
fn missing_task_data_names_the_task() {
    let (bpe, mut tests) = setup();
    tests.sets.remove(&TaskKind::Sub);
    let model = common::random_model(bpe.vocab_size(), 3);
    let err = evaluate_tasks(&model, &bpe, &tests, &TaskKind::ALL, SystemKind::BiSync, &BEAM).unwrap_err();
    assert!(err.to_string().contains("SUB"), "{err}");
}

#[test]
fn benchmark_reports_median_of_runs() {
    let (bpe, tests) = setup();
    let p = {
        let cfg = bisync_core::model::ModelConfig { d_model: 32, d_ff: 64, max_positions: 64, ..bisync_core::model::ModelConfig::desk(bpe.vocab_size()) };
        use rand::SeedableRng;
        bisync_core::model::TransformerParams::<f32>::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap()
    };
    let sources: Vec<Vec<u32>> = tests.sets[&TaskKind::Trn]
        .iter()
        .take(10)
        .map(|t| t.encode(&bpe).unwrap().source_ids)
        .collect();
    let filter = OutputFilter::text(&bpe);
    let float = benchmark(&InferenceModel::from_params(&p).unwrap(), 1234, &sources, &BEAM, &filter, 3).unwrap();
    assert_eq!(float.runs.len(), 3);
    assert_eq!(float.size_bytes, 1234);
    let mut sorted = float.runs.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(float.tokens_per_sec, sorted[1]);
    let q = quantize_int8(&p).unwrap();
    let int8 = benchmark(&InferenceModel::from_quantized(&q).unwrap(), 1, &sources, &BEAM, &filter, 1).unwrap();
    assert_eq!(int8.runs.len(), 3, "at least three runs");
    assert!(benchmark(&InferenceModel::from_params(&p).unwrap(), 0, &[], &BEAM, &filter, 3).is_err());
}
