//! Frozen BLEU/TER values checked to 0.01.

mod common;

use common::{BLEU_FIXTURES, METRIC_TOL as TOL, TER_FIXTURES};
use bisync_core::eval::bleu::bleu;
use bisync_core::eval::ter::{corpus_ter, ter, TerConfig};

#[test]
fn bleu_matches_frozen_values() {
    for (h, r, want) in BLEU_FIXTURES {
        let got = bleu(h, r).unwrap();
        assert!((got - want).abs() < TOL, "{h:?} vs {r:?}: {got} != {want}");
    }
}

#[test]
fn ter_matches_frozen_values() {
    for (h, r, want) in TER_FIXTURES {
        let got = ter(h, r).unwrap();
        assert!((got - want).abs() < TOL, "{h:?} vs {r:?}: {got} != {want}");
    }
}

#[test]
fn ter_direction_normalizes_by_reference() {
    // Same edit count (1), different reference lengths.
    assert_eq!(ter("a b c", "a b c d").unwrap(), 25.0);
    assert!((ter("a b c d", "a b c").unwrap() - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn corpus_ter_pools_edits() {
    let got = corpus_ter(&["a b x d", "c d a b"], &["a b c d", "a b c d"], &TerConfig::default()).unwrap();
    assert_eq!(got, 25.0);
    let got = corpus_ter(&["a b x d", "a b"], &["a b c d", "a b"], &TerConfig::default()).unwrap();
    assert!((got - 100.0 / 6.0).abs() < 1e-9);
}
