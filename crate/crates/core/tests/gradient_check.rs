use bisync_core::model::gradcheck::{gradient_check, micro_config};

#[test]
fn analytic_gradients_match_central_differences() {
    let report = gradient_check(&micro_config(), 0.1, 3).unwrap();
    for t in &report.tensors {
        assert!(t.rel_error < 1e-4, "{}: {:e}", t.name, t.rel_error);
    }
    assert!(report.tensors.iter().any(|t| t.name == "enc.1.ffn.out.weight"));
}

#[test]
fn untied_output_projection_gradients() {
    let cfg = bisync_core::model::ModelConfig { tied_embeddings: false, dropout: 0.0, ..micro_config() };
    let report = gradient_check(&cfg, 0.0, 5).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.tensors);
}
