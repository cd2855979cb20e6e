//! HTTP endpoint contracts, served by a small randomly initialised model.

use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use bisync_core::corpus::LanguagePair;
use bisync_core::decode::{BeamConfig, InferenceModel};
use bisync_core::experiment::{learn_toy_bpe, toy_pairs};
use bisync_core::model::{ModelConfig, TransformerParams};
use bisync_core::protocol::TaskKind;
use bisync_core::subword::BpeModel;
use bisync_service::engine::{snap_to_word, ParaphraseResponse, PrefixResponse, SyncRequest, SyncResponse};
use bisync_service::{router, AppState, ConfigResponse, Engine, ErrorBody};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const SRC: &str = "srcish";
const TGT: &str = "tgtish";

fn bpe() -> &'static BpeModel {
    static BPE: OnceLock<BpeModel> = OnceLock::new();
    BPE.get_or_init(|| learn_toy_bpe(&toy_pairs(2_000, 6, 1).unwrap(), 150).unwrap())
}

fn app() -> Router {
    let cfg = ModelConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, ..ModelConfig::desk(bpe().vocab_size()) };
    let params = TransformerParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let model = InferenceModel::from_params(&params).unwrap();
    let beam = BeamConfig { beam_size: 3, max_len: 12, length_norm_alpha: 0.6 };
    router(AppState::with_engine(Engine::new(model, bpe().clone(), None, beam).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header(header::ORIGIN, "http://localhost:4200");
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn sync_body(changed: &str, other: Option<&str>, prev: Option<&str>) -> Value {
    json!({
        "changed_text": changed,
        "other_text": other,
        "changed_lang": SRC,
        "other_lang": TGT,
        "previous_changed_text": prev,
    })
}

#[tokio::test]
async fn sync_translates_when_the_other_box_is_empty() {
    let app = app();
    let (status, body) = call(&app, Method::POST, "/api/sync", Some(sync_body("The red cat sleeps.", None, None))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: SyncResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.task_used, Some(TaskKind::Trn));
    assert!(!resp.synced_text.is_empty());
    assert_eq!(resp.alternatives.len(), 5, "default n_alternatives");
    assert_eq!(resp.alternatives[0], resp.synced_text);

    // Reverse direction works the same way.
    let body = json!({ "changed_text": "Da kato dormu.", "changed_lang": TGT, "other_lang": SRC, "n_alternatives": 1 });
    let (status, body) = call(&app, Method::POST, "/api/sync", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["alternatives"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sync_classifies_the_edit() {
    let app = app();
    let cases = [
        ("The cat sleeps.", "The white cat sleeps.", TaskKind::Ins),
        ("The white cat sleeps.", "The cat sleeps.", TaskKind::Del),
        ("The white cat sleeps.", "The red cat sleeps.", TaskKind::Sub),
        ("The cat sleeps.", "A dog runs quickly home.", TaskKind::Sub),
    ];
    for (prev, changed, want) in cases {
        let body = sync_body(changed, Some("Da kato dormu."), Some(prev));
        let (status, body) = call(&app, Method::POST, "/api/sync", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["task_used"], json!(want), "{prev} -> {changed}");
    }
    // No change: the other box is returned untouched without decoding.
    let body = sync_body("The cat.", Some("Da kato."), Some("The cat."));
    let (_, body) = call(&app, Method::POST, "/api/sync", Some(body)).await;
    assert_eq!(body["synced_text"], "Da kato.");
    assert_eq!(body["task_used"], Value::Null);
}

#[tokio::test]
async fn frozen_other_box_is_refused() {
    let app = app();
    let mut body = sync_body("The white cat.", Some("Da kato."), Some("The cat."));
    body["frozen_other"] = json!(true);
    let (status, body) = call(&app, Method::POST, "/api/sync", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.status, "frozen");
}

#[tokio::test]
async fn invalid_requests_are_400() {
    let app = app();
    let bad = [
        json!({ "changed_text": "x", "changed_lang": "en", "other_lang": TGT }),
        json!({ "changed_text": "x", "changed_lang": SRC, "other_lang": SRC }),
        json!({ "changed_text": "x", "changed_lang": SRC, "other_lang": TGT, "n_alternatives": 0 }),
        json!({ "changed_text": "  ", "changed_lang": SRC, "other_lang": TGT }),
        json!({ "changed_lang": SRC }),
    ];
    for b in bad {
        let (status, body) = call(&app, Method::POST, "/api/sync", Some(b.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{b} -> {body}");
        assert!(body["error"].is_string());
    }
}

#[tokio::test]
async fn no_model_is_503_but_config_still_answers() {
    let app = router(AppState::without_model(LanguagePair::new(SRC, TGT).unwrap()));
    let (status, body) = call(&app, Method::POST, "/api/sync", Some(sync_body("The cat.", None, None))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_eq!(body["status"], "model_not_loaded");
    let (status, body) = call(&app, Method::GET, "/api/config", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model_info"], Value::Null);
}

#[tokio::test]
async fn prefix_alternatives_keep_the_prefix() {
    let app = app();
    let target = "Da ruga kato dormu.";
    for (index, k) in [(0usize, 3usize), (1, 1), (2, 4), (4, 2)] {
        let req = json!({
            "source_text": "The red cat sleeps.", "target_text": target,
            "source_lang": SRC, "target_lang": TGT, "cursor_word_index": index, "k": k,
        });
        let (status, body) = call(&app, Method::POST, "/api/prefix_alternatives", Some(req)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let resp: PrefixResponse = serde_json::from_value(body).unwrap();
        let prefix: Vec<&str> = target.split_whitespace().take(index).collect();
        assert_eq!(resp.prefix, prefix.join(" "));
        assert!(!resp.alternatives.is_empty() && resp.alternatives.len() <= k);
        for alt in &resp.alternatives {
            let words: Vec<&str> = alt.text.split_whitespace().collect();
            assert!(words.starts_with(&prefix), "{} lacks {:?}", alt.text, prefix);
        }
    }
    let req = json!({
        "source_text": "The cat.", "target_text": "Da kato.", "source_lang": SRC, "target_lang": TGT,
        "cursor_word_index": 3,
    });
    let (status, _) = call(&app, Method::POST, "/api/prefix_alternatives", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn clicks_snap_back_to_word_starts() {
    let text = "Je rentre chez moi";
    assert_eq!(snap_to_word(text, 0), 0);
    assert_eq!(snap_to_word(text, 1), 0);
    assert_eq!(snap_to_word(text, 2), 1);
    assert_eq!(snap_to_word(text, 3), 1);
    assert_eq!(snap_to_word(text, 5), 1);
    assert_eq!(snap_to_word(text, 9), 2);
    assert_eq!(snap_to_word(text, 10), 2);
    assert_eq!(snap_to_word(text, 100), 4);
    let app = app();
    let req = json!({
        "source_text": "The red cat sleeps.", "target_text": "Da ruga kato dormu.",
        "source_lang": SRC, "target_lang": TGT, "cursor_char_offset": 10, "k": 2,
    });
    let (status, body) = call(&app, Method::POST, "/api/prefix_alternatives", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["prefix"], "Da ruga");
}

#[tokio::test]
async fn paraphrases_exclude_the_original_span() {
    let app = app();
    let target = "Da ruga kato dormu.";
    for (s, e) in [(1usize, 2usize), (0, 3), (3, 3)] {
        let req = json!({
            "source_text": "The red cat sleeps.", "target_text": target, "source_lang": SRC, "target_lang": TGT,
            "span_start_word": s, "span_end_word": e, "k": 4,
        });
        let (status, body) = call(&app, Method::POST, "/api/paraphrase", Some(req)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let resp: ParaphraseResponse = serde_json::from_value(body).unwrap();
        let words: Vec<&str> = target.split_whitespace().collect();
        assert_eq!(resp.original, words[s..=e].join(" "));
        assert!(resp.alternatives.len() <= 4);
        for p in &resp.alternatives {
            assert_ne!(p.filler, resp.original);
            let sentence: Vec<&str> = p.sentence.split_whitespace().collect();
            assert!(sentence.starts_with(&words[..s]) && sentence.ends_with(&words[e + 1..]));
        }
    }
    for (s, e) in [(2usize, 1usize), (0, 4)] {
        let req = json!({
            "source_text": "The cat.", "target_text": target, "source_lang": SRC, "target_lang": TGT,
            "span_start_word": s, "span_end_word": e,
        });
        let (status, _) = call(&app, Method::POST, "/api/paraphrase", Some(req)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
}

#[tokio::test]
async fn config_reports_defaults_and_cors() {
    let app = app();
    let req = Request::builder().uri("/api/config").header(header::ORIGIN, "http://localhost:4200").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
    let (status, body) = call(&app, Method::GET, "/api/config", None).await;
    assert_eq!(status, StatusCode::OK);
    let cfg: ConfigResponse = serde_json::from_value(body).unwrap();
    assert_eq!(cfg.languages, [SRC.to_string(), TGT.to_string()]);
    assert_eq!(cfg.n_alternatives_default, 5);
    assert_eq!(cfg.version, env!("CARGO_PKG_VERSION"));
    assert!(!cfg.model_info.unwrap().quantized);
}

#[tokio::test]
async fn responses_are_stateless_and_deterministic() {
    let app = app();
    let reqs = [
        sync_body("The red cat sleeps.", None, None),
        sync_body("The white cat sleeps.", Some("Da kato dormu."), Some("The cat sleeps.")),
        sync_body("A dog runs.", Some("Da hundo kuras."), Some("A dog runs quickly.")),
    ];
    let mut first = Vec::new();
    for r in &reqs {
        first.push(call(&app, Method::POST, "/api/sync", Some(r.clone())).await.1["synced_text"].clone());
    }
    // Reversed order and concurrent duplicates give the same answers.
    for (i, r) in reqs.iter().enumerate().rev() {
        let (a, b) = tokio::join!(
            call(&app, Method::POST, "/api/sync", Some(r.clone())),
            call(&app, Method::POST, "/api/sync", Some(r.clone()))
        );
        assert_eq!(a.1["synced_text"], first[i]);
        assert_eq!(b.1["synced_text"], first[i]);
    }
}

#[test]
fn request_schema_round_trips() {
    let req: SyncRequest = serde_json::from_value(sync_body("a", Some("b"), Some("c"))).unwrap();
    assert_eq!(req.n_alternatives, 5);
    assert!(!req.frozen_other);
    let back: SyncRequest = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
    assert_eq!(back, req);
}
