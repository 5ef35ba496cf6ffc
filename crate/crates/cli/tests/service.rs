mod common;

use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};

use common::{check_equivalence, client, engine_config, start_service, write_calibration};
use r3_cli::{Engine, EngineConfig, KeyValues};

fn post(addr: &std::net::SocketAddr, path: &str, body: &Value) -> (StatusCode, Value) {
    let resp = client()
        .post(format!("http://{addr}{path}"))
        .json(body)
        .send()
        .unwrap();
    (resp.status(), resp.json().unwrap())
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or_default()
}

#[test]
fn service_matches_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = engine_config(&write_calibration(dir.path()));
    let (addr, _) = start_service(&cfg);
    let report = check_equivalence(addr, &cfg, 300, 99);
    assert!(
        report.mismatches.is_empty(),
        "{:#?}",
        &report.mismatches[..report.mismatches.len().min(5)]
    );
    assert!(report.errors_compared > 0);
    assert!(report.p50 < Duration::from_millis(5), "{:?}", report.p50);
}

#[test]
fn contract_examples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = engine_config(&write_calibration(dir.path()));
    let (addr, _) = start_service(&cfg);

    let health: Value = client()
        .get(format!("http://{addr}/healthz"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(health, json!({ "status": "ok", "embedder_dim": 1024 }));

    let (status, body) = post(
        &addr,
        "/v1/score",
        &json!({
            "query": "Who wrote Dune?",
            "response": "Frank Herbert wrote Dune in 1965.",
            "reference": "Dune was written by Frank Herbert.",
            "query_type": "CLOSED-ENDED"
        }),
    );
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["branch"], "CE");
    assert_eq!(body["query_type_source"], "request");
    assert!(body["r_y"].is_number());

    let (status, body) = post(
        &addr,
        "/v1/score",
        &json!({ "query": "Write a haiku about rain.", "response": "Rain taps on the roof." }),
    );
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["query_type"], "OPEN-ENDED");
    assert_eq!(body["query_type_source"], "classifier");
    assert_eq!(body["branch"], "OE");

    let (status, body) = post(
        &addr,
        "/v1/classify",
        &json!({ "conversation": "How many moons does Mars have?" }),
    );
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "label": "CLOSED-ENDED" }));
}

#[test]
fn batch_preserves_order_and_matches_single_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = engine_config(&write_calibration(dir.path()));
    let (addr, _) = start_service(&cfg);
    let reqs: Vec<Value> = (0..20)
        .map(|i| {
            json!({
                "query": format!("Describe item {i}."),
                "response": "word ".repeat(i + 1),
                "query_type": "OPEN-ENDED"
            })
        })
        .collect();
    let (status, body) = post(&addr, "/v1/score_batch", &Value::Array(reqs.clone()));
    assert_eq!(status, StatusCode::OK);
    let items = body.as_array().unwrap();
    assert_eq!(items.len(), 20);
    for (req, got) in reqs.iter().zip(items) {
        let (_, single) = post(&addr, "/v1/score", req);
        assert_eq!(&single, got);
    }
    let (status, body) = post(&addr, "/v1/score_batch", &json!([]));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
}

#[test]
fn request_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = engine_config(&write_calibration(dir.path()));
    let (addr, _) = start_service(&cfg);

    let (status, body) = post(
        &addr,
        "/v1/score",
        &json!({ "query": "q", "response": "r", "temperature": 1 }),
    );
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "UNKNOWN_FIELD");

    let (status, body) = post(
        &addr,
        "/v1/score",
        &json!({ "query": "Who wrote Dune?", "response": "Herbert", "query_type": "CLOSED-ENDED" }),
    );
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "REFERENCE_REQUIRED");

    let big = "a ".repeat(20 * 1024);
    let (status, body) = post(
        &addr,
        "/v1/score",
        &json!({ "query": "q", "response": big }),
    );
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "TEXT_TOO_LARGE");

    let batch: Vec<Value> = (0..257)
        .map(|_| json!({ "query": "q", "response": "r" }))
        .collect();
    let (status, body) = post(&addr, "/v1/score_batch", &Value::Array(batch));
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "BATCH_TOO_LARGE");

    let (status, body) = post(
        &addr,
        "/v1/score_batch",
        &json!([{ "query": "q", "response": "r" }, { "query": "q" }]),
    );
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"]["message"]
        .as_str()
        .unwrap()
        .contains("request 1"));

    let resp = client()
        .post(format!("http://{addr}/v1/score"))
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&resp.json().unwrap()), "BAD_JSON");

    let (status, body) = post(&addr, "/v1/nope", &json!({}));
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "NOT_FOUND");
}

#[test]
fn lenient_mode_ignores_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut kv = KeyValues::default();
    kv.set(
        "calibration",
        write_calibration(dir.path()).display().to_string(),
    );
    kv.set("strict", "false");
    let (addr, _) = start_service(&EngineConfig::from_key_values(kv).unwrap());
    let (status, _) = post(
        &addr,
        "/v1/score",
        &json!({ "query": "q", "response": "r", "temperature": 1 }),
    );
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn serving_r3_requires_calibration() {
    let engine = Engine::from_config(&EngineConfig::default()).unwrap();
    let err = engine.check_serving_preconditions().unwrap_err();
    assert_eq!(err.code(), "CONFIG");
    assert!(err.to_string().starts_with("calibration"));

    let mut kv = KeyValues::default();
    kv.set("variant", "r3_oe");
    let engine = Engine::from_config(&EngineConfig::from_key_values(kv).unwrap()).unwrap();
    engine.check_serving_preconditions().unwrap();
}
