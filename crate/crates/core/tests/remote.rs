use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use r3_core::query_type::{ExternalClassifier, Fallback};
use r3_core::{Embedder, HashedEmbedder, QueryType, RemoteEmbedder};

/// Serves `router` on an ephemeral port from a dedicated runtime thread.
fn serve(router: Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

type Log = Arc<Mutex<Vec<Value>>>;

/// Mock bridge that embeds with the built-in hashed embedder, unnormalized.
fn mock_bridge(dim: usize, log: Log) -> Router {
    Router::new().route(
        "/v1/embed",
        post(move |Json(body): Json<Value>| {
            let log = Arc::clone(&log);
            async move {
                log.lock().unwrap().push(body.clone());
                let e = HashedEmbedder::with_normalize(dim, false);
                let vectors: Vec<Vec<f32>> = body["texts"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|t| e.embed_text(t.as_str().unwrap()).values().to_vec())
                    .collect();
                Json(json!({ "dim": dim, "vectors": vectors }))
            }
        }),
    )
}

#[test]
fn remote_embedder_follows_wire_contract() {
    let log: Log = Arc::default();
    let addr = serve(mock_bridge(64, Arc::clone(&log)));
    let remote = RemoteEmbedder::new(format!("http://{addr}/"), 64, true)
        .unwrap()
        .with_batch_size(2);
    let texts = ["alpha beta", "gamma", "", "alpha beta gamma", "delta"];
    let got = remote.embed(&texts).unwrap();

    let local = HashedEmbedder::new(64);
    assert_eq!(got.len(), texts.len());
    for (g, t) in got.iter().zip(texts) {
        let want = local.embed_text(t);
        for (a, b) in g.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let requests = log.lock().unwrap();
    assert_eq!(requests.len(), 3);
    assert_eq!(requests[0], json!({ "texts": ["alpha beta", "gamma"] }));
    assert_eq!(requests[2], json!({ "texts": ["delta"] }));
}

#[test]
fn remote_dimension_mismatch_is_reported() {
    let addr = serve(mock_bridge(32, Arc::default()));
    let remote = RemoteEmbedder::new(format!("http://{addr}"), 64, false).unwrap();
    let err = remote.embed(&["x"]).unwrap_err();
    assert_eq!(err.code(), "DIMENSION_MISMATCH");
}

#[test]
fn remote_http_errors_are_transport_errors() {
    let router = Router::new().route(
        "/v1/embed",
        post(|| async { (StatusCode::SERVICE_UNAVAILABLE, "loading") }),
    );
    let addr = serve(router);
    let remote = RemoteEmbedder::new(format!("http://{addr}"), 8, false).unwrap();
    let err = remote.embed(&["x"]).unwrap_err();
    assert_eq!(err.code(), "EMBED_TRANSPORT");
    assert!(err.to_string().contains("503"));

    let unreachable = RemoteEmbedder::new("http://127.0.0.1:9", 8, false).unwrap();
    assert_eq!(
        unreachable.embed(&["x"]).unwrap_err().code(),
        "EMBED_TRANSPORT"
    );
}

fn mock_classifier(label: &'static str, log: Log) -> Router {
    Router::new().route(
        "/v1/classify",
        post(move |Json(body): Json<Value>| {
            let log = Arc::clone(&log);
            async move {
                log.lock().unwrap().push(body);
                Json(json!({ "label": label }))
            }
        }),
    )
}

#[test]
fn external_classifier_parses_labels() {
    let log: Log = Arc::default();
    let addr = serve(mock_classifier("CLOSED-ENDED", Arc::clone(&log)));
    let c = ExternalClassifier::new(&format!("http://{addr}"), Fallback::None).unwrap();
    assert_eq!(c.classify("Write a poem.").unwrap(), QueryType::ClosedEnded);
    assert_eq!(
        log.lock().unwrap()[0],
        json!({ "conversation": "Write a poem." })
    );

    let addr = serve(mock_classifier("maybe", Arc::default()));
    let c = ExternalClassifier::new(&format!("http://{addr}"), Fallback::None).unwrap();
    assert_eq!(
        c.classify("Who wrote Dune?").unwrap_err().code(),
        "UNKNOWN_LABEL"
    );
}

#[test]
fn external_classifier_fallbacks() {
    let dead = "http://127.0.0.1:9";
    let strict = ExternalClassifier::new(dead, Fallback::None).unwrap();
    assert_eq!(
        strict.classify("Who wrote Dune?").unwrap_err().code(),
        "CLASSIFIER_TRANSPORT"
    );
    let heuristic = ExternalClassifier::new(dead, Fallback::Heuristic).unwrap();
    assert_eq!(
        heuristic.classify("Who wrote Dune?").unwrap(),
        QueryType::ClosedEnded
    );
    let open = ExternalClassifier::new(dead, Fallback::OpenEnded).unwrap();
    assert_eq!(
        open.classify("Who wrote Dune?").unwrap(),
        QueryType::OpenEnded
    );
}
