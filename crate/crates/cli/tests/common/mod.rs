#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use r3_cli::{Engine, EngineConfig, ErrorBody, KeyValues, ScoreRequest, ScoreResponse};
use r3_core::jsonl::read_jsonl_file;
use r3_core::ppo::SandboxTask;
use r3_core::query_type::classify_heuristic;
use r3_core::reward::fit_calibration_from_corpus;
use r3_core::{
    HashedEmbedder, QueryType, RewardBreakdown, RewardModel, RewardOptions, RewardVariant,
    ScoreInput, Similarity,
};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn fixture_tasks() -> Vec<SandboxTask> {
    read_jsonl_file(&fixture("ppo_tasks.jsonl"), true)
        .unwrap()
        .records
}

/// Writes a calibration map fitted on fixture references vs bank sentences.
pub fn write_calibration(dir: &Path) -> PathBuf {
    let mut pairs = Vec::new();
    for t in fixture_tasks() {
        for s in t.relevant_bank.iter().chain(&t.irrelevant_bank) {
            pairs.push((t.reference.clone(), s.clone()));
        }
    }
    let map = fit_calibration_from_corpus(
        &HashedEmbedder::default(),
        &pairs,
        5.0,
        95.0,
        Similarity::InnerProduct,
    )
    .unwrap();
    let path = dir.join("calibration.json");
    std::fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
    path
}

pub fn engine_config(calibration: &Path) -> EngineConfig {
    let mut kv = KeyValues::default();
    kv.set("calibration", calibration.display().to_string());
    EngineConfig::from_key_values(kv).unwrap()
}

/// Starts the service on an ephemeral port in a background runtime.
pub fn start_service(cfg: &EngineConfig) -> (SocketAddr, Arc<Engine>) {
    let engine = Arc::new(Engine::from_config(cfg).unwrap());
    engine.check_serving_preconditions().unwrap();
    let served = Arc::clone(&engine);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            r3_cli::service::serve(served, listener).await.unwrap();
        });
    });
    (rx.recv().unwrap(), engine)
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .unwrap()
}

const VOCAB: &[&str] = &[
    "the",
    "river",
    "harbor",
    "bridge",
    "old",
    "town",
    "boats",
    "dawn",
    "market",
    "stone",
    "what",
    "is",
    "how",
    "who",
    "describe",
    "tell",
    "me",
    "about",
    "history",
    "famous",
    "people",
    "visit",
    "often",
    "quiet",
    "village",
    "north",
    "south",
    "festival",
    "music",
    "food",
    "why",
    "does",
    "write",
    "a",
    "poem",
    "list",
    "ideas",
    "for",
    "weekend",
    "trip",
    "café",
    "naïve",
    "Ünïcode",
    "42",
    "2024",
    "e.g.",
    "well-known",
    "mid-century",
    "it's",
    "über",
];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    let mut out: Vec<&str> = Vec::with_capacity(n);
    for _ in 0..n {
        // Repeat recent words now and then so RP varies.
        if out.len() > 3 && rng.gen_bool(0.2) {
            let back = rng.gen_range(1..=3);
            out.push(out[out.len() - back]);
        } else {
            out.push(VOCAB.choose(rng).unwrap());
        }
    }
    let mut s = out.join(" ");
    if n > 0 && rng.gen_bool(0.5) {
        s.push('.');
    }
    s
}

/// Randomized score requests covering every variant, both query types,
/// classifier-resolved types and missing references.
pub fn random_requests(n: usize, seed: u64) -> Vec<ScoreRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let query = match rng.gen_range(0..4) {
                0 => format!(
                    "User: {}\nAssistant: {}\nUser: {}?",
                    words(&mut rng, 2, 8),
                    words(&mut rng, 2, 8),
                    words(&mut rng, 2, 10)
                ),
                1 => format!("What is {}?", words(&mut rng, 1, 8)),
                _ => words(&mut rng, 1, 14),
            };
            ScoreRequest {
                query,
                response: words(&mut rng, 0, 120),
                reference: rng.gen_bool(0.85).then(|| words(&mut rng, 3, 40)),
                query_type: match rng.gen_range(0..3) {
                    0 => None,
                    1 => Some(QueryType::OpenEnded),
                    _ => Some(QueryType::ClosedEnded),
                },
                variant: rng
                    .gen_bool(0.6)
                    .then(|| *RewardVariant::ALL.choose(&mut rng).unwrap()),
            }
        })
        .collect()
}

/// Scores `req` directly through the core library, independent of the engine.
pub fn library_score(
    model: &RewardModel,
    default_variant: RewardVariant,
    req: &ScoreRequest,
) -> Result<(RewardBreakdown, QueryType), String> {
    let query_type = req
        .query_type
        .unwrap_or_else(|| classify_heuristic(&req.query));
    model
        .score(
            &ScoreInput {
                query: &req.query,
                query_type,
                response: &req.response,
                reference: req.reference.as_deref(),
            },
            req.variant.unwrap_or(default_variant),
        )
        .map(|b| (b, query_type))
        .map_err(|e| e.code().to_owned())
}

pub fn library_model(cfg: &EngineConfig) -> RewardModel {
    let cal = r3_core::CalibrationMap::load(cfg.calibration_path.as_deref().unwrap()).unwrap();
    RewardModel::new(
        Arc::new(HashedEmbedder::default()),
        Some(cal),
        RewardOptions::default(),
    )
}

fn same_bits(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn same_opt_bits(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => same_bits(x, y),
        (None, None) => true,
        _ => false,
    }
}

pub fn breakdowns_identical(a: &RewardBreakdown, b: &RewardBreakdown) -> bool {
    same_bits(a.r_x, b.r_x)
        && same_opt_bits(a.r_y, b.r_y)
        && same_bits(a.li, b.li)
        && same_bits(a.rp, b.rp)
        && same_opt_bits(a.f_of_ry, b.f_of_ry)
        && same_bits(a.total, b.total)
        && a.branch == b.branch
        && a.variant == b.variant
}

pub struct EquivalenceReport {
    pub requests: usize,
    pub mismatches: Vec<String>,
    pub errors_compared: usize,
    pub p50: Duration,
}

/// Sends every request to `/v1/score` and compares against the library.
pub fn check_equivalence(
    addr: SocketAddr,
    cfg: &EngineConfig,
    n: usize,
    seed: u64,
) -> EquivalenceReport {
    let model = library_model(cfg);
    let http = client();
    let url = format!("http://{addr}/v1/score");
    let mut latencies = Vec::with_capacity(n);
    let mut mismatches = Vec::new();
    let mut errors_compared = 0;
    for (i, req) in random_requests(n, seed).iter().enumerate() {
        let started = Instant::now();
        let resp = http.post(&url).json(req).send().unwrap();
        let status = resp.status();
        let body: Value = resp.json().unwrap();
        latencies.push(started.elapsed());
        match library_score(&model, cfg.variant, req) {
            Ok((want, qt)) => {
                let got: ScoreResponse = match serde_json::from_value(body.clone()) {
                    Ok(g) => g,
                    Err(_) => {
                        mismatches.push(format!("request {i}: status {status}, body {body}"));
                        continue;
                    }
                };
                if !breakdowns_identical(&got.breakdown, &want) || got.query_type != qt {
                    mismatches.push(format!("request {i}: service {body} library {want:?}"));
                }
            }
            Err(code) => {
                errors_compared += 1;
                let got: Result<ErrorBody, _> = serde_json::from_value(body.clone());
                if !status.is_client_error() || got.ok().map(|b| b.error.code) != Some(code.clone())
                {
                    mismatches.push(format!(
                        "request {i}: library error {code}, service {status} {body}"
                    ));
                }
            }
        }
    }
    latencies.sort();
    EquivalenceReport {
        requests: n,
        mismatches,
        errors_compared,
        p50: latencies[latencies.len() / 2],
    }
}
