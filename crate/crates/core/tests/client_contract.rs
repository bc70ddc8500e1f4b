//! The remote client against a scripted local HTTP server speaking the
//! service contract.

mod common;

use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;

use common::{fixture, FakeServer, Reply};
use ragpoison_core::clients::{ApiStyle, ClientError, RemoteClient, ResponseCache, ServiceConfig};

fn config(url: &str) -> ServiceConfig {
    ServiceConfig {
        base_url: url.to_string(),
        backoff_base_ms: 1,
        timeout_ms: 5_000,
        ..ServiceConfig::default()
    }
}

fn client(cfg: ServiceConfig, cache: &Path, offline: bool) -> RemoteClient {
    RemoteClient::new(cfg, ResponseCache::new(cache), offline).expect("client")
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

const WINGS: &str = "Wings of Hope lifts spirits in trying times.";
const COURAGE: &str = "Courage takes flight.";

#[test]
fn health_reports_ok() {
    let server = FakeServer::start(vec![Reply::json(&fixture("health_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    client(config(&server.url), dir.path(), false).health().unwrap();
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!((reqs[0].method.as_str(), reqs[0].path.as_str()), ("GET", "/health"));
}

#[test]
fn unhealthy_status_is_malformed() {
    let server = FakeServer::start(vec![Reply::json(&json!({"status": "loading"}))]);
    let dir = tempfile::tempdir().unwrap();
    let err = client(config(&server.url), dir.path(), false).health().unwrap_err();
    assert!(matches!(err, ClientError::Malformed { .. }), "{err}");
}

#[test]
fn embed_matches_contract_and_normalizes() {
    let server = FakeServer::start(vec![Reply::json(&fixture("embed_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let vectors = c.embed_remote(&[WINGS, COURAGE]).unwrap();

    let reqs = server.requests();
    assert_eq!((reqs[0].method.as_str(), reqs[0].path.as_str()), ("POST", "/embed"));
    assert_eq!(reqs[0].json(), fixture("embed_request.json"));
    assert_eq!(vectors.len(), 2);
    assert_eq!(vectors[0].values, vec![0.6, 0.8, 0.0]);
    assert_eq!(vectors[1].values, vec![0.0, 0.0, 1.0]);
    for v in &vectors {
        assert!((norm(&v.values) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn embed_dedupes_and_keeps_order() {
    let server = FakeServer::start(vec![Reply::json(&fixture("embed_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let vectors = c.embed_remote(&[WINGS, COURAGE, WINGS]).unwrap();
    assert_eq!(server.requests()[0].json(), fixture("embed_request.json"));
    assert_eq!(vectors[0], vectors[2]);
    assert_ne!(vectors[0], vectors[1]);
}

#[test]
fn embed_splits_batches() {
    let one = Reply::json(&json!({"vectors": [[1.0, 0.0], [0.0, 1.0]]}));
    let tail = Reply::json(&json!({"vectors": [[1.0, 1.0]]}));
    let server = FakeServer::start(vec![one.clone(), one, tail]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(
        ServiceConfig {
            max_batch_size: 2,
            ..config(&server.url)
        },
        dir.path(),
        false,
    );
    let vectors = c.embed_remote(&["a", "b", "c", "d", "e"]).unwrap();
    assert_eq!(vectors.len(), 5);
    let sizes: Vec<usize> = server
        .requests()
        .iter()
        .map(|r| r.json()["texts"].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, vec![2, 2, 1]);
}

#[test]
fn cached_embeddings_make_no_calls_even_offline() {
    let server = FakeServer::start(vec![Reply::json(&fixture("embed_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let online = client(config(&server.url), dir.path(), false);
    let first = online.embed_remote(&[WINGS, COURAGE]).unwrap();
    assert_eq!(online.network_calls(), 1);
    assert_eq!(
        online.embed_remote(&[COURAGE, WINGS]).unwrap(),
        vec![first[1].clone(), first[0].clone()]
    );
    assert_eq!(online.network_calls(), 1);

    let offline = client(config(&server.url), dir.path(), true);
    assert_eq!(offline.embed_remote(&[WINGS]).unwrap()[0], first[0]);
    assert_eq!(offline.network_calls(), 0);
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn offline_miss_is_an_error_without_calls() {
    let server = FakeServer::start(vec![Reply::json(&fixture("embed_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), true);
    let err = c.embed_remote(&[WINGS]).unwrap_err();
    assert!(matches!(err, ClientError::CacheMiss { .. }), "{err}");
    let err = c.complete_remote("hello").unwrap_err();
    assert!(matches!(err, ClientError::CacheMiss { .. }), "{err}");
    assert_eq!(c.network_calls(), 0);
    assert!(server.requests().is_empty());
}

#[test]
fn rewrite_matches_contract_and_is_cached() {
    let server = FakeServer::start(vec![Reply::json(&fixture("rewrite_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let prompt = fixture("rewrite_request.json")["prompt"].as_str().unwrap().to_string();
    let text = c.complete_remote(&prompt).unwrap();
    assert_eq!(text, fixture("rewrite_response.json")["text"].as_str().unwrap());
    assert_eq!(c.complete_remote(&prompt).unwrap(), text);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!((reqs[0].method.as_str(), reqs[0].path.as_str()), ("POST", "/rewrite"));
    assert_eq!(reqs[0].json(), fixture("rewrite_request.json"));
}

#[test]
fn server_errors_are_retried() {
    let server = FakeServer::start(vec![
        Reply::status(503, "busy"),
        Reply::status(502, "bad gateway"),
        Reply::json(&fixture("rewrite_response.json")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    c.complete_remote("p").unwrap();
    assert_eq!(c.network_calls(), 3);
}

#[test]
fn exhausted_retries_report_status_and_attempts() {
    let server = FakeServer::start(vec![Reply::status(500, "boom")]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(
        ServiceConfig {
            max_retries: 2,
            ..config(&server.url)
        },
        dir.path(),
        false,
    );
    match c.complete_remote("p").unwrap_err() {
        ClientError::Http {
            status, attempts, body, ..
        } => {
            assert_eq!((status, attempts), (500, 3));
            assert_eq!(body, "boom");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(server.requests().len(), 3);
    // Failures are not cached.
    assert_eq!(ResponseCache::new(dir.path()).len(), 0);
}

#[test]
fn client_errors_are_not_retried() {
    let server = FakeServer::start(vec![Reply::status(400, "bad request")]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let err = c.complete_remote("p").unwrap_err();
    assert!(
        matches!(
            err,
            ClientError::Http {
                status: 400,
                attempts: 1,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn retry_after_is_honoured() {
    let server = FakeServer::start(vec![
        Reply::status(429, "slow down").header("Retry-After", "1"),
        Reply::json(&fixture("rewrite_response.json")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let started = Instant::now();
    c.complete_remote("p").unwrap();
    assert!(started.elapsed() >= Duration::from_secs(1));
    assert_eq!(c.network_calls(), 2);
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let c = client(
        ServiceConfig {
            max_retries: 1,
            ..config(&format!("http://127.0.0.1:{port}"))
        },
        dir.path(),
        false,
    );
    let err = c.health().unwrap_err();
    assert!(matches!(err, ClientError::Transport { attempts: 2, .. }), "{err}");
}

#[test]
fn empty_bodies_are_errors() {
    let server = FakeServer::start(vec![Reply::status(200, ""), Reply::json(&json!({"text": "  "}))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    assert!(matches!(
        c.complete_remote("a").unwrap_err(),
        ClientError::EmptyResponse { .. }
    ));
    assert!(matches!(
        c.complete_remote("b").unwrap_err(),
        ClientError::EmptyResponse { .. }
    ));
}

#[test]
fn wrong_vector_count_is_malformed() {
    let server = FakeServer::start(vec![Reply::json(&json!({"vectors": [[1.0]]}))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(config(&server.url), dir.path(), false);
    let err = c.embed_remote(&["a", "b"]).unwrap_err();
    assert!(matches!(err, ClientError::Malformed { .. }), "{err}");
    assert_eq!(ResponseCache::new(dir.path()).len(), 0);
}

#[test]
fn api_key_is_sent_but_never_stored() {
    const VAR: &str = "RAGPOISON_CONTRACT_TEST_KEY";
    const KEY: &str = "sk-contract-secret-value";
    std::env::set_var(VAR, KEY);
    let server = FakeServer::start(vec![Reply::json(&fixture("rewrite_response.json"))]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(
        ServiceConfig {
            api_key_env_var: Some(VAR.into()),
            ..config(&server.url)
        },
        dir.path(),
        false,
    );
    c.complete_remote("p").unwrap();
    let expected = format!("Bearer {KEY}");
    assert_eq!(server.requests()[0].header("authorization"), Some(expected.as_str()));
    assert!(!format!("{c:?}").contains(KEY));
    for entry in walk(dir.path()) {
        assert!(!std::fs::read_to_string(entry).unwrap().contains(KEY));
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn openai_style_embeddings_and_chat() {
    let server = FakeServer::start(vec![
        Reply::json(&fixture("openai_embeddings_response.json")),
        Reply::json(&fixture("openai_chat_response.json")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(
        ServiceConfig {
            api_style: ApiStyle::OpenAi,
            model_name: "text-embed-small".into(),
            ..config(&server.url)
        },
        dir.path(),
        false,
    );
    let vectors = c.embed_remote(&[WINGS, COURAGE]).unwrap();
    assert_eq!(vectors[0].values, vec![0.6, 0.8, 0.0]);
    assert_eq!(vectors[1].values, vec![0.0, 0.0, 1.0]);
    let text = c.complete_remote("rewrite this").unwrap();
    assert_eq!(text, "Wings of Hope lifts spirits in trying, exhilarating times.");

    let reqs = server.requests();
    assert_eq!(reqs[0].path, "/embeddings");
    assert_eq!(
        reqs[0].json(),
        json!({"model": "text-embed-small", "input": [WINGS, COURAGE]})
    );
    assert_eq!(reqs[1].path, "/chat/completions");
    let chat = reqs[1].json();
    assert_eq!(chat["temperature"], json!(0));
    assert_eq!(chat["messages"][0], json!({"role": "user", "content": "rewrite this"}));
}

#[test]
fn concurrency_is_capped() {
    let reply = Reply::json(&fixture("rewrite_response.json")).delayed(Duration::from_millis(60));
    let server = FakeServer::start(vec![reply]);
    let dir = tempfile::tempdir().unwrap();
    let c = Arc::new(client(
        ServiceConfig {
            max_concurrent_requests: 2,
            ..config(&server.url)
        },
        dir.path(),
        false,
    ));
    let handles: Vec<_> = (0..6)
        .map(|i| {
            let c = Arc::clone(&c);
            thread::spawn(move || c.complete_remote(&format!("prompt {i}")).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(server.requests().len(), 6);
    assert!(server.peak_in_flight.load(Ordering::SeqCst) <= 2);
}
