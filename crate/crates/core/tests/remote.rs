use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use evident_core::embedder::{EmbedError, Embedder, RemoteEmbedder};
use evident_core::llm::{Backend, CachedBackend, GatewayError, RemoteBackend};
use serde_json::{json, Value};

/// Minimal HTTP/1.1 server: answers every request with `respond(body)` after
/// `delay`, and records the request bodies it received.
struct FakeServer {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
}

fn serve(delay: Duration, respond: impl Fn(&Value) -> (u16, String) + Send + 'static) -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            seen.lock().unwrap().push(request.clone());
            thread::sleep(delay);
            let (status, payload) = respond(&request);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    FakeServer { url, bodies }
}

const TIMEOUT: Duration = Duration::from_secs(5);

#[test]
fn completion_round_trip() {
    let server = serve(Duration::ZERO, |req| {
        let prompt = req["prompt"].as_str().unwrap_or_default();
        (200, json!({"text": format!("echo {}", prompt.len()), "token_logprobs": [-0.5, -1.5]}).to_string())
    });
    let backend = RemoteBackend::new(&format!("{}/", server.url), TIMEOUT);
    let c = backend.complete("hello").unwrap();
    assert_eq!(c.text, "echo 5");
    assert_eq!(c.token_logprobs, vec![-0.5, -1.5]);
    assert_eq!(c.backend_id, format!("remote:{}", server.url));
    let sent = server.bodies.lock().unwrap().clone();
    assert_eq!(sent, vec![json!({"prompt": "hello", "max_tokens": 64})]);
}

#[test]
fn logprobs_are_optional() {
    let server = serve(Duration::ZERO, |_| (200, json!({"text": "Yes"}).to_string()));
    let c = RemoteBackend::new(&server.url, TIMEOUT).with_max_tokens(8).complete("q").unwrap();
    assert!(!c.has_logprobs());
    assert_eq!(server.bodies.lock().unwrap()[0]["max_tokens"], 8);
}

#[test]
fn empty_text_and_bad_logprobs_are_rejected() {
    let server = serve(Duration::ZERO, |req| match req["prompt"].as_str() {
        Some("empty") => (200, json!({"text": ""}).to_string()),
        _ => (200, json!({"text": "No", "token_logprobs": [0.2]}).to_string()),
    });
    let backend = RemoteBackend::new(&server.url, TIMEOUT);
    assert!(matches!(backend.complete("empty"), Err(GatewayError::EmptyCompletion { .. })));
    assert!(matches!(backend.complete("other"), Err(GatewayError::InvalidCompletion(_))));
}

#[test]
fn server_errors_and_garbage_are_transport_failures() {
    let server = serve(Duration::ZERO, |req| match req["prompt"].as_str() {
        Some("fail") => (500, "{}".into()),
        _ => (200, "not json".into()),
    });
    let backend = RemoteBackend::new(&server.url, TIMEOUT);
    let err = backend.complete("fail").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err}");
    let err = backend.complete("garbage").unwrap_err().to_string();
    assert!(err.contains("malformed response"), "{err}");
}

#[test]
fn slow_server_times_out() {
    let server = serve(Duration::from_millis(1500), |_| (200, json!({"text": "late"}).to_string()));
    let backend = RemoteBackend::new(&server.url, Duration::from_millis(200));
    let err = backend.complete("q").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err}");
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = RemoteBackend::new(&format!("http://127.0.0.1:{port}"), TIMEOUT);
    assert!(matches!(backend.complete("q"), Err(GatewayError::Transport { .. })));
}

#[test]
fn cache_avoids_repeat_calls() {
    let server = serve(Duration::ZERO, |_| (200, json!({"text": "Yes", "token_logprobs": [-0.1]}).to_string()));
    let dir = tempfile::tempdir().unwrap();
    let first = CachedBackend::new(RemoteBackend::new(&server.url, TIMEOUT), dir.path()).unwrap();
    let a = first.complete("same prompt").unwrap();
    let b = first.complete("same prompt").unwrap();
    assert_eq!(a, b);
    // a fresh wrapper over the same directory reads from disk
    let second = CachedBackend::new(RemoteBackend::new(&server.url, TIMEOUT), dir.path()).unwrap();
    assert_eq!(second.complete("same prompt").unwrap(), a);
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn embedding_round_trip_canonicalizes_text() {
    let server = serve(Duration::ZERO, |req| {
        let texts = req["texts"].as_array().unwrap();
        let vectors: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| vec![t.as_str().unwrap().len() as f64, 1.0, 0.0])
            .collect();
        (200, json!({ "vectors": vectors }).to_string())
    });
    let e = RemoteEmbedder::new(&server.url, 3, false, TIMEOUT);
    assert_eq!(e.id(), format!("remote:{}:d3", server.url));
    let out = e.embed_batch(&["  a   b ".to_string(), "cd".to_string()]).unwrap();
    assert_eq!(out, vec![vec![3.0, 1.0, 0.0], vec![2.0, 1.0, 0.0]]);
    assert_eq!(server.bodies.lock().unwrap()[0], json!({"texts": ["a b", "cd"]}));
    assert!(matches!(e.embed("   "), Err(EmbedError::EmptyText)));
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn embedding_shape_is_checked() {
    let server = serve(Duration::ZERO, |req| match req["texts"][0].as_str() {
        Some("short") => (200, json!({"vectors": [[1.0]]}).to_string()),
        _ => (200, json!({"vectors": []}).to_string()),
    });
    let e = RemoteEmbedder::new(&server.url, 3, true, TIMEOUT);
    assert!(matches!(e.embed("short"), Err(EmbedError::Dimension { expected: 3, got: 1 })));
    assert!(matches!(e.embed("missing"), Err(EmbedError::Transport(_))));
}

#[test]
fn slow_embedder_times_out() {
    let server = serve(Duration::from_millis(1500), |_| (200, json!({"vectors": [[1.0]]}).to_string()));
    let e = RemoteEmbedder::new(&server.url, 1, true, Duration::from_millis(200));
    assert!(matches!(e.embed("x"), Err(EmbedError::Transport(_))));
}
