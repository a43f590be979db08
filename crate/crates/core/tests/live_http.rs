//! The HTTP adapter against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cbmforge::gateway::{HttpBackend, HttpBackendConfig, ImageStore, ResponseCache, RetryPolicy};
use cbmforge::{Capability, Error, Gateway, ModelRequest};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serve `replies` (status, body) in order, one per connection, recording requests.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                authorization: auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let mut stream = reader.into_inner();
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1/generate"), seen)
}

fn gateway(endpoint: &str, credential_env: Option<&str>, capability: Capability) -> Gateway {
    let mut gw = Gateway::new(ResponseCache::in_memory(), Arc::new(ImageStore::in_memory())).with_retry(RetryPolicy {
        retries: 2,
        base_delay: Duration::from_millis(1),
    });
    gw.register(Arc::new(HttpBackend::new(HttpBackendConfig {
        id: "remote".into(),
        model: "test-model-1".into(),
        endpoint: endpoint.into(),
        credential_env: credential_env.map(String::from),
        capabilities: vec![capability],
        max_in_flight: 2,
        embedding_dim: None,
        timeout_secs: 10,
    })));
    gw
}

#[test]
fn text_round_trip_with_credential_and_cache() {
    std::env::set_var("CBMFORGE_TEST_KEY_A", "sekrit");
    let (url, seen) = serve(vec![(200, r#"{"text":"Yes"}"#.into())]);
    let gw = gateway(&url, Some("CBMFORGE_TEST_KEY_A"), Capability::TextGen);
    let req = ModelRequest::new("remote", Capability::TextGen, "Is it red?").greedy();
    assert_eq!(gw.query_text(&req).unwrap(), "Yes");
    // Second identical request is a cache hit; the server would not answer again.
    assert_eq!(gw.query_text(&req).unwrap(), "Yes");
    assert_eq!(gw.stats().backend_calls, 1);
    assert_eq!(gw.stats().cache_hits, 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sekrit"));
    assert_eq!(seen[0].body["model"], "test-model-1");
    assert_eq!(seen[0].body["prompt"], "Is it red?");
    assert_eq!(seen[0].body["params"]["temperature"], 0.0);
}

#[test]
fn transient_status_is_retried() {
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, r#"{"vector":[0.6,0.8]}"#.into()),
    ]);
    let gw = gateway(&url, None, Capability::Embed);
    let resp = gw.query(&ModelRequest::new("remote", Capability::Embed, "a red bill")).unwrap();
    assert_eq!(resp.vector, Some(vec![0.6, 0.8]));
    assert_eq!(gw.stats().backend_calls, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_and_bad_payloads_are_reported() {
    let (url, _) = serve(vec![(400, "{}".into()), (200, "not json".into()), (200, r#"{"text":null}"#.into())]);
    let gw = gateway(&url, None, Capability::TextGen);
    let err = gw.query(&ModelRequest::new("remote", Capability::TextGen, "one")).unwrap_err();
    assert!(matches!(err, Error::BackendUnreachable { .. }), "{err}");
    let err = gw.query(&ModelRequest::new("remote", Capability::TextGen, "two")).unwrap_err();
    assert!(matches!(err, Error::MalformedPayload { .. }), "{err}");
    let err = gw.query(&ModelRequest::new("remote", Capability::TextGen, "three")).unwrap_err();
    assert!(matches!(err, Error::MalformedPayload { .. }), "{err}");
}

#[test]
fn missing_credential_is_fatal_without_a_request() {
    let (url, seen) = serve(vec![]);
    let gw = gateway(&url, Some("CBMFORGE_TEST_KEY_UNSET"), Capability::TextGen);
    let err = gw.query(&ModelRequest::new("remote", Capability::TextGen, "hi")).unwrap_err();
    assert!(err.to_string().contains("CBMFORGE_TEST_KEY_UNSET"), "{err}");
    assert!(seen.lock().unwrap().is_empty());
}
