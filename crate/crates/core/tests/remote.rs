use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use trajcur::policy::{complete, BackendError, ChatMessage, RemoteBackend, RemoteSettings, RequestTags};

struct Seen {
    authorization: Option<String>,
    body: Value,
}

/// Serve one canned `(status, body)` per connection, reporting each request.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authorization = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Seen {
                authorization,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn settings(endpoint: String, max_retries: u32) -> RemoteSettings {
    RemoteSettings {
        endpoint,
        model: "mock-model".into(),
        api_key: Some("sk-test".into()),
        max_tokens: 1000,
        temperature: 0.0,
        seed: 42,
        max_retries,
        retry_base: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        max_in_flight: 2,
    }
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Thought: open it. Action: ```click [3]```"}}],"usage":{"completion_tokens":11}}"#;

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![(503, "{}".into()), (200, OK.into())]);
    let backend = RemoteBackend::new("policy", settings(url, 3)).unwrap();
    let out = complete(&backend, "be brief", vec![ChatMessage::user("hello")], RequestTags::default()).unwrap();
    assert_eq!(out.text, "Thought: open it. Action: ```click [3]```");
    assert_eq!(out.tokens, 11);

    let first = seen.recv().unwrap();
    let second = seen.recv().unwrap();
    assert_eq!(first.body, second.body);
    assert_eq!(first.authorization.as_deref(), Some("Bearer sk-test"));
    let body = &first.body;
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["max_tokens"], 1000);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["seed"], 42);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "be brief");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "hello");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad request"}"#.into())]);
    let backend = RemoteBackend::new("policy", settings(url, 3)).unwrap();
    let err = complete(&backend, "", vec![ChatMessage::user("hi")], RequestTags::default()).unwrap_err();
    match err {
        BackendError::Unavailable { reason, retryable } => {
            assert!(!retryable);
            assert!(reason.contains("400"), "{reason}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let first = seen.recv().unwrap();
    assert!(first.body["messages"][0]["role"] == "user", "empty system prompt is omitted");
    assert!(seen.recv_timeout(Duration::from_millis(100)).is_err());
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![(429, "{}".into()), (429, "{}".into()), (429, "{}".into())]);
    let backend = RemoteBackend::new("policy", settings(url, 2)).unwrap();
    let err = complete(&backend, "s", vec![ChatMessage::user("hi")], RequestTags::default()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { retryable: true, .. }), "{err:?}");
    assert_eq!(seen.iter().take(3).count(), 3);
}

#[test]
fn missing_usage_falls_back_to_word_count() {
    let body = r#"{"choices":[{"message":{"content":"one two three"}}]}"#;
    let (url, _seen) = serve(vec![(200, body.into())]);
    let backend = RemoteBackend::new("judge", settings(url, 0)).unwrap();
    let out = complete(&backend, "s", vec![ChatMessage::user("hi")], RequestTags::default()).unwrap();
    assert_eq!(out.tokens, 3);
}
