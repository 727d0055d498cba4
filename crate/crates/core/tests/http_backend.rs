use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use shopalign_core::llm::{ChatMessage, HttpBackend, HttpBackendConfig, Gateway, GatewayConfig, GenerationConfig, LlmError};

struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and reports
/// each request it received.
fn fake_server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap_or((line, ""));
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1/chat"), rx)
}

fn gateway(endpoint: String, attempts: u32) -> Gateway {
    let backend = HttpBackend::new(HttpBackendConfig {
        endpoint,
        api_key: Some("sekret".into()),
        model: "tiny".into(),
        timeout: Duration::from_secs(10),
    })
    .unwrap();
    Gateway::new(
        Arc::new(backend),
        GatewayConfig {
            max_attempts: attempts,
            backoff_base: Duration::from_millis(1),
            ..Default::default()
        },
    )
}

#[test]
fn retries_server_errors_then_returns_text() {
    let ok = json!({"choices": [{"message": {"role": "assistant", "content": "hello there"}}]}).to_string();
    let (url, seen) = fake_server(vec![(503, "{}".into()), (200, ok)]);
    let gw = gateway(url, 3);
    let out = gw
        .complete(&[ChatMessage::user("hi")], &GenerationConfig::default())
        .unwrap();
    assert_eq!(out, "hello there");
    assert_eq!(gw.calls_made(), 2);

    let first = seen.recv().unwrap();
    assert_eq!(first.auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(first.body["model"], "tiny");
    assert_eq!(first.body["temperature"], 0.0);
    assert_eq!(first.body["messages"][0]["content"], "hi");
    assert_eq!(seen.recv().unwrap().body, first.body);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _seen) = fake_server(vec![(400, "{\"error\":\"bad model\"}".into())]);
    let gw = gateway(url, 3);
    let err = gw
        .complete(&[ChatMessage::user("hi")], &GenerationConfig::default())
        .unwrap_err();
    assert!(matches!(err, LlmError::Backend(ref m) if m.contains("bad model")), "{err:?}");
    assert_eq!(gw.calls_made(), 1);
}

#[test]
fn exhausted_retries_report_unavailable() {
    let (url, _seen) = fake_server(vec![(500, "{}".into()), (429, "{}".into())]);
    let gw = gateway(url, 2);
    let err = gw
        .complete(&[ChatMessage::user("hi")], &GenerationConfig::default())
        .unwrap_err();
    assert!(matches!(err, LlmError::BackendUnavailable { attempts: 2, .. }), "{err:?}");
}
