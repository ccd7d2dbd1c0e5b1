use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use geoflow_core::llm::{http_complete, ChatRequest, HttpBackend, Message, RetryPolicy, RoleTag};
use geoflow_core::Error;
use serde_json::Value;

struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { auth, body: serde_json::from_slice(&buf).unwrap() });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 3}
    })
    .to_string()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { base_delay: Duration::from_millis(5), factor: 2, max_retries: 3 }
}

fn request() -> ChatRequest {
    ChatRequest::new(RoleTag::Coder, vec![Message::system("sys"), Message::user("write code")])
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = stub(vec![(503, "busy".into()), (429, "slow down".into()), (200, ok_body("print(1)"))]);
    let backend = HttpBackend::new(url, Some("k1".into()), "m").with_retry(fast_retry());
    let resp = http_complete(&backend, &request()).unwrap();
    assert_eq!(resp.text, "print(1)");
    assert_eq!(resp.retries, 2);
    assert_eq!(resp.usage.unwrap().prompt_tokens, 12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer k1"));
    assert_eq!(seen[0].body["model"], "m");
    assert_eq!(seen[0].body["messages"][1]["role"], "user");
    assert_eq!(seen[0].body["messages"][1]["content"], "write code");
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = stub(vec![(401, "bad key".into()), (200, ok_body("never"))]);
    let backend = HttpBackend::new(url, None, "m").with_retry(fast_retry());
    match http_complete(&backend, &request()) {
        Err(Error::BackendRejected { status, body }) => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("expected rejection, got {:?}", other.map(|r| r.text)),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = stub(vec![(500, "a".into()), (500, "b".into()), (500, "c".into()), (500, "d".into())]);
    let backend = HttpBackend::new(url, None, "m").with_retry(fast_retry());
    match http_complete(&backend, &request()) {
        Err(Error::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected unavailable, got {:?}", other.map(|r| r.text)),
    }
    assert_eq!(seen.lock().unwrap().len(), 4);
}
