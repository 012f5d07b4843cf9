use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use treenav::llm::openai::{OpenAiBackend, OpenAiConfig};
use treenav::llm::{BackendError, CompletionRequest, Gateway, LlmError, RetryPolicy, TemplateId};
use treenav::nav::{answer_placeholders, ContextSet};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves canned `(status, body)` replies in order and records requests.
fn serve(replies: Vec<(u16, Value)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let mut replies: VecDeque<(u16, Value)> = replies.into();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let (status, reply) = replies.pop_front().unwrap_or((500, json!({"error": "no more replies"})));
            let text = reply.to_string();
            let extra = if status == 429 { "Retry-After: 0\r\n" } else { "" };
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn gateway(base_url: String) -> Gateway {
    let cfg = OpenAiConfig {
        base_url,
        api_key: Some("sk-test".into()),
        chat_model: "chat-m".into(),
        embedding_model: "embed-m".into(),
        timeout_ms: 5_000,
        max_in_flight: 2,
    };
    Gateway::new(Arc::new(OpenAiBackend::new(cfg).unwrap())).with_retry(RetryPolicy::no_backoff(3))
}

fn chat(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}], "usage": {"prompt_tokens": 11, "completion_tokens": 3}})
}

fn answer_request() -> CompletionRequest {
    CompletionRequest::new(TemplateId::Answer, answer_placeholders("q?", &ContextSet::default()))
}

#[test]
fn chat_completion_round_trip() {
    let (url, seen) = serve(vec![(200, chat("forty two"))]);
    let gw = gateway(url);
    let r = gw.complete(&answer_request()).unwrap();
    assert_eq!(r.raw_text, "forty two");
    assert_eq!((r.usage.prompt_tokens, r.usage.completion_tokens), (11, 3));
    assert_eq!(gw.log().usage(), r.usage);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "chat-m");
    assert!(seen[0].body["messages"][0]["content"].as_str().unwrap().contains("q?"));
}

#[test]
fn embeddings_are_reordered_by_index() {
    let reply = json!({
        "data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}],
        "usage": {"prompt_tokens": 4}
    });
    let (url, seen) = serve(vec![(200, reply)]);
    let gw = gateway(url);
    let (v, usage) = gw.embed(&["a".to_string(), "b".to_string()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(usage.prompt_tokens, 4);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["model"], "embed-m");
    assert_eq!(seen[0].body["input"], json!(["a", "b"]));
}

#[test]
fn rate_limit_and_server_errors_are_retried() {
    let (url, seen) = serve(vec![(429, json!({})), (503, json!({})), (200, chat("ok"))]);
    let gw = gateway(url);
    assert_eq!(gw.complete(&answer_request()).unwrap().raw_text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
    let rec = &gw.log().records()[0];
    assert_eq!(rec.attempts, 3);
    assert!(rec.ok);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, json!({"error": "bad"})), (200, chat("unused"))]);
    let gw = gateway(url);
    let err = gw.complete(&answer_request()).unwrap_err();
    assert!(matches!(err, LlmError::Backend { error: BackendError::Http { status: 400, .. }, attempts: 1 }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_reply_is_reported() {
    let (url, _) = serve(vec![(200, json!({"choices": []}))]);
    let err = gateway(url).complete(&answer_request()).unwrap_err();
    assert!(matches!(err, LlmError::Backend { error: BackendError::InvalidResponse(_), .. }), "{err:?}");
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = gateway(format!("http://127.0.0.1:{port}/v1")).complete(&answer_request()).unwrap_err();
    assert!(matches!(err, LlmError::Backend { error: BackendError::Transport(_), attempts: 3 }), "{err:?}");
}
