mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clinsim::backends::{
    request_hash, Attachment, AttachmentSource, BackendDescriptor, BackendError, CassetteWriter, ChatBackend,
    ChatMessage, ChatRequest, HttpBackend, RateLimits, RecordingBackend, ReplayBackend, RetryPolicy, Wire,
};
use serde_json::{json, Value};

struct Captured {
    headers: Vec<String>,
    body: Value,
}

/// Serves the canned `(status, body)` responses in order, one per
/// connection, and records each request.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured { headers, body: serde_json::from_slice(&buf).unwrap_or(Value::Null) });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn openai_ok(text: &str) -> (u16, String) {
    (200, json!({"choices":[{"message":{"content":text}}],"usage":{"prompt_tokens":11,"completion_tokens":3}}).to_string())
}

fn descriptor(wire: Wire, url: &str, var: &str) -> BackendDescriptor {
    BackendDescriptor {
        name: "live".into(),
        wire,
        endpoint: Some(url.into()),
        model: Some("m-1".into()),
        credential_ref: Some(format!("ENV:{var}")),
        multimodal: false,
        fixture: None,
        limits: RateLimits::default(),
        timeout_secs: 5,
    }
}

fn no_sleep(log: Arc<Mutex<Vec<Duration>>>) -> RetryPolicy {
    RetryPolicy::default().with_sleeper(Arc::new(move |d| log.lock().unwrap().push(d)))
}

fn request() -> ChatRequest {
    ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user("hello")])
}

#[test]
fn openai_success_with_retries() {
    std::env::set_var("CLINSIM_TEST_KEY_A", "secret-a");
    let (url, seen) = serve(vec![(429, "{}".into()), (503, "busy".into()), openai_ok("Hi there")]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let b = HttpBackend::new(descriptor(Wire::OpenaiChatCompatible, &url, "CLINSIM_TEST_KEY_A")).unwrap().with_retry(no_sleep(sleeps.clone()));
    let c = b.complete(&request()).unwrap();
    assert_eq!(c.text, "Hi there");
    assert_eq!((c.usage.input_units, c.usage.output_units), (11, 3));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].headers.iter().any(|h| h == "authorization: Bearer secret-a"));
    assert_eq!(seen[2].body["model"], "m-1");
    assert_eq!(seen[2].body["temperature"], 0);
    assert_eq!(seen[2].body["messages"][0]["role"], "system");
    let sleeps = sleeps.lock().unwrap();
    assert_eq!(sleeps.len(), 2);
    assert!(sleeps[0] >= Duration::from_secs(1) && sleeps[0] < Duration::from_millis(1250));
    assert!(sleeps[1] >= Duration::from_secs(2) && sleeps[1] < Duration::from_millis(2500));
}

#[test]
fn rate_limited_after_five_attempts() {
    std::env::set_var("CLINSIM_TEST_KEY_B", "k");
    let (url, seen) = serve(vec![(429, "{}".into()); 5]);
    let b = HttpBackend::new(descriptor(Wire::OpenaiChatCompatible, &url, "CLINSIM_TEST_KEY_B")).unwrap().with_retry(no_sleep(Default::default()));
    assert!(matches!(b.complete(&request()), Err(BackendError::RateLimited { attempts: 5 })));
    assert_eq!(seen.lock().unwrap().len(), 5);
}

#[test]
fn auth_error_not_retried() {
    std::env::set_var("CLINSIM_TEST_KEY_C", "bad");
    let (url, seen) = serve(vec![(401, "{}".into()), openai_ok("unused")]);
    let b = HttpBackend::new(descriptor(Wire::OpenaiChatCompatible, &url, "CLINSIM_TEST_KEY_C")).unwrap().with_retry(no_sleep(Default::default()));
    assert!(matches!(b.complete(&request()), Err(BackendError::Auth(_))));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn anthropic_wire() {
    std::env::set_var("CLINSIM_TEST_KEY_D", "ant");
    let reply = json!({"content":[{"type":"text","text":"Yes"}],"usage":{"input_tokens":5,"output_tokens":1}}).to_string();
    let (url, seen) = serve(vec![(200, reply)]);
    let mut d = descriptor(Wire::AnthropicMessagesCompatible, &url, "CLINSIM_TEST_KEY_D");
    d.multimodal = true;
    let b = HttpBackend::new(d).unwrap();
    let img = Attachment { media_type: "image/png".into(), source: AttachmentSource::Bytes { data: vec![1, 2, 3] } };
    let req = ChatRequest::new(vec![
        ChatMessage::system("grade"),
        ChatMessage::user("one").with_attachments(vec![img]),
        ChatMessage::user("two"),
    ]);
    assert_eq!(b.complete(&req).unwrap().text, "Yes");
    let seen = seen.lock().unwrap();
    assert!(seen[0].headers.iter().any(|h| h == "x-api-key: ant"));
    assert!(seen[0].headers.iter().any(|h| h == "anthropic-version: 2023-06-01"));
    assert_eq!(seen[0].body["system"], "grade");
    let msgs = seen[0].body["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 1);
    assert_eq!(msgs[0]["content"][0]["type"], "image");
    assert_eq!(msgs[0]["content"][0]["source"]["data"], "AQID");
}

#[test]
fn images_rejected_on_text_only_backend() {
    std::env::set_var("CLINSIM_TEST_KEY_E", "k");
    let b = HttpBackend::new(descriptor(Wire::OpenaiChatCompatible, "http://127.0.0.1:9/", "CLINSIM_TEST_KEY_E")).unwrap();
    let img = Attachment { media_type: "image/png".into(), source: AttachmentSource::Url { url: "https://x/y.png".into() } };
    let req = ChatRequest::new(vec![ChatMessage::system("s"), ChatMessage::user("u").with_attachments(vec![img])]);
    assert!(matches!(b.complete(&req), Err(BackendError::InvalidRequest(_))));
}

#[test]
fn timeout_is_transport_error() {
    std::env::set_var("CLINSIM_TEST_KEY_F", "k");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        let _held: Vec<_> = listener.incoming().take(2).collect();
        std::thread::sleep(Duration::from_secs(5));
    });
    let mut d = descriptor(Wire::OpenaiChatCompatible, &url, "CLINSIM_TEST_KEY_F");
    d.timeout_secs = 1;
    let mut policy = no_sleep(Default::default());
    policy.max_attempts = 2;
    let b = HttpBackend::new(d).unwrap().with_retry(policy);
    assert!(matches!(b.complete(&request()), Err(BackendError::Transport(_))));
}

#[test]
fn cassette_round_trip_by_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let writer = Arc::new(CassetteWriter::create(&path).unwrap());
    let inner = common::scripted("s", &["first", "second"]);
    let rec = RecordingBackend::new(inner, writer);
    let a = request();
    let b = ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user("hellO")]);
    assert_eq!(rec.complete(&a).unwrap().text, "first");
    assert_eq!(rec.complete(&b).unwrap().text, "second");
    let replay = ReplayBackend::from_file("r", &path).unwrap();
    // order does not matter, hashes do
    assert_eq!(replay.complete(&b).unwrap().text, "second");
    assert_eq!(replay.complete(&a).unwrap().text, "first");
    let c = ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user("other")]);
    match replay.complete(&c) {
        Err(BackendError::ReplayMiss { hash }) => assert_eq!(hash, request_hash(&c)),
        other => panic!("{other:?}"),
    }
}
