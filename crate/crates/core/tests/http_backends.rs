//! The chat and embedding clients against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use gdesigner::agents::{
    AgentBackend, AgentSpec, Embedder, HttpChatBackend, HttpEmbedder, HttpSettings, Prompt,
};
use gdesigner::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` reply per request, in order.
/// The last reply repeats once the script runs out.
struct Server {
    url: String,
    requests: Arc<Mutex<Vec<Request>>>,
    peak_concurrency: Arc<AtomicUsize>,
}

fn read_request(stream: &mut BufReader<TcpStream>) -> Option<Request> {
    let mut line = String::new();
    if stream.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut header = String::new();
        stream.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    stream.read_exact(&mut body).ok()?;
    Some(Request {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    })
}

impl Server {
    fn start(script: Vec<(u16, String)>, delay: Duration) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let peak = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let script = Arc::new(script);
        let served = Arc::new(AtomicUsize::new(0));
        {
            let requests = requests.clone();
            let peak = peak.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { break };
                    let (requests, peak, active, script, served) =
                        (requests.clone(), peak.clone(), active.clone(), script.clone(), served.clone());
                    thread::spawn(move || {
                        let mut writer = stream.try_clone().unwrap();
                        let mut reader = BufReader::new(stream);
                        while let Some(req) = read_request(&mut reader) {
                            let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                            peak.fetch_max(now, Ordering::SeqCst);
                            requests.lock().unwrap().push(req);
                            thread::sleep(delay);
                            let i = served.fetch_add(1, Ordering::SeqCst).min(script.len() - 1);
                            let (status, body) = &script[i];
                            let reply = format!(
                                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
                                body.len()
                            );
                            active.fetch_sub(1, Ordering::SeqCst);
                            if writer.write_all(reply.as_bytes()).is_err() {
                                break;
                            }
                        }
                    });
                }
            });
        }
        Server {
            url,
            requests,
            peak_concurrency: peak,
        }
    }

    fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }
}

fn settings(url: &str) -> HttpSettings {
    let mut s = HttpSettings::new(url, "test-model");
    s.api_key = Some("secret-token".into());
    s.temperature = 0.25;
    s.backoff = vec![Duration::from_millis(5); 3];
    s.timeout = Duration::from_secs(10);
    s
}

fn chat_ok(text: &str) -> (u16, String) {
    let body = json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 4}
    });
    (200, body.to_string())
}

fn prompt() -> Prompt {
    Prompt {
        system: "Math Solver".into(),
        user: "compute 3+4".into(),
    }
}

fn agent() -> AgentSpec {
    AgentSpec::new(2, "gpt", "Math Solver")
}

#[test]
fn chat_request_and_response_follow_the_wire_format() {
    let server = Server::start(vec![chat_ok("Answer: 7")], Duration::ZERO);
    let backend = HttpChatBackend::new(settings(&server.url)).unwrap();
    let r = backend.respond(&agent(), &prompt(), 0).unwrap();
    assert_eq!((r.agent_id, r.text.as_str(), r.prompt_tokens, r.completion_tokens), (2, "Answer: 7", 11, 4));
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/v1/chat/completions");
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer secret-token"));
    assert_eq!(
        reqs[0].body,
        json!({
            "model": "test-model",
            "messages": [
                {"role": "system", "content": "Math Solver"},
                {"role": "user", "content": "compute 3+4"}
            ],
            "temperature": 0.25
        })
    );
}

#[test]
fn rate_limits_and_server_errors_are_retried() {
    let script = vec![(429, "{}".into()), (503, "{}".into()), (500, "{}".into()), chat_ok("Answer: 7")];
    let server = Server::start(script, Duration::ZERO);
    let backend = HttpChatBackend::new(settings(&server.url)).unwrap();
    assert_eq!(backend.respond(&agent(), &prompt(), 0).unwrap().text, "Answer: 7");
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn exhausted_retries_report_the_attempt_count() {
    let server = Server::start(vec![(502, "{}".into())], Duration::ZERO);
    let backend = HttpChatBackend::new(settings(&server.url)).unwrap();
    match backend.respond(&agent(), &prompt(), 0) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected a transport error, got {other:?}"),
    }
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn client_errors_and_bad_bodies_are_protocol_errors_without_retry() {
    for reply in [
        (400, r#"{"error": "bad request"}"#.to_string()),
        (200, "not json".to_string()),
        (200, json!({"choices": []}).to_string()),
        (200, json!({"choices": [{"message": {"content": "hi"}}]}).to_string()),
    ] {
        let server = Server::start(vec![reply.clone()], Duration::ZERO);
        let backend = HttpChatBackend::new(settings(&server.url)).unwrap();
        let err = backend.respond(&agent(), &prompt(), 0).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{reply:?} gave {err:?}");
        assert_eq!(server.requests().len(), 1);
    }
}

#[test]
fn unreachable_servers_fail_with_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpChatBackend::new(settings(&format!("http://127.0.0.1:{port}"))).unwrap();
    assert!(matches!(backend.respond(&agent(), &prompt(), 0), Err(Error::Transport { attempts: 4, .. })));
}

#[test]
fn concurrent_requests_respect_the_in_flight_cap() {
    let server = Server::start(vec![chat_ok("Answer: 1")], Duration::from_millis(40));
    let mut s = settings(&server.url);
    s.max_in_flight = 2;
    let backend = Arc::new(HttpChatBackend::new(s).unwrap());
    assert_eq!(backend.max_in_flight(), 2);
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let b = backend.clone();
            thread::spawn(move || b.respond(&agent(), &prompt(), 0).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(server.requests().len(), 6);
    let peak = server.peak_concurrency.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}

#[test]
fn embeddings_are_normalized_and_length_checked() {
    let body = json!({"data": [{"embedding": [3.0, 0.0, 4.0]}]}).to_string();
    let server = Server::start(vec![(200, body)], Duration::ZERO);
    let embedder = HttpEmbedder::new(settings(&server.url), 3).unwrap();
    let v = embedder.embed("hello").unwrap();
    assert_eq!(v.values(), &[0.6, 0.0, 0.8]);
    let reqs = server.requests();
    assert_eq!(reqs[0].path, "/v1/embeddings");
    assert_eq!(reqs[0].body, json!({"model": "test-model", "input": "hello"}));

    let wrong = HttpEmbedder::new(settings(&server.url), 4).unwrap();
    assert!(matches!(wrong.embed("hello"), Err(Error::Config(_))));
}
