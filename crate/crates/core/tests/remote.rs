use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use seqrank::lm::RemoteClient;
use seqrank::Error;

type Handler = Box<dyn Fn(usize, &Value) -> (u16, String) + Send>;

/// Minimal HTTP server answering `requests` connections with `handler`,
/// which sees the request number and the JSON body. Returns the base URL
/// and the recorded (path, body) pairs.
fn serve(requests: usize, handler: Handler) -> (String, Arc<Mutex<Vec<(String, Value)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for n in 0..requests {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply) = handler(n, &body);
            log.lock().unwrap().push((path, body));
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn client(url: &str) -> RemoteClient {
    let mut c = RemoteClient::new(url, Duration::from_secs(5));
    c.backoff = Duration::from_millis(1);
    c
}

#[test]
fn returns_logits_in_letter_order() {
    let (url, seen) = serve(
        1,
        Box::new(|_, body| {
            let n = body["letters"].as_array().unwrap().len();
            let logits: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
            (200, json!({"logits": logits, "single_token": true}).to_string())
        }),
    );
    let got = client(&format!("{url}/")).letter_logits("prompt text", &['A', 'B', 'C']).unwrap();
    assert_eq!(got, vec![0.0, 0.5, 1.0]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].0, "/v1/letter_logits");
    assert_eq!(seen[0].1, json!({"text": "prompt text", "letters": ["A", "B", "C"]}));
}

#[test]
fn retries_server_errors() {
    let (url, seen) = serve(
        2,
        Box::new(|n, _| match n {
            0 => (503, "busy".into()),
            _ => (200, json!({"logits": [1.0], "single_token": true}).to_string()),
        }),
    );
    assert_eq!(client(&url).letter_logits("x", &['A']).unwrap(), vec![1.0]);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn gives_up_after_retries() {
    let (url, _) = serve(3, Box::new(|_, _| (500, "down".into())));
    let err = client(&url).letter_logits("x", &['A']).unwrap_err();
    assert!(matches!(err, Error::RemoteUnavailable(_)), "{err:?}");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(1, Box::new(|_, _| (400, "bad letters".into())));
    match client(&url).letter_logits("x", &['A']).unwrap_err() {
        Error::RemoteProtocol(m) => assert!(m.contains("400") && m.contains("bad letters"), "{m}"),
        e => panic!("{e:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn multi_token_letter_is_named() {
    let (url, _) = serve(
        3,
        Box::new(|_, body| {
            let letters = body["letters"].as_array().unwrap();
            let single = !letters.iter().any(|l| l == "B");
            (200, json!({"logits": vec![0.0; letters.len()], "single_token": single}).to_string())
        }),
    );
    match client(&url).letter_logits("x", &['A', 'B']).unwrap_err() {
        Error::MultiTokenLetter(l) => assert_eq!(l, "B"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn malformed_responses_are_protocol_errors() {
    for reply in [
        json!({"logits": [1.0], "single_token": true}).to_string(),
        "not json".to_string(),
        json!({"single_token": true}).to_string(),
    ] {
        let (url, _) = serve(1, Box::new(move |_, _| (200, reply.clone())));
        let err = client(&url).letter_logits("x", &['A', 'B']).unwrap_err();
        assert!(matches!(err, Error::RemoteProtocol(_)), "{err:?}");
    }
}

#[test]
fn unreachable_backend() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut c = client(&format!("http://127.0.0.1:{port}"));
    c.retries = 0;
    let err = c.letter_logits("x", &['A']).unwrap_err();
    assert!(matches!(err, Error::RemoteUnavailable(_)), "{err:?}");
}
