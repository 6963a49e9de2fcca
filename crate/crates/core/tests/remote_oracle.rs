use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use scs::oracle::{Oracle, OracleError, RemoteOracle, RetryPolicy};
use serde_json::Value;

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    calls: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<String> {
    let mut length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((k, v)) = trimmed.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

impl MockServer {
    fn start(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        Self::start_with_delay(Duration::ZERO, handler)
    }

    fn start_with_delay(delay: Duration, handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (c, a, p) = (calls.clone(), active.clone(), peak.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (handler, calls, active, peak) = (handler.clone(), c.clone(), a.clone(), p.clone());
                thread::spawn(move || {
                    let mut writer = stream.try_clone().unwrap();
                    let mut reader = BufReader::new(stream);
                    while let Some(body) = read_request(&mut reader) {
                        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        let n = calls.fetch_add(1, Ordering::SeqCst);
                        thread::sleep(delay);
                        let json: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                        let (status, text) = handler(n, &json);
                        active.fetch_sub(1, Ordering::SeqCst);
                        let reply = format!(
                            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{text}",
                            text.len()
                        );
                        if writer.write_all(reply.as_bytes()).is_err() {
                            break;
                        }
                    }
                });
            }
        });
        Self { url, calls, peak }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Scores each pair by the length of its candidate id, in tenths.
fn by_length(_: usize, body: &Value) -> (u16, String) {
    let ious: Vec<f64> = body["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["candidate_id"].as_str().unwrap().len() as f64 / 10.0)
        .collect();
    (200, serde_json::json!({ "ious": ious }).to_string())
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        backoff: Duration::from_millis(5),
    }
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn batch_scores_align_with_request_order() {
    let server = MockServer::start(by_length);
    let oracle = RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(0), 4);
    let record = oracle.score_batch("q", &ids(&["abc", "a", "abcdefgh"])).unwrap();
    assert_eq!(record.ious(), &[0.3, 0.1, 0.8]);
    assert_eq!(oracle.score_pair("q", "ab").unwrap(), 0.2);
    assert_eq!(server.calls(), 2);
}

#[test]
fn transient_failures_are_retried() {
    let server = MockServer::start(|n, body| if n < 2 { (503, "busy".into()) } else { by_length(n, body) });
    let oracle = RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(3), 1);
    assert_eq!(oracle.score_pair("q", "abcd").unwrap(), 0.4);
    assert_eq!(server.calls(), 3);
}

#[test]
fn exhausted_retries_report_pair_ids() {
    let server = MockServer::start(|_, _| (500, "boom".into()));
    let oracle = RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(2), 1);
    let err = oracle.score_batch("query7", &ids(&["cand1", "cand2"])).unwrap_err();
    match err {
        OracleError::Transport {
            query_id,
            candidate_id,
            message,
        } => {
            assert_eq!(query_id, "query7");
            assert!(candidate_id.contains("cand1") && candidate_id.contains("cand2"));
            assert!(message.contains("500"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.calls(), 3);
}

#[test]
fn malformed_bodies_are_transport_errors() {
    for body in ["not json", r#"{"scores":[0.1]}"#, r#"{"ious":[0.1, 0.2]}"#, r#"{"ious":["x"]}"#] {
        let server = MockServer::start(move |_, _| (200, body.to_string()));
        let oracle = RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(1), 1);
        let err = oracle.score_pair("q", "c").unwrap_err();
        assert!(matches!(err, OracleError::Transport { .. }), "{body}: {err:?}");
        assert_eq!(server.calls(), 2);
    }
}

#[test]
fn out_of_range_is_fatal_and_not_clamped() {
    let server = MockServer::start(|_, _| (200, r#"{"ious":[1.5]}"#.into()));
    let oracle = RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(3), 1);
    let err = oracle.score_pair("q", "c").unwrap_err();
    assert!(matches!(err, OracleError::OutOfRange { value, .. } if value == 1.5));
    assert_eq!(server.calls(), 1);
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let oracle = RemoteOracle::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2), fast_retry(1), 1);
    assert!(matches!(oracle.score_pair("q", "c"), Err(OracleError::Transport { .. })));
}

#[test]
fn slow_server_times_out() {
    let server = MockServer::start_with_delay(Duration::from_millis(600), by_length);
    let oracle = RemoteOracle::new(&server.url, Duration::from_millis(100), fast_retry(0), 1);
    assert!(matches!(oracle.score_pair("q", "c"), Err(OracleError::Transport { .. })));
}

#[test]
fn in_flight_requests_are_bounded() {
    let server = MockServer::start_with_delay(Duration::from_millis(40), by_length);
    let oracle = Arc::new(RemoteOracle::new(&server.url, Duration::from_secs(5), fast_retry(0), 2));
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let o = oracle.clone();
            thread::spawn(move || o.score_pair("q", &"x".repeat(i + 1)).unwrap())
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        assert_eq!(h.join().unwrap(), (i + 1) as f64 / 10.0);
    }
    assert_eq!(server.calls(), 8);
    let peak = server.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}
