//! Exercises the hidden-states HTTP client against an in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use kgprobe::extraction::http::{HiddenStatesRequest, HiddenStatesResponse};
use kgprobe::extraction::{
    extract_records, ExtractError, ExtractOptions, ExtractionBackend, HttpBackend, MockLm,
    PromptRecord, SignalShape,
};

struct Server {
    url: String,
    requests: Arc<AtomicUsize>,
}

/// Serves `/v1/hidden_states` from a mock model. Batches above
/// `max_batch` get 413, the text "boom" gets 500, an empty text list 400.
fn serve(mock: MockLm, max_batch: usize) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let (status, payload) = respond(&mock, &request_line, &body, max_batch);
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    Server { url, requests }
}

fn respond(
    mock: &MockLm,
    request_line: &str,
    body: &[u8],
    max_batch: usize,
) -> (&'static str, String) {
    if !request_line.starts_with("POST /v1/hidden_states ") {
        return ("404 Not Found", "{}".into());
    }
    let Ok(req) = serde_json::from_slice::<HiddenStatesRequest>(body) else {
        return ("400 Bad Request", "{}".into());
    };
    if req.texts.is_empty() || !req.last_token_only {
        return ("400 Bad Request", "{}".into());
    }
    if req.texts.len() > max_batch {
        return ("413 Payload Too Large", "{}".into());
    }
    if req.texts.iter().any(|t| t == "boom") {
        return ("500 Internal Server Error", "{}".into());
    }
    let states = req
        .texts
        .iter()
        .map(|t| {
            req.layers
                .iter()
                .map(|&l| {
                    mock.mock_extract(t, l)
                        .unwrap()
                        .into_iter()
                        .map(|x| x as f32)
                        .collect()
                })
                .collect()
        })
        .collect();
    let resp = HiddenStatesResponse {
        model: "served-mock".into(),
        dim: mock.dim().unwrap(),
        layers: req.layers,
        states,
    };
    ("200 OK", serde_json::to_string(&resp).unwrap())
}

fn mock() -> MockLm {
    MockLm::new(
        3,
        8,
        6,
        [2],
        1.0,
        SignalShape::Binary,
        Arc::new(|t: &str| (t.len() % 2) as i32),
    )
}

fn prompts(texts: &[&str]) -> Vec<PromptRecord> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| PromptRecord {
            id: 100 + i as u64,
            text: t.to_string(),
            label: (t.len() % 2) as i32,
        })
        .collect()
}

#[test]
fn served_states_match_direct_extraction() {
    let server = serve(mock(), 64);
    let http = HttpBackend::new(&server.url, Some(6));
    let p = prompts(&["alpha", "beta", "gamma", "delta", "epsilon"]);
    let opts = ExtractOptions {
        batch_size: 2,
        ..Default::default()
    };
    let remote = extract_records(&http, &p, &[1, 2, 5], &opts).unwrap();
    let local = extract_records(&mock(), &p, &[1, 2, 5], &opts).unwrap();
    assert_eq!(remote.records, local.records);
    assert_eq!(remote.header.model, "served-mock");
    assert_eq!(remote.header.dim, 8);
    assert_eq!(http.dim(), Some(8));
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn oversized_batches_are_split() {
    let server = serve(mock(), 2);
    let http = HttpBackend::new(&server.url, None);
    let p = prompts(&["a", "bb", "ccc", "dddd", "eeeee"]);
    let opts = ExtractOptions {
        batch_size: 5,
        ..Default::default()
    };
    let remote = extract_records(&http, &p, &[2], &opts).unwrap();
    let local = extract_records(&mock(), &p, &[2], &opts).unwrap();
    assert_eq!(remote.records, local.records);
}

#[test]
fn server_failure_names_the_example() {
    let server = serve(mock(), 64);
    let http = HttpBackend::new(&server.url, None);
    let p = prompts(&["fine", "boom", "also fine"]);
    let err = extract_records(&http, &p, &[1], &ExtractOptions::default()).unwrap_err();
    match err {
        ExtractError::Example { example_id, .. } => assert_eq!(example_id, 101),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn layer_bounds_checked_before_sending() {
    let server = serve(mock(), 64);
    let http = HttpBackend::new(&server.url, Some(6));
    let p = prompts(&["x"]);
    assert!(extract_records(&http, &p, &[6], &ExtractOptions::default()).is_err());
    assert_eq!(server.requests.load(Ordering::SeqCst), 0);
}

#[test]
fn unreachable_server_is_an_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let http = HttpBackend::new(&format!("http://127.0.0.1:{port}"), None);
    assert!(extract_records(&http, &prompts(&["x"]), &[1], &ExtractOptions::default()).is_err());
}
