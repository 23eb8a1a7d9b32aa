#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use chrono::{Duration, TimeZone, Utc};
use cues_core::backend::ScriptedBackend;
use cues_core::prompt::{default_generation_params, default_template};
use cues_core::session::{start_session, SequentialIds, SessionConfig, SteppingClock};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn scripted_backend() -> ScriptedBackend {
    ScriptedBackend::from_file(&fixture("scripted_fixture.jsonl")).expect("scripted fixture loads")
}

pub fn golden_script() -> Vec<String> {
    read_fixture("golden_script.txt").lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()
}

pub fn deterministic_config() -> SessionConfig {
    let mut config = SessionConfig::new(default_template(), default_generation_params(), Arc::new(scripted_backend()));
    config.clock =
        Arc::new(SteppingClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(), Duration::seconds(1)));
    config.ids = Arc::new(SequentialIds::new("session"));
    config
}

/// Runs the golden script through a file-backed session and returns the
/// bytes written to disk.
pub fn run_golden_session() -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let mut config = deterministic_config();
    config.transcript_path = Some(path.clone());
    let mut session = start_session(config).expect("session starts");
    for message in golden_script() {
        session.step(&message).expect("scripted step succeeds");
    }
    let on_disk = std::fs::read_to_string(&path).unwrap();
    assert_eq!(on_disk, session.transcript().to_jsonl(), "appended file diverged from in-memory transcript");
    on_disk
}

/// Plain dynamic-programming edit distance over chars.
pub fn naive_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    dp[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    dp[a.len()][b.len()]
}

/// Reference statistics straight from the definitions: per-category mean
/// and n-1 sample SD over the bits, total mean over all cells and total SD
/// over per-row means.
pub struct ReferenceStats {
    pub means: [f64; 4],
    pub sds: [f64; 4],
    pub total_mean: f64,
    pub total_sd: f64,
}

pub fn reference_stats(rows: &[[u8; 4]]) -> ReferenceStats {
    let n = rows.len() as f64;
    let sd = |xs: &[f64]| -> f64 {
        if xs.len() < 2 {
            return 0.0;
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
        (ss / (xs.len() as f64 - 1.0)).sqrt()
    };
    let mut means = [0.0; 4];
    let mut sds = [0.0; 4];
    for c in 0..4 {
        let col: Vec<f64> = rows.iter().map(|r| r[c] as f64).collect();
        means[c] = col.iter().sum::<f64>() / n;
        sds[c] = sd(&col);
    }
    let row_means: Vec<f64> = rows.iter().map(|r| r.iter().map(|&b| b as f64).sum::<f64>() / 4.0).collect();
    let total_mean = rows.iter().flat_map(|r| r.iter()).map(|&b| b as f64).sum::<f64>() / (4.0 * n);
    ReferenceStats { means, sds, total_mean, total_sd: sd(&row_means) }
}

/// What the stub received for one request.
#[derive(Debug, Clone)]
pub struct Captured {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Captured {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// One-shot HTTP server on 127.0.0.1 that answers each incoming request
/// with the next canned `(status, body)` and records what it was sent.
pub struct StubServer {
    pub base_url: String,
    pub captured: Arc<Mutex<Vec<Captured>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let captured = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&captured);
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .and_then(|(_, v)| v.parse::<usize>().ok())
                    .unwrap_or(0);
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                sink.lock().unwrap().push(Captured {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let mut stream = reader.into_inner();
                let reply = format!(
                    "HTTP/1.1 {status} Stub\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { base_url, captured, handle: Some(handle) }
    }

    pub fn requests(&self) -> Vec<Captured> {
        self.captured.lock().unwrap().clone()
    }

    pub fn join(mut self) -> Vec<Captured> {
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
        self.requests()
    }
}

pub fn completion_body(text: &str) -> String {
    serde_json::json!({"choices": [{"text": text, "index": 0}]}).to_string()
}
