//! Shared test scaffolding: a minimal HTTP stub server for wire tests,
//! script builders that drive the engine through chosen coherence
//! trajectories, and independently implemented oracles (argmax selection,
//! brute-force hinge minimization) that deliberately avoid the library's
//! own math.

use cmrf_core::backend::{RoleTag, ScriptTable};
use cmrf_core::cam::FeaturizedPair;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

// ---------------------------------------------------------------------------
// stub HTTP server

/// One request the stub server saw, with header names lowercased.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        let name = name.to_lowercase();
        self.headers.iter().find(|(k, _)| *k == name).map(|(_, v)| v.as_str())
    }
}

/// A single-threaded HTTP/1.1 stub: serves a fixed list of planned
/// responses in order, one connection each, and records every request.
/// Connections after the plan runs out are refused (the listener closes).
pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    done: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts serving `responses` as (status, body) pairs on a fresh local
    /// port.
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().expect("stub addr");
        let requests: Arc<Mutex<Vec<RecordedRequest>>> = Arc::new(Mutex::new(Vec::new()));
        let done = Arc::new(AtomicBool::new(false));

        let thread_requests = requests.clone();
        let thread_done = done.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { break };
                if thread_done.load(Ordering::SeqCst) {
                    break;
                }
                if let Some(request) = read_request(&stream) {
                    thread_requests.lock().expect("request log").push(request);
                }
                let _ = write_response(&stream, status, &body);
            }
        });

        StubServer { addr, requests, done, handle: Some(handle) }
    }

    /// Base URL of the stub, e.g. `http://127.0.0.1:49152`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Everything received so far, in arrival order.
    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("request log").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.done.store(true, Ordering::SeqCst);
        // unblock a pending accept so the thread can exit
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn read_request(stream: &TcpStream) -> Option<RecordedRequest> {
    let mut reader = BufReader::new(stream);
    let mut start_line = String::new();
    reader.read_line(&mut start_line).ok()?;
    let mut parts = start_line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();

    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim().to_lowercase();
            let value = value.trim().to_string();
            if name == "content-length" {
                content_length = value.parse().unwrap_or(0);
            }
            headers.push((name, value));
        }
    }

    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body).ok()?;
    }
    Some(RecordedRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

fn write_response(mut stream: &TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Response",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

/// An OpenAI-style chat completion body whose single choice says `text`.
pub fn chat_reply_json(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 5}
    })
    .to_string()
}

// ---------------------------------------------------------------------------
// script builders

/// A `SCORE:`/`FLAW:` verdict reply.
pub fn verdict(score: u8, flaw: &str) -> String {
    format!("SCORE: {score}\nFLAW: {flaw}")
}

/// `count` verdict values in 0..=10 summing to exactly `sum`, largest
/// first: `rem` entries of `base+1` followed by entries of `base`.
pub fn verdicts_for_sum(count: usize, sum: u32) -> Vec<u8> {
    assert!(count > 0, "need at least one verdict");
    assert!(sum <= 10 * count as u32, "sum {sum} unreachable with {count} verdicts");
    let base = (sum / count as u32) as u8;
    let rem = (sum % count as u32) as usize;
    (0..count).map(|i| if i < rem { base + 1 } else { base }).collect()
}

/// Index of the weakest step among the first `n_steps` verdicts (earliest
/// on ties), 1-based — mirrors how the assessor localizes a flaw.
fn weakest_step(step_verdicts: &[u8]) -> usize {
    let mut best = 0usize;
    for (i, v) in step_verdicts.iter().enumerate() {
        if *v < step_verdicts[best] {
            best = i;
        }
    }
    best + 1
}

/// Builds a script that drives the engine through a chosen coherence
/// trajectory on an `n_steps`-step chain: iteration `k` is judged with
/// `n_steps + 1` verdicts summing to `sums[k]`, every flaw `consistent`,
/// so each refinement re-infers from the weakest step. The script lays
/// down exactly the calls the engine will make — decomposition once, a
/// full inference pass, then per refinement the re-answered suffix plus
/// synthesis, with a full set of verdicts after every pass.
pub fn series_script(n_steps: usize, sums: &[u32]) -> ScriptTable {
    assert!(n_steps >= 1 && !sums.is_empty());
    let mut table = ScriptTable::new();

    let lines: Vec<String> =
        (1..=n_steps).map(|i| format!("{i}. [T] scripted step {i}")).collect();
    table.push(RoleTag::Rdu, lines.join("\n"));

    for i in 1..=n_steps {
        table.push(RoleTag::Cie, format!("answer {i} (iteration 0)"));
    }
    table.push(RoleTag::Cie, "final answer (iteration 0)".to_string());

    let mut verdicts = verdicts_for_sum(n_steps + 1, sums[0]);
    for v in &verdicts {
        table.push(RoleTag::Cam, verdict(*v, "consistent"));
    }

    for (k, &sum) in sums.iter().enumerate().skip(1) {
        let from = weakest_step(&verdicts[..n_steps]);
        for i in from..=n_steps {
            table.push(RoleTag::Cie, format!("answer {i} (iteration {k})"));
        }
        table.push(RoleTag::Cie, format!("final answer (iteration {k})"));
        verdicts = verdicts_for_sum(n_steps + 1, sum);
        for v in &verdicts {
            table.push(RoleTag::Cam, verdict(*v, "consistent"));
        }
    }
    table
}

// ---------------------------------------------------------------------------
// independent oracles

/// Earliest index of the maximum, written naively on purpose.
pub fn argmax_earliest(values: &[f64]) -> usize {
    assert!(!values.is_empty());
    let mut best = 0usize;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn oracle_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn oracle_mean_loss(weights: &[f64], bias: f64, margin: f64, pairs: &[FeaturizedPair]) -> f64 {
    let mut total = 0.0;
    for pair in pairs {
        let zp: f64 =
            weights.iter().zip(pair.positive.0.iter()).map(|(w, x)| w * x).sum::<f64>() + bias;
        let zn: f64 =
            weights.iter().zip(pair.negative.0.iter()).map(|(w, x)| w * x).sum::<f64>() + bias;
        let slack = margin - (oracle_sigmoid(zp) - oracle_sigmoid(zn));
        total += slack.max(0.0);
    }
    total / pairs.len() as f64
}

/// Result of [`brute_force_hinge_search`].
#[derive(Debug, Clone)]
pub struct HingeSearchResult {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub loss: f64,
}

/// Gradient-free minimization of the pairwise hinge loss: seeded random
/// search over a box followed by greedy coordinate refinement. Implements
/// its own sigmoid and hinge so it can stand as an oracle against the
/// library's trainer.
pub fn brute_force_hinge_search(
    pairs: &[FeaturizedPair],
    margin: f64,
    seed: u64,
    samples: usize,
) -> HingeSearchResult {
    assert!(!pairs.is_empty());
    let dim = pairs[0].positive.0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best_w = vec![0.0; dim];
    let mut best_b = 0.0;
    let mut best_loss = oracle_mean_loss(&best_w, best_b, margin, pairs);

    for _ in 0..samples {
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: f64 = rng.random_range(-5.0..5.0);
        let loss = oracle_mean_loss(&w, b, margin, pairs);
        if loss < best_loss {
            best_loss = loss;
            best_w = w;
            best_b = b;
        }
    }

    // greedy coordinate descent with a shrinking step
    let mut step = 1.0;
    while step > 1e-4 && best_loss > 0.0 {
        let mut improved = false;
        for coord in 0..=dim {
            for direction in [step, -step] {
                let mut w = best_w.clone();
                let mut b = best_b;
                if coord < dim {
                    w[coord] += direction;
                } else {
                    b += direction;
                }
                let loss = oracle_mean_loss(&w, b, margin, pairs);
                if loss < best_loss {
                    best_loss = loss;
                    best_w = w;
                    best_b = b;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }

    HingeSearchResult { weights: best_w, bias: best_b, loss: best_loss }
}
