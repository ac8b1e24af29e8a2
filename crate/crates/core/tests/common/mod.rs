//! Scripted chat-completions server for exercising the remote client.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use alive_core::backend::BackendConfig;

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(body: Value) -> Self {
        Self { status: 200, body, delay: Duration::ZERO }
    }

    pub fn status(status: u16, message: &str) -> Self {
        Self { status, body: json!({ "error": { "message": message } }), delay: Duration::ZERO }
    }

    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// Called with the request body and its 0-based arrival index.
pub type Script = Arc<dyn Fn(&Value, usize) -> Reply + Send + Sync>;

#[derive(Default)]
pub struct Seen {
    pub in_flight: AtomicUsize,
    pub high_water: AtomicUsize,
    pub count: AtomicUsize,
    pub bodies: Mutex<Vec<Value>>,
    pub auth: Mutex<Vec<Option<String>>>,
}

pub struct Stub {
    pub url: String,
    pub seen: Arc<Seen>,
}

impl Stub {
    pub fn requests(&self) -> Vec<Value> {
        self.seen.bodies.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.seen.count.load(Ordering::SeqCst)
    }

    pub fn high_water(&self) -> usize {
        self.seen.high_water.load(Ordering::SeqCst)
    }

    pub fn backend(&self) -> BackendConfig {
        BackendConfig {
            base_url: self.url.clone(),
            timeout_seconds: 10.0,
            retry_backoff_base_seconds: 0.001,
            ..BackendConfig::default()
        }
    }
}

struct App {
    script: Script,
    seen: Arc<Seen>,
}

async fn handle(State(app): State<Arc<App>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let now = app.seen.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    app.seen.high_water.fetch_max(now, Ordering::SeqCst);
    let idx = app.seen.count.fetch_add(1, Ordering::SeqCst);
    app.seen.bodies.lock().unwrap().push(body.clone());
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    app.seen.auth.lock().unwrap().push(auth);
    let reply = (app.script)(&body, idx);
    if !reply.delay.is_zero() {
        tokio::time::sleep(reply.delay).await;
    }
    app.seen.in_flight.fetch_sub(1, Ordering::SeqCst);
    (StatusCode::from_u16(reply.status).unwrap(), Json(reply.body))
}

/// Starts a server on an ephemeral port; it lives until the test process exits.
pub fn spawn(script: Script) -> Stub {
    let seen = Arc::new(Seen::default());
    let app = Arc::new(App { script, seen: seen.clone() });
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let router = Router::new().route("/v1/chat/completions", post(handle)).with_state(app);
            axum::serve(listener, router).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Stub { url: format!("http://{addr}"), seen }
}

pub fn prompt(body: &Value) -> &str {
    body.pointer("/messages/0/content").and_then(Value::as_str).unwrap_or("")
}

pub fn n(body: &Value) -> usize {
    body.get("n").and_then(Value::as_u64).unwrap_or(1) as usize
}

/// A response carrying `texts` as choices, indexed in order.
pub fn chat(texts: &[String]) -> Value {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "index": i, "message": { "role": "assistant", "content": t } }))
        .collect();
    json!({ "choices": choices })
}

/// The hidden answer every scripted task uses.
pub const TRUTH: &str = "ZEBRA7Q";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Constructor,
    Solver,
    Reviewer,
    Other,
}

pub fn kind(body: &Value) -> Kind {
    let p = prompt(body);
    if p.contains("Task Constructor") {
        Kind::Constructor
    } else if p.contains("Task Solver") {
        Kind::Solver
    } else if p.contains("Reasoning Reviewer") {
        Kind::Reviewer
    } else {
        Kind::Other
    }
}

/// Plays all three roles. Task `i` reads "variant i"; its solver answers
/// correctly on the first `i` of every n samples. Tasks listed in
/// `malformed` come back without a hidden truth. The reviewer scores 0.75
/// when the output it sees has the right answer, 0.25 otherwise.
pub fn roles(malformed: &'static [usize]) -> Script {
    Arc::new(move |body, _| {
        let n = n(body);
        let p = prompt(body);
        let texts: Vec<String> = match kind(body) {
            Kind::Constructor => (0..n)
                .map(|i| {
                    if malformed.contains(&i) {
                        format!("<Thought>t</Thought><Task>Name the animal, variant {i}: ____</Task>")
                    } else {
                        format!(
                            "<Thought>mask the animal</Thought><Task>Name the animal, variant {i}: ____</Task><Hidden_Truth>{TRUTH}</Hidden_Truth>"
                        )
                    }
                })
                .collect(),
            Kind::Solver => {
                let variant: usize = p
                    .split("variant ")
                    .nth(1)
                    .and_then(|s| s.split(':').next())
                    .and_then(|s| s.trim().parse().ok())
                    .unwrap_or(0);
                (0..n)
                    .map(|j| {
                        let a = if j < variant { TRUTH } else { "LION" };
                        format!("<Reasoning>it has stripes, so it might be {a}</Reasoning><Answer>{a}</Answer>")
                    })
                    .collect()
            }
            Kind::Reviewer => {
                let correct = p.contains(&format!("<Answer>{TRUTH}</Answer>"));
                let s = if correct { 0.75 } else { 0.25 };
                (0..n)
                    .map(|_| format!("<Analysis>checked</Analysis><Critique>Consider the stripes again.</Critique><Score>{s}</Score>"))
                    .collect()
            }
            Kind::Other => (0..n).map(|_| "pong".to_string()).collect(),
        };
        Reply::ok(chat(&texts))
    })
}
