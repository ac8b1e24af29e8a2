mod common;

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use alive_core::backend::{BackendError, GenRequest, Generator, RemoteBackend};
use alive_core::promptio::Role;
use common::{chat, n, prompt, spawn, Reply};

fn req(tag: &str, prompt: &str, n: u32) -> GenRequest {
    GenRequest {
        role: Role::Solver,
        prompt: prompt.into(),
        n,
        temperature: 1.0,
        max_tokens: 32,
        tag: tag.into(),
    }
}

fn echo() -> common::Script {
    Arc::new(|body, _| {
        let p = prompt(body).to_string();
        Reply::ok(chat(&(0..n(body)).map(|i| format!("{p}#{i}")).collect::<Vec<_>>()))
    })
}

#[test]
fn wire_fields() {
    let stub = spawn(echo());
    let mut cfg = stub.backend();
    cfg.model_name = "m-1".into();
    cfg.request_logprobs = true;
    let b = RemoteBackend::new(cfg).unwrap();
    let r = b.generate(&req("a", "hello", 3)).unwrap();
    assert_eq!(r.tag, "a");
    assert_eq!(r.completions, vec!["hello#0", "hello#1", "hello#2"]);
    assert_eq!(r.retries, 0);
    let body = &stub.requests()[0];
    assert_eq!(body["model"], "m-1");
    assert_eq!(body["n"], 3);
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["max_tokens"], 32);
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["messages"][0]["role"], "user");
}

#[test]
fn api_key_from_env() {
    let stub = spawn(echo());
    let mut cfg = stub.backend();
    cfg.api_key_env = "ALIVE_TEST_KEY_WIRE".into();
    std::env::set_var("ALIVE_TEST_KEY_WIRE", "sekrit");
    RemoteBackend::new(cfg).unwrap().generate(&req("a", "x", 1)).unwrap();
    assert_eq!(stub.seen.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekrit"));
}

#[test]
fn concurrency_stays_under_limit() {
    let stub = spawn(Arc::new(|body, _| {
        Reply::ok(chat(&vec!["x".to_string(); n(body)])).after(Duration::from_millis(40))
    }));
    let mut cfg = stub.backend();
    cfg.max_in_flight = 3;
    let b = RemoteBackend::new(cfg).unwrap();
    let reqs: Vec<_> = (0..12).map(|i| req(&i.to_string(), "p", 1)).collect();
    assert!(b.generate_group(&reqs).iter().all(Result::is_ok));
    assert_eq!(stub.count(), 12);
    assert!(stub.high_water() <= 3, "high water {}", stub.high_water());
    assert!(stub.high_water() >= 2, "requests never overlapped");
}

#[test]
fn concurrency_limit_is_shared_across_callers() {
    let stub = spawn(Arc::new(|body, _| {
        Reply::ok(chat(&vec!["x".to_string(); n(body)])).after(Duration::from_millis(30))
    }));
    let mut cfg = stub.backend();
    cfg.max_in_flight = 2;
    let b = Arc::new(RemoteBackend::new(cfg).unwrap());
    std::thread::scope(|s| {
        for t in 0..3 {
            let b = b.clone();
            s.spawn(move || {
                let reqs: Vec<_> = (0..4).map(|i| req(&format!("{t}-{i}"), "p", 1)).collect();
                assert!(b.generate_group(&reqs).iter().all(Result::is_ok));
            });
        }
    });
    assert_eq!(stub.count(), 12);
    assert!(stub.high_water() <= 2);
}

#[test]
fn group_order_under_adversarial_delays() {
    // earlier requests are answered last
    let stub = spawn(Arc::new(|body, _| {
        let p = prompt(body).to_string();
        let k: u64 = p.trim_start_matches('q').parse().unwrap();
        Reply::ok(chat(&[format!("answer-{k}")])).after(Duration::from_millis(5 * (16 - k)))
    }));
    let mut cfg = stub.backend();
    cfg.max_in_flight = 8;
    let b = RemoteBackend::new(cfg).unwrap();
    let reqs: Vec<_> = (0..16).map(|i| req(&format!("t{i}"), &format!("q{i}"), 1)).collect();
    for _ in 0..3 {
        let out = b.generate_group(&reqs);
        for (i, r) in out.iter().enumerate() {
            let r = r.as_ref().unwrap();
            assert_eq!(r.tag, format!("t{i}"));
            assert_eq!(r.completions, vec![format!("answer-{i}")]);
        }
    }
}

#[test]
fn retries_then_succeeds() {
    let stub = spawn(Arc::new(|body, idx| {
        if idx < 2 {
            Reply::status(if idx == 0 { 503 } else { 429 }, "busy")
        } else {
            Reply::ok(chat(&vec!["ok".to_string(); n(body)]))
        }
    }));
    let mut cfg = stub.backend();
    cfg.retry_max = 2;
    let r = RemoteBackend::new(cfg).unwrap().generate(&req("a", "p", 1)).unwrap();
    assert_eq!(r.retries, 2);
    assert_eq!(stub.count(), 3);
}

#[test]
fn retry_budget_is_respected() {
    let stub = spawn(Arc::new(|_, _| Reply::status(500, "down")));
    let mut cfg = stub.backend();
    cfg.retry_max = 3;
    let err = RemoteBackend::new(cfg).unwrap().generate(&req("a", "p", 1)).unwrap_err();
    match err {
        BackendError::Exhausted { attempts, log } => {
            assert_eq!(attempts, 4);
            assert_eq!(log.len(), 4);
            assert!(log[0].contains("500"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.count(), 4);
}

#[test]
fn timeout_is_retryable() {
    let stub = spawn(Arc::new(|body, idx| {
        let r = Reply::ok(chat(&vec!["late".to_string(); n(body)]));
        if idx == 0 {
            r.after(Duration::from_millis(1500))
        } else {
            r
        }
    }));
    let mut cfg = stub.backend();
    cfg.timeout_seconds = 0.3;
    cfg.retry_max = 1;
    let r = RemoteBackend::new(cfg).unwrap().generate(&req("a", "p", 1)).unwrap();
    assert_eq!(r.retries, 1);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = spawn(Arc::new(|_, _| Reply::status(400, "model not found")));
    let err = RemoteBackend::new(stub.backend()).unwrap().generate(&req("a", "p", 1)).unwrap_err();
    assert_eq!(err, BackendError::Rejected { status: 400, message: "model not found".into() });
    assert_eq!(stub.count(), 1);
}

#[test]
fn short_completion_set() {
    let stub = spawn(Arc::new(|_, _| Reply::ok(chat(&["one".to_string(), "two".to_string()]))));
    let err = RemoteBackend::new(stub.backend()).unwrap().generate(&req("a", "p", 4)).unwrap_err();
    assert_eq!(err, BackendError::ShortCompletionSet { wanted: 4, got: 2 });
}

#[test]
fn malformed_body() {
    let stub = spawn(Arc::new(|_, _| Reply::ok(json!({ "choices": "nope" }))));
    let err = RemoteBackend::new(stub.backend()).unwrap().generate(&req("a", "p", 1)).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)));
}

#[test]
fn choices_reordered_by_index_and_logprobs_summed() {
    let stub = spawn(Arc::new(|_, _| {
        Reply::ok(json!({ "choices": [
            { "index": 1, "message": { "content": "b" }, "logprobs": { "content": [{ "logprob": -0.5 }, { "logprob": -0.25 }] } },
            { "index": 0, "message": { "content": "a" }, "logprobs": { "content": [{ "logprob": -1.0 }] } },
        ]}))
    }));
    let r = RemoteBackend::new(stub.backend()).unwrap().generate(&req("a", "p", 2)).unwrap();
    assert_eq!(r.completions, vec!["a", "b"]);
    assert_eq!(r.logprobs, Some(vec![-1.0, -0.75]));
}

#[test]
fn split_sampling_without_native_n() {
    let stub = spawn(echo());
    let mut cfg = stub.backend();
    cfg.native_n = false;
    let r = RemoteBackend::new(cfg).unwrap().generate(&req("a", "p", 4)).unwrap();
    assert_eq!(r.completions.len(), 4);
    assert_eq!(stub.count(), 4);
    assert!(stub.requests().iter().all(|b| b["n"] == 1));
}

#[test]
fn invalid_requests_never_reach_the_wire() {
    let stub = spawn(echo());
    let b = RemoteBackend::new(stub.backend()).unwrap();
    assert!(matches!(b.generate(&req("a", "p", 0)), Err(BackendError::InvalidRequest(_))));
    let mut r = req("a", "p", 1);
    r.temperature = -1.0;
    assert!(matches!(b.generate(&r), Err(BackendError::InvalidRequest(_))));
    assert_eq!(stub.count(), 0);
}

#[test]
fn group_failures_are_independent() {
    let stub = spawn(Arc::new(|body, _| {
        if prompt(body) == "bad" {
            Reply::status(422, "no")
        } else {
            Reply::ok(chat(&["fine".to_string()]))
        }
    }));
    let b = RemoteBackend::new(stub.backend()).unwrap();
    let out = b.generate_group(&[req("0", "good", 1), req("1", "bad", 1), req("2", "good", 1)]);
    assert!(out[0].is_ok() && out[2].is_ok());
    assert!(matches!(out[1], Err(BackendError::Rejected { status: 422, .. })));
}

#[test]
fn bad_config_rejected() {
    let cfg = alive_core::backend::BackendConfig { max_in_flight: 0, ..Default::default() };
    assert!(matches!(RemoteBackend::new(cfg), Err(BackendError::Config(_))));
}
