use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::{json, Value};

use selconf_core::elicitation::*;
use selconf_core::records::Label;

type Responder = dyn Fn(usize, &Value) -> (StatusCode, Value) + Send + Sync;

struct Stub {
    calls: AtomicUsize,
    respond: Box<Responder>,
    delay: Duration,
    last_auth: Mutex<Option<String>>,
    last_body: Mutex<Option<Value>>,
}

async fn handle(State(stub): State<Arc<Stub>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = stub.calls.fetch_add(1, Ordering::SeqCst);
    *stub.last_auth.lock().unwrap() = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    *stub.last_body.lock().unwrap() = Some(body.clone());
    if !stub.delay.is_zero() {
        tokio::time::sleep(stub.delay).await;
    }
    let (status, v) = (stub.respond)(n, &body);
    (status, Json(v))
}

async fn serve_with_delay(delay: Duration, respond: impl Fn(usize, &Value) -> (StatusCode, Value) + Send + Sync + 'static) -> (String, Arc<Stub>) {
    let stub = Arc::new(Stub {
        calls: AtomicUsize::new(0),
        respond: Box::new(respond),
        delay,
        last_auth: Mutex::new(None),
        last_body: Mutex::new(None),
    });
    let app = Router::new()
        .route("/v1/chat/completions", post(handle))
        .with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), stub)
}

async fn serve(respond: impl Fn(usize, &Value) -> (StatusCode, Value) + Send + Sync + 'static) -> (String, Arc<Stub>) {
    serve_with_delay(Duration::ZERO, respond).await
}

fn completion(text: &str) -> Value {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]})
}

fn config(url: &str, max_retries: u32) -> ProviderConfig {
    let mut c = ProviderConfig::new(url, "stub-model");
    c.max_retries = max_retries;
    c.backoff_base_ms = 1;
    c.requests_per_minute = 600_000;
    c
}

fn prompt_text(body: &Value) -> String {
    body["messages"][0]["content"].as_str().unwrap().to_string()
}

fn question_line(prompt: &str) -> String {
    // The last "Question:" line is the real one; placeholder examples come first.
    prompt
        .lines()
        .rfind(|l| l.starts_with("Question: "))
        .unwrap()
        .trim_start_matches("Question: ")
        .to_string()
}

fn five_choices() -> Vec<String> {
    ["red", "green", "blue", "cyan", "white"].iter().map(|s| s.to_string()).collect()
}

/// Replies a model following each template's instructions would give,
/// written out by hand here rather than by the library.
fn handwritten_reply(template: &str, letter: char, conf: f64) -> String {
    match template {
        "best" => format!("Answer: {letter}\nConfidence: {conf}"),
        "percent" => format!("Answer: {letter}\nConfidence: {}%", conf * 100.0),
        "cot" => format!(
            "Option A seems plausible at first.\nAnswer: A\nConfidence: 0.1\nBut checking again, {letter} fits best.\n\
             Answer: {letter}\nConfidence: {conf}"
        ),
        _ => unreachable!(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn round_trip_recovers_every_injected_pair() {
    let grid = [0.0, 0.25, 0.5, 0.9, 1.0];
    let mut replies: HashMap<String, String> = HashMap::new();
    let mut items = Vec::new();
    for t in ["best", "percent", "cot"] {
        for (li, letter) in ('A'..='E').enumerate() {
            for &c in &grid {
                let q = format!("inject {t} {letter} {c}");
                replies.insert(q.clone(), handwritten_reply(t, letter, c));
                items.push((t, q, Label(li), c));
            }
        }
    }
    assert_eq!(items.len(), 75);
    let (url, stub) = serve(move |_, body| {
        let q = question_line(&prompt_text(body));
        (StatusCode::OK, completion(&replies[&q]))
    })
    .await;
    let client = ChatClient::new(config(&url, 0)).unwrap();
    let mut recovered = 0;
    for (t, q, label, c) in &items {
        let template = PromptTemplate::builtin(t).unwrap();
        let r = client.elicit(q, &five_choices(), &template).await.unwrap();
        assert_eq!((r.parsed_label, r.parsed_confidence, r.failure), (Some(*label), Some(*c), None), "{q}");
        recovered += 1;
    }
    assert_eq!(recovered, 75);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 75);
}

#[tokio::test(flavor = "multi_thread")]
async fn categorical_round_trip() {
    let (url, _) = serve(|_, body| {
        let q = question_line(&prompt_text(body));
        let (letter, phrase) = q.split_once(' ').unwrap();
        (StatusCode::OK, completion(&format!("Answer: {letter}\nConfidence: {phrase}")))
    })
    .await;
    let client = ChatClient::new(config(&url, 0)).unwrap();
    let t = PromptTemplate::categorical();
    for letter in ['A', 'B', 'C', 'D', 'E'] {
        for (phrase, score) in [("not sure", 0.3), ("sure", 0.7), ("very sure", 0.9)] {
            let r = client.elicit(&format!("{letter} {phrase}"), &five_choices(), &t).await.unwrap();
            assert_eq!(r.parsed_label, Label::from_letter(letter));
            assert_eq!(r.parsed_confidence, Some(score));
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn request_carries_model_temperature_and_prompt() {
    let (url, stub) = serve(|_, _| (StatusCode::OK, completion("Answer: B\nConfidence: 0.9"))).await;
    let client = ChatClient::new(config(&url, 0)).unwrap();
    let choices = vec!["x".to_string(), "y".to_string()];
    let r = client.elicit("Which?", &choices, &PromptTemplate::best()).await.unwrap();
    assert_eq!((r.parsed_label, r.parsed_confidence), (Some(Label(1)), Some(0.9)));
    assert_eq!(r.raw_text, "Answer: B\nConfidence: 0.9");
    let body = stub.last_body.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(prompt_text(&body), render_prompt("Which?", &choices, &PromptTemplate::best()).unwrap());
    assert!(body.get("logprobs").is_none());
    assert_eq!(*stub.last_auth.lock().unwrap(), None);
}

#[tokio::test(flavor = "multi_thread")]
async fn succeeds_after_two_server_errors() {
    let (url, stub) = serve(|n, _| {
        if n < 2 {
            (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "busy"}))
        } else {
            (StatusCode::OK, completion("Answer: A\nConfidence: 0.5"))
        }
    })
    .await;
    let client = ChatClient::new(config(&url, 3)).unwrap();
    let r = client.complete("hi").await.unwrap();
    assert_eq!(r.text, "Answer: A\nConfidence: 0.5");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn persistent_failure_issues_exactly_max_retries_plus_one_requests() {
    for max_retries in [0u32, 1, 3, 5] {
        let (url, stub) = serve(|_, _| (StatusCode::SERVICE_UNAVAILABLE, json!({}))).await;
        let client = ChatClient::new(config(&url, max_retries)).unwrap();
        let err = client.complete("hi").await.unwrap_err();
        match err {
            ElicitationError::Transport { attempts, status, .. } => {
                assert_eq!(attempts, max_retries + 1);
                assert_eq!(status, Some(503));
            }
            other => panic!("{other}"),
        }
        assert_eq!(stub.calls.load(Ordering::SeqCst), max_retries as usize + 1);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn rate_limited_is_retried_client_error_is_not() {
    let (url, stub) = serve(|n, _| {
        if n == 0 {
            (StatusCode::TOO_MANY_REQUESTS, json!({}))
        } else {
            (StatusCode::OK, completion("Answer: A\nConfidence: 0.5"))
        }
    })
    .await;
    ChatClient::new(config(&url, 2)).unwrap().complete("hi").await.unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 2);

    let (url, stub) = serve(|_, _| (StatusCode::BAD_REQUEST, json!({"error": "bad model"}))).await;
    let err = ChatClient::new(config(&url, 4)).unwrap().complete("hi").await.unwrap_err();
    assert!(matches!(err, ElicitationError::Transport { attempts: 1, status: Some(400), .. }), "{err}");
    assert!(err.to_string().contains("bad model"));
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn timeouts_and_refused_connections_are_retried() {
    let (url, stub) = serve_with_delay(Duration::from_millis(500), |_, _| (StatusCode::OK, completion("x"))).await;
    let mut c = config(&url, 1);
    c.request_timeout_secs = 0.05;
    let err = ChatClient::new(c).unwrap().complete("hi").await.unwrap_err();
    assert!(matches!(err, ElicitationError::Transport { attempts: 2, status: None, .. }), "{err}");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 2);

    // Bind then drop a listener to get a port nothing listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = config(&format!("http://127.0.0.1:{port}/v1/chat/completions"), 2);
    let err = ChatClient::new(c).unwrap().complete("hi").await.unwrap_err();
    assert!(matches!(err, ElicitationError::Transport { attempts: 3, status: None, .. }), "{err}");
    assert!(err.is_transport());
}

#[tokio::test(flavor = "multi_thread")]
async fn credentials_come_from_the_named_variable() {
    let (url, stub) = serve(|_, _| (StatusCode::OK, completion("Answer: A\nConfidence: 0.5"))).await;
    let mut c = config(&url, 0);
    c.auth_token_env_var_name = Some("SELCONF_STUB_TOKEN_UNSET".into());
    assert!(matches!(ChatClient::new(c.clone()), Err(ElicitationError::Config(_))));
    assert_eq!(stub.calls.load(Ordering::SeqCst), 0);

    std::env::set_var("SELCONF_STUB_TOKEN_SET", "s3cret");
    c.auth_token_env_var_name = Some("SELCONF_STUB_TOKEN_SET".into());
    ChatClient::new(c).unwrap().complete("hi").await.unwrap();
    assert_eq!(stub.last_auth.lock().unwrap().as_deref(), Some("Bearer s3cret"));
}

#[tokio::test(flavor = "multi_thread")]
async fn answer_probability_from_logprobs() {
    let (url, stub) = serve(|_, _| {
        let mut v = completion("Answer: C\nConfidence: 0.8");
        v["choices"][0]["logprobs"] = json!({"content": [
            {"token": "Answer", "logprob": -0.01},
            {"token": ":", "logprob": -0.01},
            {"token": " C", "logprob": 0.42f64.ln()},
            {"token": "\n", "logprob": -0.2},
        ]});
        (StatusCode::OK, v)
    })
    .await;
    let mut c = config(&url, 0);
    c.logprobs_requested = true;
    let client = ChatClient::new(c).unwrap();
    let r = client.elicit("q", &five_choices(), &PromptTemplate::best()).await.unwrap();
    assert!((r.choice_probability.unwrap() - 0.42).abs() < 1e-12);
    assert_eq!(r.probability_failure, None);
    assert_eq!(stub.last_body.lock().unwrap().as_ref().unwrap()["logprobs"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn unparseable_generation_is_data_not_an_error() {
    let (url, _) = serve(|_, _| (StatusCode::OK, completion("I would rather not say."))).await;
    let client = ChatClient::new(config(&url, 0)).unwrap();
    let r = client.elicit("q", &five_choices(), &PromptTemplate::best()).await.unwrap();
    assert_eq!(r.failure, Some(FailureCode::LabelMissing));
    assert_eq!((r.parsed_label, r.parsed_confidence), (None, None));

    let (url, _) = serve(|_, _| (StatusCode::OK, json!({"unexpected": true}))).await;
    let err = ChatClient::new(config(&url, 3)).unwrap().complete("q").await.unwrap_err();
    assert!(matches!(err, ElicitationError::Protocol(_)));
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_elicitation_keys_results_by_item() {
    let (url, _) = serve_with_delay(Duration::from_millis(30), move |_, body| {
        let q = question_line(&prompt_text(body));
        (StatusCode::OK, completion(&format!("Answer: {q}\nConfidence: 0.5")))
    })
    .await;
    let client = ChatClient::new(config(&url, 0)).unwrap();
    let items: Vec<QuestionItem> = (0..12)
        .map(|i| QuestionItem {
            example_id: format!("e{i}"),
            dataset_id: "d".into(),
            question: ["A", "B", "C"][i % 3].into(),
            choices: vec!["x".into(), "y".into(), "z".into()],
            gold: Label(0),
        })
        .collect();
    let t = PromptTemplate::best();
    let started = Instant::now();
    let results: Vec<_> = client.elicit_all(items, &t, 4).collect().await;
    assert_eq!(results.len(), 12);
    for (q, r) in results {
        let r = r.unwrap();
        assert_eq!(r.parsed_label.unwrap().letter().unwrap().to_string(), q.question);
    }
    // 12 requests of 30 ms each, four at a time: at least three waves, and
    // far less than running them one by one.
    let took = started.elapsed();
    assert!(took >= Duration::from_millis(90) && took < Duration::from_millis(300), "{took:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn request_rate_is_capped() {
    let (url, stub) = serve(|_, _| (StatusCode::OK, completion("Answer: A\nConfidence: 0.5"))).await;
    let mut c = config(&url, 0);
    c.requests_per_minute = 1200; // one every 50 ms
    let client = ChatClient::new(c).unwrap();
    let started = Instant::now();
    let items: Vec<QuestionItem> = (0..5)
        .map(|i| QuestionItem {
            example_id: format!("e{i}"),
            dataset_id: "d".into(),
            question: "q".into(),
            choices: vec!["x".into(), "y".into()],
            gold: Label(0),
        })
        .collect();
    let t = PromptTemplate::best();
    let n = client.elicit_all(items, &t, 5).count().await;
    assert_eq!(n, 5);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 5);
    assert!(started.elapsed() >= Duration::from_millis(195), "{:?}", started.elapsed());
}
