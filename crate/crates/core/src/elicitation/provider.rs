//! Chat-completion client with retries, backoff and a request-rate cap.
//!
//! Provider config is a TOML file:
//!
//! ```toml
//! endpoint_url = "https://api.example.com/v1/chat/completions"
//! model_name = "some-model"
//! temperature = 0.0              # default 0
//! max_tokens = 512               # default 512
//! auth_token_env_var_name = "API_KEY"   # optional; sent as a bearer token
//! request_timeout_secs = 60.0    # default 60
//! max_retries = 3                # default 3; total requests <= max_retries + 1
//! backoff_base_ms = 500          # default 500; doubles per retry
//! max_backoff_ms = 30000         # default 30000
//! logprobs_requested = false     # default false
//! requests_per_minute = 60       # default 60
//! seed = 7                       # optional; forwarded to endpoints that accept it
//! ```

use std::num::NonZeroU32;
use std::path::Path;
use std::time::Duration;

use futures::stream::{self, Stream, StreamExt};
use governor::{DefaultDirectRateLimiter, Quota, RateLimiter};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::logprob::answer_probability;
use super::parse::parse_answer_confidence;
use super::prompt::{render_prompt, PromptTemplate};
use super::{ElicitationError, ElicitationResult, FailureCode, QuestionItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub auth_token_env_var_name: Option<String>,
    #[serde(default = "defaults::timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "defaults::retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "defaults::max_backoff")]
    pub max_backoff_ms: u64,
    #[serde(default)]
    pub logprobs_requested: bool,
    #[serde(default = "defaults::rpm")]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

mod defaults {
    pub fn max_tokens() -> u32 {
        512
    }
    pub fn timeout() -> f64 {
        60.0
    }
    pub fn retries() -> u32 {
        3
    }
    pub fn backoff() -> u64 {
        500
    }
    pub fn max_backoff() -> u64 {
        30_000
    }
    pub fn rpm() -> u32 {
        60
    }
}

impl ProviderConfig {
    /// Defaults for everything but the endpoint and model.
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ProviderConfig {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: defaults::max_tokens(),
            auth_token_env_var_name: None,
            request_timeout_secs: defaults::timeout(),
            max_retries: defaults::retries(),
            backoff_base_ms: defaults::backoff(),
            max_backoff_ms: defaults::max_backoff(),
            logprobs_requested: false,
            requests_per_minute: defaults::rpm(),
            seed: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ElicitationError> {
        let cfg: ProviderConfig = toml::from_str(s).map_err(|e| ElicitationError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ElicitationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ElicitationError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ElicitationError> {
        let bad = |m: String| Err(ElicitationError::Config(m));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return bad(format!("request_timeout_secs must be positive, got {}", self.request_timeout_secs));
        }
        if self.requests_per_minute == 0 {
            return bad("requests_per_minute must be positive".into());
        }
        if reqwest::Url::parse(&self.endpoint_url).is_err() {
            return bad(format!("endpoint_url is not a URL: {}", self.endpoint_url));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self.backoff_base_ms.saturating_mul(1u64 << retry.min(32));
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }
}

/// Text of one completion, with per-token log-probabilities when the endpoint
/// returned them.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<(String, f64)>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

pub struct ChatClient {
    config: ProviderConfig,
    http: reqwest::Client,
    token: Option<String>,
    limiter: DefaultDirectRateLimiter,
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatClient {
    /// Resolves the credential up front, so a missing variable fails here and
    /// never after a request has gone out.
    pub fn new(config: ProviderConfig) -> Result<Self, ElicitationError> {
        config.validate()?;
        let token = match &config.auth_token_env_var_name {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.trim().is_empty() => Some(v),
                _ => {
                    return Err(ElicitationError::Config(format!(
                        "environment variable {var} is not set or empty"
                    )))
                }
            },
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| ElicitationError::Config(e.to_string()))?;
        // One request per interval with no burst: the cap holds over any window.
        let rpm = NonZeroU32::new(config.requests_per_minute).expect("validated");
        let limiter = RateLimiter::direct(Quota::per_minute(rpm).allow_burst(NonZeroU32::MIN));
        Ok(ChatClient {
            config,
            http,
            token,
            limiter,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        if self.config.logprobs_requested {
            body["logprobs"] = json!(true);
        }
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    /// One logical completion. Connection failures, timeouts, 429 and 5xx are
    /// retried with exponential backoff; at most `max_retries + 1` requests go out.
    pub async fn complete(&self, prompt: &str) -> Result<Completion, ElicitationError> {
        let body = self.request_body(prompt);
        let attempts = self.config.max_retries + 1;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                tokio::time::sleep(self.config.backoff(attempt - 1)).await;
            }
            self.limiter.until_ready().await;
            let mut req = self.http.post(&self.config.endpoint_url).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "request failed");
                    last_status = None;
                    last_message = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text().await {
                Ok(t) => t,
                Err(e) => {
                    last_status = Some(status.as_u16());
                    last_message = e.to_string();
                    continue;
                }
            };
            if status.is_success() {
                return parse_completion(&text);
            }
            last_status = Some(status.as_u16());
            last_message = truncate(&text, 300).to_string();
            if !(status.is_server_error() || status.as_u16() == 429) {
                return Err(ElicitationError::Transport {
                    attempts: attempt + 1,
                    status: last_status,
                    message: last_message,
                });
            }
            tracing::warn!(attempt, status = status.as_u16(), "retryable status");
        }
        Err(ElicitationError::Transport {
            attempts,
            status: last_status,
            message: last_message,
        })
    }

    /// Render, complete, parse. Unparseable text is reported in the result,
    /// not as an error.
    pub async fn elicit(
        &self,
        question: &str,
        choices: &[String],
        template: &PromptTemplate,
    ) -> Result<ElicitationResult, ElicitationError> {
        let prompt = render_prompt(question, choices, template)?;
        let completion = self.complete(&prompt).await?;
        Ok(interpret(completion, choices.len(), template, self.config.logprobs_requested))
    }

    /// Elicits every item with at most `concurrency` requests in flight.
    /// Results arrive in completion order, tagged with their item.
    pub fn elicit_all<'a>(
        &'a self,
        items: Vec<QuestionItem>,
        template: &'a PromptTemplate,
        concurrency: usize,
    ) -> impl Stream<Item = (QuestionItem, Result<ElicitationResult, ElicitationError>)> + 'a {
        stream::iter(items)
            .map(move |q| async move {
                let r = self.elicit(&q.question, &q.choices, template).await;
                (q, r)
            })
            .buffer_unordered(concurrency.max(1))
    }
}

fn parse_completion(body: &str) -> Result<Completion, ElicitationError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| ElicitationError::Protocol(format!("bad response body: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ElicitationError::Protocol("response has no choices".into()))?;
    Ok(Completion {
        text: choice.message.content.unwrap_or_default(),
        token_logprobs: choice
            .logprobs
            .and_then(|l| l.content)
            .map(|toks| toks.into_iter().map(|t| (t.token, t.logprob)).collect()),
    })
}

/// Parse a completion into an [`ElicitationResult`].
pub fn interpret(
    completion: Completion,
    n_choices: usize,
    template: &PromptTemplate,
    want_probability: bool,
) -> ElicitationResult {
    let parsed = parse_answer_confidence(&completion.text, n_choices, template);
    let (choice_probability, probability_failure) = if want_probability {
        let p = match (parsed.label, &completion.token_logprobs) {
            (Some(label), Some(toks)) => answer_probability(toks, label),
            _ => Err(FailureCode::LogprobMissing),
        };
        match p {
            Ok(p) => (Some(p), None),
            Err(code) => (None, Some(code)),
        }
    } else {
        (None, None)
    };
    ElicitationResult {
        raw_text: completion.text,
        parsed_label: parsed.label,
        parsed_confidence: parsed.confidence,
        choice_probability,
        failure: parsed.failure,
        probability_failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_defaults_and_validation() {
        let c = ProviderConfig::from_toml_str("endpoint_url = \"http://localhost:1/v1\"\nmodel_name = \"m\"").unwrap();
        assert_eq!(c, ProviderConfig::new("http://localhost:1/v1", "m"));
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.requests_per_minute, 60);

        let bad = [
            "endpoint_url = \"http://x\"\nmodel_name = \"m\"\ntemperature = -0.5",
            "endpoint_url = \"http://x\"\nmodel_name = \"m\"\nmax_retries = -1",
            "endpoint_url = \"http://x\"\nmodel_name = \"m\"\nrequests_per_minute = 0",
            "endpoint_url = \"not a url\"\nmodel_name = \"m\"",
            "endpoint_url = \"http://x\"\nmodel_name = \"m\"\napi_key = \"inline secrets are not accepted\"",
            "model_name = \"m\"",
        ];
        for b in bad {
            assert!(matches!(ProviderConfig::from_toml_str(b), Err(ElicitationError::Config(_))), "{b}");
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let mut c = ProviderConfig::new("http://x", "m");
        c.backoff_base_ms = 100;
        c.max_backoff_ms = 500;
        let got: Vec<u128> = (0..5).map(|k| c.backoff(k).as_millis()).collect();
        assert_eq!(got, [100, 200, 400, 500, 500]);
        assert_eq!(c.backoff(200).as_millis(), 500);
    }

    #[test]
    fn missing_credential_is_a_config_error() {
        let mut c = ProviderConfig::new("http://127.0.0.1:9", "m");
        c.auth_token_env_var_name = Some("SELCONF_TEST_SURELY_UNSET_VAR".into());
        assert!(matches!(ChatClient::new(c), Err(ElicitationError::Config(m)) if m.contains("SELCONF_TEST_SURELY_UNSET_VAR")));
    }

    #[test]
    fn request_body_shape() {
        let mut c = ProviderConfig::new("http://x", "m");
        c.seed = Some(3);
        c.logprobs_requested = true;
        let body = ChatClient::new(c).unwrap().request_body("hi");
        assert_eq!(
            body,
            json!({"model": "m", "messages": [{"role": "user", "content": "hi"}],
                   "temperature": 0.0, "max_tokens": 512, "logprobs": true, "seed": 3})
        );
    }

    #[test]
    fn response_parsing() {
        let c = parse_completion(
            r#"{"choices":[{"message":{"content":"Answer: B"},"logprobs":{"content":[{"token":"B","logprob":-0.1}]}}]}"#,
        )
        .unwrap();
        assert_eq!(c.text, "Answer: B");
        assert_eq!(c.token_logprobs, Some(vec![("B".to_string(), -0.1)]));
        assert!(matches!(parse_completion("{}"), Err(ElicitationError::Protocol(_))));
        assert!(matches!(parse_completion(r#"{"choices":[]}"#), Err(ElicitationError::Protocol(_))));
    }

    #[test]
    fn interpret_sets_probability_failure() {
        let t = PromptTemplate::best();
        let c = Completion {
            text: "Answer: B\nConfidence: 0.9".into(),
            token_logprobs: None,
        };
        let r = interpret(c.clone(), 4, &t, true);
        assert_eq!(r.failure, None);
        assert_eq!(r.probability_failure, Some(FailureCode::LogprobMissing));
        let r = interpret(c, 4, &t, false);
        assert_eq!((r.choice_probability, r.probability_failure), (None, None));
    }
}
