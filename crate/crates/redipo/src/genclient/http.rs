//! JSON-over-HTTP clients in the common chat-completions / embeddings shape.
//!
//! Every request goes through a per-endpoint in-flight semaphore and a retry
//! loop. Server errors and transport failures are retried with backoff;
//! client errors (4xx, malformed payloads) are not.

use parking_lot::{Condvar, Mutex};
use reqwest::blocking::Client;
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;

use super::{
    ClientError, Decoding, Embedder, EndpointSpec, RewardScorer, Rewriter, Role, SafetyJudge,
    Sampler, REWRITE_PROMPT_TEMPLATE, SAFETY_PROMPT_TEMPLATE,
};
use crate::types::SafetyLabel;

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock();
        while *permits == 0 {
            self.cv.wait(&mut permits);
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock() += 1;
        self.cv.notify_one();
    }
}

struct InFlightGuard<'a>(&'a Semaphore);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.release();
    }
}

/// Shared POST-with-retries plumbing for one endpoint.
struct HttpEndpoint {
    role: Role,
    spec: EndpointSpec,
    client: Client,
    api_key: Option<String>,
    semaphore: Semaphore,
}

impl HttpEndpoint {
    fn new(role: Role, spec: EndpointSpec) -> Result<Self, ClientError> {
        spec.validate().map_err(|message| ClientError::Payload {
            role,
            message: format!("invalid endpoint spec: {message}"),
        })?;
        let api_key = spec.api_key_env.as_ref().and_then(|var| {
            let value = std::env::var(var).ok();
            if value.is_none() {
                log::warn!("api key env var {var} for {role} is not set");
            }
            value
        });
        let client = Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport {
                role,
                attempts: 0,
                message: e.to_string(),
            })?;
        let semaphore = Semaphore::new(spec.max_in_flight);
        Ok(HttpEndpoint {
            role,
            spec,
            client,
            api_key,
            semaphore,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.spec.base_url.trim_end_matches('/'), path)
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        self.semaphore.acquire();
        let _guard = InFlightGuard(&self.semaphore);
        let url = self.url(path);
        let mut last_error = String::new();
        for attempt in 0..=self.spec.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << (attempt - 1).min(6)));
            }
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json().map_err(|e| ClientError::Payload {
                            role: self.role,
                            message: format!("invalid JSON body: {e}"),
                        });
                    }
                    if status.is_client_error() {
                        return Err(ClientError::Payload {
                            role: self.role,
                            message: format!("HTTP {status} from {url}"),
                        });
                    }
                    last_error = format!("HTTP {status} from {url}");
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(ClientError::Transport {
            role: self.role,
            attempts: self.spec.max_retries + 1,
            message: last_error,
        })
    }

    fn chat(&self, content: &str, decoding: &Decoding, n: usize) -> Result<Vec<String>, ClientError> {
        let body = json!({
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "max_tokens": decoding.max_tokens,
            "n": n,
        });
        let value = self.post_json("chat/completions", &body)?;
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Payload {
                role: self.role,
                message: "missing choices array".into(),
            })?;
        let mut texts = Vec::with_capacity(choices.len());
        for choice in choices {
            let content = choice.pointer("/message/content");
            match content {
                Some(Value::String(s)) => texts.push(s.clone()),
                // Empty completion: kept as an empty string, filtered later.
                Some(Value::Null) | None => texts.push(String::new()),
                Some(other) => {
                    return Err(ClientError::Payload {
                        role: self.role,
                        message: format!("non-string message content: {other}"),
                    })
                }
            }
        }
        Ok(texts)
    }
}

/// Chat-completions client used for the sampler, rewriter, and safety roles.
pub struct HttpChatClient {
    endpoint: HttpEndpoint,
}

impl HttpChatClient {
    pub fn new(role: Role, spec: EndpointSpec) -> Result<Self, ClientError> {
        Ok(HttpChatClient {
            endpoint: HttpEndpoint::new(role, spec)?,
        })
    }
}

impl Sampler for HttpChatClient {
    fn sample(
        &self,
        prompt: &str,
        n: usize,
        decoding: &Decoding,
    ) -> Result<Vec<String>, ClientError> {
        self.endpoint.chat(prompt, decoding, n)
    }
}

impl Rewriter for HttpChatClient {
    fn rewrite(&self, prompt: &str, draft: &str) -> Result<String, ClientError> {
        let content = REWRITE_PROMPT_TEMPLATE
            .replace("{prompt}", prompt)
            .replace("{response}", draft);
        let decoding = Decoding {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
        };
        let texts = self.endpoint.chat(&content, &decoding, 1)?;
        texts.into_iter().next().ok_or(ClientError::CountMismatch {
            requested: 1,
            returned: 0,
        })
    }
}

impl SafetyJudge for HttpChatClient {
    fn judge(&self, prompt: &str, response: &str) -> Result<SafetyLabel, ClientError> {
        let content = SAFETY_PROMPT_TEMPLATE
            .replace("{prompt}", prompt)
            .replace("{response}", response);
        let decoding = Decoding {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 4,
        };
        let texts = self.endpoint.chat(&content, &decoding, 1)?;
        let answer = texts.first().map(String::as_str).unwrap_or("");
        Ok(parse_safety_verdict(answer))
    }
}

/// Maps the judge's leading token to a label, failing closed on anything
/// that is not a clear yes/no.
pub fn parse_safety_verdict(answer: &str) -> SafetyLabel {
    let token: String = answer
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    if token.eq_ignore_ascii_case("yes") {
        SafetyLabel::Safe
    } else if token.eq_ignore_ascii_case("no") {
        SafetyLabel::Unsafe
    } else {
        log::warn!("safety judge returned {answer:?}; treating as unsafe");
        SafetyLabel::Unsafe
    }
}

pub struct HttpEmbedder {
    endpoint: HttpEndpoint,
}

impl HttpEmbedder {
    pub fn new(spec: EndpointSpec) -> Result<Self, ClientError> {
        Ok(HttpEmbedder {
            endpoint: HttpEndpoint::new(Role::Embed, spec)?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        let body = json!({
            "model": self.endpoint.spec.model_name,
            "input": texts,
        });
        let value = self.endpoint.post_json("embeddings", &body)?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Payload {
                role: Role::Embed,
                message: "missing data array".into(),
            })?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ClientError::Payload {
                    role: Role::Embed,
                    message: "missing embedding field".into(),
                })?
                .iter()
                .map(|x| {
                    x.as_f64().ok_or_else(|| ClientError::Payload {
                        role: Role::Embed,
                        message: "non-numeric embedding component".into(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }

    fn model_name(&self) -> &str {
        &self.endpoint.spec.model_name
    }
}

/// Reward-model scoring client: POST `{base_url}/score` with prompt and
/// response, expecting `{"score": <number>}` back.
pub struct HttpRewardScorer {
    endpoint: HttpEndpoint,
}

impl HttpRewardScorer {
    pub fn new(spec: EndpointSpec) -> Result<Self, ClientError> {
        Ok(HttpRewardScorer {
            endpoint: HttpEndpoint::new(Role::Reward, spec)?,
        })
    }
}

impl RewardScorer for HttpRewardScorer {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, ClientError> {
        let body = json!({
            "model": self.endpoint.spec.model_name,
            "prompt": prompt,
            "response": response,
        });
        let value = self.endpoint.post_json("score", &body)?;
        value
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| ClientError::Payload {
                role: Role::Reward,
                message: format!("non-numeric score payload: {value}"),
            })
    }
}

/// Builds the full HTTP endpoint bundle from per-role specs.
pub fn http_endpoints(
    specs: &std::collections::BTreeMap<Role, EndpointSpec>,
) -> Result<super::Endpoints, ClientError> {
    let get = |role: Role| {
        specs
            .get(&role)
            .cloned()
            .ok_or(ClientError::NotConfigured(role))
    };
    let base_sampler = Arc::new(HttpChatClient::new(Role::GenerateBase, get(Role::GenerateBase)?)?);
    let instruct_sampler = Arc::new(HttpChatClient::new(
        Role::GenerateInstruct,
        get(Role::GenerateInstruct)?,
    )?);
    let rewriter = Arc::new(HttpChatClient::new(Role::Rewrite, get(Role::Rewrite)?)?);
    let embedder = Arc::new(super::EmbeddingClient::new(Arc::new(HttpEmbedder::new(
        get(Role::Embed)?,
    )?)));
    let reward = Arc::new(HttpRewardScorer::new(get(Role::Reward)?)?);
    let safety = Arc::new(HttpChatClient::new(Role::Safety, get(Role::Safety)?)?);
    Ok(super::Endpoints {
        base_sampler,
        instruct_sampler,
        rewriter,
        embedder,
        reward,
        safety,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_parsing_is_fail_closed() {
        assert_eq!(parse_safety_verdict("Yes"), SafetyLabel::Safe);
        assert_eq!(parse_safety_verdict("yes, it is fine"), SafetyLabel::Safe);
        assert_eq!(parse_safety_verdict("No"), SafetyLabel::Unsafe);
        assert_eq!(parse_safety_verdict("No."), SafetyLabel::Unsafe);
        assert_eq!(parse_safety_verdict("Maybe"), SafetyLabel::Unsafe);
        assert_eq!(parse_safety_verdict(""), SafetyLabel::Unsafe);
    }
}
