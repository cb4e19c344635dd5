//! Chat-completions client for an LLM judge.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Judge, JudgeSource, Judgment};
use crate::corpus::{format_rational, ReasoningExample};
use crate::error::{Error, Result};
use crate::prompts::judge_instruction;

pub const DEFAULT_API_KEY_ENV: &str = "NLFT_JUDGE_API_KEY";
const INSTRUCTION_VERSION: &str = "judge-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteJudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_concurrency: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub cache_dir: Option<String>,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        RemoteJudgeConfig {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_concurrency: 4,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub status: Option<u16>,
    pub message: String,
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "HTTP {s}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Sends one JSON POST and returns the parsed JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError>;
}

/// Blocking HTTPS transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Judge(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(body).expect("request serializes"));
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError {
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(TransportError {
                status: Some(status.as_u16()),
                message: text.chars().take(300).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError {
            status: Some(status.as_u16()),
            message: format!("reply is not JSON: {e}"),
        })
    }
}

pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    api_key: Option<String>,
    transport: Box<dyn Transport>,
}

impl RemoteJudge {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: RemoteJudgeConfig, transport: Box<dyn Transport>) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config("judge.endpoint is not set".into()));
        }
        if config.max_attempts == 0 {
            return Err(Error::Config("judge.max_attempts must be at least 1".into()));
        }
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(RemoteJudge {
            config,
            api_key,
            transport,
        })
    }

    pub fn with_http(config: RemoteJudgeConfig) -> Result<Self> {
        let transport = HttpTransport::new(Duration::from_secs(config.timeout_secs))?;
        Self::new(config, Box::new(transport))
    }

    pub fn config(&self) -> &RemoteJudgeConfig {
        &self.config
    }

    pub fn request_body(&self, example: &ReasoningExample) -> Value {
        let user = format!(
            "Problem:\n{}\n\nStudent's response:\n{}\n\nCorrect answer:\n{}\n(final answer {})",
            example.question,
            example.generated_output.as_deref().unwrap_or(""),
            example.standard_solution,
            format_rational(&example.standard_answer)
        );
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": judge_instruction()},
                {"role": "user", "content": user},
            ],
        })
    }
}

fn reply_content(reply: &Value) -> Option<&str> {
    reply
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
}

impl Judge for RemoteJudge {
    fn version(&self) -> String {
        format!("remote:{}:{INSTRUCTION_VERSION}", self.config.model)
    }

    fn source(&self) -> JudgeSource {
        JudgeSource::RemoteLlm
    }

    fn judge(&self, example: &ReasoningExample) -> Result<Judgment> {
        let body = self.request_body(example);
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                thread::sleep(Duration::from_millis(wait));
            }
            match self
                .transport
                .post_json(&self.config.endpoint, self.api_key.as_deref(), &body)
            {
                Ok(reply) => match reply_content(&reply) {
                    Some(text) => {
                        return Ok(Judgment::from_text(text, JudgeSource::RemoteLlm, self.key_for(example)))
                    }
                    None => last = "reply has no choices[0].message.content".into(),
                },
                Err(e) => {
                    // Client errors other than rate limiting will not improve on retry.
                    let fatal = matches!(e.status, Some(s) if (400..500).contains(&s) && s != 429);
                    last = e.to_string();
                    if fatal {
                        return Err(Error::JudgeExhausted {
                            endpoint: self.config.endpoint.clone(),
                            attempts: attempt + 1,
                            message: last,
                        });
                    }
                }
            }
            log::warn!(
                "judge attempt {} of {} failed: {last}",
                attempt + 1,
                self.config.max_attempts
            );
        }
        Err(Error::JudgeExhausted {
            endpoint: self.config.endpoint.clone(),
            attempts: self.config.max_attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{generate_synthetic, Dataset, Difficulty};
    use crate::judge::{judge_dataset, JudgeCache, Verdict};
    use crate::prompts::CORRECT_SENTINEL;

    struct Scripted {
        calls: Arc<AtomicUsize>,
        reply: std::result::Result<Value, TransportError>,
    }

    impl Transport for Scripted {
        fn post_json(&self, _: &str, _: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
            assert!(body["messages"][0]["content"].as_str().unwrap().contains("math expert"));
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.reply.clone()
        }
    }

    fn judge(reply: std::result::Result<Value, TransportError>) -> (RemoteJudge, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let cfg = RemoteJudgeConfig {
            endpoint: "https://judge.invalid/v1/chat/completions".into(),
            model: "m".into(),
            backoff_ms: 0,
            ..RemoteJudgeConfig::default()
        };
        let t = Scripted {
            calls: calls.clone(),
            reply,
        };
        (RemoteJudge::new(cfg, Box::new(t)).unwrap(), calls)
    }

    fn chat(content: &str) -> Value {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
    }

    fn incorrect_dataset(n: usize) -> Dataset {
        let mut d = generate_synthetic(8, n, &Difficulty::default());
        for e in &mut d.examples {
            e.generated_output = Some("#### 99999".into());
        }
        d
    }

    #[test]
    fn sentinel_reply_is_correct_verdict() {
        let (j, _) = judge(Ok(chat(&format!("{CORRECT_SENTINEL}"))));
        let e = &incorrect_dataset(1).examples[0];
        let got = j.judge(e).unwrap();
        assert_eq!(got.verdict, Verdict::Correct);
        assert_eq!(got.source, JudgeSource::RemoteLlm);
    }

    #[test]
    fn server_errors_exhaust_retries() {
        let (j, calls) = judge(Err(TransportError {
            status: Some(500),
            message: "boom".into(),
        }));
        let e = &incorrect_dataset(1).examples[0];
        let err = j.judge(e).unwrap_err();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        match &err {
            Error::JudgeExhausted { endpoint, attempts, .. } => {
                assert_eq!(*attempts, 3);
                assert!(endpoint.contains("judge.invalid"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("3 attempts") && msg.contains("judge.invalid"), "{msg}");
    }

    #[test]
    fn cache_hit_skips_transport() {
        let dir = tempfile::tempdir().unwrap();
        let cache = JudgeCache::open(dir.path()).unwrap();
        let (j, calls) = judge(Ok(chat("The second step is wrong.")));
        let d = incorrect_dataset(3);
        let (out, _) = judge_dataset(&d, &j, Some(&cache), 2).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let (again, stats) = judge_dataset(&d, &j, Some(&cache), 2).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(stats.judge_calls, 0);
        assert_eq!(out, again);
        assert_eq!(out.examples[0].judgment.as_deref(), Some("The second step is wrong."));
    }

    #[test]
    fn judge_saying_correct_does_not_flip_branch() {
        let (j, _) = judge(Ok(chat(CORRECT_SENTINEL)));
        let (out, stats) = judge_dataset(&incorrect_dataset(2), &j, None, 1).unwrap();
        assert_eq!(stats.disagreements, 2);
        assert!(out.examples.iter().all(|e| e.is_correct == Some(false)));
    }
}
