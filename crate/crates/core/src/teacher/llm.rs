//! Client for an external teacher model: one JSON POST per example.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{validate_supervision, RawSupervision, RejectReason, SupervisionSource, TeacherError, TeacherSupervision};
use crate::corpus::{Example, FixType};
use crate::encode::behavior_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEndpointConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before retry `k` (0-based) is `backoff_unit_ms * 2^k`.
    pub backoff_unit_ms: u64,
    pub concurrency: usize,
    pub timeout_ms: u64,
}

impl Default for TeacherEndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080/generate".into(),
            model: "teacher".into(),
            token_env: Some("SYMDISTILL_TEACHER_TOKEN".into()),
            retries: 3,
            backoff_unit_ms: 1000,
            concurrency: 4,
            timeout_ms: 60_000,
        }
    }
}

impl TeacherEndpointConfig {
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (0..self.retries)
            .map(|k| Duration::from_millis(self.backoff_unit_ms << k))
            .collect()
    }
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

pub fn render_prompt(example: &Example) -> String {
    let fix_types: Vec<&str> = FixType::ALL.iter().map(|f| f.name()).collect();
    let tags: Vec<&str> = super::ReasoningTag::ALL.iter().map(|t| t.name()).collect();
    format!(
        "Program {id} contains exactly one bug.\n\
         Classify it and explain it with symbolic reasoning tags.\n\
         Fix types: {fix}\n\
         Tags: {tags}\n\
         Answer with a single JSON object {{\"fix_type\": ..., \"trace\": [...]}} using 1 to 4 distinct tags.\n\n\
         Source:\n{src}\n\
         Failing tests:\n{behavior}",
        id = example.id,
        fix = fix_types.join(", "),
        tags = tags.join(", "),
        src = example.buggy_source,
        behavior = behavior_text(&example.failing_behavior),
    )
}

/// Parses response text into a raw record. Accepts an optional Markdown
/// code fence around the object.
pub fn parse_response(text: &str) -> Result<RawSupervision, TeacherError> {
    let mut body = text.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    serde_json::from_str(body).map_err(|e| TeacherError::Parse(e.to_string()))
}

fn post_once(agent: &ureq::Agent, config: &TeacherEndpointConfig, prompt: &str) -> Result<String, String> {
    let body = Request {
        model: &config.model,
        prompt,
        temperature: 0.0,
    };
    let mut req = agent.post(&config.url);
    if let Some(var) = &config.token_env {
        if let Ok(token) = std::env::var(var) {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
    }
    let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(format!("HTTP {status}"));
    }
    let parsed: Response = resp
        .body_mut()
        .read_json()
        .map_err(|e| format!("bad response body: {e}"))?;
    Ok(parsed.text)
}

fn agent(config: &TeacherEndpointConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Sends the prompt with bounded retries and returns the response text.
fn fetch(agent: &ureq::Agent, config: &TeacherEndpointConfig, prompt: &str) -> Result<String, TeacherError> {
    let schedule = config.backoff_schedule();
    let mut last = String::new();
    for attempt in 0..=schedule.len() {
        if attempt > 0 {
            std::thread::sleep(schedule[attempt - 1]);
        }
        match post_once(agent, config, prompt) {
            Ok(text) => return Ok(text),
            Err(e) => last = e,
        }
    }
    Err(TeacherError::Transport {
        attempts: config.retries + 1,
        message: last,
    })
}

fn outcome(text: &str) -> Result<TeacherSupervision, RejectReason> {
    let raw = parse_response(text).map_err(|_| RejectReason::ParseError)?;
    validate_supervision(&raw, SupervisionSource::Llm)
}

/// Supervision for one example. A response that fails to parse or validate
/// comes back with `valid = false`; transport failures are errors.
pub fn llm_supervise(example: &Example, config: &TeacherEndpointConfig) -> Result<TeacherSupervision, TeacherError> {
    let text = fetch(&agent(config), config, &render_prompt(example))?;
    let raw = parse_response(&text)?;
    Ok(match validate_supervision(&raw, SupervisionSource::Llm) {
        Ok(s) => s,
        Err(_) => TeacherSupervision {
            fix_type: raw.fix_type.parse().unwrap_or(example.gold_fix_type),
            trace: super::ReasoningTrace { tags: Vec::new() },
            source: SupervisionSource::Llm,
            valid: false,
        },
    })
}

/// Queries every example with at most `config.concurrency` requests in
/// flight. Results are stored by example position, so the outcome does not
/// depend on completion order.
pub(crate) fn supervise_all(
    examples: &[Example],
    config: &TeacherEndpointConfig,
) -> Result<Vec<Result<TeacherSupervision, RejectReason>>, TeacherError> {
    if config.concurrency == 0 {
        return Err(TeacherError::Config("concurrency must be at least 1".into()));
    }
    let agent = agent(config);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String, TeacherError>>>> =
        examples.iter().map(|_| Mutex::new(None)).collect();
    let workers = config.concurrency.min(examples.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(example) = examples.get(i) else {
                    break;
                };
                let r = fetch(&agent, config, &render_prompt(example));
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(examples.len());
    for slot in slots {
        let text = slot.into_inner().expect("slot lock").expect("every slot filled")?;
        out.push(outcome(&text));
    }
    Ok(out)
}
