//! Client for an external multimodal evaluator: text-camera consistency
//! scoring and shot-style typing, with an offline fallback that runs the
//! geometric classifier instead.
//!
//! Wire format (OpenAI-compatible chat completions):
//! `POST {EVAL_BASE_URL}/chat/completions` with header
//! `Authorization: Bearer {EVAL_API_KEY}` and body
//! `{"model": EVAL_MODEL, "temperature": 0, "messages": [{"role": "system",
//! "content": template}, {"role": "user", "content": payload}]}`. The reply
//! text is read from `choices[0].message.content`.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geom::CameraTrajectory;
use crate::metrics::classify_shot;
use crate::motion::{forward_direction, MotionSequence, PELVIS};
use crate::synth::{DistanceClass, Elevation, Facing, Movement, ShotLabels, Viewpoint};
use crate::viz::PANELS;

pub const TCC_TEMPLATE: &str = include_str!("templates/tcc.txt");
pub const STYLE_TEMPLATE: &str = include_str!("templates/style.txt");
/// Points per serialized polyline.
pub const MAX_POINTS: usize = 64;
pub const DEFAULT_IN_FLIGHT: usize = 4;
pub const DEFAULT_BACKOFF: [Duration; 2] = [Duration::from_secs(1), Duration::from_secs(4)];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing configuration: {0}")]
    MissingConfig(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error("authentication rejected (status {0})")]
    AuthFailed(u16),
    #[error("malformed response: {raw:?}")]
    MalformedResponse { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Tcc,
    Style,
}

impl TemplateKind {
    pub fn template(&self) -> &'static str {
        match self {
            TemplateKind::Tcc => TCC_TEMPLATE,
            TemplateKind::Style => STYLE_TEMPLATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPrompt {
    pub kind: TemplateKind,
    /// Sent as the system message.
    pub system: String,
    /// Serialized trajectories followed by the text prompt.
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TccResult {
    pub score: u8,
    pub reason: String,
}

pub type StyleResult = ShotLabels;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalResult {
    Tcc(TccResult),
    Style(StyleResult),
}

/// Evenly spaced indices, at most `max` of them, always keeping both ends.
pub fn decimate(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max)
        .map(|i| ((i as f64) * (n - 1) as f64 / (max - 1) as f64).round() as usize)
        .collect()
}

fn pair(p: &Vector3<f64>, h: usize, v: usize) -> String {
    let f = |x: f64| {
        let s = format!("{x:.3}");
        if s == "-0.000" {
            "0.000".to_string()
        } else {
            s
        }
    };
    format!("({},{})", f(p[h]), f(p[v]))
}

/// Text form of the three orthographic views.
pub fn serialize_triview(camera: &CameraTrajectory, motion: &MotionSequence) -> String {
    let f = camera.len().min(motion.len());
    let idx = decimate(f, MAX_POINTS);
    let cam: Vec<Vector3<f64>> = idx.iter().map(|&i| camera.poses[i].position).collect();
    let subj: Vec<Vector3<f64>> = idx.iter().map(|&i| motion.frames[i][PELVIS]).collect();
    let dirs = |i: usize| {
        (
            camera.poses[i].forward(),
            forward_direction(&motion.frames[i]).unwrap_or_else(|_| Vector3::z()),
        )
    };
    let (cs, ss) = dirs(0);
    let (ce, se) = dirs(f.saturating_sub(1));
    let names = ["X", "Y", "Z"];
    let title = |id: &str| match id {
        "top" => "Top view",
        "front" => "Front view",
        _ => "Side view",
    };
    let mut out = String::new();
    for p in PANELS {
        let (h, v) = (p.horizontal, p.vertical);
        let _ = writeln!(out, "{} ({}–{}), meters:", title(p.id), names[h], names[v]);
        let line = |pts: &[Vector3<f64>]| {
            pts.iter()
                .map(|q| pair(q, h, v))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "camera trajectory (blue): {}", line(&cam));
        let _ = writeln!(out, "subject trajectory (orange): {}", line(&subj));
        let _ = writeln!(
            out,
            "start orientation (green): camera {} subject {}",
            pair(&cs, h, v),
            pair(&ss, h, v)
        );
        let _ = writeln!(
            out,
            "end orientation (red): camera {} subject {}",
            pair(&ce, h, v),
            pair(&se, h, v)
        );
    }
    out
}

pub fn build_prompt(
    kind: TemplateKind,
    camera: &CameraTrajectory,
    motion: &MotionSequence,
    text: &str,
) -> EvalPrompt {
    let mut user = String::from("Triple-view trajectories:\n");
    user.push_str(&serialize_triview(camera, motion));
    if kind == TemplateKind::Tcc {
        let _ = write!(user, "\nText prompt:\n{text}\n");
    }
    EvalPrompt {
        kind,
        system: kind.template().to_string(),
        user,
    }
}

fn malformed(raw: &str) -> EvalError {
    EvalError::MalformedResponse {
        raw: raw.to_string(),
    }
}

fn content_lines(raw: &str) -> Vec<&str> {
    raw.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .collect()
}

/// Score line then one reason line; nothing else.
pub fn parse_tcc(raw: &str) -> Result<TccResult, EvalError> {
    let lines = content_lines(raw);
    if lines.len() != 2 {
        return Err(malformed(raw));
    }
    let score: u8 = match lines[0].trim() {
        "0" => 0,
        "1" => 1,
        "2" => 2,
        _ => return Err(malformed(raw)),
    };
    Ok(TccResult {
        score,
        reason: lines[1].trim().to_string(),
    })
}

fn parse_distance(s: &str) -> Option<DistanceClass> {
    match s.to_ascii_lowercase().as_str() {
        "close-up" => Some(DistanceClass::CloseUp),
        "medium" | "medium shot" => Some(DistanceClass::Medium),
        "long" | "long shot" => Some(DistanceClass::Long),
        _ => None,
    }
}

fn parse_viewpoint(s: &str) -> Option<Viewpoint> {
    let (a, b) = s.split_once('+')?;
    Some(Viewpoint {
        facing: Facing::parse(a)?,
        elevation: Elevation::parse(b)?,
    })
}

/// Exactly the three prefixed lines, in order.
pub fn parse_style(raw: &str) -> Result<StyleResult, EvalError> {
    let lines = content_lines(raw);
    if lines.len() != 3 {
        return Err(malformed(raw));
    }
    fn field<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
        line.strip_prefix(prefix).map(str::trim)
    }
    let vp = field(lines[0], "Viewpoint:").and_then(parse_viewpoint);
    let dist = field(lines[1], "Distance:").and_then(parse_distance);
    let mv = field(lines[2], "Movement type:").and_then(Movement::parse);
    match (vp, dist, mv) {
        (Some(viewpoint), Some(distance), Some(movement)) => Ok(ShotLabels {
            viewpoint,
            distance,
            movement,
        }),
        _ => Err(malformed(raw)),
    }
}

pub fn parse_response(kind: TemplateKind, raw: &str) -> Result<EvalResult, EvalError> {
    match kind {
        TemplateKind::Tcc => parse_tcc(raw).map(EvalResult::Tcc),
        TemplateKind::Style => parse_style(raw).map(EvalResult::Style),
    }
}

/// The geometric classifier's labels; no network access.
pub fn evaluate_offline(camera: &CameraTrajectory, motion: &MotionSequence) -> StyleResult {
    classify_shot(camera, motion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    /// Waits before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
}

impl EndpointConfig {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            timeout: Duration::from_secs(120),
            backoff: DEFAULT_BACKOFF.to_vec(),
        }
    }

    /// Reads `EVAL_BASE_URL`, `EVAL_API_KEY` and `EVAL_MODEL`.
    pub fn from_env() -> Result<Self, EvalError> {
        let get = |k: &'static str| {
            std::env::var(k)
                .ok()
                .filter(|v| !v.is_empty())
                .ok_or(EvalError::MissingConfig(k))
        };
        Ok(Self::new(
            get("EVAL_BASE_URL")?,
            get("EVAL_API_KEY")?,
            get("EVAL_MODEL")?,
        ))
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub fn request_body(prompt: &EvalPrompt, model: &str) -> serde_json::Value {
    json!({
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
    })
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(EvalError),
}

fn attempt(agent: &ureq::Agent, cfg: &EndpointConfig, body: &serde_json::Value) -> Attempt {
    let resp = agent
        .post(&cfg.url())
        .header("Authorization", &format!("Bearer {}", cfg.api_key))
        .send_json(body);
    let mut resp = match resp {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    let status = resp.status().as_u16();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    match status {
        200..=299 => {
            let parsed: Option<String> = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| {
                    v.pointer("/choices/0/message/content")?
                        .as_str()
                        .map(str::to_string)
                });
            match parsed {
                Some(c) => Attempt::Done(c),
                None => Attempt::Fatal(malformed(&text)),
            }
        }
        401 | 403 => Attempt::Fatal(EvalError::AuthFailed(status)),
        408 | 429 | 500..=599 => Attempt::Retry(format!("status {status}")),
        _ => Attempt::Fatal(EvalError::Transport(format!("status {status}: {text}"))),
    }
}

/// Sends one prompt, retrying transport failures and transient statuses.
pub fn evaluate_remote(prompt: &EvalPrompt, cfg: &EndpointConfig) -> Result<EvalResult, EvalError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let body = request_body(prompt, &cfg.model);
    let mut last = String::new();
    for i in 0..=cfg.backoff.len() {
        if i > 0 {
            std::thread::sleep(cfg.backoff[i - 1]);
        }
        match attempt(&agent, cfg, &body) {
            Attempt::Done(text) => return parse_response(prompt.kind, &text),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(msg) => last = msg,
        }
    }
    Err(EvalError::Transport(last))
}

/// Evaluates prompts with at most `in_flight` concurrent requests; results
/// keep the input order.
pub fn evaluate_batch(
    prompts: &[EvalPrompt],
    cfg: &EndpointConfig,
    in_flight: usize,
) -> Vec<Result<EvalResult, EvalError>> {
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<EvalResult, EvalError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..in_flight.max(1).min(prompts.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let r = evaluate_remote(&prompts[i], cfg);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("every index visited")
        })
        .collect()
}
