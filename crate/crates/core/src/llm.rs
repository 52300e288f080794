//! Drives the prey with a chat-completion model: a fixed system prompt, a text
//! rendering of the scene per step, tolerant response parsing with step-length
//! clamping, retries with exponential backoff, and a request/response
//! transcript that can replay an episode offline.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, Observation};
use crate::error::{Error, Result};
use crate::hexgrid::{ArenaMap, Point};
use crate::trajio::Trajectory;

/// System message sent with every request.
pub const SYSTEM_PROMPT: &str = include_str!("../assets/prey_prompt.txt");
/// Maximum step length a move may command.
pub const MAX_STEP: f64 = 0.2;

const GRID_COLS: usize = 41;
const GRID_ROWS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmMove {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    #[serde(rename = "move")]
    pub moves: Vec<LlmMove>,
    pub thoughts: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPolicy {
    /// Shorten over-long moves to [`MAX_STEP`] and flag them.
    #[default]
    Clamp,
    /// Treat over-long moves as a retryable parse failure.
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub norm_policy: NormPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            token_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            temperature: 0.0,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            norm_policy: NormPolicy::Clamp,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.timeout_secs == 0 {
            return Err(Error::InvalidConfig("timeout_secs must be >= 1".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based) after a transport error.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
        Duration::from_millis(ms.min(self.backoff_max_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

/// System text plus the per-step scene description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn request(&self, cfg: &ClientConfig) -> ChatRequest {
        ChatRequest {
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: self.system.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: self.user.clone(),
                },
            ],
        }
    }
}

/// Builds the prompt for the current observation. The scene grid marks the
/// prey `R`, goal `G`, obstacles `#`, open floor `.`, and, only when visible,
/// the predator `B` with its capture area `o`.
pub fn build_prompt(obs: &Observation, map: &ArenaMap, capture_radius: f64) -> Prompt {
    let prey = obs.prey();
    let predator = obs.predator();
    let goal = map.center(map.goal());
    let col = |x: f64| ((x * (GRID_COLS - 1) as f64).round() as usize).min(GRID_COLS - 1);
    let row = |y: f64| (((1.0 - y) * (GRID_ROWS - 1) as f64).round() as usize).min(GRID_ROWS - 1);

    let mut grid = vec![vec![' '; GRID_COLS]; GRID_ROWS];
    for (r, line) in grid.iter_mut().enumerate() {
        for (c, ch) in line.iter_mut().enumerate() {
            let p = Point::new(
                c as f64 / (GRID_COLS - 1) as f64,
                1.0 - r as f64 / (GRID_ROWS - 1) as f64,
            );
            if !map.contains_point(p) {
                continue;
            }
            let open = map.nearest_cell(p).is_some_and(|cell| map.is_open(cell));
            *ch = if !open {
                '#'
            } else if predator.is_some_and(|q| q.dist(p) <= capture_radius) {
                'o'
            } else {
                '.'
            };
        }
    }
    grid[row(goal.y)][col(goal.x)] = 'G';
    if let Some(q) = predator {
        grid[row(q.y)][col(q.x)] = 'B';
    }
    grid[row(prey.y)][col(prey.x)] = 'R';

    let mut user = String::new();
    user.push_str(&format!("Your position: ({:.4}, {:.4})\n", prey.x, prey.y));
    match predator {
        Some(q) => user.push_str(&format!(
            "Predator position: ({:.4}, {:.4}); puffed area radius {:.2}\n",
            q.x, q.y, capture_radius
        )),
        None => user.push_str("Predator: not visible\n"),
    }
    user.push_str(&format!("Goal position: ({:.4}, {:.4})\n", goal.x, goal.y));
    user.push_str("Scene (R you, G goal, B predator, o puffed area, # obstacle, . open floor; top row y = 1.0, left column x = 0.0):\n");
    for (r, line) in grid.iter().enumerate() {
        let y = 1.0 - r as f64 / (GRID_ROWS - 1) as f64;
        user.push_str(&format!("{y:4.2} |{}|\n", line.iter().collect::<String>()));
    }
    user.push_str(&format!(
        "      x: 0.0{:>width$}\n",
        "1.0",
        width = GRID_COLS - 1
    ));
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        user,
    }
}

/// A validated move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedMove {
    pub target: Point,
    /// The commanded step exceeded the bound and was shortened.
    pub clamped: bool,
    pub thoughts: String,
}

/// Extracts the JSON object from `text` (prose, code fences and trailing
/// commas tolerated), requires exactly one move and enforces the step bound.
pub fn parse_response(text: &str, current: Point, policy: NormPolicy) -> Result<ParsedMove> {
    let start = text
        .find('{')
        .ok_or_else(|| Error::RetryableParse("no JSON object".into()))?;
    let end = text
        .rfind('}')
        .ok_or_else(|| Error::RetryableParse("no JSON object".into()))?;
    if end < start {
        return Err(Error::RetryableParse("no JSON object".into()));
    }
    let cleaned = sanitize_json(&text[start..=end]);
    let resp: LlmResponse =
        serde_json::from_str(&cleaned).map_err(|e| Error::RetryableParse(e.to_string()))?;
    let [mv] = resp.moves.as_slice() else {
        return Err(Error::RetryableParse(format!(
            "expected exactly 1 move, got {}",
            resp.moves.len()
        )));
    };
    if !mv.x.is_finite() || !mv.y.is_finite() {
        return Err(Error::RetryableParse("non-finite move".into()));
    }
    let target = Point::new(mv.x, mv.y);
    let step = target.sub(current);
    let len = step.norm();
    let (target, clamped) = if len > MAX_STEP {
        match policy {
            NormPolicy::Clamp => (current.add(step.scale(MAX_STEP / len)), true),
            NormPolicy::Reject => {
                return Err(Error::RetryableParse(format!(
                    "step length {len:.4} exceeds {MAX_STEP}"
                )))
            }
        }
    } else {
        (target, false)
    };
    Ok(ParsedMove {
        target,
        clamped,
        thoughts: resp.thoughts.replace('\n', " "),
    })
}

/// Drops commas that directly precede a closing bracket and escapes raw
/// control characters inside string literals, two slips chat models make.
fn sanitize_json(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            if c.is_control() && !escaped {
                out.push_str(&format!("\\u{:04x}", c as u32));
                continue;
            }
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Sends one chat request and returns the assistant message text.
pub trait ChatTransport {
    fn complete(&mut self, req: &ChatRequest) -> Result<String>;

    /// Whether failed calls should wait before retrying.
    fn live(&self) -> bool {
        true
    }
}

/// OpenAI-style chat completions over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &ClientConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            token,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&mut self, req: &ChatRequest) -> Result<String> {
        let mut call = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(t) = &self.token {
            call = call.set("Authorization", &format!("Bearer {t}"));
        }
        let body = serde_json::to_string(req)?;
        let resp = call
            .send_string(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let value: serde_json::Value = resp
            .into_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response lacks choices[0].message.content".into()))
    }
}

/// Plays back recorded responses, checking each request against the record.
pub struct ReplayTransport {
    script: VecDeque<(ChatRequest, std::result::Result<String, String>)>,
}

impl ReplayTransport {
    pub fn from_transcript(entries: &[TranscriptEntry]) -> Result<Self> {
        let mut script = VecDeque::new();
        let mut it = entries.iter();
        while let Some(first) = it.next() {
            let (
                TranscriptEntry::Request { body, .. },
                Some(TranscriptEntry::Response { content, error, .. }),
            ) = (first, it.next())
            else {
                return Err(Error::Parse {
                    line: 0,
                    msg: "transcript is not request/response pairs".into(),
                });
            };
            let reply = match (content, error) {
                (Some(c), _) => Ok(c.clone()),
                (None, Some(e)) => Err(e.clone()),
                (None, None) => Err("missing response".to_string()),
            };
            script.push_back((body.clone(), reply));
        }
        Ok(Self { script })
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&mut self, req: &ChatRequest) -> Result<String> {
        let (expected, reply) = self
            .script
            .pop_front()
            .ok_or_else(|| Error::Transport("transcript exhausted".into()))?;
        if &expected != req {
            return Err(Error::Aborted("request differs from transcript".into()));
        }
        reply.map_err(Error::Transport)
    }

    fn live(&self) -> bool {
        false
    }
}

/// One transcript line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TranscriptEntry {
    Request {
        step: usize,
        attempt: u32,
        body: ChatRequest,
    },
    Response {
        step: usize,
        attempt: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parsed: Option<ParsedMove>,
    },
}

pub fn write_transcript(path: impl AsRef<Path>, entries: &[TranscriptEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptEntry>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmEpisode {
    pub trajectory: Trajectory,
    pub transcript: Vec<TranscriptEntry>,
    /// Reason the episode stopped early, if it did.
    pub aborted: Option<String>,
    pub retries: u32,
    pub violations: u32,
}

/// Runs one episode: prompt, call (with retries), parse, step, until the
/// episode ends or a step exhausts its retries.
pub fn run_episode(
    transport: &mut dyn ChatTransport,
    env: &mut Env,
    cfg: &ClientConfig,
    id: u64,
    seed: u64,
) -> Result<LlmEpisode> {
    cfg.validate()?;
    let mut obs = env.reset(seed)?;
    let map = env.map().clone();
    let capture = env.config().capture_radius;
    let mut traj = Trajectory::begin(id, seed, "llm", &obs, map.center(env.predator_cell()));
    let mut transcript = Vec::new();
    let (mut retries, mut violations) = (0u32, 0u32);
    let mut step = 0usize;
    loop {
        let req = build_prompt(&obs, &map, capture).request(cfg);
        let mut attempt = 0u32;
        let parsed = loop {
            transcript.push(TranscriptEntry::Request {
                step,
                attempt,
                body: req.clone(),
            });
            let (entry, outcome) = match transport.complete(&req) {
                Ok(content) => match parse_response(&content, obs.prey(), cfg.norm_policy) {
                    Ok(p) => (
                        TranscriptEntry::Response {
                            step,
                            attempt,
                            content: Some(content),
                            error: None,
                            parsed: Some(p.clone()),
                        },
                        Ok(p),
                    ),
                    Err(e) => (
                        TranscriptEntry::Response {
                            step,
                            attempt,
                            content: Some(content),
                            error: Some(e.to_string()),
                            parsed: None,
                        },
                        Err((e, false)),
                    ),
                },
                Err(Error::Aborted(msg)) => return Err(Error::Aborted(msg)),
                Err(e) => (
                    TranscriptEntry::Response {
                        step,
                        attempt,
                        content: None,
                        error: Some(e.to_string()),
                        parsed: None,
                    },
                    Err((e, true)),
                ),
            };
            transcript.push(entry);
            match outcome {
                Ok(p) => break Some(p),
                Err(_) if attempt >= cfg.max_retries => break None,
                Err((_, transport_err)) => {
                    attempt += 1;
                    retries += 1;
                    if transport_err && transport.live() {
                        std::thread::sleep(cfg.backoff(attempt));
                    }
                }
            }
        };
        let Some(mv) = parsed else {
            let reason = format!(
                "step {step}: no valid move after {} retries",
                cfg.max_retries
            );
            return Ok(LlmEpisode {
                trajectory: traj,
                transcript,
                aborted: Some(reason),
                retries,
                violations,
            });
        };
        violations += mv.clamped as u32;
        let action = Action::Target {
            x: mv.target.x.clamp(0.0, 1.0),
            y: mv.target.y.clamp(0.0, 1.0),
            wait: 0.0,
        };
        let res = env.step(action)?;
        traj.record(action, &res);
        step += 1;
        if res.terminated || res.truncated {
            return Ok(LlmEpisode {
                trajectory: traj,
                transcript,
                aborted: None,
                retries,
                violations,
            });
        }
        obs = res.obs;
    }
}

/// Re-runs an episode from its transcript without any network access.
pub fn replay_episode(
    entries: &[TranscriptEntry],
    env: &mut Env,
    cfg: &ClientConfig,
    id: u64,
    seed: u64,
) -> Result<LlmEpisode> {
    let mut transport = ReplayTransport::from_transcript(entries)?;
    run_episode(&mut transport, env, cfg, id, seed)
}

/// What the stub server sends back for one request.
#[derive(Clone, Debug, PartialEq)]
pub enum StubReply {
    Content(String),
    Status(u16),
}

pub type StubResponder = Box<dyn FnMut(&ChatRequest) -> StubReply + Send>;

/// Local chat-completions endpoint for offline runs and tests.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    url: String,
    requests: Arc<Mutex<usize>>,
}

impl StubServer {
    pub fn start(mut responder: StubResponder) -> Result<Self> {
        let server = Arc::new(
            tiny_http::Server::http("127.0.0.1:0").map_err(|e| Error::Transport(e.to_string()))?,
        );
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport("stub server has no IP address".into()))?;
        let url = format!("http://{addr}/v1/chat/completions");
        let requests = Arc::new(Mutex::new(0));
        let (srv, count) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                *count.lock().expect("counter lock") += 1;
                let reply = match serde_json::from_str::<ChatRequest>(&body) {
                    Ok(chat) => responder(&chat),
                    Err(_) => StubReply::Status(400),
                };
                let response = match reply {
                    StubReply::Content(text) => {
                        let payload = serde_json::json!({
                            "object": "chat.completion",
                            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
                        });
                        tiny_http::Response::from_string(payload.to_string()).with_header(
                            tiny_http::Header::from_bytes("Content-Type", "application/json")
                                .expect("static header"),
                        )
                    }
                    StubReply::Status(code) => {
                        tiny_http::Response::from_string("stub error").with_status_code(code)
                    }
                };
                let _ = req.respond(response);
            }
        });
        Ok(Self {
            server,
            handle: Some(handle),
            url,
            requests,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn request_count(&self) -> usize {
        *self.requests.lock().expect("counter lock")
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Reads the prey position line written by [`build_prompt`].
pub fn position_from_prompt(req: &ChatRequest) -> Option<Point> {
    let user = &req.messages.iter().find(|m| m.role == "user")?.content;
    let line = user
        .lines()
        .find_map(|l| l.strip_prefix("Your position: ("))?;
    let (x, rest) = line.split_once(", ")?;
    let y = rest.strip_suffix(')')?;
    Some(Point::new(x.parse().ok()?, y.parse().ok()?))
}

/// Stub policy: step `step_len` straight toward `goal`.
pub fn goal_seeker(goal: Point, step_len: f64) -> StubResponder {
    Box::new(move |req| {
        let Some(p) = position_from_prompt(req) else {
            return StubReply::Content("no position".into());
        };
        let d = goal.sub(p);
        let n = d.norm();
        let t = if n <= step_len {
            goal
        } else {
            p.add(d.scale(step_len / n))
        };
        StubReply::Content(format!(
            "```json\n{{\"move\": [{{\"x\": {:.6}, \"y\": {:.6}}}], \"thoughts\": \"straight to the goal\"}}\n```",
            t.x, t.y
        ))
    })
}
