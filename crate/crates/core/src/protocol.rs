//! Newline-delimited JSON protocol shared by external scorers and generation backends.
//!
//! Every request line is answered by exactly one response line. The client side
//! lives here together with a deterministic mock server used by the CLI's
//! `mock-server` command and by the tests.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImageToken {
    pub id: usize,
    pub asset: String,
    pub mask: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTextToken {
    pub id: usize,
    pub surface: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub image: Vec<WireImageToken>,
    pub text: Vec<WireTextToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub id: usize,
    pub asset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub sample_id: String,
    pub query: WireQuery,
    pub candidates: Vec<WireCandidate>,
}

impl ScoreMessage {
    pub fn new(sample_id: &str, query: WireQuery, candidates: Vec<WireCandidate>) -> Self {
        ScoreMessage {
            v: PROTOCOL_VERSION,
            kind: "score".into(),
            sample_id: sample_id.into(),
            query,
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub sample_id: String,
    pub scores: Vec<f64>,
}

/// Generation capabilities reachable over the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    MutateText,
    EditImage,
    GenerateImage,
    Describe,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::MutateText => "mutate_text",
            Capability::EditImage => "edit_image",
            Capability::GenerateImage => "generate_image",
            Capability::Describe => "describe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub sample_id: String,
    pub capability: Capability,
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub sample_id: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub sample_id: String,
    pub message: String,
}

impl ErrorMessage {
    pub fn new(sample_id: &str, message: impl Into<String>) -> Self {
        ErrorMessage {
            v: PROTOCOL_VERSION,
            kind: "error".into(),
            sample_id: sample_id.into(),
            message: message.into(),
        }
    }
}

/// Parses one response line, checking version, type and sample id echo.
///
/// A line of the wrong type or for a different sample is a framing error; an
/// `error` envelope becomes [`Error::Remote`].
pub fn parse_response(line: &str, expected_type: &str, sample_id: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::ProtocolViolation(format!("malformed response line: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Framing("response is not a JSON object".into()))?;
    match obj.get("v").and_then(Value::as_u64) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        other => {
            return Err(Error::ProtocolViolation(format!(
                "unsupported protocol version {other:?}"
            )))
        }
    }
    let kind = obj.get("type").and_then(Value::as_str).unwrap_or("");
    let echoed = obj.get("sample_id").and_then(Value::as_str).unwrap_or("");
    if echoed != sample_id {
        return Err(Error::Framing(format!(
            "response for sample {echoed:?} while waiting for {sample_id:?}"
        )));
    }
    if kind == "error" {
        let message = obj
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("unspecified")
            .to_string();
        return Err(Error::Remote {
            sample_id: sample_id.into(),
            message,
        });
    }
    if kind != expected_type {
        return Err(Error::Framing(format!(
            "expected a {expected_type:?} line, got {kind:?}"
        )));
    }
    Ok(value)
}

/// Validates a `scores` response against the requested arity.
pub fn parse_scores(line: &str, sample_id: &str, expected: usize) -> Result<Vec<f64>> {
    let value = parse_response(line, "scores", sample_id)?;
    let msg: ScoresMessage = serde_json::from_value(value)
        .map_err(|e| Error::ProtocolViolation(format!("bad scores payload: {e}")))?;
    if msg.scores.len() != expected {
        return Err(Error::ProtocolViolation(format!(
            "expected {expected} scores, got {}",
            msg.scores.len()
        )));
    }
    if let Some(bad) = msg.scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::ProtocolViolation(format!("non-finite score {bad}")));
    }
    Ok(msg.scores)
}

/// A bidirectional line stream.
pub trait LineChannel: Send {
    fn send_line(&mut self, line: &str) -> Result<()>;
    /// Next line without its terminator, or `None` at end of stream.
    fn recv_line(&mut self, timeout: Duration) -> Result<Option<String>>;
    /// Signals that no more requests follow.
    fn close_write(&mut self) -> Result<()>;
}

/// Where a backend lives: a TCP socket or a child process on its standard streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Exec(Vec<String>),
}

impl Endpoint {
    /// Parses `tcp://host:port` or `exec:<program> [args...]`.
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(addr) = text.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::Config("empty tcp address".into()));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = text.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(Error::Config("empty exec command".into()));
            }
            Ok(Endpoint::Exec(argv))
        } else {
            Err(Error::Config(format!(
                "unknown endpoint {text:?}; use tcp://host:port or exec:<command>"
            )))
        }
    }

    pub fn connect(&self) -> Result<Box<dyn LineChannel>> {
        match self {
            Endpoint::Tcp(addr) => Ok(Box::new(TcpChannel::connect(addr)?)),
            Endpoint::Exec(argv) => Ok(Box::new(ChildChannel::spawn(argv)?)),
        }
    }
}

pub struct TcpChannel {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpChannel {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream =
            TcpStream::connect(addr).map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| Error::Transport(e.to_string()))?,
        );
        Ok(TcpChannel {
            writer: stream,
            reader,
        })
    }
}

impl LineChannel for TcpChannel {
    fn send_line(&mut self, line: &str) -> Result<()> {
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.writer
            .write_all(buf.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<Option<String>> {
        self.reader
            .get_ref()
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Ok(None),
            Ok(_) => Ok(Some(strip_newline(line))),
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                Err(Error::Timeout)
            }
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }

    fn close_write(&mut self) -> Result<()> {
        self.writer
            .shutdown(std::net::Shutdown::Write)
            .map_err(|e| Error::Transport(e.to_string()))
    }
}

pub struct ChildChannel {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
}

impl ChildChannel {
    pub fn spawn(argv: &[String]) -> Result<Self> {
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawn {}: {e}", argv[0])))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Transport("child has no stdout".into()))?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ChildChannel {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl LineChannel for ChildChannel {
    fn send_line(&mut self, line: &str) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("write side closed".into()))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<Option<String>> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(Some(line)),
            Ok(Err(e)) => Err(Error::Transport(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }

    fn close_write(&mut self) -> Result<()> {
        self.stdin.take();
        Ok(())
    }
}

impl Drop for ChildChannel {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn strip_newline(mut line: String) -> String {
    while line.ends_with('\n') || line.ends_with('\r') {
        line.pop();
    }
    line
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Extra attempts after a transport failure, each on a fresh connection.
    pub retries: usize,
    pub timeout: Duration,
    /// Size of the connection pool.
    pub connections: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            retries: 2,
            timeout: Duration::from_secs(30),
            connections: 1,
        }
    }
}

/// Request/response client with a small connection pool.
///
/// Each connection carries one request at a time; requests are idempotent, so
/// transport failures are retried on a fresh connection.
pub struct RemoteClient {
    endpoint: Endpoint,
    config: ClientConfig,
    slots: Vec<Mutex<Option<Box<dyn LineChannel>>>>,
    next: AtomicUsize,
}

impl RemoteClient {
    pub fn new(endpoint: Endpoint, config: ClientConfig) -> Self {
        let slots = (0..config.connections.max(1))
            .map(|_| Mutex::new(None))
            .collect();
        RemoteClient {
            endpoint,
            config,
            slots,
            next: AtomicUsize::new(0),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Sends one request line and returns the raw response line.
    pub fn roundtrip(&self, line: &str) -> Result<String> {
        let slot = self.next.fetch_add(1, Ordering::Relaxed) % self.slots.len();
        let mut guard = self.slots[slot].lock().unwrap_or_else(|p| p.into_inner());
        let mut last_err = Error::Transport("no attempt made".into());
        for _ in 0..=self.config.retries {
            if guard.is_none() {
                match self.endpoint.connect() {
                    Ok(conn) => *guard = Some(conn),
                    Err(e) => {
                        last_err = e;
                        continue;
                    }
                }
            }
            let conn = guard.as_mut().expect("connection present");
            let attempt = conn
                .send_line(line)
                .and_then(|_| conn.recv_line(self.config.timeout))
                .and_then(|resp| {
                    resp.ok_or_else(|| Error::Transport("connection closed by peer".into()))
                });
            match attempt {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() => {
                    *guard = None;
                    last_err = e;
                }
                Err(e) => {
                    *guard = None;
                    return Err(e);
                }
            }
        }
        Err(last_err)
    }

    /// Sends a request and validates the response envelope.
    pub fn request<T: Serialize>(
        &self,
        message: &T,
        expected_type: &str,
        sample_id: &str,
    ) -> Result<Value> {
        let line = serde_json::to_string(message)?;
        let resp = self.roundtrip(&line)?;
        match parse_response(&resp, expected_type, sample_id) {
            Ok(v) => Ok(v),
            Err(e) => {
                // A desynchronized stream cannot be reused.
                if matches!(e, Error::Framing(_) | Error::ProtocolViolation(_)) {
                    self.reset();
                }
                Err(e)
            }
        }
    }

    /// Drops all pooled connections.
    pub fn reset(&self) {
        for slot in &self.slots {
            *slot.lock().unwrap_or_else(|p| p.into_inner()) = None;
        }
    }
}

/// Misbehaviours the mock server can inject, for exercising client checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockFault {
    #[default]
    None,
    /// Returns one score fewer than requested.
    ShortScores,
    /// Emits a stray line after every response.
    ExtraLine,
    /// Returns a non-finite score.
    NonFinite,
    /// Answers every request with an error envelope.
    ErrorReply,
}

impl std::str::FromStr for MockFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MockFault::None),
            "short" => Ok(MockFault::ShortScores),
            "extra-line" => Ok(MockFault::ExtraLine),
            "nan" => Ok(MockFault::NonFinite),
            "error" => Ok(MockFault::ErrorReply),
            other => Err(Error::Config(format!("unknown fault {other:?}"))),
        }
    }
}

/// Behaviour of the mock backend.
#[derive(Debug, Clone, Default)]
pub struct MockServerConfig {
    pub fault: MockFault,
    /// Fixed scores keyed by candidate asset; other candidates use hash scoring.
    pub table: std::collections::BTreeMap<String, f64>,
    pub seed: u64,
}

/// Deterministic score for a request: each active token contributes a
/// hash-derived affinity to each candidate, so masking changes rankings.
pub fn mock_scores(msg: &ScoreMessage, config: &MockServerConfig) -> Vec<f64> {
    let n_text = msg.query.text.len().max(1) as f64;
    let n_image = msg.query.image.len().max(1) as f64;
    msg.candidates
        .iter()
        .map(|cand| {
            if let Some(&s) = config.table.get(&cand.asset) {
                return s;
            }
            let img: f64 = msg
                .query
                .image
                .iter()
                .filter(|t| t.active)
                .map(|t| unit_hash(config.seed, &[&t.asset, &t.mask, &cand.asset]))
                .sum::<f64>()
                / n_image;
            let txt: f64 = msg
                .query
                .text
                .iter()
                .filter(|t| t.active)
                .map(|t| unit_hash(config.seed, &[&t.surface, &cand.asset]))
                .sum::<f64>()
                / n_text;
            img + txt
        })
        .collect()
}

/// Hash of the parts mapped to `[-1, 1)`.
pub fn unit_hash(seed: u64, parts: &[&str]) -> f64 {
    let h = stable_hash(seed, parts);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// SHA-256 based 64-bit hash, stable across platforms and releases.
pub fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Answers one request line with the lines the mock writes back.
pub fn handle_line(line: &str, config: &MockServerConfig) -> Vec<String> {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            let err = ErrorMessage::new("", format!("malformed request: {e}"));
            return vec![serde_json::to_string(&err).expect("serializable")];
        }
    };
    let sample_id = value
        .get("sample_id")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    if config.fault == MockFault::ErrorReply {
        let err = ErrorMessage::new(&sample_id, "injected failure");
        return vec![serde_json::to_string(&err).expect("serializable")];
    }
    let reply = match value.get("type").and_then(Value::as_str) {
        Some("score") => match serde_json::from_value::<ScoreMessage>(value) {
            Ok(msg) => {
                let mut scores = mock_scores(&msg, config);
                match config.fault {
                    MockFault::ShortScores => {
                        scores.pop();
                    }
                    MockFault::NonFinite => {
                        if let Some(s) = scores.first_mut() {
                            *s = f64::NAN;
                        }
                    }
                    _ => {}
                }
                if scores.iter().any(|s| !s.is_finite()) {
                    // serde_json refuses NaN, so write the literal the way
                    // a careless Python backend would.
                    let body: Vec<String> = scores
                        .iter()
                        .map(|s| if s.is_finite() { s.to_string() } else { "NaN".into() })
                        .collect();
                    format!(
                        "{{\"v\":1,\"type\":\"scores\",\"sample_id\":{},\"scores\":[{}]}}",
                        Value::String(sample_id.clone()),
                        body.join(",")
                    )
                } else {
                    serde_json::to_string(&ScoresMessage {
                        v: PROTOCOL_VERSION,
                        kind: "scores".into(),
                        sample_id: sample_id.clone(),
                        scores,
                    })
                    .expect("serializable")
                }
            }
            Err(e) => serde_json::to_string(&ErrorMessage::new(&sample_id, e.to_string()))
                .expect("serializable"),
        },
        Some("generate") => match serde_json::from_value::<GenerateMessage>(value) {
            Ok(msg) => match crate::augment::mock_generate(config.seed, msg.capability, &msg.args)
            {
                Ok(outputs) => serde_json::to_string(&GeneratedMessage {
                    v: PROTOCOL_VERSION,
                    kind: "generated".into(),
                    sample_id: sample_id.clone(),
                    outputs,
                })
                .expect("serializable"),
                Err(e) => serde_json::to_string(&ErrorMessage::new(&sample_id, e.to_string()))
                    .expect("serializable"),
            },
            Err(e) => serde_json::to_string(&ErrorMessage::new(&sample_id, e.to_string()))
                .expect("serializable"),
        },
        other => serde_json::to_string(&ErrorMessage::new(
            &sample_id,
            format!("unsupported request type {other:?}"),
        ))
        .expect("serializable"),
    };
    let mut out = vec![reply];
    if config.fault == MockFault::ExtraLine {
        out.push("{\"v\":1,\"type\":\"log\",\"sample_id\":\"\",\"message\":\"stray\"}".into());
    }
    out
}

/// Serves requests from `reader` until end of stream.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, config: &MockServerConfig) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for out in handle_line(&line, config) {
            writeln!(writer, "{out}")?;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener, config: MockServerConfig) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let config = config.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(reader, stream, &config);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("tcp://127.0.0.1:9").unwrap(),
            Endpoint::Tcp("127.0.0.1:9".into())
        );
        assert_eq!(
            Endpoint::parse("exec:python adapter.py --x").unwrap(),
            Endpoint::Exec(vec!["python".into(), "adapter.py".into(), "--x".into()])
        );
        assert!(Endpoint::parse("http://x").is_err());
        assert!(Endpoint::parse("exec:").is_err());
    }

    #[test]
    fn score_message_field_order() {
        let msg = ScoreMessage::new(
            "s1",
            WireQuery {
                image: vec![WireImageToken {
                    id: 0,
                    asset: "a.png".into(),
                    mask: "m0".into(),
                    active: true,
                }],
                text: vec![WireTextToken {
                    id: 0,
                    surface: "red".into(),
                    active: false,
                }],
            },
            vec![WireCandidate {
                id: 3,
                asset: "c.png".into(),
            }],
        );
        let line = serde_json::to_string(&msg).unwrap();
        assert_eq!(
            line,
            r#"{"v":1,"type":"score","sample_id":"s1","query":{"image":[{"id":0,"asset":"a.png","mask":"m0","active":true}],"text":[{"id":0,"surface":"red","active":false}]},"candidates":[{"id":3,"asset":"c.png"}]}"#
        );
    }

    #[test]
    fn parse_scores_checks_arity_and_finiteness() {
        let ok = r#"{"v":1,"type":"scores","sample_id":"a","scores":[0.5,-1.0]}"#;
        assert_eq!(parse_scores(ok, "a", 2).unwrap(), vec![0.5, -1.0]);
        assert!(matches!(
            parse_scores(ok, "a", 3),
            Err(Error::ProtocolViolation(_))
        ));
        let nan = r#"{"v":1,"type":"scores","sample_id":"a","scores":[NaN,1.0]}"#;
        assert!(matches!(
            parse_scores(nan, "a", 2),
            Err(Error::ProtocolViolation(_))
        ));
        assert!(matches!(parse_scores(ok, "b", 2), Err(Error::Framing(_))));
        let err = r#"{"v":1,"type":"error","sample_id":"a","message":"boom"}"#;
        assert!(matches!(parse_scores(err, "a", 2), Err(Error::Remote { .. })));
        let v2 = r#"{"v":2,"type":"scores","sample_id":"a","scores":[]}"#;
        assert!(matches!(
            parse_scores(v2, "a", 0),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn stable_hash_is_deterministic() {
        assert_eq!(stable_hash(1, &["a", "b"]), stable_hash(1, &["a", "b"]));
        assert_ne!(stable_hash(1, &["ab"]), stable_hash(1, &["a", "b"]));
        let u = unit_hash(0, &["x"]);
        assert!((-1.0..1.0).contains(&u));
    }
}
