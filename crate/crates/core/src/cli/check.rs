//! Golden transcript replay for scorer endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{parse_scores, Endpoint, ScoreMessage, ScoresMessage};

const TRANSCRIPT: &str = include_str!("../../golden/scorer_transcript.jsonl");

/// One recorded exchange. `response` holds the mock backend's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub name: String,
    pub request: ScoreMessage,
    pub response: ScoresMessage,
    /// The scores must equal those of this earlier entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_of: Option<String>,
}

pub fn golden_requests() -> Vec<GoldenEntry> {
    TRANSCRIPT
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled transcript parses"))
        .collect()
}

#[derive(Debug)]
pub struct CheckOutcome {
    pub lines: Vec<String>,
    pub failure: Option<Error>,
}

/// Replays every golden request on one connection, then half-closes and
/// requires the stream to end without further lines.
pub fn protocol_check(endpoint: &Endpoint, timeout: Duration, strict: bool) -> CheckOutcome {
    let mut lines = Vec::new();
    let failure = run_check(endpoint, timeout, strict, &mut lines).err();
    CheckOutcome { lines, failure }
}

fn run_check(endpoint: &Endpoint, timeout: Duration, strict: bool, log: &mut Vec<String>) -> Result<()> {
    let mut conn = endpoint.connect()?;
    let mut seen: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in golden_requests() {
        let outcome = (|| -> Result<Vec<f64>> {
            conn.send_line(&serde_json::to_string(&entry.request)?)?;
            let line = conn
                .recv_line(timeout)?
                .ok_or_else(|| Error::Transport("stream ended early".into()))?;
            let scores = parse_scores(&line, &entry.request.sample_id, entry.request.candidates.len())?;
            if let Some(prev) = entry.repeat_of.as_ref().and_then(|n| seen.get(n)) {
                if prev != &scores {
                    return Err(Error::ProtocolViolation(
                        "identical requests returned different scores".into(),
                    ));
                }
            }
            if strict {
                let drift = scores
                    .iter()
                    .zip(&entry.response.scores)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if drift > 1e-12 {
                    return Err(Error::ProtocolViolation(format!(
                        "scores differ from the recording by {drift:e}"
                    )));
                }
            }
            Ok(scores)
        })();
        match outcome {
            Ok(scores) => {
                log.push(format!("PASS {}", entry.name));
                seen.insert(entry.name, scores);
            }
            Err(e) => {
                log.push(format!("FAIL {}: {e}", entry.name));
                return Err(e);
            }
        }
    }
    conn.close_write()?;
    match conn.recv_line(timeout) {
        Ok(None) | Err(Error::Timeout) => {
            log.push("PASS end-of-stream".into());
            Ok(())
        }
        Ok(Some(line)) if line.trim().is_empty() => Ok(()),
        Ok(Some(line)) => {
            let e = Error::Framing(format!("stray line after the last response: {line}"));
            log.push(format!("FAIL end-of-stream: {e}"));
            Err(e)
        }
        Err(e) => Err(e),
    }
}
