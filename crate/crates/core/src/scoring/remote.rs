use super::{ScoreRequest, Scorer};
use crate::error::{Error, Result};
use crate::protocol::{
    parse_scores, ClientConfig, Endpoint, RemoteClient, ScoreMessage, WireCandidate,
    WireImageToken, WireQuery, WireTextToken,
};
use crate::types::{CandidatePayload, ImagePayload};

/// Scorer backed by an out-of-process adapter speaking the line protocol.
pub struct RemoteScorer {
    client: RemoteClient,
}

impl RemoteScorer {
    pub fn new(endpoint: Endpoint, config: ClientConfig) -> Self {
        RemoteScorer {
            client: RemoteClient::new(endpoint, config),
        }
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }

    /// Encodes a request in wire form; the query must be in asset mode.
    pub fn encode(request: &ScoreRequest<'_>) -> Result<ScoreMessage> {
        let query = request.query;
        let image = query
            .image_tokens()
            .iter()
            .map(|t| match &t.payload {
                ImagePayload::Asset { asset, mask } => Ok(WireImageToken {
                    id: t.id,
                    asset: asset.clone(),
                    mask: mask.clone(),
                    active: request.preserved.contains(t.id),
                }),
                ImagePayload::Inline { .. } => Err(Error::InvalidQuery(
                    "remote scoring needs asset references on image tokens".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        let offset = query.n_image();
        let text = query
            .text_tokens()
            .iter()
            .map(|t| WireTextToken {
                id: t.id,
                surface: t.surface.clone(),
                active: request.preserved.contains(offset + t.id),
            })
            .collect();
        let candidates = request
            .candidates
            .iter()
            .map(|c| match &c.payload {
                CandidatePayload::Asset { asset } => Ok(WireCandidate {
                    id: c.id,
                    asset: asset.clone(),
                }),
                CandidatePayload::Inline { .. } => Err(Error::InvalidQuery(format!(
                    "candidate {} has no asset reference",
                    c.id
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreMessage::new(
            request.sample_id,
            WireQuery { image, text },
            candidates,
        ))
    }

    /// Sends one request and returns order-preserving finite scores.
    pub fn remote_score(&self, message: &ScoreMessage) -> Result<Vec<f64>> {
        let line = serde_json::to_string(message)?;
        let resp = self.client.roundtrip(&line)?;
        let parsed = parse_scores(&resp, &message.sample_id, message.candidates.len());
        if matches!(parsed, Err(Error::Framing(_) | Error::ProtocolViolation(_))) {
            self.client.reset();
        }
        parsed
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        let message = Self::encode(request)?;
        self.remote_score(&message)
    }
}

#[cfg(test)]
mod tests {
    use std::net::TcpListener;
    use std::time::Duration;

    use super::*;
    use crate::protocol::{serve_tcp, MockFault, MockServerConfig};
    use crate::types::{
        normalize_query, Candidate, CandidateKind, RawSegment, RawToken, TokenSet,
        TokenizedQuery,
    };

    fn spawn_server(config: MockServerConfig) -> Endpoint {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || serve_tcp(listener, config));
        Endpoint::Tcp(addr.to_string())
    }

    fn asset_query() -> TokenizedQuery {
        normalize_query(
            vec![RawSegment {
                area: 1.0,
                payload: ImagePayload::Asset {
                    asset: "q.png".into(),
                    mask: "full".into(),
                },
            }],
            vec![RawToken::word("red"), RawToken::word("hat")],
        )
        .unwrap()
    }

    fn pool(n: usize) -> Vec<Candidate> {
        (0..n)
            .map(|id| Candidate {
                id,
                kind: CandidateKind::Distractor,
                payload: CandidatePayload::Asset {
                    asset: format!("c{id}.png"),
                },
            })
            .collect()
    }

    fn quick() -> ClientConfig {
        ClientConfig {
            retries: 1,
            timeout: Duration::from_secs(5),
            connections: 2,
        }
    }

    #[test]
    fn arity_matches_request() {
        let scorer = RemoteScorer::new(spawn_server(MockServerConfig::default()), quick());
        let q = asset_query();
        let p = pool(2);
        let s0 = TokenSet::full(3);
        let scores = scorer.score(&ScoreRequest::new("s1", &q, &s0, &p)).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.is_finite()));
        let again = scorer.score(&ScoreRequest::new("s1", &q, &s0, &p)).unwrap();
        assert_eq!(scores, again);
    }

    #[test]
    fn table_scores_are_echoed() {
        let mut config = MockServerConfig::default();
        config.table.insert("c0.png".into(), 0.25);
        config.table.insert("c1.png".into(), -0.5);
        config.table.insert("c2.png".into(), 0.75);
        let scorer = RemoteScorer::new(spawn_server(config), quick());
        let q = asset_query();
        let p = pool(3);
        let scores = scorer
            .score(&ScoreRequest::new("t", &q, &TokenSet::full(3), &p))
            .unwrap();
        assert_eq!(scores, vec![0.25, -0.5, 0.75]);
    }

    #[test]
    fn faults_surface_as_protocol_errors() {
        let q = asset_query();
        let p = pool(2);
        let s0 = TokenSet::full(3);
        for fault in [MockFault::ShortScores, MockFault::NonFinite] {
            let scorer = RemoteScorer::new(
                spawn_server(MockServerConfig {
                    fault,
                    ..Default::default()
                }),
                quick(),
            );
            assert!(matches!(
                scorer.score(&ScoreRequest::new("s", &q, &s0, &p)),
                Err(Error::ProtocolViolation(_))
            ));
        }
        let scorer = RemoteScorer::new(
            spawn_server(MockServerConfig {
                fault: MockFault::ErrorReply,
                ..Default::default()
            }),
            quick(),
        );
        assert!(matches!(
            scorer.score(&ScoreRequest::new("s", &q, &s0, &p)),
            Err(Error::Remote { .. })
        ));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let scorer = RemoteScorer::new(Endpoint::Tcp(addr.to_string()), quick());
        let q = asset_query();
        let p = pool(2);
        assert!(matches!(
            scorer.score(&ScoreRequest::new("s", &q, &TokenSet::full(3), &p)),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn inline_queries_are_rejected() {
        let q = normalize_query(
            vec![RawSegment {
                area: 1.0,
                payload: ImagePayload::Inline {
                    features: vec![1.0, 0.0],
                },
            }],
            vec![RawToken::word("a")],
        )
        .unwrap();
        let p = pool(2);
        assert!(RemoteScorer::encode(&ScoreRequest::new("s", &q, &TokenSet::full(2), &p)).is_err());
    }

    #[test]
    fn concurrent_callers_get_consistent_scores() {
        let scorer = RemoteScorer::new(spawn_server(MockServerConfig::default()), quick());
        let q = asset_query();
        let p = pool(4);
        let states: Vec<TokenSet> = (0..8u64).map(|m| TokenSet::from_mask(3, m)).collect();
        let serial: Vec<Vec<f64>> = states
            .iter()
            .map(|s| scorer.score(&ScoreRequest::new("c", &q, s, &p)).unwrap())
            .collect();
        use rayon::prelude::*;
        let parallel: Vec<Vec<f64>> = states
            .par_iter()
            .map(|s| scorer.score(&ScoreRequest::new("c", &q, s, &p)).unwrap())
            .collect();
        assert_eq!(serial, parallel);
    }
}
