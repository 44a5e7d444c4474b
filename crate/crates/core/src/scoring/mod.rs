//! Scorer contract, ranking and retrieval equality.
//!
//! A [`Scorer`] receives the query together with the set of preserved tokens
//! and returns one similarity per candidate. Pruned image tokens are
//! zero-masked and pruned text tokens are dropped; how that is realised is up
//! to the scorer.

mod remote;
pub(crate) mod toy;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use remote::RemoteScorer;
pub use toy::{ToyScorer, ToyScorerParams};

use crate::error::{Error, Result};
use crate::types::{Candidate, Ranking, TokenSet, TokenizedQuery};

/// One batched scoring call: a query under a pruning state against a pool.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub sample_id: &'a str,
    pub query: &'a TokenizedQuery,
    pub preserved: &'a TokenSet,
    pub candidates: &'a [Candidate],
}

impl<'a> ScoreRequest<'a> {
    pub fn new(
        sample_id: &'a str,
        query: &'a TokenizedQuery,
        preserved: &'a TokenSet,
        candidates: &'a [Candidate],
    ) -> Self {
        ScoreRequest {
            sample_id,
            query,
            preserved,
            candidates,
        }
    }

    /// Per-token active flags in global index order.
    pub fn active_flags(&self) -> Vec<bool> {
        (0..self.query.n_total())
            .map(|i| self.preserved.contains(i))
            .collect()
    }
}

pub trait Scorer: Send + Sync {
    /// Scores every candidate, order-preserving.
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        (**self).score(request)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        (**self).score(request)
    }
}

/// Ranks the pool under the request's pruning state.
pub fn rank<S: Scorer + ?Sized>(scorer: &S, request: &ScoreRequest<'_>) -> Result<Ranking> {
    if request.candidates.is_empty() {
        return Err(Error::PoolTooSmall { needed: 1, got: 0 });
    }
    if request.preserved.universe() != request.query.n_total() {
        return Err(Error::InvalidQuery(format!(
            "state covers {} tokens, query has {}",
            request.preserved.universe(),
            request.query.n_total()
        )));
    }
    let scores = scorer.score(request)?;
    if scores.len() != request.candidates.len() {
        return Err(Error::ProtocolViolation(format!(
            "scorer returned {} scores for {} candidates",
            scores.len(),
            request.candidates.len()
        )));
    }
    let ids: Vec<_> = request.candidates.iter().map(|c| c.id).collect();
    Ok(Ranking::from_scores(&ids, &scores))
}

/// What "same retrieval result" means when validating a pruned state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityMode {
    /// Same top-1 candidate.
    #[default]
    Top1,
    /// Same full permutation.
    FullOrder,
}

impl std::str::FromStr for ValidityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(ValidityMode::Top1),
            "full-order" | "full_order" => Ok(ValidityMode::FullOrder),
            other => Err(Error::Config(format!("unknown validity mode {other:?}"))),
        }
    }
}

pub fn retrieval_equal(a: &Ranking, b: &Ranking, mode: ValidityMode) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::PoolMismatch);
    }
    let mut ia = a.ids().to_vec();
    let mut ib = b.ids().to_vec();
    ia.sort_unstable();
    ib.sort_unstable();
    if ia != ib {
        return Err(Error::PoolMismatch);
    }
    Ok(match mode {
        ValidityMode::Top1 => a.top() == b.top(),
        ValidityMode::FullOrder => a.ids() == b.ids(),
    })
}

/// Wraps a scorer and counts batched requests and unit (per-candidate) scores.
pub struct CountingScorer<S> {
    inner: S,
    requests: AtomicU64,
    unit_scores: AtomicU64,
}

impl<S: Scorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            requests: AtomicU64::new(0),
            unit_scores: AtomicU64::new(0),
        }
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn unit_scores(&self) -> u64 {
        self.unit_scores.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Scorer> Scorer for CountingScorer<S> {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.unit_scores
            .fetch_add(request.candidates.len() as u64, Ordering::Relaxed);
        self.inner.score(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CandidateKind, CandidatePayload};

    fn ranking(ids: &[usize]) -> Ranking {
        let scores: Vec<f64> = (0..ids.len()).map(|i| -(i as f64)).collect();
        Ranking::from_scores(ids, &scores)
    }

    #[test]
    fn retrieval_equal_modes() {
        let abc = ranking(&[0, 1, 2]);
        let acb = ranking(&[0, 2, 1]);
        let bac = ranking(&[1, 0, 2]);
        assert!(retrieval_equal(&abc, &abc, ValidityMode::Top1).unwrap());
        assert!(retrieval_equal(&abc, &abc, ValidityMode::FullOrder).unwrap());
        assert!(retrieval_equal(&abc, &acb, ValidityMode::Top1).unwrap());
        assert!(!retrieval_equal(&abc, &acb, ValidityMode::FullOrder).unwrap());
        assert!(!retrieval_equal(&bac, &abc, ValidityMode::Top1).unwrap());
        assert!(!retrieval_equal(&bac, &abc, ValidityMode::FullOrder).unwrap());
    }

    #[test]
    fn retrieval_equal_rejects_different_pools() {
        let a = ranking(&[0, 1, 2]);
        let b = ranking(&[0, 1, 3]);
        let c = ranking(&[0, 1]);
        assert!(matches!(
            retrieval_equal(&a, &b, ValidityMode::Top1),
            Err(Error::PoolMismatch)
        ));
        assert!(matches!(
            retrieval_equal(&a, &c, ValidityMode::Top1),
            Err(Error::PoolMismatch)
        ));
    }

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
            Ok(self.0[..request.candidates.len()].to_vec())
        }
    }

    fn asset_pool(ids: &[usize]) -> Vec<Candidate> {
        ids.iter()
            .map(|&id| Candidate {
                id,
                kind: CandidateKind::Distractor,
                payload: CandidatePayload::Asset {
                    asset: format!("c{id}"),
                },
            })
            .collect()
    }

    fn tiny_query() -> TokenizedQuery {
        crate::types::normalize_query(
            vec![crate::types::RawSegment {
                area: 1.0,
                payload: crate::types::ImagePayload::Asset {
                    asset: "q".into(),
                    mask: "m".into(),
                },
            }],
            vec![crate::types::RawToken::word("w")],
        )
        .unwrap()
    }

    #[test]
    fn rank_ties_and_counting() {
        let q = tiny_query();
        let s0 = TokenSet::full(2);
        let pool = asset_pool(&[2, 0, 1]);
        let scorer = CountingScorer::new(Fixed(vec![1.0, 1.0, 1.0]));
        let req = ScoreRequest::new("s", &q, &s0, &pool);
        let r = rank(&scorer, &req).unwrap();
        assert_eq!(r.ids(), &[0, 1, 2]);
        assert_eq!(scorer.requests(), 1);
        assert_eq!(scorer.unit_scores(), 3);
        let r2 = rank(&scorer, &req).unwrap();
        assert_eq!(r, r2);

        let single = asset_pool(&[9]);
        let r = rank(&scorer, &ScoreRequest::new("s", &q, &s0, &single)).unwrap();
        assert_eq!(r.ids(), &[9]);
        assert!(rank(&scorer, &ScoreRequest::new("s", &q, &s0, &[])).is_err());
    }

    #[test]
    fn rank_rejects_wrong_arity() {
        struct Short;
        impl Scorer for Short {
            fn score(&self, _: &ScoreRequest<'_>) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
        }
        let q = tiny_query();
        let s0 = TokenSet::full(2);
        let pool = asset_pool(&[0, 1]);
        assert!(matches!(
            rank(&Short, &ScoreRequest::new("s", &q, &s0, &pool)),
            Err(Error::ProtocolViolation(_))
        ));
    }
}
