use serde::{Deserialize, Serialize};

use super::{ScoreRequest, Scorer};
use crate::error::{Error, Result};
use crate::types::{Candidate, ImagePayload, TokenSet, TokenizedQuery};

/// Linear two-tower composer: `q = normalize(W_img · e_img + W_txt · e_txt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorerParams {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub image_proj: Vec<f64>,
    /// Row-major `dim × dim`.
    pub text_proj: Vec<f64>,
}

impl ToyScorerParams {
    pub fn new(dim: usize, image_proj: Vec<f64>, text_proj: Vec<f64>) -> Result<Self> {
        let params = ToyScorerParams {
            dim,
            image_proj,
            text_proj,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        ToyScorerParams {
            dim,
            image_proj: eye.clone(),
            text_proj: eye,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dimension {} < 2", self.dim)));
        }
        for m in [&self.image_proj, &self.text_proj] {
            if m.len() != self.dim * self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim * self.dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("projection has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        2 * self.dim * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Flattened `[image_proj, text_proj]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.image_proj.clone();
        v.extend_from_slice(&self.text_proj);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * dim * dim {
            return Err(Error::DimensionMismatch {
                expected: 2 * dim * dim,
                got: flat.len(),
            });
        }
        let (a, b) = flat.split_at(dim * dim);
        ToyScorerParams::new(dim, a.to_vec(), b.to_vec())
    }

    /// Area-weighted image sum and mean text vector over preserved tokens.
    pub fn pooled_inputs(
        &self,
        query: &TokenizedQuery,
        preserved: &TokenSet,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let mut e_img = vec![0.0; d];
        for tok in query.image_tokens() {
            let v = match &tok.payload {
                ImagePayload::Inline { features } => features,
                ImagePayload::Asset { .. } => {
                    return Err(Error::InvalidQuery(
                        "toy scorer needs inline image features".into(),
                    ))
                }
            };
            check_dim(d, v.len())?;
            if preserved.contains(tok.id) {
                for (acc, x) in e_img.iter_mut().zip(v) {
                    *acc += tok.area * x;
                }
            }
        }
        let offset = query.n_image();
        let mut e_txt = vec![0.0; d];
        let mut active = 0usize;
        for tok in query.text_tokens() {
            let v = tok.features.as_ref().ok_or_else(|| {
                Error::InvalidQuery("toy scorer needs inline text features".into())
            })?;
            check_dim(d, v.len())?;
            if preserved.contains(offset + tok.id) {
                active += 1;
                for (acc, x) in e_txt.iter_mut().zip(v) {
                    *acc += x;
                }
            }
        }
        if active > 0 {
            let inv = 1.0 / active as f64;
            e_txt.iter_mut().for_each(|x| *x *= inv);
        }
        Ok((e_img, e_txt))
    }

    /// `W_img · e_img + W_txt · e_txt` before normalization.
    pub fn compose(&self, e_img: &[f64], e_txt: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|r| {
                let wi = &self.image_proj[r * d..(r + 1) * d];
                let wt = &self.text_proj[r * d..(r + 1) * d];
                dot(wi, e_img) + dot(wt, e_txt)
            })
            .collect()
    }

    /// Unit query embedding, or `None` when the composed vector is zero.
    pub fn query_embedding(
        &self,
        query: &TokenizedQuery,
        preserved: &TokenSet,
    ) -> Result<Option<Vec<f64>>> {
        let (e_img, e_txt) = self.pooled_inputs(query, preserved)?;
        let z = self.compose(&e_img, &e_txt);
        let norm = dot(&z, &z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(None);
        }
        Ok(Some(z.into_iter().map(|x| x / norm).collect()))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic in-process scorer over inline feature vectors.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    params: ToyScorerParams,
}

impl ToyScorer {
    pub fn new(params: ToyScorerParams) -> Result<Self> {
        params.validate()?;
        Ok(ToyScorer { params })
    }

    pub fn identity(dim: usize) -> Self {
        ToyScorer {
            params: ToyScorerParams::identity(dim),
        }
    }

    pub fn params(&self) -> &ToyScorerParams {
        &self.params
    }

    /// Scores a single candidate; an all-zero query scores 0.
    pub fn toy_score(
        &self,
        query: &TokenizedQuery,
        preserved: &TokenSet,
        candidate: &Candidate,
    ) -> Result<f64> {
        let q = self.params.query_embedding(query, preserved)?;
        self.score_with(q.as_deref(), candidate)
    }

    fn score_with(&self, q: Option<&[f64]>, candidate: &Candidate) -> Result<f64> {
        let c = candidate.features().ok_or_else(|| {
            Error::InvalidQuery(format!("candidate {} has no inline features", candidate.id))
        })?;
        check_dim(self.params.dim, c.len())?;
        Ok(q.map_or(0.0, |q| dot(q, c)))
    }
}

impl Scorer for ToyScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        let q = self
            .params
            .query_embedding(request.query, request.preserved)?;
        request
            .candidates
            .iter()
            .map(|c| self.score_with(q.as_deref(), c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::rank;
    use crate::types::{
        normalize_query, CandidateKind, CandidatePayload, RawSegment, RawToken,
    };

    fn cand(id: usize, v: &[f64]) -> Candidate {
        Candidate {
            id,
            kind: CandidateKind::Distractor,
            payload: CandidatePayload::Inline {
                features: v.to_vec(),
            },
        }
    }

    fn query(img: &[(f64, &[f64])], txt: &[&[f64]]) -> TokenizedQuery {
        normalize_query(
            img.iter()
                .map(|(a, v)| RawSegment {
                    area: *a,
                    payload: ImagePayload::Inline {
                        features: v.to_vec(),
                    },
                })
                .collect(),
            txt.iter()
                .enumerate()
                .map(|(i, v)| RawToken {
                    surface: format!("t{i}"),
                    features: Some(v.to_vec()),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_hand_arithmetic() {
        let s = ToyScorer::identity(2);
        let q = query(&[(1.0, &[1.0, 0.0])], &[&[0.0, 1.0]]);
        let c = cand(0, &[1.0, 0.0]);
        let full = TokenSet::full(2);
        let v = s.toy_score(&q, &full, &c).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let no_text = full.without(1);
        assert!((s.toy_score(&q, &no_text, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_pruned_scores_zero() {
        let s = ToyScorer::identity(2);
        let q = query(&[(1.0, &[1.0, 0.0])], &[&[0.0, 1.0]]);
        let pool = vec![cand(2, &[1.0, 0.0]), cand(0, &[0.0, 1.0]), cand(1, &[1.0, 1.0])];
        let empty = TokenSet::empty(2);
        let scores = s
            .score(&ScoreRequest::new("x", &q, &empty, &pool))
            .unwrap();
        assert_eq!(scores, vec![0.0, 0.0, 0.0]);
        let r = rank(&s, &ScoreRequest::new("x", &q, &empty, &pool)).unwrap();
        assert_eq!(r.ids(), &[0, 1, 2]);
    }

    #[test]
    fn orthogonal_candidates_rank_by_dot_product() {
        let s = ToyScorer::identity(3);
        let q = query(&[(1.0, &[0.6, 0.3, 0.1])], &[&[0.2, 0.1, 0.0]]);
        let pool = vec![
            cand(0, &[0.0, 0.0, 1.0]),
            cand(1, &[1.0, 0.0, 0.0]),
            cand(2, &[0.0, 1.0, 0.0]),
        ];
        // z = (0.8, 0.4, 0.1): dots are its coordinates up to a positive factor.
        let r = rank(&s, &ScoreRequest::new("x", &q, &TokenSet::full(2), &pool)).unwrap();
        assert_eq!(r.ids(), &[1, 2, 0]);
        let norm = (0.8f64 * 0.8 + 0.4 * 0.4 + 0.1 * 0.1).sqrt();
        assert!((r.scores()[0] - 0.8 / norm).abs() < 1e-12);
        assert!((r.scores()[1] - 0.4 / norm).abs() < 1e-12);
        assert!((r.scores()[2] - 0.1 / norm).abs() < 1e-12);
    }

    #[test]
    fn text_pruning_shrinks_mean() {
        let s = ToyScorer::identity(2);
        let q = query(&[(1.0, &[0.0, 0.0])], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = s.params();
        let (_, e_txt) = p.pooled_inputs(&q, &TokenSet::full(3)).unwrap();
        assert_eq!(e_txt, vec![0.5, 0.5]);
        let (_, e_txt) = p
            .pooled_inputs(&q, &TokenSet::full(3).without(2))
            .unwrap();
        assert_eq!(e_txt, vec![1.0, 0.0]);
    }

    #[test]
    fn image_masking_equals_removal() {
        let s = ToyScorer::identity(2);
        let q = query(&[(0.5, &[1.0, 0.0]), (0.5, &[0.3, 0.7])], &[&[0.1, 0.2]]);
        let (e_img, _) = s
            .params()
            .pooled_inputs(&q, &TokenSet::full(3).without(1))
            .unwrap();
        assert_eq!(e_img, vec![0.5, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = ToyScorer::identity(2);
        let q = query(&[(1.0, &[1.0, 0.0])], &[&[0.0, 1.0]]);
        let bad = cand(0, &[1.0, 0.0, 0.0]);
        assert!(matches!(
            s.toy_score(&q, &TokenSet::full(2), &bad),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn params_flat_roundtrip() {
        let p = ToyScorerParams::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let back = ToyScorerParams::from_flat(2, &p.flat()).unwrap();
        assert_eq!(p, back);
        assert!(ToyScorerParams::new(1, vec![1.0], vec![1.0]).is_err());
        assert!(ToyScorerParams::new(2, vec![f64::NAN; 4], vec![0.0; 4]).is_err());
    }
}
