//! Domain vocabulary: tokenized queries, pruning states, rankings and candidate pools.
//!
//! Global token indices put every image token first (`0..n_image`) followed by
//! the text tokens (`n_image..n_image + n_text`), so modality membership is a
//! single comparison.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the image weight sum after normalization.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => f.write_str("image"),
            Modality::Text => f.write_str("text"),
        }
    }
}

/// Content of an image segment: an inline feature vector for the synthetic
/// world, or asset + mask references resolved by an external scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagePayload {
    Inline { features: Vec<f64> },
    Asset { asset: String, mask: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageToken {
    pub id: usize,
    /// Normalized area proportion of the segment.
    pub area: f64,
    #[serde(flatten)]
    pub payload: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextToken {
    pub id: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

/// A raw segment before area renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    pub area: f64,
    pub payload: ImagePayload,
}

/// A raw word-level text unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub surface: String,
    pub features: Option<Vec<f64>>,
}

impl RawToken {
    pub fn word(surface: impl Into<String>) -> Self {
        RawToken {
            surface: surface.into(),
            features: None,
        }
    }
}

/// A composed query split into weighted image segments and text tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryRepr", into = "QueryRepr")]
pub struct TokenizedQuery {
    image: Vec<ImageToken>,
    text: Vec<TextToken>,
}

#[derive(Serialize, Deserialize)]
struct QueryRepr {
    image: Vec<ImageToken>,
    text: Vec<TextToken>,
}

impl From<TokenizedQuery> for QueryRepr {
    fn from(q: TokenizedQuery) -> Self {
        QueryRepr {
            image: q.image,
            text: q.text,
        }
    }
}

impl TryFrom<QueryRepr> for TokenizedQuery {
    type Error = Error;

    fn try_from(repr: QueryRepr) -> Result<Self> {
        TokenizedQuery::from_parts(repr.image, repr.text)
    }
}

/// Builds a query from raw segments and words, renormalizing segment areas to
/// sum to one and weighting text tokens uniformly.
pub fn normalize_query(segments: Vec<RawSegment>, tokens: Vec<RawToken>) -> Result<TokenizedQuery> {
    if segments.is_empty() {
        return Err(Error::EmptyModality("image"));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyModality("text"));
    }
    for (index, seg) in segments.iter().enumerate() {
        if !seg.area.is_finite() || seg.area <= 0.0 {
            return Err(Error::NonPositiveArea {
                index,
                area: seg.area,
            });
        }
    }
    let total: f64 = segments.iter().map(|s| s.area).sum();
    let image = segments
        .into_iter()
        .enumerate()
        .map(|(id, s)| ImageToken {
            id,
            area: s.area / total,
            payload: s.payload,
        })
        .collect();
    let text = tokens
        .into_iter()
        .enumerate()
        .map(|(id, t)| TextToken {
            id,
            surface: t.surface,
            features: t.features,
        })
        .collect();
    TokenizedQuery::from_parts(image, text)
}

impl TokenizedQuery {
    /// Validates already-normalized parts.
    pub fn from_parts(image: Vec<ImageToken>, text: Vec<TextToken>) -> Result<Self> {
        if image.is_empty() {
            return Err(Error::EmptyModality("image"));
        }
        if text.is_empty() {
            return Err(Error::EmptyModality("text"));
        }
        for (i, tok) in image.iter().enumerate() {
            if tok.id != i {
                return Err(Error::InvalidQuery(format!(
                    "image token ids must be 0..n, found {} at position {i}",
                    tok.id
                )));
            }
            if !tok.area.is_finite() || tok.area <= 0.0 {
                return Err(Error::NonPositiveArea {
                    index: i,
                    area: tok.area,
                });
            }
        }
        let sum: f64 = image.iter().map(|t| t.area).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidQuery(format!(
                "image areas sum to {sum}, expected 1"
            )));
        }
        for (i, tok) in text.iter().enumerate() {
            if tok.id != i {
                return Err(Error::InvalidQuery(format!(
                    "text token ids must be 0..n, found {} at position {i}",
                    tok.id
                )));
            }
            if tok.surface.is_empty() {
                return Err(Error::InvalidQuery(format!("text token {i} is empty")));
            }
        }
        Ok(TokenizedQuery { image, text })
    }

    pub fn image_tokens(&self) -> &[ImageToken] {
        &self.image
    }

    pub fn text_tokens(&self) -> &[TextToken] {
        &self.text
    }

    pub fn n_image(&self) -> usize {
        self.image.len()
    }

    pub fn n_text(&self) -> usize {
        self.text.len()
    }

    pub fn n_total(&self) -> usize {
        self.image.len() + self.text.len()
    }

    /// Modality of a global token index.
    pub fn modality_of(&self, index: usize) -> Modality {
        if index < self.image.len() {
            Modality::Image
        } else {
            Modality::Text
        }
    }

    /// Area weights of the image tokens.
    pub fn image_weights(&self) -> Vec<f64> {
        self.image.iter().map(|t| t.area).collect()
    }

    /// Uniform text weights `1 / n_text`.
    pub fn text_weights(&self) -> Vec<f64> {
        vec![1.0 / self.text.len() as f64; self.text.len()]
    }

    /// Text surface with inactive tokens dropped, joined by single spaces.
    pub fn active_text(&self, preserved: &TokenSet) -> String {
        let offset = self.n_image();
        self.text
            .iter()
            .filter(|t| preserved.contains(offset + t.id))
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_inline(&self) -> bool {
        self.image
            .iter()
            .all(|t| matches!(t.payload, ImagePayload::Inline { .. }))
            && self.text.iter().all(|t| t.features.is_some())
    }

    pub fn is_asset(&self) -> bool {
        self.image
            .iter()
            .all(|t| matches!(t.payload, ImagePayload::Asset { .. }))
            && self.text.iter().all(|t| t.features.is_none())
    }
}

/// Fixed-length bit set over global token indices.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TokenSet {
    len: usize,
    words: Vec<u64>,
}

impl TokenSet {
    pub fn full(len: usize) -> Self {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        TokenSet { len, words }
    }

    pub fn empty(len: usize) -> Self {
        TokenSet {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut set = TokenSet::empty(len);
        for &i in indices {
            if i >= len {
                return Err(Error::InvalidQuery(format!(
                    "token index {i} out of range for {len} tokens"
                )));
            }
            set.insert(i);
        }
        Ok(set)
    }

    /// Builds a set from the low `len` bits of `mask`.
    pub fn from_mask(len: usize, mask: u64) -> Self {
        assert!(len <= 64, "from_mask supports at most 64 tokens");
        let mut set = TokenSet::empty(len);
        if len > 0 {
            let keep = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
            set.words[0] = mask & keep;
        }
        set
    }

    /// Low 64 bits as an integer mask; only meaningful for `len <= 64`.
    pub fn to_mask(&self) -> u64 {
        self.words.first().copied().unwrap_or(0)
    }

    /// Number of addressable token positions.
    pub fn universe(&self) -> usize {
        self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        assert!(i < self.len);
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn without(&self, i: usize) -> Self {
        let mut next = self.clone();
        next.remove(i);
        next
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Preserved indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let bit = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + bit)
                }
            })
        })
    }

    pub fn to_indices(&self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Splits preserved indices into (image ids, text ids) given the image count.
    pub fn split(&self, n_image: usize) -> (Vec<usize>, Vec<usize>) {
        let mut image = Vec::new();
        let mut text = Vec::new();
        for i in self.iter() {
            if i < n_image {
                image.push(i);
            } else {
                text.push(i - n_image);
            }
        }
        (image, text)
    }
}

impl fmt::Debug for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Lexicographic order over the ascending preserved-index lists.
impl Ord for TokenSet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len
            .cmp(&other.len)
            .then_with(|| self.iter().cmp(other.iter()))
    }
}

impl PartialOrd for TokenSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A pruning state: the preserved tokens of a query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PruneState {
    preserved: TokenSet,
}

impl PruneState {
    /// The initial state with every token preserved.
    pub fn initial(n_total: usize) -> Self {
        PruneState {
            preserved: TokenSet::full(n_total),
        }
    }

    pub fn new(preserved: TokenSet) -> Self {
        PruneState { preserved }
    }

    pub fn preserved(&self) -> &TokenSet {
        &self.preserved
    }

    pub fn pruned_count(&self) -> usize {
        self.preserved.universe() - self.preserved.count()
    }

    pub fn prune(&self, index: usize) -> Self {
        PruneState {
            preserved: self.preserved.without(index),
        }
    }
}

pub type CandidateId = usize;

/// Candidates ordered best first with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    ids: Vec<CandidateId>,
    scores: Vec<f64>,
}

impl Ranking {
    /// Sorts by score descending, breaking ties by ascending candidate id.
    pub fn from_scores(ids: &[CandidateId], scores: &[f64]) -> Self {
        assert_eq!(ids.len(), scores.len());
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| ids[a].cmp(&ids[b]))
        });
        Ranking {
            ids: order.iter().map(|&i| ids[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }

    pub fn ids(&self) -> &[CandidateId] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn top(&self) -> Option<CandidateId> {
        self.ids.first().copied()
    }

    /// 1-based rank of a candidate.
    pub fn rank_of(&self, id: CandidateId) -> Option<usize> {
        self.ids.iter().position(|&c| c == id).map(|p| p + 1)
    }

    /// Score gap between the top candidate and the runner-up (0 for a single candidate).
    pub fn margin(&self) -> f64 {
        match self.scores.as_slice() {
            [a, b, ..] => a - b,
            _ => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Positive,
    TextAugNegative,
    ImageAugNegative,
    IdentityNegative,
    OriginalPositive,
    Distractor,
}

impl CandidateKind {
    /// Kinds produced only by augmentation.
    pub fn is_augmented(self) -> bool {
        matches!(
            self,
            CandidateKind::TextAugNegative
                | CandidateKind::ImageAugNegative
                | CandidateKind::IdentityNegative
                | CandidateKind::OriginalPositive
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidatePayload {
    Inline { features: Vec<f64> },
    Asset { asset: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub kind: CandidateKind,
    #[serde(flatten)]
    pub payload: CandidatePayload,
}

impl Candidate {
    pub fn features(&self) -> Option<&[f64]> {
        match &self.payload {
            CandidatePayload::Inline { features } => Some(features),
            CandidatePayload::Asset { .. } => None,
        }
    }
}

/// A query with its typed local candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub sample_id: String,
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_image: Option<String>,
    pub query: TokenizedQuery,
    pub candidates: Vec<Candidate>,
    pub provenance: String,
}

impl AugmentedSample {
    /// The unique positive candidate.
    pub fn positive(&self) -> Result<&Candidate> {
        let mut positives = self
            .candidates
            .iter()
            .filter(|c| c.kind == CandidateKind::Positive);
        match (positives.next(), positives.next()) {
            (Some(p), None) => Ok(p),
            _ => Err(Error::MissingPositive(self.sample_id.clone())),
        }
    }

    pub fn candidate_ids(&self) -> Vec<CandidateId> {
        self.candidates.iter().map(|c| c.id).collect()
    }

    pub fn count_kind(&self, kind: CandidateKind) -> usize {
        self.candidates.iter().filter(|c| c.kind == kind).count()
    }

    pub fn has_augmented_kinds(&self) -> bool {
        self.candidates.iter().any(|c| c.kind.is_augmented())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inline(v: &[f64]) -> ImagePayload {
        ImagePayload::Inline {
            features: v.to_vec(),
        }
    }

    fn seg(area: f64) -> RawSegment {
        RawSegment {
            area,
            payload: inline(&[1.0, 0.0]),
        }
    }

    #[test]
    fn normalize_keeps_normalized_areas() {
        let q = normalize_query(
            vec![seg(0.7), seg(0.3)],
            vec![RawToken::word("red"), RawToken::word("car")],
        )
        .unwrap();
        assert!((q.image_weights()[0] - 0.7).abs() < 1e-12);
        assert!((q.image_weights()[1] - 0.3).abs() < 1e-12);
        assert_eq!(q.text_weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn normalize_renormalizes_overlapping_areas() {
        let q = normalize_query(vec![seg(2.0), seg(2.0)], vec![RawToken::word("a")]).unwrap();
        assert_eq!(q.image_weights(), vec![0.5, 0.5]);
        assert_eq!(q.n_text(), 1);
    }

    #[test]
    fn normalize_under_covering_segments() {
        let q = normalize_query(
            vec![seg(0.5), seg(0.25)],
            vec![RawToken::word("x"), RawToken::word("y"), RawToken::word("z")],
        )
        .unwrap();
        let w = q.image_weights();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        for t in q.text_weights() {
            assert!((t - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_empty_and_nonpositive() {
        assert!(matches!(
            normalize_query(vec![], vec![RawToken::word("a")]),
            Err(Error::EmptyModality("image"))
        ));
        assert!(matches!(
            normalize_query(vec![seg(1.0)], vec![]),
            Err(Error::EmptyModality("text"))
        ));
        assert!(matches!(
            normalize_query(vec![seg(1.0), seg(0.0)], vec![RawToken::word("a")]),
            Err(Error::NonPositiveArea { index: 1, .. })
        ));
    }

    #[test]
    fn token_set_roundtrip_all_small_masks() {
        for n in 0..=12usize {
            for mask in 0..(1u64 << n) {
                let set = TokenSet::from_mask(n, mask);
                let back = TokenSet::from_indices(n, &set.to_indices()).unwrap();
                assert_eq!(set, back);
                assert_eq!(back.to_mask(), mask);
                assert_eq!(set.count(), mask.count_ones() as usize);
            }
        }
    }

    #[test]
    fn token_set_handles_multiple_words() {
        let mut s = TokenSet::full(130);
        assert_eq!(s.count(), 130);
        s.remove(64);
        s.remove(129);
        assert!(!s.contains(64));
        assert_eq!(s.count(), 128);
        assert_eq!(s.iter().last(), Some(128));
    }

    #[test]
    fn token_set_order_is_lexicographic() {
        let a = TokenSet::from_indices(5, &[0, 3]).unwrap();
        let b = TokenSet::from_indices(5, &[0, 4]).unwrap();
        let c = TokenSet::from_indices(5, &[1]).unwrap();
        let d = TokenSet::from_indices(5, &[0, 3, 4]).unwrap();
        assert!(a < b);
        assert!(b < c);
        assert!(a < d);
    }

    #[test]
    fn prune_state_counts() {
        let s0 = PruneState::initial(5);
        assert_eq!(s0.pruned_count(), 0);
        let s1 = s0.prune(2).prune(4);
        assert_eq!(s1.pruned_count(), 2);
        assert_eq!(s1.preserved().to_indices(), vec![0, 1, 3]);
    }

    #[test]
    fn ranking_tie_break_by_id() {
        let r = Ranking::from_scores(&[2, 0, 1], &[0.5, 0.5, 0.5]);
        assert_eq!(r.ids(), &[0, 1, 2]);
        let r = Ranking::from_scores(&[7], &[0.1]);
        assert_eq!(r.ids(), &[7]);
        assert_eq!(r.margin(), 0.0);
    }

    #[test]
    fn ranking_independent_of_insertion_order() {
        let a = Ranking::from_scores(&[0, 1, 2, 3], &[0.2, 0.9, 0.2, -1.0]);
        let b = Ranking::from_scores(&[3, 2, 1, 0], &[-1.0, 0.2, 0.9, 0.2]);
        assert_eq!(a, b);
        assert_eq!(a.ids(), &[1, 0, 2, 3]);
    }

    #[test]
    fn query_serde_validates() {
        let q = normalize_query(vec![seg(1.0)], vec![RawToken::word("a")]).unwrap();
        let json = serde_json::to_string(&q).unwrap();
        let back: TokenizedQuery = serde_json::from_str(&json).unwrap();
        assert_eq!(q, back);
        let bad = json.replace("\"area\":1.0", "\"area\":0.5");
        assert!(serde_json::from_str::<TokenizedQuery>(&bad).is_err());
    }
}
