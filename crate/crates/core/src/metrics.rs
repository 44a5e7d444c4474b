//! Focus proportions, balance ratios, imbalance and subset recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refinement::Refinement;
use crate::types::{AugmentedSample, Modality, Ranking, TokenSet, TokenizedQuery};

/// Weighted share of a modality's tokens kept by `preserved`.
///
/// `weights[i]` belongs to the token at global index `offset + i`. Any
/// pre-normalized weighting can be plugged in here.
pub fn weighted_proportion(preserved: &TokenSet, offset: usize, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(i, _)| preserved.contains(offset + i))
        .fold(0.0, |acc, (_, w)| acc + w)
}

/// Focus token proportion with area weights for image tokens and uniform
/// weights for text tokens.
pub fn focus_token_proportion(
    preserved: &TokenSet,
    query: &TokenizedQuery,
    modality: Modality,
) -> f64 {
    let p = match modality {
        Modality::Image => weighted_proportion(preserved, 0, &query.image_weights()),
        Modality::Text => weighted_proportion(preserved, query.n_image(), &query.text_weights()),
    };
    p.clamp(0.0, 1.0)
}

/// Mean relative proportions `(r_image, r_text)` over a non-empty state set.
pub fn focus_balance_ratios<'a, I>(states: I, query: &TokenizedQuery) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a TokenSet>,
{
    let mut sum_image = 0.0;
    let mut sum_text = 0.0;
    let mut count = 0usize;
    for preserved in states {
        let p_i = focus_token_proportion(preserved, query, Modality::Image);
        let p_t = focus_token_proportion(preserved, query, Modality::Text);
        let total = p_i + p_t;
        if total.is_nan() || total <= 0.0 {
            return Err(Error::DegenerateState);
        }
        sum_image += p_i / total;
        sum_text += p_t / total;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("focus ratios need at least one state".into()));
    }
    Ok((sum_image / count as f64, sum_text / count as f64))
}

pub fn focus_imbalance(r_image: f64, r_text: f64) -> f64 {
    (r_image - r_text).abs().min(1.0)
}

/// Fraction of samples whose positive sits in the top `k` of its local ranking.
pub fn subset_recall_at_k(samples: &[AugmentedSample], rankings: &[Ranking], k: usize) -> Result<f64> {
    if samples.len() != rankings.len() {
        return Err(Error::Config(format!(
            "{} samples but {} rankings",
            samples.len(),
            rankings.len()
        )));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (sample, ranking) in samples.iter().zip(rankings) {
        let positive = sample.positive()?.id;
        let rank = ranking
            .rank_of(positive)
            .ok_or_else(|| Error::MissingPositive(sample.sample_id.clone()))?;
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Weighted mean of `(value, weight)` pairs; `None` when the weights sum to zero.
pub fn weighted_average(items: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    Some(items.iter().map(|(v, w)| v * w).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusEntry {
    pub image: Vec<usize>,
    pub text: Vec<usize>,
    pub p_image: f64,
    pub p_text: f64,
    pub margin: f64,
}

impl FocusEntry {
    pub fn is_single_modality(&self) -> bool {
        self.image.is_empty() != self.text.is_empty()
    }
}

/// Per-sample focus summary derived from a refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusReport {
    pub sample_id: String,
    pub n_image: usize,
    pub n_text: usize,
    pub top1: usize,
    pub final_states: Vec<FocusEntry>,
    pub r_image: f64,
    pub r_text: f64,
    pub imbalance: f64,
    pub validations: u64,
    pub scorer_calls: u64,
    pub truncated: bool,
}

impl FocusReport {
    pub fn from_refinement(
        sample_id: &str,
        query: &TokenizedQuery,
        refinement: &Refinement,
    ) -> Result<Self> {
        let sets: Vec<&TokenSet> = refinement
            .finals
            .iter()
            .map(|f| f.state.preserved())
            .collect();
        let (r_image, r_text) = focus_balance_ratios(sets.iter().copied(), query)?;
        let final_states = refinement
            .finals
            .iter()
            .map(|f| {
                let (image, text) = f.state.preserved().split(query.n_image());
                FocusEntry {
                    image,
                    text,
                    p_image: focus_token_proportion(f.state.preserved(), query, Modality::Image),
                    p_text: focus_token_proportion(f.state.preserved(), query, Modality::Text),
                    margin: f.margin,
                }
            })
            .collect();
        Ok(FocusReport {
            sample_id: sample_id.to_string(),
            n_image: query.n_image(),
            n_text: query.n_text(),
            top1: refinement.baseline.top().unwrap_or_default(),
            final_states,
            r_image,
            r_text,
            imbalance: focus_imbalance(r_image, r_text),
            validations: refinement.trace.validations,
            scorer_calls: refinement.trace.scorer_calls,
            truncated: refinement.trace.truncated,
        })
    }

    pub fn has_single_modality_state(&self) -> bool {
        self.final_states.iter().any(FocusEntry::is_single_modality)
    }

    /// Checks the report's own invariants.
    pub fn self_check(&self) -> std::result::Result<(), String> {
        if (self.r_image + self.r_text - 1.0).abs() > 1e-9 {
            return Err(format!("r_image + r_text = {}", self.r_image + self.r_text));
        }
        if !(0.0..=1.0).contains(&self.imbalance) {
            return Err(format!("imbalance {} outside [0, 1]", self.imbalance));
        }
        for e in &self.final_states {
            if !(0.0..=1.0).contains(&e.p_image) || !(0.0..=1.0).contains(&e.p_text) {
                return Err("focus proportion outside [0, 1]".into());
            }
        }
        if self.final_states.is_empty() {
            return Err("no final states".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub sample_id: String,
    /// 1-based rank of the positive in the local pool.
    pub positive_rank: usize,
    pub focus: FocusReport,
}

/// Dataset-level recall and focus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: Vec<SampleEvaluation>,
    /// `(k, Rs@k)` pairs in ascending `k`.
    pub recall: Vec<(usize, f64)>,
    pub mean_r_image: f64,
    pub mean_r_text: f64,
    /// `|mean r_image - mean r_text|` over the evaluated set.
    pub imbalance: f64,
}

impl EvaluationReport {
    pub fn build(samples: Vec<SampleEvaluation>, ks: &[usize]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        let recall = ks
            .iter()
            .map(|&k| {
                let hits = samples.iter().filter(|s| s.positive_rank <= k).count();
                (k, if samples.is_empty() { 0.0 } else { hits as f64 / n })
            })
            .collect();
        let mean_r_image = samples.iter().map(|s| s.focus.r_image).fold(0.0, |a, x| a + x) / n;
        let mean_r_text = samples.iter().map(|s| s.focus.r_text).fold(0.0, |a, x| a + x) / n;
        EvaluationReport {
            recall,
            mean_r_image,
            mean_r_text,
            imbalance: if samples.is_empty() {
                0.0
            } else {
                focus_imbalance(mean_r_image, mean_r_text)
            },
            samples,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}
