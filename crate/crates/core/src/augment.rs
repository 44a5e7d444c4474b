//! Hard-negative sample planning over pluggable generation backends, source
//! mixing, and in-sample negative selection.
//!
//! From a (query image, query text, positive) triplet the planner builds a
//! local pool with:
//! - text-augmented negatives: the query image edited with a mutated text, so
//!   they look like the query image but violate the text intent;
//! - image-augmented negatives: images generated from a description of the
//!   full query, consistent with the text but visually different;
//! - the query image itself as an identity negative;
//! - a positive that is either the original target or, for similarity-paired
//!   sources, a synthesized replacement (the original is kept as an
//!   `OriginalPositive` candidate).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::protocol::{
    parse_response, stable_hash, Capability, ClientConfig, Endpoint, GenerateMessage,
    GeneratedMessage, RemoteClient, PROTOCOL_VERSION,
};
use crate::types::{
    normalize_query, AugmentedSample, Candidate, CandidateId, CandidateKind, CandidatePayload,
    ImagePayload, RawSegment, RawToken,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// Real-image datasets paired by similarity; targets are only loosely consistent.
    SimilarityPaired,
    /// Datasets built by editing; targets are consistent with the query.
    EditingDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub mask: String,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTriplet {
    pub id: String,
    pub query_image: String,
    pub query_text: String,
    pub positive: String,
    pub source: SourceTag,
    /// Dataset name recorded as provenance.
    #[serde(default)]
    pub dataset: String,
    /// Precomputed segmentation; the whole image is one segment when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentRef>>,
}

impl SourceTriplet {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("id", &self.id),
            ("query_image", &self.query_image),
            ("query_text", &self.query_text),
            ("positive", &self.positive),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Config(format!(
                    "triplet {:?} has an empty {name}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Content-creation capabilities used by the planner.
pub trait GenerationClient: Send + Sync {
    /// Texts that alter the semantics of the query text.
    fn mutate_text(&self, sample_id: &str, text: &str, count: usize) -> Result<Vec<String>>;
    fn edit_image(&self, sample_id: &str, image: &str, instruction: &str) -> Result<String>;
    fn generate_image(&self, sample_id: &str, description: &str, variant: u32) -> Result<String>;
    /// A description integrating the query image and text.
    fn describe(&self, sample_id: &str, image: &str, text: &str) -> Result<String>;
}

fn hex16(h: u64) -> String {
    format!("{h:016x}")
}

fn arg<'a>(args: &'a Value, key: &str, stage: &'static str) -> Result<&'a Value> {
    args.get(key).ok_or_else(|| Error::GenerationFailed {
        stage,
        message: format!("missing argument {key:?}"),
    })
}

fn arg_str<'a>(args: &'a Value, key: &str, stage: &'static str) -> Result<&'a str> {
    arg(args, key, stage)?
        .as_str()
        .ok_or_else(|| Error::GenerationFailed {
            stage,
            message: format!("argument {key:?} is not a string"),
        })
}

/// Deterministic hash-derived content for each capability.
pub fn mock_generate(seed: u64, capability: Capability, args: &Value) -> Result<Vec<String>> {
    let stage = capability.as_str();
    match capability {
        Capability::MutateText => {
            let text = arg_str(args, "text", stage)?;
            let count = arg(args, "count", stage)?
                .as_u64()
                .ok_or_else(|| Error::GenerationFailed {
                    stage,
                    message: "count is not an integer".into(),
                })?;
            Ok((0..count)
                .map(|i| {
                    let h = stable_hash(seed, &["mutate", text, &i.to_string()]);
                    format!("not {text} [{:08x}]", h as u32)
                })
                .collect())
        }
        Capability::EditImage => {
            let image = arg_str(args, "image", stage)?;
            let instruction = arg_str(args, "instruction", stage)?;
            let h = stable_hash(seed, &["edit", image, instruction]);
            Ok(vec![format!("mock://edit/{}", hex16(h))])
        }
        Capability::GenerateImage => {
            let description = arg_str(args, "description", stage)?;
            let variant = arg(args, "variant", stage)?.as_u64().unwrap_or(0);
            let h = stable_hash(seed, &["generate", description, &variant.to_string()]);
            Ok(vec![format!("mock://gen/{}", hex16(h))])
        }
        Capability::Describe => {
            let image = arg_str(args, "image", stage)?;
            let text = arg_str(args, "text", stage)?;
            Ok(vec![format!("a scene like {image} where {text}")])
        }
    }
}

fn single(mut outputs: Vec<String>, stage: &'static str) -> Result<String> {
    if outputs.len() != 1 {
        return Err(Error::GenerationFailed {
            stage,
            message: format!("expected one output, got {}", outputs.len()),
        });
    }
    Ok(outputs.remove(0))
}

/// Offline stand-in for the VLM, editing and generation models.
#[derive(Debug, Clone, Default)]
pub struct MockGenerationClient {
    pub seed: u64,
}

impl MockGenerationClient {
    pub fn new(seed: u64) -> Self {
        MockGenerationClient { seed }
    }
}

impl GenerationClient for MockGenerationClient {
    fn mutate_text(&self, _: &str, text: &str, count: usize) -> Result<Vec<String>> {
        mock_generate(
            self.seed,
            Capability::MutateText,
            &json!({"text": text, "count": count}),
        )
    }

    fn edit_image(&self, _: &str, image: &str, instruction: &str) -> Result<String> {
        let out = mock_generate(
            self.seed,
            Capability::EditImage,
            &json!({"image": image, "instruction": instruction}),
        )?;
        single(out, "edit_image")
    }

    fn generate_image(&self, _: &str, description: &str, variant: u32) -> Result<String> {
        let out = mock_generate(
            self.seed,
            Capability::GenerateImage,
            &json!({"description": description, "variant": variant}),
        )?;
        single(out, "generate_image")
    }

    fn describe(&self, _: &str, image: &str, text: &str) -> Result<String> {
        let out = mock_generate(
            self.seed,
            Capability::Describe,
            &json!({"image": image, "text": text}),
        )?;
        single(out, "describe")
    }
}

/// Generation backend reached over the line protocol with `"type":"generate"` requests.
pub struct RemoteGenerationClient {
    client: RemoteClient,
}

impl RemoteGenerationClient {
    pub fn new(endpoint: Endpoint, config: ClientConfig) -> Self {
        RemoteGenerationClient {
            client: RemoteClient::new(endpoint, config),
        }
    }

    fn call(&self, sample_id: &str, capability: Capability, args: Value) -> Result<Vec<String>> {
        let stage = capability.as_str();
        let msg = GenerateMessage {
            v: PROTOCOL_VERSION,
            kind: "generate".into(),
            sample_id: sample_id.into(),
            capability,
            args,
        };
        let fail = |e: Error| Error::GenerationFailed {
            stage,
            message: e.to_string(),
        };
        let line = serde_json::to_string(&msg)?;
        let resp = self.client.roundtrip(&line).map_err(fail)?;
        let value = parse_response(&resp, "generated", sample_id).map_err(fail)?;
        let parsed: GeneratedMessage = serde_json::from_value(value).map_err(|e| fail(e.into()))?;
        Ok(parsed.outputs)
    }
}

impl GenerationClient for RemoteGenerationClient {
    fn mutate_text(&self, sample_id: &str, text: &str, count: usize) -> Result<Vec<String>> {
        self.call(
            sample_id,
            Capability::MutateText,
            json!({"text": text, "count": count}),
        )
    }

    fn edit_image(&self, sample_id: &str, image: &str, instruction: &str) -> Result<String> {
        let out = self.call(
            sample_id,
            Capability::EditImage,
            json!({"image": image, "instruction": instruction}),
        )?;
        single(out, "edit_image")
    }

    fn generate_image(&self, sample_id: &str, description: &str, variant: u32) -> Result<String> {
        let out = self.call(
            sample_id,
            Capability::GenerateImage,
            json!({"description": description, "variant": variant}),
        )?;
        single(out, "generate_image")
    }

    fn describe(&self, sample_id: &str, image: &str, text: &str) -> Result<String> {
        let out = self.call(
            sample_id,
            Capability::Describe,
            json!({"image": image, "text": text}),
        )?;
        single(out, "describe")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivePolicy {
    /// Synthesize for similarity-paired sources, keep the original otherwise.
    #[default]
    BySource,
    SynthesizeReplacement,
    KeepOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    pub text_aug: usize,
    pub image_aug: usize,
    pub identity: usize,
    pub positive_policy: PositivePolicy,
    /// Fraction of triplets that receive augmentation.
    pub negative_ratio: f64,
    /// Local pool size reached by padding with distractors.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            text_aug: 1,
            image_aug: 1,
            identity: 1,
            positive_policy: PositivePolicy::BySource,
            negative_ratio: 1.0,
            pool_size: 5,
            seed: 0,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.negative_ratio) {
            return Err(Error::Config(format!(
                "negative ratio {} outside [0, 1]",
                self.negative_ratio
            )));
        }
        if self.identity > 1 {
            return Err(Error::Config("at most one identity negative".into()));
        }
        Ok(())
    }

    fn synthesizes(&self, source: SourceTag) -> bool {
        match self.positive_policy {
            PositivePolicy::BySource => source == SourceTag::SimilarityPaired,
            PositivePolicy::SynthesizeReplacement => true,
            PositivePolicy::KeepOriginal => false,
        }
    }
}

fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(seed, &["sample", sample_id]))
}

fn tokenize(triplet: &SourceTriplet) -> Result<crate::types::TokenizedQuery> {
    let segments = match &triplet.segments {
        Some(segs) if !segs.is_empty() => segs
            .iter()
            .map(|s| RawSegment {
                area: s.area,
                payload: ImagePayload::Asset {
                    asset: triplet.query_image.clone(),
                    mask: s.mask.clone(),
                },
            })
            .collect(),
        _ => vec![RawSegment {
            area: 1.0,
            payload: ImagePayload::Asset {
                asset: triplet.query_image.clone(),
                mask: "full".into(),
            },
        }],
    };
    let tokens = triplet
        .query_text
        .split_whitespace()
        .map(RawToken::word)
        .collect();
    normalize_query(segments, tokens)
}

fn assemble(
    triplet: &SourceTriplet,
    plan: &AugmentPlan,
    mut pool: Vec<(CandidateKind, String)>,
    distractors: &[String],
) -> Result<AugmentedSample> {
    for d in distractors {
        if pool.len() >= plan.pool_size {
            break;
        }
        pool.push((CandidateKind::Distractor, d.clone()));
    }
    // Shuffle so the positive's position carries no tie-break advantage.
    let mut rng = sample_rng(plan.seed, &triplet.id);
    pool.shuffle(&mut rng);
    let candidates = pool
        .into_iter()
        .enumerate()
        .map(|(id, (kind, asset))| Candidate {
            id,
            kind,
            payload: CandidatePayload::Asset { asset },
        })
        .collect();
    Ok(AugmentedSample {
        sample_id: triplet.id.clone(),
        query_text: triplet.query_text.clone(),
        query_image: Some(triplet.query_image.clone()),
        query: tokenize(triplet)?,
        candidates,
        provenance: if triplet.dataset.is_empty() {
            match triplet.source {
                SourceTag::SimilarityPaired => "similarity_paired".into(),
                SourceTag::EditingDriven => "editing_driven".into(),
            }
        } else {
            triplet.dataset.clone()
        },
    })
}

/// Builds the augmented sample for one triplet.
///
/// `distractors` pad the pool up to `plan.pool_size` in the given order.
pub fn plan_augmented_sample(
    triplet: &SourceTriplet,
    plan: &AugmentPlan,
    client: &dyn GenerationClient,
    distractors: &[String],
) -> Result<AugmentedSample> {
    triplet.validate()?;
    plan.validate()?;
    let sid = triplet.id.as_str();
    let mut pool: Vec<(CandidateKind, String)> = Vec::new();

    if plan.synthesizes(triplet.source) {
        let description = client.describe(sid, &triplet.query_image, &triplet.query_text)?;
        let synthesized = client.generate_image(sid, &description, 0)?;
        pool.push((CandidateKind::Positive, synthesized));
        pool.push((CandidateKind::OriginalPositive, triplet.positive.clone()));
    } else {
        pool.push((CandidateKind::Positive, triplet.positive.clone()));
    }

    if plan.text_aug > 0 {
        let texts = client.mutate_text(sid, &triplet.query_text, plan.text_aug)?;
        if texts.len() != plan.text_aug {
            return Err(Error::GenerationFailed {
                stage: "mutate_text",
                message: format!("asked for {} texts, got {}", plan.text_aug, texts.len()),
            });
        }
        for text in &texts {
            let edited = client.edit_image(sid, &triplet.query_image, text)?;
            pool.push((CandidateKind::TextAugNegative, edited));
        }
    }

    if plan.image_aug > 0 {
        let description = client.describe(sid, &triplet.query_image, &triplet.query_text)?;
        for i in 0..plan.image_aug {
            // Variant 0 is reserved for the synthesized positive.
            let generated = client.generate_image(sid, &description, i as u32 + 1)?;
            pool.push((CandidateKind::ImageAugNegative, generated));
        }
    }

    for _ in 0..plan.identity {
        pool.push((CandidateKind::IdentityNegative, triplet.query_image.clone()));
    }

    assemble(triplet, plan, pool, distractors)
}

/// A non-augmented sample: the original positive plus distractors.
pub fn plain_sample(
    triplet: &SourceTriplet,
    plan: &AugmentPlan,
    distractors: &[String],
) -> Result<AugmentedSample> {
    triplet.validate()?;
    let pool = vec![(CandidateKind::Positive, triplet.positive.clone())];
    assemble(triplet, plan, pool, distractors)
}

/// Indices of exactly `round(ratio · n)` items, chosen by a seeded shuffle.
pub fn select_fraction(n: usize, ratio: f64, seed: u64) -> Vec<bool> {
    let take = ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; n];
    for &i in &order[..take] {
        chosen[i] = true;
    }
    chosen
}

/// Plans a whole corpus. Output order equals input order.
///
/// Distractors are positives of other triplets, drawn per sample under the
/// plan's seed. `parallel` caps the number of samples in flight.
pub fn augment_corpus(
    triplets: &[SourceTriplet],
    plan: &AugmentPlan,
    client: &dyn GenerationClient,
    parallel: usize,
) -> Result<Vec<AugmentedSample>> {
    plan.validate()?;
    let augmented = select_fraction(triplets.len(), plan.negative_ratio, plan.seed);
    let build = |i: usize| -> Result<AugmentedSample> {
        let triplet = &triplets[i];
        let mut others: Vec<String> = triplets
            .iter()
            .enumerate()
            .filter(|(j, t)| *j != i && t.positive != triplet.positive)
            .map(|(_, t)| t.positive.clone())
            .collect();
        let mut rng = sample_rng(plan.seed ^ 0x5eed, &triplet.id);
        others.shuffle(&mut rng);
        others.truncate(plan.pool_size);
        if augmented[i] {
            plan_augmented_sample(triplet, plan, client, &others)
        } else {
            plain_sample(triplet, plan, &others)
        }
    };
    if parallel <= 1 {
        (0..triplets.len()).map(build).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| (0..triplets.len()).into_par_iter().map(build).collect())
    }
}

/// What to do when a source runs dry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    /// Keep mixing the remaining sources with their relative ratios.
    #[default]
    Rescale,
    /// End the stream when an exhausted source is due.
    Stop,
}

/// Deterministic interleaver (smooth weighted round robin).
///
/// With integer ratios every consecutive window of `Σ ratio` items holds
/// exactly `ratio[i]` items from source `i` while all sources last. The seed
/// only fixes the tie-break priority among sources.
pub struct SourceMixer<T> {
    sources: Vec<std::collections::VecDeque<T>>,
    weights: Vec<u64>,
    current: Vec<i64>,
    active: Vec<bool>,
    priority: Vec<usize>,
    policy: ExhaustionPolicy,
    stopped: bool,
}

impl<T> SourceMixer<T> {
    pub fn new(
        sources: Vec<Vec<T>>,
        ratio: &[u64],
        seed: u64,
        policy: ExhaustionPolicy,
    ) -> Result<Self> {
        if sources.len() != ratio.len() {
            return Err(Error::Config(format!(
                "{} sources but {} ratio entries",
                sources.len(),
                ratio.len()
            )));
        }
        if sources.is_empty() {
            return Err(Error::Config("no sources to mix".into()));
        }
        if ratio.contains(&0) {
            return Err(Error::Config("ratio entries must be positive".into()));
        }
        if let Some(i) = sources.iter().position(Vec::is_empty) {
            return Err(Error::SourceExhausted(i));
        }
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut priority = vec![0; sources.len()];
        for (rank, &src) in order.iter().enumerate() {
            priority[src] = rank;
        }
        Ok(SourceMixer {
            current: vec![0; sources.len()],
            active: vec![true; sources.len()],
            sources: sources.into_iter().map(Into::into).collect(),
            weights: ratio.to_vec(),
            priority,
            policy,
            stopped: false,
        })
    }
}

impl<T> Iterator for SourceMixer<T> {
    /// `(source index, item)`.
    type Item = (usize, T);

    fn next(&mut self) -> Option<(usize, T)> {
        if self.stopped {
            return None;
        }
        let total: i64 = self
            .weights
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .map(|(w, _)| *w as i64)
            .sum();
        if total == 0 {
            return None;
        }
        let mut best: Option<usize> = None;
        for i in 0..self.sources.len() {
            if !self.active[i] {
                continue;
            }
            self.current[i] += self.weights[i] as i64;
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = self.current[i] > self.current[b]
                        || (self.current[i] == self.current[b]
                            && self.priority[i] < self.priority[b]);
                    Some(if better { i } else { b })
                }
            };
        }
        let pick = best?;
        self.current[pick] -= total;
        let Some(item) = self.sources[pick].pop_front() else {
            self.stopped = true;
            return None;
        };
        if self.sources[pick].is_empty() && self.policy == ExhaustionPolicy::Rescale {
            self.active[pick] = false;
            self.current.iter_mut().for_each(|c| *c = 0);
        }
        Some((pick, item))
    }
}

/// Collects a mixed stream; see [`SourceMixer`].
pub fn mix_sources<T>(
    sources: Vec<Vec<T>>,
    ratio: &[u64],
    seed: u64,
    policy: ExhaustionPolicy,
) -> Result<Vec<(usize, T)>> {
    Ok(SourceMixer::new(sources, ratio, seed, policy)?.collect())
}

/// Uniformly samples `count` non-positive candidates without replacement.
/// Returned ids are ascending.
pub fn select_in_sample_negatives(
    sample: &AugmentedSample,
    count: usize,
    seed: u64,
) -> Result<Vec<CandidateId>> {
    let negatives: Vec<CandidateId> = sample
        .candidates
        .iter()
        .filter(|c| c.kind != CandidateKind::Positive)
        .map(|c| c.id)
        .collect();
    if negatives.len() < count {
        return Err(Error::InsufficientNegatives {
            needed: count,
            available: negatives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &["negatives", &sample.sample_id]));
    let mut picked: Vec<CandidateId> = negatives
        .choose_multiple(&mut rng, count)
        .copied()
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
