//! A synthetic composed-retrieval universe with known ground truth.
//!
//! Visual concepts are random unit vectors in `R^d`. A concept word lives in
//! a rotated text space (`R · c_k`), so a scorer has to learn `W_txt ≈ Rᵀ` to
//! read text. Query images are area-weighted mixtures of concepts; the
//! modification text names one key concept absent from the image, padded
//! with filler words. The positive target is `unit(ê + c_key)`.
//!
//! Common-case pools can be solved from one modality alone. With probability
//! `beta` the negatives are other images that carry the key concept (image
//! suffices); otherwise they are near-copies of the query image with a wrong
//! concept (text suffices). Hard pools carry the augmented kinds.

mod loss;
mod train;

pub use loss::{
    batch_loss, batch_loss_and_grad, contrastive_grad, contrastive_loss, distillation_grad,
    distillation_loss, distillation_loss_with, finite_difference_check,
    finite_difference_check_with_step, in_sample_weight, KlDirection, LossItem, LossSettings,
    TrainingBatch,
};
pub use train::{
    evaluate_hard_set, hard_eval_set, shortcut_rate, sweep, train_toy_scorer, HistoryRecord, SweepEntry,
    TrainingConfig, TrainingOutcome,
};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::stable_hash;
use crate::scoring::toy::dot;
use crate::scoring::ToyScorerParams;
use crate::types::{
    normalize_query, AugmentedSample, Candidate, CandidateKind, CandidatePayload, ImagePayload,
    RawSegment, RawToken, TokenizedQuery,
};

const MAX_REJECTIONS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dim: usize,
    pub concepts: usize,
    pub fillers: usize,
    /// Inclusive range of image segments per query.
    pub image_tokens: [usize; 2],
    /// Inclusive range of text tokens per query (one key word plus fillers).
    pub text_tokens: [usize; 2],
    pub pool_size: usize,
    /// Probability that a common-case pool is solvable from the image alone.
    pub beta: f64,
    /// Share of emitted samples that carry a hard pool.
    pub hard_fraction: f64,
    pub segment_noise: f64,
    /// Weight of the contradicting concept in text-augmented negatives.
    pub text_aug_strength: f64,
    /// Weight of the foreign image in image-augmented negatives.
    pub image_aug_strength: f64,
    /// Scale of the teacher's text projection.
    pub teacher_text_gain: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dim: 32,
            concepts: 24,
            fillers: 6,
            image_tokens: [3, 5],
            text_tokens: [2, 4],
            pool_size: 5,
            beta: 1.0,
            hard_fraction: 0.5,
            segment_noise: 0.1,
            text_aug_strength: 0.6,
            image_aug_strength: 0.6,
            teacher_text_gain: 0.4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < 4 {
            return bad(format!("dimension {} < 4", self.dim));
        }
        if self.pool_size < 2 {
            return bad(format!("pool size {} < 2", self.pool_size));
        }
        for (name, [lo, hi]) in [("image", self.image_tokens), ("text", self.text_tokens)] {
            if lo == 0 || lo > hi {
                return bad(format!("invalid {name} token range [{lo}, {hi}]"));
            }
        }
        if self.concepts < self.image_tokens[1] + 2 {
            return bad(format!(
                "{} concepts cannot cover {} image concepts plus two text concepts",
                self.concepts, self.image_tokens[1]
            ));
        }
        if self.text_tokens[1] > 1 && self.fillers == 0 {
            return bad("text queries longer than one token need filler words".into());
        }
        for (name, p) in [("beta", self.beta), ("hard fraction", self.hard_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("segment noise", self.segment_noise),
            ("text augmentation strength", self.text_aug_strength),
            ("image augmentation strength", self.image_aug_strength),
            ("teacher text gain", self.teacher_text_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Which pool a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Negatives share the key concept but not the image.
    ImageEasy,
    /// Negatives share the image but not the key concept.
    TextEasy,
    Hard,
}

impl PoolKind {
    fn tag(self) -> &'static str {
        match self {
            PoolKind::ImageEasy => "synth:image_easy",
            PoolKind::TextEasy => "synth:text_easy",
            PoolKind::Hard => "synth:hard",
        }
    }
}

/// The query side of a sample before any pool is attached.
#[derive(Debug, Clone)]
pub struct BaseSample {
    pub sample_id: String,
    pub query: TokenizedQuery,
    pub image_concepts: Vec<usize>,
    pub key_concept: usize,
    /// `unit(Σ area · segment)`.
    pub image_vector: Vec<f64>,
    pub positive: Vec<f64>,
    pub query_text: String,
}

pub(crate) fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Row-major orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = gaussian(rng, d);
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

/// A fixed universe of concepts, words and rotation.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    concepts: Vec<Vec<f64>>,
    words: Vec<Vec<f64>>,
    fillers: Vec<Vec<f64>>,
    rotation: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(config.seed, &["world"]));
        let concepts: Vec<Vec<f64>> = (0..config.concepts)
            .map(|_| unit(gaussian(&mut rng, d)))
            .collect();
        let rotation = random_rotation(&mut rng, d);
        let words = concepts
            .iter()
            .map(|c| {
                (0..d)
                    .map(|r| dot(&rotation[r * d..(r + 1) * d], c))
                    .collect()
            })
            .collect();
        let fillers = (0..config.fillers)
            .map(|_| unit(gaussian(&mut rng, d)))
            .collect();
        Ok(World {
            config,
            concepts,
            words,
            fillers,
            rotation,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn concept(&self, k: usize) -> &[f64] {
        &self.concepts[k]
    }

    /// The pretrained starting point: `W_img = I`, `W_txt = g · Rᵀ`.
    pub fn teacher_params(&self) -> ToyScorerParams {
        let d = self.config.dim;
        let g = self.config.teacher_text_gain;
        let mut params = ToyScorerParams::identity(d);
        for i in 0..d {
            for j in 0..d {
                params.text_proj[i * d + j] = g * self.rotation[j * d + i];
            }
        }
        params
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stable_hash(self.config.seed, parts))
    }

    fn range(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
        rng.gen_range(lo..=hi)
    }

    /// A random unnormalized-area image as `(unit vector, concepts)`.
    fn random_image(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
        let n = Self::range(rng, self.config.image_tokens);
        let ks = sample_indices(rng, self.config.concepts, n).into_vec();
        let mut v = vec![0.0; self.config.dim];
        for &k in &ks {
            let a: f64 = rng.gen_range(0.5..1.5);
            v = axpy(a, &self.concepts[k], &v);
        }
        (unit(v), ks)
    }

    fn concept_outside(rng: &mut ChaCha8Rng, total: usize, exclude: &[usize]) -> usize {
        loop {
            let k = rng.gen_range(0..total);
            if !exclude.contains(&k) {
                return k;
            }
        }
    }

    /// The query and positive for `(split, index)`, independent of any pool.
    pub fn base(&self, split: &str, index: usize) -> BaseSample {
        let cfg = &self.config;
        let d = cfg.dim;
        let idx = index.to_string();
        let mut rng = self.rng(&["base", split, &idx]);

        let n_image = Self::range(&mut rng, cfg.image_tokens);
        let image_concepts = sample_indices(&mut rng, cfg.concepts, n_image).into_vec();
        let segments: Vec<RawSegment> = image_concepts
            .iter()
            .map(|&k| {
                let noise = gaussian(&mut rng, d);
                let v = unit(axpy(cfg.segment_noise / (d as f64).sqrt(), &noise, &self.concepts[k]));
                RawSegment {
                    area: rng.gen_range(0.5..1.5),
                    payload: ImagePayload::Inline { features: v },
                }
            })
            .collect();

        let key_concept = Self::concept_outside(&mut rng, cfg.concepts, &image_concepts);
        let n_text = Self::range(&mut rng, cfg.text_tokens);
        let key_pos = rng.gen_range(0..n_text);
        let mut tokens = Vec::with_capacity(n_text);
        let mut words = Vec::with_capacity(n_text);
        for t in 0..n_text {
            let (surface, features) = if t == key_pos {
                (format!("concept{key_concept}"), self.words[key_concept].clone())
            } else {
                let f = rng.gen_range(0..self.fillers.len());
                (format!("filler{f}"), self.fillers[f].clone())
            };
            words.push(surface.clone());
            tokens.push(RawToken {
                surface,
                features: Some(features),
            });
        }
        let query = normalize_query(segments, tokens).expect("generated query is well formed");

        let mut e = vec![0.0; d];
        for tok in query.image_tokens() {
            if let ImagePayload::Inline { features } = &tok.payload {
                e = axpy(tok.area, features, &e);
            }
        }
        let image_vector = unit(e);
        let positive = unit(axpy(1.0, &self.concepts[key_concept], &image_vector));
        BaseSample {
            sample_id: format!("{split}-{index:05}"),
            query,
            image_concepts,
            key_concept,
            image_vector,
            positive,
            query_text: words.join(" "),
        }
    }

    /// Negatives for a common-case pool, re-drawn until the single-modality
    /// ranking puts the positive strictly first.
    fn common_negatives(
        &self,
        base: &BaseSample,
        kind: PoolKind,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let key = &self.concepts[base.key_concept];
        let probe: &[f64] = match kind {
            PoolKind::ImageEasy => &base.image_vector,
            _ => key,
        };
        let pos_score = dot(probe, &base.positive);
        let mut out = Vec::with_capacity(cfg.pool_size - 1);
        while out.len() < cfg.pool_size - 1 {
            let mut neg = Vec::new();
            for _ in 0..MAX_REJECTIONS {
                neg = match kind {
                    PoolKind::ImageEasy => {
                        let (other, _) = self.random_image(rng);
                        unit(axpy(1.0, key, &other))
                    }
                    _ => {
                        let (other, _) = self.random_image(rng);
                        let near = unit(axpy(0.5, &other, &base.image_vector));
                        let mut exclude = base.image_concepts.clone();
                        exclude.push(base.key_concept);
                        let wrong = Self::concept_outside(rng, cfg.concepts, &exclude);
                        unit(axpy(1.0, &self.concepts[wrong], &near))
                    }
                };
                if dot(probe, &neg) < pos_score - 1e-3 {
                    break;
                }
            }
            out.push(neg);
        }
        out
    }

    fn hard_negatives(
        &self,
        base: &BaseSample,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(CandidateKind, Vec<f64>)> {
        let cfg = &self.config;
        let e = &base.image_vector;
        let pos_image_score = dot(e, &base.positive);
        let mut exclude = base.image_concepts.clone();
        exclude.push(base.key_concept);
        let mut text_aug = Vec::new();
        for _ in 0..MAX_REJECTIONS {
            let wrong = Self::concept_outside(rng, cfg.concepts, &exclude);
            text_aug = unit(axpy(cfg.text_aug_strength, &self.concepts[wrong], e));
            if dot(e, &text_aug) > pos_image_score + 1e-3 {
                break;
            }
        }
        let (other, _) = self.random_image(rng);
        let image_aug = unit(axpy(
            cfg.image_aug_strength,
            &other,
            &self.concepts[base.key_concept],
        ));
        let mut negs = vec![
            (CandidateKind::TextAugNegative, text_aug),
            (CandidateKind::IdentityNegative, e.clone()),
            (CandidateKind::ImageAugNegative, image_aug),
        ];
        while negs.len() < cfg.pool_size - 1 {
            let (other, _) = self.random_image(rng);
            let k = rng.gen_range(0..cfg.concepts);
            negs.push((
                CandidateKind::Distractor,
                unit(axpy(1.0, &self.concepts[k], &other)),
            ));
        }
        negs.truncate(cfg.pool_size - 1);
        negs
    }

    /// Attaches a pool of the given kind to the base sample of `(split, index)`.
    pub fn sample_with(&self, split: &str, index: usize, kind: PoolKind) -> AugmentedSample {
        let base = self.base(split, index);
        let idx = index.to_string();
        let mut rng = self.rng(&["pool", split, &idx, kind.tag()]);
        let mut pool: Vec<(CandidateKind, Vec<f64>)> = vec![(CandidateKind::Positive, base.positive.clone())];
        match kind {
            PoolKind::Hard => pool.extend(self.hard_negatives(&base, &mut rng)),
            _ => pool.extend(
                self.common_negatives(&base, kind, &mut rng)
                    .into_iter()
                    .map(|v| (CandidateKind::Distractor, v)),
            ),
        }
        use rand::seq::SliceRandom;
        pool.shuffle(&mut rng);
        let candidates = pool
            .into_iter()
            .enumerate()
            .map(|(id, (kind, features))| Candidate {
                id,
                kind,
                payload: CandidatePayload::Inline { features },
            })
            .collect();
        AugmentedSample {
            sample_id: base.sample_id,
            query_text: base.query_text,
            query_image: None,
            query: base.query,
            candidates,
            provenance: kind.tag().into(),
        }
    }

    /// The pool kind that `generate_world` assigns to `index`.
    pub fn pool_kind(&self, split: &str, index: usize) -> PoolKind {
        let mut rng = self.rng(&["kind", split, &index.to_string()]);
        if rng.gen_bool(self.config.hard_fraction) {
            PoolKind::Hard
        } else if rng.gen_bool(self.config.beta) {
            PoolKind::ImageEasy
        } else {
            PoolKind::TextEasy
        }
    }

    pub fn sample(&self, split: &str, index: usize) -> AugmentedSample {
        self.sample_with(split, index, self.pool_kind(split, index))
    }
}

/// The first `count` samples of the world's stream, in index order.
pub fn generate_world(config: &WorldConfig, count: usize) -> Result<Vec<AugmentedSample>> {
    let world = World::new(config.clone())?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| world.sample("world", i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{rank, ScoreRequest, ToyScorer};
    use crate::types::TokenSet;

    fn image_only(sample: &AugmentedSample) -> TokenSet {
        let q = &sample.query;
        TokenSet::from_indices(q.n_total(), &(0..q.n_image()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let r = random_rotation(&mut rng, d);
        for i in 0..d {
            for j in 0..d {
                let v = dot(&r[i * d..(i + 1) * d], &r[j * d..(j + 1) * d]);
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_maps_words_back_to_concepts() {
        let world = World::new(WorldConfig {
            teacher_text_gain: 1.0,
            ..Default::default()
        })
        .unwrap();
        let p = world.teacher_params();
        let zero = vec![0.0; 32];
        let z = p.compose(&zero, &world.words[3]);
        for (a, b) in z.iter().zip(&world.concepts[3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn image_easy_pools_are_solved_by_the_image() {
        let world = World::new(WorldConfig {
            beta: 1.0,
            hard_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        let scorer = ToyScorer::identity(32);
        for i in 0..200 {
            let s = world.sample("t", i);
            assert_eq!(s.provenance, "synth:image_easy");
            let r = rank(
                &scorer,
                &ScoreRequest::new(&s.sample_id, &s.query, &image_only(&s), &s.candidates),
            )
            .unwrap();
            assert_eq!(r.top(), Some(s.positive().unwrap().id), "sample {i}");
        }
    }

    #[test]
    fn hard_pools_prefer_text_aug_on_image_alone() {
        let world = World::new(WorldConfig {
            hard_fraction: 1.0,
            ..Default::default()
        })
        .unwrap();
        let scorer = ToyScorer::identity(32);
        for i in 0..200 {
            let s = world.sample("t", i);
            for kind in [
                CandidateKind::Positive,
                CandidateKind::TextAugNegative,
                CandidateKind::ImageAugNegative,
                CandidateKind::IdentityNegative,
                CandidateKind::Distractor,
            ] {
                assert_eq!(s.count_kind(kind), 1);
            }
            let r = rank(
                &scorer,
                &ScoreRequest::new(&s.sample_id, &s.query, &image_only(&s), &s.candidates),
            )
            .unwrap();
            let kind_at = |rank: usize| s.candidates[r.ids()[rank]].kind;
            assert_eq!(kind_at(0), CandidateKind::IdentityNegative);
            assert_eq!(kind_at(1), CandidateKind::TextAugNegative, "sample {i}");
        }
    }

    #[test]
    fn small_pools_truncate_hard_kinds() {
        let world = World::new(WorldConfig {
            hard_fraction: 1.0,
            pool_size: 2,
            ..Default::default()
        })
        .unwrap();
        let s = world.sample("t", 0);
        assert_eq!(s.candidates.len(), 2);
        assert_eq!(s.count_kind(CandidateKind::TextAugNegative), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig {
            seed: 42,
            ..Default::default()
        };
        let a = serde_json::to_string(&generate_world(&cfg, 20).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_world(&cfg, 20).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(
            &generate_world(
                &WorldConfig {
                    seed: 43,
                    ..Default::default()
                },
                20,
            )
            .unwrap(),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            WorldConfig {
                dim: 3,
                ..Default::default()
            },
            WorldConfig {
                pool_size: 1,
                ..Default::default()
            },
            WorldConfig {
                beta: 1.5,
                ..Default::default()
            },
            WorldConfig {
                concepts: 5,
                ..Default::default()
            },
        ] {
            assert!(World::new(cfg).is_err());
        }
    }
}
