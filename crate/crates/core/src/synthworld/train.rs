use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, batch_loss_and_grad, in_sample_weight, KlDirection, LossItem, LossSettings, TrainingBatch};
use super::{PoolKind, World};
use crate::augment::{select_fraction, select_in_sample_negatives};
use crate::error::{Error, Result};
use crate::metrics::{focus_imbalance, FocusReport};
use crate::protocol::stable_hash;
use crate::refinement::{refine, RefinementConfig};
use crate::scoring::{rank, ScoreRequest, ToyScorer, ToyScorerParams};
use crate::types::{AugmentedSample, CandidateKind, TokenSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to zero.
    pub cosine_schedule: bool,
    pub temperature: f64,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub ramp_fraction: f64,
    pub distill_tau: f64,
    pub distill_weight: f64,
    pub kl_direction: KlDirection,
    pub batch_size: usize,
    /// Fraction of training samples that carry a hard pool.
    pub negative_ratio: f64,
    pub in_sample_negatives: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Held-out hard samples refined for the imbalance estimate.
    pub probe_samples: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 300,
            learning_rate: 0.02,
            cosine_schedule: false,
            temperature: 0.07,
            ramp_start: 0.2,
            ramp_end: 2.0,
            ramp_fraction: 0.15,
            distill_tau: 2.0,
            distill_weight: 1e3,
            kl_direction: KlDirection::StudentFirst,
            batch_size: 64,
            negative_ratio: 0.0,
            in_sample_negatives: 3,
            train_samples: 4096,
            eval_samples: 400,
            probe_samples: 60,
            eval_interval: 50,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.temperature > 0.0 && self.distill_tau > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad("ramp fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.negative_ratio) {
            return bad("negative ratio must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.distill_weight < 0.0 {
            return bad("distillation weight must be non-negative");
        }
        if self.batch_size == 0 || self.train_samples < self.batch_size {
            return bad("need at least one full batch of training samples");
        }
        if self.eval_interval == 0 {
            return bad("evaluation interval must be positive");
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            temperature: self.temperature,
            distill_tau: self.distill_tau,
            distill_weight: self.distill_weight,
            kl_direction: self.kl_direction,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    pub rs_at_1: f64,
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub params: ToyScorerParams,
    pub history: Vec<HistoryRecord>,
}

struct TrainSample {
    e_img: Vec<f64>,
    e_txt: Vec<f64>,
    positive: Vec<f64>,
    hard: Option<AugmentedSample>,
}

fn build_train_set(world: &World, config: &TrainingConfig, teacher: &ToyScorerParams) -> Result<Vec<TrainSample>> {
    let chosen = select_fraction(config.train_samples, config.negative_ratio, config.seed);
    chosen
        .into_par_iter()
        .enumerate()
        .map(|(i, hard)| {
            let base = world.base("train", i);
            let full = TokenSet::full(base.query.n_total());
            let (e_img, e_txt) = teacher.pooled_inputs(&base.query, &full)?;
            Ok(TrainSample {
                e_img,
                e_txt,
                positive: base.positive,
                hard: hard.then(|| world.sample_with("train", i, PoolKind::Hard)),
            })
        })
        .collect()
}

fn make_batch(
    samples: &[TrainSample],
    indices: &[usize],
    weight: f64,
    negative_seed: u64,
    config: &TrainingConfig,
    teacher: &ToyScorerParams,
) -> Result<TrainingBatch> {
    let items = indices
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let mut candidates = vec![s.positive.clone()];
            let mut weights = vec![1.0];
            for &j in indices {
                if j != i {
                    candidates.push(samples[j].positive.clone());
                    weights.push(1.0);
                }
            }
            if let Some(pool) = &s.hard {
                for id in select_in_sample_negatives(pool, config.in_sample_negatives, negative_seed)? {
                    let c = &pool.candidates[id];
                    debug_assert_ne!(c.kind, CandidateKind::Positive);
                    candidates.push(c.features().expect("synthetic pools are inline").to_vec());
                    weights.push(weight);
                }
            }
            Ok(LossItem::new(teacher, s.e_img.clone(), s.e_txt.clone(), candidates, weights))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch {
        items,
        settings: config.loss_settings(),
    })
}

/// Hard-set `Rs@1` and focus imbalance over the first `probes` samples.
pub fn evaluate_hard_set(
    params: &ToyScorerParams,
    samples: &[AugmentedSample],
    probes: usize,
) -> Result<(f64, f64)> {
    let scorer = ToyScorer::new(params.clone())?;
    let hits = samples
        .par_iter()
        .map(|s| {
            let full = TokenSet::full(s.query.n_total());
            let r = rank(&scorer, &ScoreRequest::new(&s.sample_id, &s.query, &full, &s.candidates))?;
            Ok((r.top() == Some(s.positive()?.id)) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    let rs1 = if samples.is_empty() {
        0.0
    } else {
        hits as f64 / samples.len() as f64
    };
    let reports = focus_reports(&scorer, &samples[..probes.min(samples.len())])?;
    let imbalance = if reports.is_empty() {
        0.0
    } else {
        let n = reports.len() as f64;
        let ri = reports.iter().map(|r| r.r_image).sum::<f64>() / n;
        let rt = reports.iter().map(|r| r.r_text).sum::<f64>() / n;
        focus_imbalance(ri, rt)
    };
    Ok((rs1, imbalance))
}

fn focus_reports(scorer: &ToyScorer, samples: &[AugmentedSample]) -> Result<Vec<FocusReport>> {
    let config = RefinementConfig::default();
    samples
        .par_iter()
        .map(|s| {
            let r = refine(&s.sample_id, &s.query, &s.candidates, scorer, &config)?;
            FocusReport::from_refinement(&s.sample_id, &s.query, &r)
        })
        .collect()
}

/// Share of samples whose refinement yields a final state that keeps tokens
/// of only one modality.
pub fn shortcut_rate(params: &ToyScorerParams, samples: &[AugmentedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let scorer = ToyScorer::new(params.clone())?;
    let reports = focus_reports(&scorer, samples)?;
    let hits = reports.iter().filter(|r| r.has_single_modality_state()).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// The held-out hard evaluation set of a world.
pub fn hard_eval_set(world: &World, count: usize) -> Vec<AugmentedSample> {
    (0..count)
        .into_par_iter()
        .map(|i| world.sample_with("eval", i, PoolKind::Hard))
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fine-tunes the world's teacher with contrastive plus distillation loss.
///
/// The logged loss is measured on a fixed probe batch with the final
/// in-sample weight, so it only moves when the parameters do.
pub fn train_toy_scorer(world: &World, config: &TrainingConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let teacher = world.teacher_params();
    let samples = build_train_set(world, config, &teacher)?;
    let eval = hard_eval_set(world, config.eval_samples);
    let probe_indices: Vec<usize> = (0..config.batch_size).collect();
    let probe_batch = make_batch(&samples, &probe_indices, config.ramp_end, config.seed, config, &teacher)?;

    let record = |step: usize, params: &ToyScorerParams| -> Result<HistoryRecord> {
        let loss = batch_loss(params, &probe_batch);
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let (rs_at_1, imbalance) = evaluate_hard_set(params, &eval, config.probe_samples)?;
        Ok(HistoryRecord {
            step,
            loss,
            rs_at_1,
            imbalance,
        })
    };

    let mut params = teacher.clone();
    let mut flat = params.flat();
    let mut adam = Adam::new(flat.len());
    let mut history = vec![record(0, &params)?];
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(config.seed, &["order"]));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for step in 0..config.steps {
        if cursor + config.batch_size > order.len() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + config.batch_size];
        cursor += config.batch_size;
        let weight = in_sample_weight(step, config.steps, config);
        let negative_seed = stable_hash(config.seed, &["negatives", &step.to_string()]);
        let batch = make_batch(&samples, indices, weight, negative_seed, config, &teacher)?;
        let (_, grad) = batch_loss_and_grad(&params, &batch).map_err(|e| match e {
            Error::DivergedLoss { .. } => Error::DivergedLoss { step },
            other => other,
        })?;
        let lr = if config.cosine_schedule {
            let t = step as f64 / config.steps as f64;
            0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            config.learning_rate
        };
        adam.step(&mut flat, &grad, lr);
        params = ToyScorerParams::from_flat(params.dim, &flat).map_err(|_| Error::DivergedLoss { step })?;
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            history.push(record(done, &params)?);
        }
    }
    Ok(TrainingOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub negative_ratio: f64,
    pub outcome: TrainingOutcome,
}

impl SweepEntry {
    pub fn final_record(&self) -> &HistoryRecord {
        self.outcome.history.last().expect("history starts with step 0")
    }
}

/// Trains one scorer per negative ratio on the same world and seed.
pub fn sweep(world: &World, config: &TrainingConfig, ratios: &[f64]) -> Result<Vec<SweepEntry>> {
    ratios
        .iter()
        .map(|&r| {
            let cfg = TrainingConfig {
                negative_ratio: r,
                ..config.clone()
            };
            Ok(SweepEntry {
                negative_ratio: r,
                outcome: train_toy_scorer(world, &cfg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::WorldConfig;

    fn small() -> TrainingConfig {
        TrainingConfig {
            steps: 6,
            batch_size: 8,
            train_samples: 64,
            eval_samples: 20,
            probe_samples: 5,
            eval_interval: 3,
            negative_ratio: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let world = World::new(WorldConfig::default()).unwrap();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            ..small()
        };
        let out = train_toy_scorer(&world, &cfg).unwrap();
        assert_eq!(out.params, world.teacher_params());
        assert_eq!(out.history.len(), 3);
        for h in &out.history {
            assert_eq!(h.loss, out.history[0].loss);
            assert_eq!(h.rs_at_1, out.history[0].rs_at_1);
            assert_eq!(h.imbalance, out.history[0].imbalance);
        }
    }

    #[test]
    fn teacher_batch_has_no_distillation_term() {
        let world = World::new(WorldConfig::default()).unwrap();
        let cfg = small();
        let teacher = world.teacher_params();
        let samples = build_train_set(&world, &cfg, &teacher).unwrap();
        let batch = make_batch(&samples, &[0, 1, 2, 3], 2.0, 0, &cfg, &teacher).unwrap();
        let no_distill = TrainingBatch {
            settings: LossSettings {
                distill_weight: 0.0,
                ..batch.settings
            },
            ..batch.clone()
        };
        assert!((batch_loss(&teacher, &batch) - batch_loss(&teacher, &no_distill)).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let world = World::new(WorldConfig::default()).unwrap();
        let a = train_toy_scorer(&world, &small()).unwrap();
        let b = train_toy_scorer(&world, &small()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a.params, world.teacher_params());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_finishes() {
        let world = World::new(WorldConfig::default()).unwrap();
        let cfg = TrainingConfig {
            learning_rate: f64::MAX,
            ..small()
        };
        match train_toy_scorer(&world, &cfg) {
            Err(Error::DivergedLoss { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
