use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::toy::dot;
use crate::scoring::ToyScorerParams;

use super::train::TrainingConfig;

/// Argument order of the distillation KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    StudentFirst,
    /// `KL(teacher ‖ student)`.
    TeacherFirst,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let lse = log_sum_exp(logits.iter().map(|x| x / tau));
    logits.iter().map(|x| x / tau - lse).collect()
}

/// Weighted InfoNCE: `-log(e^{s+/T} / (e^{s+/T} + Σ w_j e^{s_j/T}))`.
///
/// The positive's weight is fixed at 1 regardless of `weights[positive]`.
pub fn contrastive_loss(scores: &[f64], positive: usize, temperature: f64, weights: &[f64]) -> f64 {
    contrastive_grad(scores, positive, temperature, weights).0
}

/// Loss and `dL/ds` for [`contrastive_loss`].
pub fn contrastive_grad(
    scores: &[f64],
    positive: usize,
    temperature: f64,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    debug_assert_eq!(scores.len(), weights.len());
    let logit = |j: usize| -> f64 {
        let w = if j == positive { 1.0 } else { weights[j] };
        if w > 0.0 {
            scores[j] / temperature + w.ln()
        } else {
            f64::NEG_INFINITY
        }
    };
    let lse = log_sum_exp((0..scores.len()).map(logit));
    // log(1 + Σ e^{l_j - l+}) keeps precision when the positive dominates.
    let lp = logit(positive);
    let rel = (0..scores.len()).filter(|&j| j != positive).map(|j| logit(j) - lp);
    let top = rel.clone().fold(f64::NEG_INFINITY, f64::max);
    let loss = if top < 0.0 {
        rel.map(f64::exp).sum::<f64>().ln_1p()
    } else {
        top + ((-top).exp() + rel.map(|r| (r - top).exp()).sum::<f64>()).ln()
    };
    let grad = (0..scores.len())
        .map(|j| {
            let pi = (logit(j) - lse).exp();
            let delta = if j == positive { 1.0 } else { 0.0 };
            (pi - delta) / temperature
        })
        .collect();
    (loss.max(0.0), grad)
}

/// Linear ramp of the in-sample negative weight over the first
/// `ramp_fraction` of training, constant afterwards.
pub fn in_sample_weight(step: usize, total_steps: usize, config: &TrainingConfig) -> f64 {
    let (start, end) = (config.ramp_start, config.ramp_end);
    if total_steps == 0 || step == 0 {
        return start;
    }
    let ramp = config.ramp_fraction * total_steps as f64;
    let t = step as f64 / ramp;
    if t >= 1.0 - 1e-12 {
        end
    } else {
        start + (end - start) * t
    }
}

/// `τ² · KL(softmax(student/τ) ‖ softmax(teacher/τ))`.
pub fn distillation_loss(student: &[f64], teacher: &[f64], tau: f64) -> f64 {
    distillation_loss_with(student, teacher, tau, KlDirection::StudentFirst)
}

pub fn distillation_loss_with(
    student: &[f64],
    teacher: &[f64],
    tau: f64,
    direction: KlDirection,
) -> f64 {
    distillation_grad(student, teacher, tau, direction).0
}

/// Loss and gradient with respect to the student logits.
pub fn distillation_grad(
    student: &[f64],
    teacher: &[f64],
    tau: f64,
    direction: KlDirection,
) -> (f64, Vec<f64>) {
    debug_assert_eq!(student.len(), teacher.len());
    let la = log_softmax(student, tau);
    let lb = log_softmax(teacher, tau);
    let a: Vec<f64> = la.iter().map(|x| x.exp()).collect();
    let b: Vec<f64> = lb.iter().map(|x| x.exp()).collect();
    let tau2 = tau * tau;
    match direction {
        KlDirection::StudentFirst => {
            let kl: f64 = (0..a.len()).map(|i| a[i] * (la[i] - lb[i])).sum();
            let grad = (0..a.len())
                .map(|i| tau * a[i] * (la[i] - lb[i] - kl))
                .collect();
            (tau2 * kl.max(0.0), grad)
        }
        KlDirection::TeacherFirst => {
            let kl: f64 = (0..a.len()).map(|i| b[i] * (lb[i] - la[i])).sum();
            let grad = (0..a.len()).map(|i| tau * (a[i] - b[i])).collect();
            (tau2 * kl.max(0.0), grad)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub temperature: f64,
    pub distill_tau: f64,
    pub distill_weight: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            temperature: 0.07,
            distill_tau: 2.0,
            distill_weight: 1e3,
            kl_direction: KlDirection::StudentFirst,
        }
    }
}

/// One query with its loss candidates; candidate 0 is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem {
    pub e_img: Vec<f64>,
    pub e_txt: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub teacher_scores: Vec<f64>,
}

impl LossItem {
    /// Builds an item, scoring the candidates with the frozen teacher.
    pub fn new(
        teacher: &ToyScorerParams,
        e_img: Vec<f64>,
        e_txt: Vec<f64>,
        candidates: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Self {
        let teacher_scores = query_scores(teacher, &e_img, &e_txt, &candidates).0;
        LossItem {
            e_img,
            e_txt,
            candidates,
            weights,
            teacher_scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<LossItem>,
    pub settings: LossSettings,
}

/// Scores plus the unit query and pre-normalization norm.
fn query_scores(
    params: &ToyScorerParams,
    e_img: &[f64],
    e_txt: &[f64],
    candidates: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, f64) {
    let z = params.compose(e_img, e_txt);
    let norm = dot(&z, &z).sqrt();
    if norm == 0.0 {
        return (vec![0.0; candidates.len()], z, 0.0);
    }
    let q: Vec<f64> = z.iter().map(|x| x / norm).collect();
    let scores = candidates.iter().map(|c| dot(&q, c)).collect();
    (scores, q, norm)
}

fn item_loss(params: &ToyScorerParams, item: &LossItem, s: &LossSettings) -> (f64, Vec<f64>, Vec<f64>, f64) {
    let (scores, q, norm) = query_scores(params, &item.e_img, &item.e_txt, &item.candidates);
    let (lc, gc) = contrastive_grad(&scores, 0, s.temperature, &item.weights);
    let (ld, gd) = distillation_grad(&scores, &item.teacher_scores, s.distill_tau, s.kl_direction);
    let loss = lc + s.distill_weight * ld;
    let g_s: Vec<f64> = gc
        .iter()
        .zip(&gd)
        .map(|(a, b)| a + s.distill_weight * b)
        .collect();
    (loss, g_s, q, norm)
}

fn item_grad(params: &ToyScorerParams, item: &LossItem, s: &LossSettings) -> (f64, Vec<f64>) {
    let d = params.dim;
    let (loss, g_s, q, norm) = item_loss(params, item, s);
    let mut grad = vec![0.0; 2 * d * d];
    if norm == 0.0 {
        return (loss, grad);
    }
    let mut g_q = vec![0.0; d];
    for (g, c) in g_s.iter().zip(&item.candidates) {
        g_q.iter_mut().zip(c).for_each(|(acc, x)| *acc += g * x);
    }
    let proj = dot(&g_q, &q);
    let g_z: Vec<f64> = g_q
        .iter()
        .zip(&q)
        .map(|(g, qi)| (g - proj * qi) / norm)
        .collect();
    let (gi, gt) = grad.split_at_mut(d * d);
    for r in 0..d {
        for c in 0..d {
            gi[r * d + c] = g_z[r] * item.e_img[c];
            gt[r * d + c] = g_z[r] * item.e_txt[c];
        }
    }
    (loss, grad)
}

/// Mean total loss over the batch.
pub fn batch_loss(params: &ToyScorerParams, batch: &TrainingBatch) -> f64 {
    let n = batch.items.len().max(1) as f64;
    batch
        .items
        .iter()
        .map(|item| item_loss(params, item, &batch.settings).0)
        .sum::<f64>()
        / n
}

/// Mean loss and its gradient over the flattened `[W_img, W_txt]`.
///
/// Per-item gradients are computed in parallel and summed in item order.
pub fn batch_loss_and_grad(params: &ToyScorerParams, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .items
        .par_iter()
        .map(|item| item_grad(params, item, &batch.settings))
        .collect();
    let n = batch.items.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(acc, x)| *acc += x);
    }
    loss /= n;
    grad.iter_mut().for_each(|x| *x /= n);
    if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::DivergedLoss { step: 0 });
    }
    Ok((loss, grad))
}

/// Max relative error between analytic and central-difference gradients.
pub fn finite_difference_check(params: &ToyScorerParams, batch: &TrainingBatch) -> Result<f64> {
    finite_difference_check_with_step(params, batch, 1e-5)
}

pub fn finite_difference_check_with_step(
    params: &ToyScorerParams,
    batch: &TrainingBatch,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = batch_loss_and_grad(params, batch)?;
    let base = params.flat();
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = batch_loss(&ToyScorerParams::from_flat(params.dim, &plus).expect("finite"), batch);
            let fm = batch_loss(&ToyScorerParams::from_flat(params.dim, &minus).expect("finite"), batch);
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-8);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax(x: &[f64]) -> Vec<f64> {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect()
    }

    #[test]
    fn uniform_scores_give_log_n() {
        for n in 2..12 {
            let scores = vec![0.3; n];
            let w = vec![1.0; n];
            let l = contrastive_loss(&scores, 0, 0.07, &w);
            assert!((l - (n as f64).ln()).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn zero_weight_drops_the_negative() {
        let with = contrastive_loss(&[0.4, 0.1, 0.9], 0, 0.07, &[1.0, 1.0, 0.0]);
        let without = contrastive_loss(&[0.4, 0.1], 0, 0.07, &[1.0, 1.0]);
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn separated_pair_value() {
        let l = contrastive_loss(&[1.0, 0.0], 0, 0.07, &[1.0, 1.0]);
        let expected = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((l - expected).abs() < 1e-12 * expected);
        assert!((l - 6.2487e-7).abs() < 1e-11);
    }

    #[test]
    fn ramp_values() {
        let cfg = TrainingConfig::default();
        assert_eq!(in_sample_weight(0, 100, &cfg), 0.2);
        assert_eq!(in_sample_weight(15, 100, &cfg), 2.0);
        assert_eq!(in_sample_weight(100, 100, &cfg), 2.0);
        assert!((in_sample_weight(75, 1000, &cfg) - 1.1).abs() < 1e-12);
        assert_eq!(in_sample_weight(150, 1000, &cfg), 2.0);
    }

    #[test]
    fn distillation_oracle() {
        let tau = 2.0;
        let a = softmax(&[0.5, 0.0]);
        let b = softmax(&[0.0, 0.5]);
        let kl: f64 = a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum();
        let got = distillation_loss(&[1.0, 0.0], &[0.0, 1.0], tau);
        assert!((got - tau * tau * kl).abs() < 1e-14);
        let rev: f64 = b.iter().zip(&a).map(|(x, y)| x * (x / y).ln()).sum();
        let got = distillation_loss_with(&[1.0, 0.0], &[0.0, 1.0], tau, KlDirection::TeacherFirst);
        assert!((got - tau * tau * rev).abs() < 1e-14);
        assert_eq!(distillation_loss(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], tau), 0.0);
    }

    #[test]
    fn temperature_identity() {
        let s = [0.3, -0.2, 0.9];
        let t = [0.1, 0.4, -0.5];
        let scaled = |v: &[f64]| v.iter().map(|x| x * 2.0).collect::<Vec<_>>();
        let at_tau = distillation_loss(&scaled(&s), &scaled(&t), 2.0) / 4.0;
        let at_one = distillation_loss(&s, &t, 1.0);
        assert!((at_tau - at_one).abs() < 1e-14);
    }

    #[test]
    fn logit_gradients_match_differences() {
        let s = [0.3, -0.2, 0.9, 0.1];
        let t = [0.1, 0.4, -0.5, 0.0];
        let w = [1.0, 0.5, 2.0, 0.0];
        let h = 1e-6;
        let (_, gc) = contrastive_grad(&s, 0, 0.07, &w);
        for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            let (_, gd) = distillation_grad(&s, &t, 2.0, dir);
            for k in 0..4 {
                let mut p = s;
                p[k] += h;
                let mut m = s;
                m[k] -= h;
                let nd = (distillation_loss_with(&p, &t, 2.0, dir)
                    - distillation_loss_with(&m, &t, 2.0, dir))
                    / (2.0 * h);
                assert!((nd - gd[k]).abs() < 1e-7);
                let nc = (contrastive_loss(&p, 0, 0.07, &w) - contrastive_loss(&m, 0, 0.07, &w))
                    / (2.0 * h);
                assert!((nc - gc[k]).abs() < 1e-5 * gc[k].abs().max(1.0));
            }
        }
    }
}
