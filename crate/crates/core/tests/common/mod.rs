#![allow(dead_code)]

use std::collections::BTreeSet;

use fbcir_core::scoring::{ToyScorer, ToyScorerParams, ValidityMode};
use fbcir_core::types::{
    normalize_query, Candidate, CandidateKind, CandidatePayload, ImagePayload, RawSegment,
    RawToken, TokenSet, TokenizedQuery,
};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub query: TokenizedQuery,
    pub pool: Vec<Candidate>,
    pub params: ToyScorerParams,
}

impl Instance {
    pub fn scorer(&self) -> ToyScorer {
        ToyScorer::new(self.params.clone()).unwrap()
    }

    pub fn n(&self) -> usize {
        self.query.n_total()
    }
}

pub fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_instance<R: Rng>(rng: &mut R, n_image: usize, n_text: usize, pool: usize, dim: usize) -> Instance {
    let segments = (0..n_image)
        .map(|_| RawSegment {
            area: rng.gen_range(0.1..1.0),
            payload: ImagePayload::Inline {
                features: gaussian(rng, dim),
            },
        })
        .collect();
    let tokens = (0..n_text)
        .map(|i| RawToken {
            surface: format!("w{i}"),
            features: Some(gaussian(rng, dim)),
        })
        .collect();
    let query = normalize_query(segments, tokens).unwrap();
    let pool = (0..pool)
        .map(|id| Candidate {
            id,
            kind: if id == 0 {
                CandidateKind::Positive
            } else {
                CandidateKind::Distractor
            },
            payload: CandidatePayload::Inline {
                features: gaussian(rng, dim),
            },
        })
        .collect();
    let params = ToyScorerParams::new(dim, gaussian(rng, dim * dim), gaussian(rng, dim * dim)).unwrap();
    Instance { query, pool, params }
}

fn matvec(m: &[f64], v: &[f64], d: usize, r: usize) -> f64 {
    m[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Candidate ids ordered by score under a preserved mask, computed from scratch.
pub fn oracle_order(inst: &Instance, mask: &[bool]) -> Vec<usize> {
    let d = inst.params.dim;
    let n_i = inst.query.n_image();
    let mut e_img = vec![0.0; d];
    for (j, tok) in inst.query.image_tokens().iter().enumerate() {
        if let (true, ImagePayload::Inline { features }) = (mask[j], &tok.payload) {
            for k in 0..d {
                e_img[k] += tok.area * features[k];
            }
        }
    }
    let mut e_txt = vec![0.0; d];
    let mut active = 0.0;
    for (j, tok) in inst.query.text_tokens().iter().enumerate() {
        if mask[n_i + j] {
            active += 1.0;
            let f = tok.features.as_ref().unwrap();
            for k in 0..d {
                e_txt[k] += f[k];
            }
        }
    }
    if active > 0.0 {
        e_txt.iter_mut().for_each(|x| *x *= 1.0 / active);
    }
    let z: Vec<f64> = (0..d)
        .map(|r| matvec(&inst.params.image_proj, &e_img, d, r) + matvec(&inst.params.text_proj, &e_txt, d, r))
        .collect();
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scores: Vec<f64> = inst
        .pool
        .iter()
        .map(|c| {
            if norm == 0.0 {
                0.0
            } else {
                c.features().unwrap().iter().zip(&z).map(|(a, b)| a * b / norm).sum()
            }
        })
        .collect();
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.into_iter().map(|i| inst.pool[i].id).collect()
}

pub fn mask_of(set: &TokenSet) -> Vec<bool> {
    (0..set.universe()).map(|i| set.contains(i)).collect()
}

pub fn oracle_valid(inst: &Instance, mask: &[bool], baseline: &[usize], mode: ValidityMode) -> bool {
    if !mask.iter().any(|&b| b) {
        return false;
    }
    let order = oracle_order(inst, mask);
    match mode {
        ValidityMode::Top1 => order[0] == baseline[0],
        ValidityMode::FullOrder => order == baseline,
    }
}

/// Locally minimal valid masks reachable from the full mask through valid
/// single removals, as sorted preserved-index lists.
pub fn oracle_reachable_minima(inst: &Instance, mode: ValidityMode) -> BTreeSet<Vec<usize>> {
    let n = inst.n();
    let full = vec![true; n];
    let baseline = oracle_order(inst, &full);
    let mut seen = BTreeSet::new();
    let mut stack = vec![full];
    let mut minima = BTreeSet::new();
    while let Some(mask) = stack.pop() {
        if !seen.insert(mask.clone()) {
            continue;
        }
        let mut any_child = false;
        for b in (0..n).filter(|&b| mask[b]) {
            let mut child = mask.clone();
            child[b] = false;
            if oracle_valid(inst, &child, &baseline, mode) {
                any_child = true;
                stack.push(child);
            }
        }
        if !any_child {
            minima.insert((0..n).filter(|&i| mask[i]).collect());
        }
    }
    minima
}
