//! Iterative focus refinement: beam-searched token pruning that keeps the
//! retrieval decision intact, plus an exhaustive reference enumerator.
//!
//! Starting from the state that preserves every token, each iteration derives
//! children by pruning one more token from each beam state. A child is valid
//! when its ranking is retrieval-equal to the baseline. A beam state whose
//! children are all invalid is locally minimal and becomes final; up to
//! `beam_width` valid children (largest retrieval margin first) seed the next
//! iteration.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{rank, retrieval_equal, ScoreRequest, Scorer, ValidityMode};
use crate::types::{Candidate, PruneState, Ranking, TokenSet, TokenizedQuery};

/// Exhaustive enumeration limit on `n_image + n_text`.
pub const EXHAUSTIVE_MAX_TOKENS: usize = 16;

/// How surviving valid children are chosen when more than `beam_width` exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamSelection {
    /// Largest top-1 margin first, ties by lexicographically smallest preserved set.
    #[default]
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub beam_width: usize,
    pub mode: ValidityMode,
    pub max_iterations: Option<usize>,
    pub selection: BeamSelection,
    /// Validate the children of one iteration on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            beam_width: 5,
            mode: ValidityMode::Top1,
            max_iterations: None,
            selection: BeamSelection::Margin,
            parallel: false,
        }
    }
}

impl RefinementConfig {
    pub fn with_beam(beam_width: usize) -> Self {
        RefinementConfig {
            beam_width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// A locally minimal valid state with the top-1 margin of its ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalState {
    pub state: PruneState,
    pub margin: f64,
}

/// All final states found for one sample, sorted by preserved set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinalStateSet {
    pub states: Vec<FinalState>,
}

impl FinalStateSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn preserved_sets(&self) -> BTreeSet<TokenSet> {
        self.states
            .iter()
            .map(|s| s.state.preserved().clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FinalState> {
        self.states.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Tokens pruned from every child of this iteration.
    pub depth: usize,
    /// Distinct children derived (after deduplication).
    pub derived: usize,
    /// Children sent to the scorer.
    pub validated: usize,
    pub valid: usize,
    pub finalized: usize,
    /// Preserved index lists of the states carried into the next iteration.
    pub beam: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FocusTrace {
    /// State validations, each one pool ranking. The baseline is not counted.
    pub validations: u64,
    /// Per-candidate scores requested, baseline included.
    pub scorer_calls: u64,
    pub iterations: Vec<IterationTrace>,
    /// Set when `max_iterations` stopped the search early.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub baseline: Ranking,
    pub finals: FinalStateSet,
    pub trace: FocusTrace,
}

struct ChildOutcome {
    valid: bool,
    margin: f64,
    scored: bool,
}

fn check_inputs(query: &TokenizedQuery, pool: &[Candidate]) -> Result<()> {
    if query.n_image() == 0 {
        return Err(Error::EmptyModality("image"));
    }
    if query.n_text() == 0 {
        return Err(Error::EmptyModality("text"));
    }
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall {
            needed: 2,
            got: pool.len(),
        });
    }
    Ok(())
}

/// Validates one state against the baseline. The empty state carries no
/// decision and is never valid, so it is not scored.
fn validate<S: Scorer + ?Sized>(
    scorer: &S,
    sample_id: &str,
    query: &TokenizedQuery,
    pool: &[Candidate],
    baseline: &Ranking,
    mode: ValidityMode,
    preserved: &TokenSet,
) -> Result<ChildOutcome> {
    if preserved.is_empty() {
        return Ok(ChildOutcome {
            valid: false,
            margin: 0.0,
            scored: false,
        });
    }
    let ranking = rank(scorer, &ScoreRequest::new(sample_id, query, preserved, pool))?;
    Ok(ChildOutcome {
        valid: retrieval_equal(&ranking, baseline, mode)?,
        margin: ranking.margin(),
        scored: true,
    })
}

/// Runs the beam-searched refinement for one query and its candidate pool.
pub fn refine<S: Scorer + ?Sized>(
    sample_id: &str,
    query: &TokenizedQuery,
    pool: &[Candidate],
    scorer: &S,
    config: &RefinementConfig,
) -> Result<Refinement> {
    config.validate()?;
    check_inputs(query, pool)?;
    let n = query.n_total();
    let s0 = TokenSet::full(n);
    let baseline = rank(scorer, &ScoreRequest::new(sample_id, query, &s0, pool))?;
    let mut trace = FocusTrace {
        scorer_calls: pool.len() as u64,
        ..Default::default()
    };

    let mut beam: Vec<(TokenSet, f64)> = vec![(s0, baseline.margin())];
    let mut finals: Vec<FinalState> = Vec::new();
    let mut depth = 0usize;

    loop {
        if config.max_iterations.is_some_and(|cap| depth >= cap) {
            trace.truncated = true;
            finals.extend(beam.drain(..).map(|(set, margin)| FinalState {
                state: PruneState::new(set),
                margin,
            }));
            break;
        }
        depth += 1;

        // Derive children, deduplicated across parents.
        let mut children: Vec<TokenSet> = Vec::new();
        let mut index_of: HashMap<TokenSet, usize> = HashMap::new();
        let mut parent_children: Vec<Vec<usize>> = Vec::with_capacity(beam.len());
        for (parent, _) in &beam {
            let mut mine = Vec::with_capacity(parent.count());
            for token in parent.iter() {
                let child = parent.without(token);
                let idx = *index_of.entry(child.clone()).or_insert_with(|| {
                    children.push(child);
                    children.len() - 1
                });
                mine.push(idx);
            }
            parent_children.push(mine);
        }

        let check = |child: &TokenSet| {
            validate(scorer, sample_id, query, pool, &baseline, config.mode, child)
        };
        let outcomes: Vec<ChildOutcome> = if config.parallel {
            children.par_iter().map(check).collect::<Result<_>>()?
        } else {
            children.iter().map(check).collect::<Result<_>>()?
        };

        let validated = outcomes.iter().filter(|o| o.scored).count();
        trace.validations += validated as u64;
        trace.scorer_calls += (validated * pool.len()) as u64;

        let mut finalized = 0;
        for ((parent, margin), kids) in beam.iter().zip(&parent_children) {
            if kids.iter().all(|&k| !outcomes[k].valid) {
                finals.push(FinalState {
                    state: PruneState::new(parent.clone()),
                    margin: *margin,
                });
                finalized += 1;
            }
        }

        let mut valid: Vec<(TokenSet, f64)> = children
            .into_iter()
            .zip(&outcomes)
            .filter(|(_, o)| o.valid)
            .map(|(c, o)| (c, o.margin))
            .collect();
        let n_valid = valid.len();
        match config.selection {
            BeamSelection::Margin => valid.sort_by(|(sa, ma), (sb, mb)| {
                mb.total_cmp(ma).then_with(|| sa.cmp(sb))
            }),
        }
        valid.truncate(config.beam_width);

        trace.iterations.push(IterationTrace {
            depth,
            derived: outcomes.len(),
            validated,
            valid: n_valid,
            finalized,
            beam: valid.iter().map(|(s, _)| s.to_indices()).collect(),
        });

        if valid.is_empty() {
            break;
        }
        beam = valid;
    }

    finals.sort_by(|a, b| a.state.cmp(&b.state));
    Ok(Refinement {
        baseline,
        finals: FinalStateSet { states: finals },
        trace,
    })
}

/// Worst-case number of state validations: `w · n (n + 1) / 2` with `n = n_image + n_text`.
pub fn predicted_inference_budget(n_image: usize, n_text: usize, beam_width: usize) -> u64 {
    let n = (n_image + n_text) as u64;
    beam_width as u64 * n * (n + 1) / 2
}

/// Ground truth from enumerating every mask of a small query.
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveFamily {
    /// Locally minimal valid states connected to the full state through a
    /// chain of valid single-token removals; this is what an unbounded beam
    /// can reach.
    pub reachable: FinalStateSet,
    /// Every locally minimal valid state, reachable or not.
    pub all_local_minima: BTreeSet<TokenSet>,
    /// Smallest preserved-set size over all valid states.
    pub global_min_cardinality: usize,
    pub valid_count: usize,
}

/// Enumerates all `2^(n_image + n_text)` masks.
pub fn exhaustive_minimal_states<S: Scorer + ?Sized>(
    sample_id: &str,
    query: &TokenizedQuery,
    pool: &[Candidate],
    scorer: &S,
    mode: ValidityMode,
) -> Result<ExhaustiveFamily> {
    check_inputs(query, pool)?;
    let n = query.n_total();
    if n > EXHAUSTIVE_MAX_TOKENS {
        return Err(Error::TooManyTokens {
            n,
            max: EXHAUSTIVE_MAX_TOKENS,
        });
    }
    let full_mask = (1u64 << n) - 1;
    let baseline = rank(
        scorer,
        &ScoreRequest::new(sample_id, query, &TokenSet::full(n), pool),
    )?;
    let mut valid = vec![false; 1 << n];
    let mut margin = vec![0.0; 1 << n];
    for mask in 1..=full_mask {
        let set = TokenSet::from_mask(n, mask);
        let ranking = rank(scorer, &ScoreRequest::new(sample_id, query, &set, pool))?;
        valid[mask as usize] = retrieval_equal(&ranking, &baseline, mode)?;
        margin[mask as usize] = ranking.margin();
    }

    let is_local_min = |mask: u64| {
        valid[mask as usize]
            && (0..n)
                .filter(|b| mask & (1 << b) != 0)
                .all(|b| !valid[(mask & !(1 << b)) as usize])
    };

    let mut all_local_minima = BTreeSet::new();
    let mut global_min_cardinality = n;
    let mut valid_count = 0;
    for mask in 1..=full_mask {
        if valid[mask as usize] {
            valid_count += 1;
            global_min_cardinality = global_min_cardinality.min(mask.count_ones() as usize);
            if is_local_min(mask) {
                all_local_minima.insert(TokenSet::from_mask(n, mask));
            }
        }
    }

    // Breadth-first search over valid states from the full mask.
    let mut seen = vec![false; 1 << n];
    let mut queue = VecDeque::from([full_mask]);
    seen[full_mask as usize] = true;
    let mut reachable = Vec::new();
    while let Some(mask) = queue.pop_front() {
        if is_local_min(mask) {
            reachable.push(FinalState {
                state: PruneState::new(TokenSet::from_mask(n, mask)),
                margin: margin[mask as usize],
            });
        }
        for b in 0..n {
            if mask & (1 << b) != 0 {
                let child = mask & !(1 << b);
                if valid[child as usize] && !seen[child as usize] {
                    seen[child as usize] = true;
                    queue.push_back(child);
                }
            }
        }
    }
    reachable.sort_by(|a, b| a.state.cmp(&b.state));

    Ok(ExhaustiveFamily {
        reachable: FinalStateSet { states: reachable },
        all_local_minima,
        global_min_cardinality,
        valid_count,
    })
}
