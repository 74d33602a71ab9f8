//! Aggregation mathematics: answer canonicalization and voting, temperature
//! normalization of vote frequencies, beam combination over child candidates,
//! and marginal probabilistic aggregation with top-k pruning.
//!
//! Everything in this module is pure and deterministic. Ties are always broken
//! the same way: descending probability first, then ascending lexicographic
//! canonical answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for "probabilities sum to one" checks on candidate sets.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Tolerance within which branch weights handed to [`marginal_aggregate`] may
/// deviate from one before being renormalized; larger deviations are an error.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("cannot normalize an empty frequency table")]
    EmptyTable,
    #[error("candidate set for child {0} is empty")]
    EmptyCandidates(usize),
    #[error("branch weights sum to {0} which is outside 1 ± {WEIGHT_SUM_TOLERANCE}")]
    WeightSum(f64),
}

/// Canonical form used for answer identity: lowercased, trimmed, internal
/// whitespace collapsed, trailing sentence punctuation removed.
///
/// Empty input canonicalizes to the empty string, which voting treats as a
/// no-vote.
///
/// ```
/// assert_eq!(beamaggr::beamcore::canonicalize_answer("Cologne "), "cologne");
/// assert_eq!(beamaggr::beamcore::canonicalize_answer("Yes."), "yes");
/// ```
pub fn canonicalize_answer(raw: &str) -> String {
    let collapsed: Vec<&str> = raw.split_whitespace().collect();
    let mut text = collapsed.join(" ").to_lowercase();
    while text.ends_with(['.', '!', '?']) {
        text.pop();
        let trimmed = text.trim_end();
        if trimmed.len() != text.len() {
            text = trimmed.to_string();
        }
    }
    text
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct SurfaceTally {
    count: u32,
    // Rank of the first sample that used this surface; lower wins modal ties.
    first_seen: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct AnswerTally {
    count: u32,
    surfaces: BTreeMap<String, SurfaceTally>,
}

impl AnswerTally {
    fn modal_surface(&self) -> &str {
        self.surfaces
            .iter()
            .min_by(|(sa, a), (sb, b)| {
                b.count
                    .cmp(&a.count)
                    .then(a.first_seen.cmp(&b.first_seen))
                    .then(sa.cmp(sb))
            })
            .map(|(s, _)| s.as_str())
            .unwrap_or("")
    }

    fn merge(&mut self, other: &AnswerTally) {
        self.count += other.count;
        for (surface, tally) in &other.surfaces {
            let entry = self
                .surfaces
                .entry(surface.clone())
                .or_insert(SurfaceTally {
                    count: 0,
                    first_seen: tally.first_seen,
                });
            entry.count += tally.count;
            entry.first_seen = entry.first_seen.min(tally.first_seen);
        }
    }
}

/// Vote counts per canonical answer, plus the surface forms that produced
/// them. The reported surface of an answer is the modal original string;
/// first-seen wins modal ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    entries: BTreeMap<String, AnswerTally>,
}

impl FrequencyTable {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Frequency of a canonical answer, zero if absent.
    pub fn count(&self, canonical: &str) -> u32 {
        self.entries.get(canonical).map(|t| t.count).unwrap_or(0)
    }

    /// Modal surface form for a canonical answer.
    pub fn surface(&self, canonical: &str) -> Option<&str> {
        self.entries.get(canonical).map(|t| t.modal_surface())
    }

    pub fn contains(&self, canonical: &str) -> bool {
        self.entries.contains_key(canonical)
    }

    /// `(canonical, frequency)` pairs in ascending canonical order.
    pub fn counts(&self) -> impl Iterator<Item = (&str, u32)> {
        self.entries.iter().map(|(c, t)| (c.as_str(), t.count))
    }

    /// Total number of votes across all answers.
    pub fn total_votes(&self) -> u32 {
        self.entries.values().map(|t| t.count).sum()
    }

    fn add_sample(&mut self, surface: &str, rank: u32) {
        let canonical = canonicalize_answer(surface);
        if canonical.is_empty() {
            return;
        }
        let tally = self.entries.entry(canonical).or_default();
        tally.count += 1;
        let entry = tally
            .surfaces
            .entry(surface.trim().to_string())
            .or_insert(SurfaceTally {
                count: 0,
                first_seen: rank,
            });
        entry.count += 1;
    }
}

/// Deduplicate answers by canonical form and count their frequencies.
/// Samples canonicalizing to the empty string contribute nothing.
pub fn vote<S: AsRef<str>>(samples: &[S]) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for (rank, sample) in samples.iter().enumerate() {
        table.add_sample(sample.as_ref(), rank as u32);
    }
    table
}

/// Sum vote counts per canonical answer across tables. The result does not
/// depend on table order.
pub fn merge_votes(tables: &[FrequencyTable]) -> FrequencyTable {
    let mut merged = FrequencyTable::default();
    for table in tables {
        for (canonical, tally) in &table.entries {
            merged
                .entries
                .entry(canonical.clone())
                .or_default()
                .merge(tally);
        }
    }
    merged
}

/// One answer candidate: canonical identity, reported surface form, and its
/// probability mass within the owning [`CandidateSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub surface: String,
    pub prob: f64,
}

/// An ordered answer distribution: the beams kept for a question node.
///
/// Invariants: probabilities sum to one within [`PROB_SUM_TOLERANCE`], items
/// are sorted by descending probability with ascending-canonical tie-break,
/// and there are at most `capacity` of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    items: Vec<Candidate>,
    capacity: usize,
}

impl CandidateSet {
    /// Build a candidate set, validating every invariant.
    pub fn new(items: Vec<Candidate>, capacity: usize) -> Result<Self, String> {
        if capacity == 0 {
            return Err("capacity must be positive".into());
        }
        if items.len() > capacity {
            return Err(format!("{} items exceed capacity {capacity}", items.len()));
        }
        let sum: f64 = items.iter().map(|c| c.prob).sum();
        if items.is_empty() || (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(format!("probabilities sum to {sum}, expected 1"));
        }
        for window in items.windows(2) {
            let ordered = window[0].prob > window[1].prob
                || (window[0].prob == window[1].prob && window[0].answer < window[1].answer);
            if !ordered {
                return Err(format!(
                    "items out of order at {} / {}",
                    window[0].answer, window[1].answer
                ));
            }
        }
        if items.iter().any(|c| c.prob <= 0.0 || c.prob > 1.0) {
            return Err("probabilities must lie in (0, 1]".into());
        }
        Ok(Self { items, capacity })
    }

    pub fn items(&self) -> &[Candidate] {
        &self.items
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Highest-probability candidate.
    pub fn top(&self) -> &Candidate {
        &self.items[0]
    }
}

fn sort_ranked(ranked: &mut [(String, String, f64)]) {
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

fn truncate_renormalize(
    mut ranked: Vec<(String, String, f64)>,
    k: usize,
) -> Result<CandidateSet, AggregationError> {
    if ranked.is_empty() {
        return Err(AggregationError::EmptyTable);
    }
    sort_ranked(&mut ranked);
    ranked.truncate(k);
    let mass: f64 = ranked.iter().map(|(_, _, p)| p).sum();
    let items = ranked
        .into_iter()
        .map(|(answer, surface, prob)| Candidate {
            answer,
            surface,
            prob: prob / mass,
        })
        .collect();
    // Renormalized output always satisfies the invariants.
    Ok(CandidateSet::new(items, k).expect("renormalized candidates are valid"))
}

/// Softmax of vote frequencies over all answers: `p_i = exp(f_i/tau) / sum_j
/// exp(f_j/tau)`. Returns `(canonical, surface, prob)` in ranked order.
pub fn softmax_distribution(
    table: &FrequencyTable,
    vote_temperature: f64,
) -> Vec<(String, String, f64)> {
    let max = table.entries.values().map(|t| t.count).max().unwrap_or(0) as f64;
    let mut ranked: Vec<(String, String, f64)> = table
        .entries
        .iter()
        .map(|(canonical, tally)| {
            let exp = ((tally.count as f64 - max) / vote_temperature).exp();
            (canonical.clone(), tally.modal_surface().to_string(), exp)
        })
        .collect();
    let z: f64 = ranked.iter().map(|(_, _, e)| e).sum();
    for entry in &mut ranked {
        entry.2 /= z;
    }
    sort_ranked(&mut ranked);
    ranked
}

/// Normalize a frequency table to a probability distribution and keep the
/// top-k answers, renormalizing the survivors to sum to one.
///
/// ```
/// use beamaggr::beamcore::{normalize_truncate, vote};
///
/// let table = vote(&["Paris", "Paris", "Paris", "Lyon"]);
/// let set = normalize_truncate(&table, 3.0, 1).unwrap();
/// assert_eq!(set.top().surface, "Paris");
/// assert!((set.top().prob - 1.0).abs() < 1e-9);
/// ```
pub fn normalize_truncate(
    table: &FrequencyTable,
    vote_temperature: f64,
    k: usize,
) -> Result<CandidateSet, AggregationError> {
    if table.is_empty() {
        return Err(AggregationError::EmptyTable);
    }
    truncate_renormalize(softmax_distribution(table, vote_temperature), k)
}

/// One element of the Cartesian product over child candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    /// Surface answers, one per contributing child, in child order.
    pub answers: Vec<String>,
    /// Canonical answers matching `answers`.
    pub canonical: Vec<String>,
    /// Product of the contributing candidates' probabilities.
    pub joint_prob: f64,
}

/// Cartesian product of child candidate sets, ranked by descending joint
/// probability (ties by ascending concatenated canonical answers) and
/// truncated to `max_combinations`.
pub fn beam_combine(
    children_candidates: &[CandidateSet],
    max_combinations: usize,
) -> Result<Vec<Combination>, AggregationError> {
    for (idx, set) in children_candidates.iter().enumerate() {
        if set.is_empty() {
            return Err(AggregationError::EmptyCandidates(idx));
        }
    }
    let mut combos = vec![Combination {
        answers: Vec::new(),
        canonical: Vec::new(),
        joint_prob: 1.0,
    }];
    for set in children_candidates {
        let mut next = Vec::with_capacity(combos.len() * set.len());
        for combo in &combos {
            for candidate in set.items() {
                let mut answers = combo.answers.clone();
                let mut canonical = combo.canonical.clone();
                answers.push(candidate.surface.clone());
                canonical.push(candidate.answer.clone());
                next.push(Combination {
                    answers,
                    canonical,
                    joint_prob: combo.joint_prob * candidate.prob,
                });
            }
        }
        combos = next;
    }
    combos.sort_by(|a, b| {
        b.joint_prob
            .partial_cmp(&a.joint_prob)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.canonical.join("\u{1f}").cmp(&b.canonical.join("\u{1f}")))
    });
    combos.truncate(max_combinations);
    Ok(combos)
}

/// Probability mass one branch assigns to an answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mass {
    pub surface: String,
    pub prob: f64,
}

/// One branch of a marginal aggregation: the branch weight `P(q_i)` and the
/// conditional answer distribution `P(y | x = q_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDistribution {
    pub weight: f64,
    pub dist: BTreeMap<String, Mass>,
}

impl WeightedDistribution {
    pub fn from_candidates(weight: f64, candidates: &CandidateSet) -> Self {
        let dist = candidates
            .items()
            .iter()
            .map(|c| {
                (
                    c.answer.clone(),
                    Mass {
                        surface: c.surface.clone(),
                        prob: c.prob,
                    },
                )
            })
            .collect();
        Self { weight, dist }
    }
}

/// Marginal mass per canonical answer before any truncation:
/// `P(y) = sum_i dist_i(y) * weight_i` with weights renormalized to one.
/// Surfaces are chosen by largest contributed mass, ties by ascending surface.
pub fn marginal_distribution(
    branches: &[WeightedDistribution],
) -> Result<Vec<(String, String, f64)>, AggregationError> {
    let weight_sum: f64 = branches.iter().map(|b| b.weight).sum();
    if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(AggregationError::WeightSum(weight_sum));
    }
    let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
    let mut surface_mass: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for branch in branches {
        let weight = branch.weight / weight_sum;
        for (canonical, entry) in &branch.dist {
            *mass.entry(canonical).or_insert(0.0) += weight * entry.prob;
            *surface_mass
                .entry((canonical.as_str(), entry.surface.as_str()))
                .or_insert(0.0) += weight * entry.prob;
        }
    }
    let mut ranked: Vec<(String, String, f64)> = mass
        .into_iter()
        .map(|(canonical, prob)| {
            let surface = surface_mass
                .iter()
                .filter(|((c, _), _)| *c == canonical)
                .min_by(|(ka, ma), (kb, mb)| {
                    mb.partial_cmp(ma)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| ka.1.cmp(kb.1))
                })
                .map(|((_, s), _)| s.to_string())
                .unwrap_or_else(|| canonical.to_string());
            (canonical.to_string(), surface, prob)
        })
        .collect();
    sort_ranked(&mut ranked);
    Ok(ranked)
}

/// Aggregate branch distributions into the node's candidate set: marginalize
/// over branches, keep the top-k answers, renormalize.
pub fn marginal_aggregate(
    branches: &[WeightedDistribution],
    k: usize,
) -> Result<CandidateSet, AggregationError> {
    let ranked = marginal_distribution(branches)?;
    truncate_renormalize(ranked, k)
}

/// The answer reported for a finished node: the surface form of its
/// highest-probability candidate.
pub fn final_answer(root_candidates: &CandidateSet) -> &str {
    &root_candidates.top().surface
}
