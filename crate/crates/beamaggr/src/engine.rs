//! The orchestrator: bottom-up post-order reasoning over a question tree,
//! beam combination and marginal aggregation at dependent nodes, final-answer
//! selection, dataset runs, and the versioned reasoning-trace format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamcore::{
    beam_combine, final_answer, marginal_aggregate, marginal_distribution, CandidateSet,
    Combination, Mass, WeightedDistribution,
};
use crate::evalkit::{hops_from_qtype, max_alias_f1, EvalReport, EvalRow, QAInstance, SkipRow};
use crate::llmio::{
    LedgerTag, LlmBackend, Prompt, TokenUsage, UsageLedger, UsageSnapshot, REASONING_MAX_TOKENS,
};
use crate::qtree::{
    mask_fill, parse_decomposition, parse_decomposition_map, regenerate_or_fallback, validate,
    DecompositionGenerator, NodeKind, QuestionNode, QuestionTree, TreeError,
};
use crate::strategies::{
    answer_question_multisource, MultiSourceAnswer, PromptLibrary, RetrievalHandles,
    StrategyConfig, StrategyError, StrategyKind,
};

/// Version tag carried by every trace file.
pub const TRACE_SCHEMA: &str = "baggtrace/1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("node {node}: {source}")]
    Node {
        node: String,
        #[source]
        source: StrategyError,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("aggregation at node {node}: {message}")]
    Aggregation { node: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Beam,
    /// Beam aggregation with a single candidate per node.
    Greedy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    #[default]
    Replay,
}

/// Engine knobs. Greedy mode forces an effective beam size of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub beam_size: usize,
    pub vote_temperature: f64,
    pub samples: usize,
    pub sample_temperature: f64,
    pub max_combinations: usize,
    pub strategies: Vec<StrategyKind>,
    pub mode: AggregationMode,
    pub backend: BackendMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            beam_size: 2,
            vote_temperature: 3.0,
            samples: 5,
            sample_temperature: 0.7,
            max_combinations: 8,
            strategies: StrategyKind::ALL.to_vec(),
            mode: AggregationMode::Beam,
            backend: BackendMode::Replay,
        }
    }
}

impl EngineConfig {
    pub fn effective_beam_size(&self) -> usize {
        match self.mode {
            AggregationMode::Greedy => 1,
            AggregationMode::Beam => self.beam_size,
        }
    }

    pub fn strategy_configs(&self) -> Vec<StrategyConfig> {
        self.strategies
            .iter()
            .map(|kind| {
                let mut config = StrategyConfig::default_for(*kind);
                config.samples = self.samples;
                config.sample_temperature = self.sample_temperature;
                config
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.beam_size == 0 {
            return Err(EngineError::Config("beam_size must be at least 1".into()));
        }
        if self.max_combinations == 0 {
            return Err(EngineError::Config(
                "max_combinations must be at least 1".into(),
            ));
        }
        if self.vote_temperature <= 0.0 {
            return Err(EngineError::Config(
                "vote_temperature must be positive".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(EngineError::Config(
                "at least one strategy is required".into(),
            ));
        }
        Ok(())
    }
}

/// Answers a single (possibly substituted) question with full provenance.
/// The engine is generic over this so scripted answerers can drive it in
/// tests and fixture authoring.
pub trait QuestionAnswerer: Send + Sync {
    fn answer(&self, question: &str) -> Result<MultiSourceAnswer, StrategyError>;
}

/// Production answerer: runs the configured strategies against a backend and
/// retrievers.
pub struct MultiSourceAnswerer {
    pub backend: Arc<dyn LlmBackend>,
    pub retrieval: RetrievalHandles,
    pub prompts: Arc<PromptLibrary>,
    pub configs: Vec<StrategyConfig>,
    pub vote_temperature: f64,
    pub k: usize,
}

impl QuestionAnswerer for MultiSourceAnswerer {
    fn answer(&self, question: &str) -> Result<MultiSourceAnswer, StrategyError> {
        answer_question_multisource(
            question,
            &self.configs,
            self.vote_temperature,
            self.k,
            self.backend.as_ref(),
            &self.retrieval,
            &self.prompts,
        )
    }
}

/// Scripted answerer for oracle tests: a function maps each question text to
/// vote counts, which are normalized exactly like production answers.
pub struct ScriptedAnswerer<F> {
    pub script: F,
    pub vote_temperature: f64,
    pub k: usize,
}

impl<F> QuestionAnswerer for ScriptedAnswerer<F>
where
    F: Fn(&str) -> Vec<(String, u32)> + Send + Sync,
{
    fn answer(&self, question: &str) -> Result<MultiSourceAnswer, StrategyError> {
        let votes = (self.script)(question);
        let samples: Vec<String> = votes
            .iter()
            .flat_map(|(answer, count)| std::iter::repeat_n(answer.clone(), *count as usize))
            .collect();
        let table = crate::beamcore::vote(&samples);
        if table.is_empty() {
            return Err(StrategyError::AllSourcesEmpty {
                question: question.to_string(),
            });
        }
        let candidates = crate::beamcore::normalize_truncate(&table, self.vote_temperature, self.k)
            .expect("scripted table is non-empty");
        let pre_truncation = crate::beamcore::softmax_distribution(&table, self.vote_temperature)
            .into_iter()
            .map(|(canonical, _, prob)| (canonical, prob))
            .collect();
        let voted_by = candidates
            .items()
            .iter()
            .map(|c| (c.answer.clone(), vec![StrategyKind::Closebook]))
            .collect();
        let usage = TokenUsage::new(crate::llmio::count_tokens(question), 1);
        Ok(MultiSourceAnswer {
            candidates,
            pre_truncation,
            outcomes: vec![crate::strategies::StrategyOutcome {
                kind: StrategyKind::Closebook,
                raw_completions: Vec::new(),
                extracted: samples,
                table,
                usage,
            }],
            voted_by,
            usage,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub answer: String,
    pub surface: String,
    pub prob: f64,
}

fn candidate_records(set: &CandidateSet) -> Vec<CandidateRecord> {
    set.items()
        .iter()
        .map(|c| CandidateRecord {
            answer: c.answer.clone(),
            surface: c.surface.clone(),
            prob: c.prob,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteEntry {
    pub answer: String,
    pub surface: String,
    pub count: u32,
}

/// One strategy's votes at one reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTraceEntry {
    pub kind: StrategyKind,
    pub samples: usize,
    pub extracted: usize,
    pub votes: Vec<VoteEntry>,
}

fn strategy_entries(answer: &MultiSourceAnswer) -> Vec<StrategyTraceEntry> {
    answer
        .outcomes
        .iter()
        .map(|outcome| StrategyTraceEntry {
            kind: outcome.kind,
            samples: outcome.raw_completions.len(),
            extracted: outcome.extracted.len(),
            votes: outcome
                .table
                .counts()
                .map(|(canonical, count)| VoteEntry {
                    answer: canonical.to_string(),
                    surface: outcome
                        .table
                        .surface(canonical)
                        .unwrap_or(canonical)
                        .to_string(),
                    count,
                })
                .collect(),
        })
        .collect()
}

/// One combination branch at a dependent node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    /// Ids of the nodes whose candidates fed this combination, in dep order.
    pub combo_nodes: Vec<String>,
    /// Surface answers substituted into the question, in dep order.
    pub combo_answers: Vec<String>,
    pub combo_canonical: Vec<String>,
    /// Renormalized combination weight, `P(q_i)`.
    pub weight: f64,
    pub substituted_question: String,
    /// Index of the earlier branch whose reasoning call this one reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_of: Option<usize>,
    pub strategies: Vec<StrategyTraceEntry>,
    /// Conditional answer distribution `P(y | q_i)`.
    pub conditional: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum NodeStyle {
    /// Answered by multi-source reasoning on the node's own question.
    Direct,
    /// Candidates inherited from the final child of a dependency-free
    /// composite node.
    Inherited { from: String },
    /// Aggregated over combinations of dependency answers.
    Aggregated,
}

/// Everything recorded about one post-order node visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub question: String,
    pub kind: NodeKind,
    #[serde(flatten)]
    pub style: NodeStyle,
    pub deps: Vec<u8>,
    /// Per-strategy votes for direct nodes; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<StrategyTraceEntry>,
    /// Combination branches for aggregated nodes; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchRecord>,
    /// Normalized distribution before top-k truncation.
    pub pre_truncation: Vec<(String, f64)>,
    /// The node's final candidate set.
    pub candidates: Vec<CandidateRecord>,
    /// Which strategies voted for each surviving answer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub voted_by: BTreeMap<String, Vec<StrategyKind>>,
}

/// Echo of the effective configuration in a trace header. Greedy mode is
/// recorded through its effective beam size so greedy runs and beam runs
/// with k = 1 produce identical traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub beam_size: usize,
    pub vote_temperature: f64,
    pub samples: usize,
    pub sample_temperature: f64,
    pub max_combinations: usize,
    pub strategies: Vec<String>,
}

impl TraceConfig {
    fn from_engine(config: &EngineConfig) -> Self {
        Self {
            beam_size: config.effective_beam_size(),
            vote_temperature: config.vote_temperature,
            samples: config.samples,
            sample_temperature: config.sample_temperature,
            max_combinations: config.max_combinations,
            strategies: config
                .strategies
                .iter()
                .map(|s| s.label().to_string())
                .collect(),
        }
    }
}

/// A full reasoning trace: one record per post-order node visit plus the
/// final answer and a usage snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub schema: String,
    pub question: String,
    pub config: TraceConfig,
    pub nodes: Vec<NodeRecord>,
    pub final_answer: String,
    pub final_canonical: String,
    pub usage: UsageSnapshot,
}

impl ReasoningTrace {
    /// Serialize as JSON lines: a header object, one object per node record,
    /// and a footer with the final answer and usage.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            schema: &'a str,
            question: &'a str,
            config: &'a TraceConfig,
        }
        #[derive(Serialize)]
        struct Footer<'a> {
            final_answer: &'a str,
            final_canonical: &'a str,
            usage: &'a UsageSnapshot,
        }
        let mut lines = Vec::with_capacity(self.nodes.len() + 2);
        lines.push(
            serde_json::to_string(&Header {
                schema: &self.schema,
                question: &self.question,
                config: &self.config,
            })
            .expect("header serializes"),
        );
        for node in &self.nodes {
            lines.push(serde_json::to_string(node).expect("node record serializes"));
        }
        lines.push(
            serde_json::to_string(&Footer {
                final_answer: &self.final_answer,
                final_canonical: &self.final_canonical,
                usage: &self.usage,
            })
            .expect("footer serializes"),
        );
        lines.join("\n") + "\n"
    }

    pub fn from_jsonl(raw: &str) -> Result<Self, EngineError> {
        #[derive(Deserialize)]
        struct Header {
            schema: String,
            question: String,
            config: TraceConfig,
        }
        #[derive(Deserialize)]
        struct Footer {
            final_answer: String,
            final_canonical: String,
            usage: UsageSnapshot,
        }
        let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| EngineError::Trace("empty trace file".into()))?,
        )
        .map_err(|e| EngineError::Trace(format!("bad header: {e}")))?;
        if header.schema != TRACE_SCHEMA {
            return Err(EngineError::Trace(format!(
                "unsupported schema {:?}, expected {TRACE_SCHEMA:?}",
                header.schema
            )));
        }
        let rest: Vec<&str> = lines.collect();
        let (footer_line, node_lines) = rest
            .split_last()
            .ok_or_else(|| EngineError::Trace("trace has no footer".into()))?;
        let nodes = node_lines
            .iter()
            .map(|line| {
                serde_json::from_str(line)
                    .map_err(|e| EngineError::Trace(format!("bad node record: {e}")))
            })
            .collect::<Result<Vec<NodeRecord>, _>>()?;
        let footer: Footer = serde_json::from_str(footer_line)
            .map_err(|e| EngineError::Trace(format!("bad footer: {e}")))?;
        Ok(ReasoningTrace {
            schema: header.schema,
            question: header.question,
            config: header.config,
            nodes,
            final_answer: footer.final_answer,
            final_canonical: footer.final_canonical,
            usage: footer.usage,
        })
    }
}

/// Re-run every aggregation step of a trace from its recorded vote tables
/// and branch distributions, checking that all distributions reproduce
/// exactly.
pub fn verify_trace(trace: &ReasoningTrace) -> Result<(), EngineError> {
    let k = trace.config.beam_size;
    let tau = trace.config.vote_temperature;
    let mut seen: BTreeMap<&str, &NodeRecord> = BTreeMap::new();
    let mismatch = |node: &str, what: &str| {
        EngineError::Trace(format!("node {node}: {what} does not reproduce"))
    };

    for record in &trace.nodes {
        let recomputed: Option<(Vec<(String, f64)>, CandidateSet)> = match &record.style {
            NodeStyle::Direct => {
                let tables: Vec<crate::beamcore::FrequencyTable> = record
                    .strategies
                    .iter()
                    .map(|entry| {
                        let samples: Vec<String> = entry
                            .votes
                            .iter()
                            .flat_map(|v| std::iter::repeat_n(v.surface.clone(), v.count as usize))
                            .collect();
                        crate::beamcore::vote(&samples)
                    })
                    .collect();
                let merged = crate::beamcore::merge_votes(&tables);
                if merged.is_empty() {
                    return Err(mismatch(&record.node_id, "empty vote tables"));
                }
                let pre = crate::beamcore::softmax_distribution(&merged, tau)
                    .into_iter()
                    .map(|(c, _, p)| (c, p))
                    .collect();
                let set = crate::beamcore::normalize_truncate(&merged, tau, k)
                    .map_err(|e| EngineError::Trace(e.to_string()))?;
                Some((pre, set))
            }
            NodeStyle::Aggregated => {
                if record.branches.is_empty() {
                    return Err(mismatch(
                        &record.node_id,
                        "aggregated node without branches",
                    ));
                }
                let dep_ids = &record.branches[0].combo_nodes;
                let dep_sets: Vec<CandidateSet> = dep_ids
                    .iter()
                    .map(|id| {
                        let child = seen.get(id.as_str()).ok_or_else(|| {
                            EngineError::Trace(format!("node {id} referenced before definition"))
                        })?;
                        rebuild_set(&child.candidates, k)
                    })
                    .collect::<Result<_, _>>()?;
                let combos = beam_combine(&dep_sets, trace.config.max_combinations)
                    .map_err(|e| EngineError::Trace(e.to_string()))?;
                if combos.len() != record.branches.len() {
                    return Err(mismatch(&record.node_id, "combination count"));
                }
                let total: f64 = combos.iter().map(|c| c.joint_prob).sum();
                let branches: Vec<WeightedDistribution> = record
                    .branches
                    .iter()
                    .zip(&combos)
                    .map(|(branch, combo)| {
                        if branch.combo_canonical != combo.canonical {
                            return Err(mismatch(&record.node_id, "combination order"));
                        }
                        if branch.weight != combo.joint_prob / total {
                            return Err(mismatch(&record.node_id, "combination weight"));
                        }
                        Ok(WeightedDistribution {
                            weight: branch.weight,
                            dist: branch
                                .conditional
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
                                .collect(),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let pre = marginal_distribution(&branches)
                    .map_err(|e| EngineError::Trace(e.to_string()))?
                    .into_iter()
                    .map(|(c, _, p)| (c, p))
                    .collect();
                let set = marginal_aggregate(&branches, k)
                    .map_err(|e| EngineError::Trace(e.to_string()))?;
                Some((pre, set))
            }
            NodeStyle::Inherited { from } => {
                let child = seen.get(from.as_str()).ok_or_else(|| {
                    EngineError::Trace(format!("node {from} referenced before definition"))
                })?;
                if child.candidates != record.candidates {
                    return Err(mismatch(&record.node_id, "inherited candidates"));
                }
                None
            }
        };
        if let Some((pre, set)) = recomputed {
            if pre != record.pre_truncation {
                return Err(mismatch(&record.node_id, "pre-truncation distribution"));
            }
            let got = candidate_records(&set);
            if got.len() != record.candidates.len()
                || got
                    .iter()
                    .zip(&record.candidates)
                    .any(|(a, b)| a.answer != b.answer || a.prob != b.prob)
            {
                return Err(mismatch(&record.node_id, "candidate distribution"));
            }
        }
        seen.insert(&record.node_id, record);
    }

    let root = trace
        .nodes
        .last()
        .ok_or_else(|| EngineError::Trace("trace has no nodes".into()))?;
    if root.candidates.is_empty() || root.candidates[0].surface != trace.final_answer {
        return Err(EngineError::Trace(
            "final answer does not match root top candidate".into(),
        ));
    }
    Ok(())
}

fn rebuild_set(records: &[CandidateRecord], k: usize) -> Result<CandidateSet, EngineError> {
    CandidateSet::new(
        records
            .iter()
            .map(|r| crate::beamcore::Candidate {
                answer: r.answer.clone(),
                surface: r.surface.clone(),
                prob: r.prob,
            })
            .collect(),
        k.max(records.len()),
    )
    .map_err(EngineError::Trace)
}

/// Output of one solve: the answer plus its full trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub answer: String,
    pub trace: ReasoningTrace,
}

struct SolveContext<'a> {
    tree: &'a QuestionTree,
    k: usize,
    max_combinations: usize,
    answerer: &'a dyn QuestionAnswerer,
    ledger: &'a UsageLedger,
}

/// Solve a question tree bottom-up and return the root's top answer with the
/// full reasoning trace.
///
/// Per post-order node: dependency-free atomic nodes are answered directly
/// by multi-source reasoning; nodes with placeholder dependencies combine
/// the referenced candidate sets, reason once per substituted question, and
/// aggregate marginally; dependency-free composite nodes adopt their final
/// child's candidates.
pub fn solve(
    question: &str,
    tree: &QuestionTree,
    config: &EngineConfig,
    answerer: &dyn QuestionAnswerer,
    ledger: &UsageLedger,
) -> Result<SolveOutput, EngineError> {
    config.validate()?;
    let violations = validate(tree);
    if !violations.is_empty() {
        return Err(EngineError::Tree(TreeError::Structure(violations)));
    }
    let ctx = SolveContext {
        tree,
        k: config.effective_beam_size(),
        max_combinations: config.max_combinations,
        answerer,
        ledger,
    };
    let (root_set, nodes) = solve_subtree(&ctx, &tree.root)?;
    let answer = final_answer(&root_set).to_string();
    let final_canonical = root_set.top().answer.clone();
    let trace = ReasoningTrace {
        schema: TRACE_SCHEMA.to_string(),
        question: question.to_string(),
        config: TraceConfig::from_engine(config),
        nodes,
        final_answer: answer.clone(),
        final_canonical,
        usage: ledger.snapshot(),
    };
    Ok(SolveOutput { answer, trace })
}

/// Greedy aggregation: identical to [`solve`] with the beam forced to one
/// candidate per node.
pub fn solve_greedy(
    question: &str,
    tree: &QuestionTree,
    config: &EngineConfig,
    answerer: &dyn QuestionAnswerer,
    ledger: &UsageLedger,
) -> Result<SolveOutput, EngineError> {
    let mut greedy = config.clone();
    greedy.mode = AggregationMode::Greedy;
    solve(question, tree, &greedy, answerer, ledger)
}

/// Solve the subtree rooted at `id`, returning its candidate set and the
/// node records of the subtree in post-order.
fn solve_subtree(
    ctx: &SolveContext<'_>,
    id: &str,
) -> Result<(CandidateSet, Vec<NodeRecord>), EngineError> {
    let node = &ctx.tree.nodes[id];

    // Resolve all children first. Children without sibling dependencies are
    // independent subtrees and may run in parallel; sibling-dependent leaves
    // must wait for the children they reference, so they run in order
    // afterwards. Records are committed in sibling order either way.
    let mut child_sets: Vec<Option<CandidateSet>> = vec![None; node.children.len()];
    let mut child_records: Vec<Vec<NodeRecord>> = vec![Vec::new(); node.children.len()];

    // A child is self-contained unless it is a leaf whose placeholders
    // reference siblings; composite children resolve their own deps inside
    // their subtree.
    let sibling_dependent =
        |child: &QuestionNode| child.children.is_empty() && !child.deps.is_empty();
    let independent: Vec<usize> = node
        .children
        .iter()
        .enumerate()
        .filter(|(_, child_id)| !sibling_dependent(&ctx.tree.nodes[*child_id]))
        .map(|(i, _)| i)
        .collect();
    let solved: Vec<(usize, (CandidateSet, Vec<NodeRecord>))> = independent
        .par_iter()
        .map(|i| Ok((*i, solve_subtree(ctx, &node.children[*i])?)))
        .collect::<Result<_, EngineError>>()?;
    for (i, (set, records)) in solved {
        child_sets[i] = Some(set);
        child_records[i] = records;
    }
    for (i, child_id) in node.children.iter().enumerate() {
        let child = &ctx.tree.nodes[child_id];
        if !sibling_dependent(child) {
            continue;
        }
        // Placeholder-bearing children are leaves referencing earlier
        // siblings; parse validation guarantees both.
        let dep_sets: Vec<(String, CandidateSet)> = child
            .deps
            .iter()
            .map(|dep| {
                let sibling = *dep as usize - 1;
                let set = child_sets[sibling]
                    .clone()
                    .ok_or_else(|| EngineError::Aggregation {
                        node: child_id.clone(),
                        message: format!("sibling #{dep} not yet solved"),
                    })?;
                Ok((node.children[sibling].clone(), set))
            })
            .collect::<Result<_, EngineError>>()?;
        let (set, record) = aggregate_dependent(ctx, child, dep_sets)?;
        child_sets[i] = Some(set);
        child_records[i] = vec![record];
    }

    let mut records: Vec<NodeRecord> = child_records.into_iter().flatten().collect();

    let (set, record) = if node.children.is_empty() {
        if node.deps.is_empty() {
            answer_direct(ctx, node)?
        } else {
            // A single-node tree cannot resolve sibling references.
            return Err(EngineError::Aggregation {
                node: id.to_string(),
                message: "placeholder dependencies cannot be resolved without siblings".into(),
            });
        }
    } else if node.deps.is_empty() {
        // Composite without dependencies: the final sub-question answers it.
        let last = node.children.len() - 1;
        let from = node.children[last].clone();
        let set = child_sets[last].clone().expect("final child solved");
        let record = NodeRecord {
            node_id: node.id.clone(),
            question: node.question.clone(),
            kind: node.kind,
            style: NodeStyle::Inherited { from },
            deps: Vec::new(),
            strategies: Vec::new(),
            branches: Vec::new(),
            pre_truncation: set
                .items()
                .iter()
                .map(|c| (c.answer.clone(), c.prob))
                .collect(),
            candidates: candidate_records(&set),
            voted_by: BTreeMap::new(),
        };
        (set, record)
    } else {
        let dep_sets: Vec<(String, CandidateSet)> = node
            .deps
            .iter()
            .map(|dep| {
                let child = *dep as usize - 1;
                let set = child_sets[child]
                    .clone()
                    .ok_or_else(|| EngineError::Aggregation {
                        node: id.to_string(),
                        message: format!("child #{dep} not solved"),
                    })?;
                Ok((node.children[child].clone(), set))
            })
            .collect::<Result<_, EngineError>>()?;
        aggregate_dependent(ctx, node, dep_sets)?
    };
    records.push(record);
    Ok((set, records))
}

/// Multi-source reasoning on the node's own question text.
fn answer_direct(
    ctx: &SolveContext<'_>,
    node: &QuestionNode,
) -> Result<(CandidateSet, NodeRecord), EngineError> {
    let answer = ctx
        .answerer
        .answer(&node.question)
        .map_err(|source| EngineError::Node {
            node: node.id.clone(),
            source,
        })?;
    charge_usage(ctx.ledger, &node.id, &answer);
    let record = NodeRecord {
        node_id: node.id.clone(),
        question: node.question.clone(),
        kind: node.kind,
        style: NodeStyle::Direct,
        deps: Vec::new(),
        strategies: strategy_entries(&answer),
        branches: Vec::new(),
        pre_truncation: answer.pre_truncation.clone(),
        candidates: candidate_records(&answer.candidates),
        voted_by: answer.voted_by.clone(),
    };
    Ok((answer.candidates, record))
}

fn charge_usage(ledger: &UsageLedger, node_id: &str, answer: &MultiSourceAnswer) {
    for outcome in &answer.outcomes {
        ledger.add(LedgerTag::new(node_id, outcome.kind.label()), outcome.usage);
    }
}

/// Beam-combine the dependency candidate sets, reason once per distinct
/// substituted question, and aggregate the branch distributions marginally.
fn aggregate_dependent(
    ctx: &SolveContext<'_>,
    node: &QuestionNode,
    dep_sets: Vec<(String, CandidateSet)>,
) -> Result<(CandidateSet, NodeRecord), EngineError> {
    let sets: Vec<CandidateSet> = dep_sets.iter().map(|(_, s)| s.clone()).collect();
    let combos: Vec<Combination> =
        beam_combine(&sets, ctx.max_combinations).map_err(|e| EngineError::Aggregation {
            node: node.id.clone(),
            message: e.to_string(),
        })?;
    let total_joint: f64 = combos.iter().map(|c| c.joint_prob).sum();
    let dep_ids: Vec<String> = dep_sets.iter().map(|(id, _)| id.clone()).collect();
    let max_index = *node.deps.iter().max().expect("dependent node has deps") as usize;

    // One reasoning call per distinct substituted question; later duplicates
    // reuse the first call's answer.
    let mut substituted = Vec::with_capacity(combos.len());
    let mut cache_of: Vec<Option<usize>> = Vec::with_capacity(combos.len());
    let mut first_occurrence: BTreeMap<String, usize> = BTreeMap::new();
    for (i, combo) in combos.iter().enumerate() {
        let mut dense = vec![String::new(); max_index];
        for (dep, answer) in node.deps.iter().zip(&combo.answers) {
            dense[*dep as usize - 1] = answer.clone();
        }
        let question = mask_fill(&node.fill_template, &dense)?;
        match first_occurrence.get(&question) {
            Some(first) => cache_of.push(Some(*first)),
            None => {
                first_occurrence.insert(question.clone(), i);
                cache_of.push(None);
            }
        }
        substituted.push(question);
    }

    let unique: Vec<(usize, &str)> = substituted
        .iter()
        .enumerate()
        .filter(|(i, _)| cache_of[*i].is_none())
        .map(|(i, q)| (i, q.as_str()))
        .collect();
    let answered: Vec<(usize, MultiSourceAnswer)> = unique
        .par_iter()
        .map(|(i, question)| {
            let answer = ctx
                .answerer
                .answer(question)
                .map_err(|source| EngineError::Node {
                    node: node.id.clone(),
                    source,
                })?;
            Ok((*i, answer))
        })
        .collect::<Result<_, EngineError>>()?;
    let mut answers: Vec<Option<MultiSourceAnswer>> = vec![None; combos.len()];
    for (i, answer) in answered {
        charge_usage(ctx.ledger, &node.id, &answer);
        answers[i] = Some(answer);
    }
    for i in 0..combos.len() {
        if let Some(first) = cache_of[i] {
            answers[i] = answers[first].clone();
        }
    }

    let mut branches = Vec::with_capacity(combos.len());
    let mut branch_records = Vec::with_capacity(combos.len());
    for (i, combo) in combos.iter().enumerate() {
        let answer = answers[i].as_ref().expect("all combinations answered");
        let weight = combo.joint_prob / total_joint;
        branches.push(WeightedDistribution::from_candidates(
            weight,
            &answer.candidates,
        ));
        branch_records.push(BranchRecord {
            combo_nodes: dep_ids.clone(),
            combo_answers: combo.answers.clone(),
            combo_canonical: combo.canonical.clone(),
            weight,
            substituted_question: substituted[i].clone(),
            cache_of: cache_of[i],
            strategies: strategy_entries(answer),
            conditional: candidate_records(&answer.candidates),
        });
    }

    let pre_truncation: Vec<(String, f64)> = marginal_distribution(&branches)
        .map_err(|e| EngineError::Aggregation {
            node: node.id.clone(),
            message: e.to_string(),
        })?
        .into_iter()
        .map(|(c, _, p)| (c, p))
        .collect();
    let set = marginal_aggregate(&branches, ctx.k).map_err(|e| EngineError::Aggregation {
        node: node.id.clone(),
        message: e.to_string(),
    })?;

    let mut voted_by: BTreeMap<String, Vec<StrategyKind>> = BTreeMap::new();
    for candidate in set.items() {
        let mut kinds: Vec<StrategyKind> = Vec::new();
        for (i, answer) in answers.iter().enumerate() {
            // Count votes from original calls only, not cached copies.
            if cache_of[i].is_some() {
                continue;
            }
            if let Some(answer) = answer {
                if let Some(branch_kinds) = answer.voted_by.get(&candidate.answer) {
                    for kind in branch_kinds {
                        if !kinds.contains(kind) {
                            kinds.push(*kind);
                        }
                    }
                }
            }
        }
        kinds.sort();
        voted_by.insert(candidate.answer.clone(), kinds);
    }

    let record = NodeRecord {
        node_id: node.id.clone(),
        question: node.question.clone(),
        kind: node.kind,
        style: NodeStyle::Aggregated,
        deps: node.deps.clone(),
        strategies: Vec::new(),
        branches: branch_records,
        pre_truncation,
        candidates: candidate_records(&set),
        voted_by,
    };
    Ok((set, record))
}

/// A decomposition generator backed by the LLM's few-shot decomposition
/// prompt, with an optional on-disk cache keyed by question digest.
pub struct LlmDecomposer {
    pub backend: Arc<dyn LlmBackend>,
    pub prompts: Arc<PromptLibrary>,
    pub cache_dir: Option<PathBuf>,
    pub sample_temperature: f64,
    attempts: AtomicUsize,
}

impl LlmDecomposer {
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        prompts: Arc<PromptLibrary>,
        cache_dir: Option<PathBuf>,
        sample_temperature: f64,
    ) -> Self {
        Self {
            backend,
            prompts,
            cache_dir,
            sample_temperature,
            attempts: AtomicUsize::new(0),
        }
    }

    fn cache_path(&self, question: &str) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("{}.json", crate::llmio::prompt_digest(question))))
    }
}

impl DecompositionGenerator for LlmDecomposer {
    fn generate(&self, question: &str) -> Result<String, String> {
        if let Some(path) = self.cache_path(question) {
            if let Ok(cached) = fs::read_to_string(&path) {
                return Ok(cached);
            }
        }
        let prompt_text = self
            .prompts
            .render("decompose", question, "")
            .map_err(|e| e.to_string())?;
        // Attempt i draws sample index i so retries explore fresh samples
        // and stay replayable.
        let attempt = self.attempts.fetch_add(1, Ordering::SeqCst);
        let prompt = Prompt {
            text: prompt_text,
            temperature: self.sample_temperature,
            n: attempt + 1,
            max_tokens: REASONING_MAX_TOKENS,
            stop: None,
        };
        let completions = self
            .backend
            .complete_n(&prompt)
            .map_err(|e| e.to_string())?;
        let raw = completions
            .last()
            .map(|c| c.text.trim().to_string())
            .unwrap_or_default();
        if let Some(path) = self.cache_path(question) {
            if let Some(dir) = path.parent() {
                let _ = fs::create_dir_all(dir);
            }
            let _ = fs::write(&path, &raw);
        }
        Ok(raw)
    }
}

/// How a tree was obtained for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionSource {
    Dataset,
    Generated,
    AtomicFallback,
}

/// Resolve an instance's question tree: dataset-provided decomposition
/// first, then the generator, then the single-node fallback.
pub fn resolve_tree(
    instance: &QAInstance,
    generator: Option<&dyn DecompositionGenerator>,
    max_retries: usize,
) -> Result<(QuestionTree, DecompositionSource), EngineError> {
    if let Some(mapping) = &instance.decomposition {
        let tree = parse_decomposition_map(&instance.question, mapping)?;
        return Ok((tree, DecompositionSource::Dataset));
    }
    match generator {
        Some(generator) => {
            let tree = regenerate_or_fallback(&instance.question, generator, max_retries);
            let source = if tree.len() == 1 && tree.root_node().is_atomic() {
                DecompositionSource::AtomicFallback
            } else {
                DecompositionSource::Generated
            };
            Ok((tree, source))
        }
        None => Err(EngineError::Config(format!(
            "instance {} has no decomposition and no generator is configured",
            instance.id
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

/// Per-dataset cost summary row: average token consumption per instance
/// next to the achieved score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCost {
    pub dataset: String,
    pub instances: usize,
    pub avg_tokens: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub totals: TokenUsage,
    pub avg_prompt_tokens: f64,
    pub avg_completion_tokens: f64,
    pub avg_total_tokens: f64,
    pub per_source: BTreeMap<String, TokenUsage>,
    pub datasets: Vec<DatasetCost>,
}

impl CostReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>10} {:>8}\n", "dataset", "#token", "f1"));
        for row in &self.datasets {
            out.push_str(&format!(
                "{:<16} {:>10.1} {:>8.4}\n",
                row.dataset, row.avg_tokens, row.mean_f1
            ));
        }
        out.push_str(&format!(
            "totals: prompt {} completion {} (avg {:.1} tokens/instance)\n",
            self.totals.prompt_tokens, self.totals.completion_tokens, self.avg_total_tokens
        ));
        out.push_str("per source:\n");
        for (source, usage) in &self.per_source {
            out.push_str(&format!(
                "  {:<12} prompt {:>8} completion {:>8}\n",
                source, usage.prompt_tokens, usage.completion_tokens
            ));
        }
        out
    }
}

/// Result of a dataset run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub eval: EvalReport,
    pub cost: CostReport,
    pub traces: Vec<(String, ReasoningTrace)>,
}

/// Solve and score every instance. Per-instance failures become skipped rows
/// and never abort the run; instances may execute concurrently with the
/// final ordering fixed by instance id.
pub fn run_dataset(
    instances: &[QAInstance],
    dataset_label: &str,
    config: &EngineConfig,
    answerer: &dyn QuestionAnswerer,
    generator: Option<&(dyn DecompositionGenerator + Sync)>,
    decomposition_retries: usize,
) -> RunOutcome {
    struct InstanceOutcome {
        id: String,
        row: Option<EvalRow>,
        skip: Option<SkipRow>,
        usage_by_source: BTreeMap<String, TokenUsage>,
        usage: TokenUsage,
        trace: Option<ReasoningTrace>,
    }

    let mut outcomes: Vec<InstanceOutcome> = instances
        .par_iter()
        .map(|instance| {
            let ledger = UsageLedger::new();
            let plain = generator.map(|g| g as &dyn DecompositionGenerator);
            let solved = resolve_tree(instance, plain, decomposition_retries)
                .and_then(|(tree, _)| solve(&instance.question, &tree, config, answerer, &ledger));
            match solved {
                Ok(output) => {
                    let f1 = max_alias_f1(&output.answer, &instance.gold_answers);
                    InstanceOutcome {
                        id: instance.id.clone(),
                        row: Some(EvalRow {
                            id: instance.id.clone(),
                            prediction: output.answer.clone(),
                            f1,
                            qtype: instance.qtype.clone(),
                            hops: instance.qtype.as_deref().and_then(hops_from_qtype),
                        }),
                        skip: None,
                        usage_by_source: ledger.by_source(),
                        usage: ledger.total(),
                        trace: Some(output.trace),
                    }
                }
                Err(error) => InstanceOutcome {
                    id: instance.id.clone(),
                    row: None,
                    skip: Some(SkipRow {
                        id: instance.id.clone(),
                        reason: error.to_string(),
                    }),
                    usage_by_source: ledger.by_source(),
                    usage: ledger.total(),
                    trace: None,
                },
            }
        })
        .collect();
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));

    let rows: Vec<EvalRow> = outcomes.iter().filter_map(|o| o.row.clone()).collect();
    let skipped: Vec<SkipRow> = outcomes.iter().filter_map(|o| o.skip.clone()).collect();
    let eval = EvalReport::build(rows, skipped);

    let f1_by_id: BTreeMap<&str, f64> = eval.rows.iter().map(|r| (r.id.as_str(), r.f1)).collect();
    let mut totals = TokenUsage::default();
    let mut per_source: BTreeMap<String, TokenUsage> = BTreeMap::new();
    let cost_rows: Vec<CostRow> = outcomes
        .iter()
        .map(|o| {
            totals += o.usage;
            for (source, usage) in &o.usage_by_source {
                *per_source.entry(source.clone()).or_default() += *usage;
            }
            CostRow {
                id: o.id.clone(),
                prompt_tokens: o.usage.prompt_tokens,
                completion_tokens: o.usage.completion_tokens,
                total_tokens: o.usage.total(),
                f1: f1_by_id.get(o.id.as_str()).copied(),
            }
        })
        .collect();
    let count = cost_rows.len().max(1) as f64;
    let cost = CostReport {
        avg_prompt_tokens: totals.prompt_tokens as f64 / count,
        avg_completion_tokens: totals.completion_tokens as f64 / count,
        avg_total_tokens: totals.total() as f64 / count,
        datasets: vec![DatasetCost {
            dataset: dataset_label.to_string(),
            instances: cost_rows.len(),
            avg_tokens: totals.total() as f64 / count,
            mean_f1: eval.mean_f1,
        }],
        rows: cost_rows,
        totals,
        per_source,
    };

    let traces = outcomes
        .into_iter()
        .filter_map(|o| o.trace.map(|t| (o.id, t)))
        .collect();
    RunOutcome { eval, cost, traces }
}

/// Paths and endpoint settings resolved from a config file; mirrors
/// [`EngineConfig`] plus runtime wiring.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub llm: crate::llmio::LiveLlmSettings,
    pub serp: crate::retrieval::LiveSerpSettings,
    pub fixtures_dir: Option<PathBuf>,
    pub serp_fixtures_dir: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub decomposition_cache_dir: Option<PathBuf>,
    pub decomposition_retries: usize,
}

impl RunConfig {
    pub fn with_defaults(mut self) -> Self {
        if self.decomposition_retries == 0 {
            self.decomposition_retries = 2;
        }
        self
    }
}

/// Load a TOML or JSON run configuration, chosen by file extension.
pub fn load_run_config(path: &Path) -> Result<RunConfig, EngineError> {
    let raw = fs::read_to_string(path)?;
    let config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&raw)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?,
        _ => toml::from_str(&raw)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?,
    };
    Ok(config.with_defaults())
}

/// Assemble the LLM backend for the configured mode.
pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn LlmBackend>, EngineError> {
    match config.engine.backend {
        BackendMode::Replay => {
            let dir = config
                .fixtures_dir
                .as_ref()
                .ok_or_else(|| EngineError::Config("replay mode requires fixtures_dir".into()))?;
            Ok(Arc::new(crate::llmio::ReplayBackend::new(dir.clone())))
        }
        #[cfg(feature = "live")]
        BackendMode::Live => Ok(Arc::new(crate::llmio::LiveBackend::new(
            config.llm.clone().resolved(),
        ))),
        #[cfg(feature = "live")]
        BackendMode::Record => {
            let dir = config
                .fixtures_dir
                .as_ref()
                .ok_or_else(|| EngineError::Config("record mode requires fixtures_dir".into()))?;
            Ok(Arc::new(crate::llmio::RecordingBackend::new(
                crate::llmio::LiveBackend::new(config.llm.clone().resolved()),
                dir.clone(),
            )))
        }
        #[cfg(not(feature = "live"))]
        BackendMode::Live | BackendMode::Record => Err(EngineError::Config(
            "live backends require the `live` feature".into(),
        )),
    }
}

/// Assemble the retrieval handles: BM25 over an index or corpus for the wiki
/// strategy, and a SERP provider matching the backend mode.
pub fn build_retrieval(config: &RunConfig) -> Result<RetrievalHandles, EngineError> {
    let wiki: Option<Arc<dyn crate::strategies::DocSearcher>> =
        if let Some(path) = &config.index_path {
            let index = crate::retrieval::InvertedIndex::load(path)
                .map_err(|e| EngineError::Config(e.to_string()))?;
            Some(Arc::new(index))
        } else if let Some(path) = &config.corpus_path {
            let docs = crate::retrieval::read_corpus(path)
                .map_err(|e| EngineError::Config(e.to_string()))?;
            let index = crate::retrieval::build_index(
                docs,
                crate::retrieval::DEFAULT_K1,
                crate::retrieval::DEFAULT_B,
            )
            .map_err(|e| EngineError::Config(e.to_string()))?;
            Some(Arc::new(index))
        } else {
            None
        };

    let serp: Option<Arc<dyn crate::retrieval::SerpProvider>> = match config.engine.backend {
        BackendMode::Replay => config.serp_fixtures_dir.as_ref().map(|dir| {
            Arc::new(crate::retrieval::ReplaySerpProvider::new(dir.clone()))
                as Arc<dyn crate::retrieval::SerpProvider>
        }),
        #[cfg(feature = "live")]
        BackendMode::Live => Some(Arc::new(crate::retrieval::LiveSerpProvider::new(
            config.serp.clone().resolved(),
        ))),
        #[cfg(feature = "live")]
        BackendMode::Record => {
            let dir = config.serp_fixtures_dir.as_ref().ok_or_else(|| {
                EngineError::Config("record mode requires serp_fixtures_dir".into())
            })?;
            Some(Arc::new(crate::retrieval::RecordingSerpProvider::new(
                crate::retrieval::LiveSerpProvider::new(config.serp.clone().resolved()),
                dir.clone(),
            )))
        }
        #[cfg(not(feature = "live"))]
        BackendMode::Live | BackendMode::Record => {
            return Err(EngineError::Config(
                "live backends require the `live` feature".into(),
            ))
        }
    };
    Ok(RetrievalHandles { wiki, serp })
}

/// Load the prompt library with optional directory overrides.
pub fn build_prompts(config: &RunConfig) -> Result<PromptLibrary, EngineError> {
    let library = PromptLibrary::builtin();
    match &config.prompts_dir {
        Some(dir) => library.with_overrides(dir).map_err(EngineError::Io),
        None => Ok(library),
    }
}

/// Solve a single question through the full production stack described by a
/// run config. A decomposition mapping may be supplied inline; otherwise the
/// LLM decomposer generates one.
pub fn run_single(
    question: &str,
    mapping_json: Option<&str>,
    run_config: &RunConfig,
) -> Result<SolveOutput, EngineError> {
    let backend = build_backend(run_config)?;
    let retrieval = build_retrieval(run_config)?;
    let prompts = Arc::new(build_prompts(run_config)?);
    let answerer = MultiSourceAnswerer {
        backend: backend.clone(),
        retrieval,
        prompts: prompts.clone(),
        configs: run_config.engine.strategy_configs(),
        vote_temperature: run_config.engine.vote_temperature,
        k: run_config.engine.effective_beam_size(),
    };
    let tree = match mapping_json {
        Some(raw) => parse_decomposition(question, raw)?,
        None => {
            let decomposer = LlmDecomposer::new(
                backend,
                prompts,
                run_config.decomposition_cache_dir.clone(),
                run_config.engine.sample_temperature,
            );
            regenerate_or_fallback(question, &decomposer, run_config.decomposition_retries)
        }
    };
    let ledger = UsageLedger::new();
    solve(question, &tree, &run_config.engine, &answerer, &ledger)
}
