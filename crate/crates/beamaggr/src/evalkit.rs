//! Evaluation: token-level F1 with alias maximization, dataset loading for
//! the four benchmark formats plus a generic JSONL format, and trace
//! analytics (knowledge-source contribution and per-node distribution
//! statistics).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamcore::CandidateSet;
use crate::engine::{NodeRecord, NodeStyle, ReasoningTrace};
use crate::qtree::DecompositionMap;
use crate::strategies::StrategyKind;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {path} line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("trace is incomplete: {0}")]
    IncompleteTrace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalize text for token-level scoring: lowercase, strip punctuation,
/// drop the articles a/an/the, split on whitespace.
///
/// ```
/// let tokens = beamaggr::evalkit::normalize_text("The Grand Duchy of Hesse.");
/// assert_eq!(tokens, ["grand", "duchy", "of", "hesse"]);
/// ```
pub fn normalize_text(s: &str) -> Vec<String> {
    let stripped: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn token_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for token in tokens {
        *counts.entry(token.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Token-level F1: harmonic mean of multiset precision and recall over
/// normalized tokens. Both sides empty scores one; exactly one empty scores
/// zero.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred_tokens = normalize_text(pred);
    let gold_tokens = normalize_text(gold);
    match (pred_tokens.is_empty(), gold_tokens.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let pred_counts = token_counts(&pred_tokens);
    let gold_counts = token_counts(&gold_tokens);
    let common: usize = pred_counts
        .iter()
        .map(|(token, count)| gold_counts.get(token).copied().unwrap_or(0).min(*count))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 of the prediction against any gold alias.
pub fn max_alias_f1<S: AsRef<str>>(pred: &str, aliases: &[S]) -> f64 {
    debug_assert!(!aliases.is_empty(), "gold aliases must be non-empty");
    aliases
        .iter()
        .map(|alias| token_f1(pred, alias.as_ref()))
        .fold(0.0, f64::max)
}

/// One question with its gold answers and optional decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    HotpotQA,
    TwoWikiMQA,
    MuSiQue,
    Bamboogle,
    Generic,
}

impl DatasetFormat {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_lowercase().as_str() {
            "hotpotqa" => Some(Self::HotpotQA),
            "2wikimqa" | "2wiki" | "twowikimqa" => Some(Self::TwoWikiMQA),
            "musique" => Some(Self::MuSiQue),
            "bamboogle" => Some(Self::Bamboogle),
            "generic" => Some(Self::Generic),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct GenericLine {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    qtype: Option<String>,
    #[serde(default)]
    decomposition: Option<DecompositionMap>,
}

#[derive(Deserialize)]
struct HotpotLine {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    answer: String,
    #[serde(default, rename = "type")]
    qtype: Option<String>,
}

#[derive(Deserialize)]
struct MusiqueLine {
    id: String,
    question: String,
    answer: String,
    #[serde(default)]
    answer_aliases: Vec<String>,
}

#[derive(Deserialize)]
struct BamboogleLine {
    question: String,
    answer: String,
}

/// Load a dataset file in one of the supported formats into normalized
/// instances. Instances must have at least one gold answer.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QAInstance>, EvalError> {
    let raw = fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let format_err = |line: usize, message: String| EvalError::Format {
        path: path_str.clone(),
        line,
        message,
    };

    let instances = match format {
        DatasetFormat::Generic => {
            let mut instances = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: GenericLine =
                    serde_json::from_str(line).map_err(|e| format_err(i + 1, e.to_string()))?;
                if parsed.answers.is_empty() {
                    return Err(format_err(i + 1, "instance has no gold answers".into()));
                }
                instances.push(QAInstance {
                    id: parsed.id,
                    question: parsed.question,
                    gold_answers: parsed.answers,
                    qtype: parsed.qtype,
                    decomposition: parsed.decomposition,
                });
            }
            instances
        }
        DatasetFormat::HotpotQA | DatasetFormat::TwoWikiMQA => {
            let rows: Vec<HotpotLine> =
                serde_json::from_str(&raw).map_err(|e| format_err(0, e.to_string()))?;
            rows.into_iter()
                .map(|row| QAInstance {
                    id: row.id,
                    question: row.question,
                    gold_answers: vec![row.answer],
                    qtype: row.qtype,
                    decomposition: None,
                })
                .collect()
        }
        DatasetFormat::MuSiQue => {
            let mut instances = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: MusiqueLine =
                    serde_json::from_str(line).map_err(|e| format_err(i + 1, e.to_string()))?;
                let mut gold = vec![parsed.answer];
                gold.extend(parsed.answer_aliases);
                // MuSiQue ids lead with their hop structure, e.g. 2hop__x_y.
                let qtype = parsed.id.split("__").next().map(str::to_string);
                instances.push(QAInstance {
                    id: parsed.id,
                    question: parsed.question,
                    gold_answers: gold,
                    qtype,
                    decomposition: None,
                });
            }
            instances
        }
        DatasetFormat::Bamboogle => {
            let rows: Vec<BamboogleLine> =
                serde_json::from_str(&raw).map_err(|e| format_err(0, e.to_string()))?;
            rows.into_iter()
                .enumerate()
                .map(|(i, row)| QAInstance {
                    id: format!("bamboogle-{:04}", i + 1),
                    question: row.question,
                    gold_answers: vec![row.answer],
                    qtype: Some("2hop".to_string()),
                    decomposition: None,
                })
                .collect()
        }
    };
    for (i, instance) in instances.iter().enumerate() {
        if instance.gold_answers.iter().all(|a| a.trim().is_empty()) {
            return Err(format_err(
                i + 1,
                format!("instance {} has empty gold answers", instance.id),
            ));
        }
    }
    Ok(instances)
}

/// Hop count parsed from a qtype label such as `2hop` or `3hop1`.
pub fn hops_from_qtype(qtype: &str) -> Option<u32> {
    let digits: String = qtype.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || !qtype[digits.len()..].starts_with("hop") {
        None
    } else {
        digits.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRow {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_f1: f64,
}

/// Per-instance scores plus aggregate means. Skipped instances are excluded
/// from every mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<SkipRow>,
    pub mean_f1: f64,
    pub per_qtype: BTreeMap<String, Aggregate>,
    pub per_hop: BTreeMap<String, Aggregate>,
    /// Definitions of the trace analytics carried alongside scores.
    pub metric_note: String,
}

pub const METRIC_NOTE: &str = "f1: token-level, SQuAD-style normalization, max over gold aliases; \
     diversity: distinct answers before truncation; consistency: top-1 probability; \
     uncertainty: Shannon entropy (nats) of the truncated distribution";

impl EvalReport {
    /// Assemble a report from per-instance rows; rows are ordered by id.
    pub fn build(mut rows: Vec<EvalRow>, mut skipped: Vec<SkipRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        skipped.sort_by(|a, b| a.id.cmp(&b.id));
        let mean_f1 = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64
        };
        let mut per_qtype: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        let mut per_hop: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for row in &rows {
            let qtype = row.qtype.clone().unwrap_or_else(|| "unlabeled".to_string());
            let entry = per_qtype.entry(qtype).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += row.f1;
            if let Some(hops) = row.hops {
                let entry = per_hop.entry(format!("{hops}hop")).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += row.f1;
            }
        }
        let finish = |m: BTreeMap<String, (usize, f64)>| {
            m.into_iter()
                .map(|(k, (count, sum))| {
                    (
                        k,
                        Aggregate {
                            count,
                            mean_f1: sum / count as f64,
                        },
                    )
                })
                .collect()
        };
        EvalReport {
            rows,
            skipped,
            mean_f1,
            per_qtype: finish(per_qtype),
            per_hop: finish(per_hop),
            metric_note: METRIC_NOTE.to_string(),
        }
    }

    /// Plain-text table rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "instances: {}  skipped: {}  mean f1: {:.4}\n",
            self.rows.len(),
            self.skipped.len(),
            self.mean_f1
        ));
        out.push_str("per qtype:\n");
        for (qtype, agg) in &self.per_qtype {
            out.push_str(&format!(
                "  {:<16} n={:<4} f1={:.4}\n",
                qtype, agg.count, agg.mean_f1
            ));
        }
        if !self.per_hop.is_empty() {
            out.push_str("per hop:\n");
            for (hop, agg) in &self.per_hop {
                out.push_str(&format!(
                    "  {:<16} n={:<4} f1={:.4}\n",
                    hop, agg.count, agg.mean_f1
                ));
            }
        }
        out.push_str(&format!("{:<24} {:>8}  prediction\n", "id", "f1"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>8.4}  {}\n",
                row.id, row.f1, row.prediction
            ));
        }
        for skip in &self.skipped {
            out.push_str(&format!(
                "{:<24} {:>8}  [skipped: {}]\n",
                skip.id, "-", skip.reason
            ));
        }
        out
    }
}

/// Distribution statistics for one reasoned node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: String,
    /// Distinct candidate answers before top-k truncation.
    pub diversity: usize,
    /// Probability of the top candidate after truncation.
    pub consistency: f64,
    /// Shannon entropy in nats of the truncated, renormalized distribution.
    pub uncertainty: f64,
}

pub fn node_stats(
    node: impl Into<String>,
    pre_truncation: &[(String, f64)],
    post: &CandidateSet,
) -> NodeStats {
    let uncertainty = -post
        .items()
        .iter()
        .map(|c| c.prob * c.prob.ln())
        .sum::<f64>();
    NodeStats {
        node: node.into(),
        diversity: pre_truncation.len(),
        consistency: post.top().prob,
        // Clamp the -0.0 that a single certain candidate produces.
        uncertainty: uncertainty.max(0.0),
    }
}

/// Fraction of the winning reasoning path each knowledge source voted for.
///
/// Starting from the root's top answer, this walks the trace top-down along
/// the branch that contributed the most probability mass to each node's
/// chosen answer, and counts which strategies voted for the chosen answer at
/// every node on the path. Fractions sum to one.
pub fn source_contribution(
    trace: &ReasoningTrace,
) -> Result<BTreeMap<StrategyKind, f64>, EvalError> {
    let by_id: BTreeMap<&str, &NodeRecord> = trace
        .nodes
        .iter()
        .map(|n| (n.node_id.as_str(), n))
        .collect();
    let root = trace
        .nodes
        .last()
        .ok_or_else(|| EvalError::IncompleteTrace("trace has no node records".into()))?;
    if root.candidates.is_empty() {
        return Err(EvalError::IncompleteTrace("root has no candidates".into()));
    }

    let mut counts: BTreeMap<StrategyKind, usize> = BTreeMap::new();
    let mut stack: Vec<(&NodeRecord, String)> = vec![(root, root.candidates[0].answer.clone())];
    while let Some((record, answer)) = stack.pop() {
        match &record.style {
            NodeStyle::Inherited { from } => {
                let child = by_id.get(from.as_str()).ok_or_else(|| {
                    EvalError::IncompleteTrace(format!("inherited source {from} missing"))
                })?;
                stack.push((child, answer));
            }
            NodeStyle::Direct => {
                for entry in &record.strategies {
                    if entry.votes.iter().any(|v| v.answer == answer) {
                        *counts.entry(entry.kind).or_insert(0) += 1;
                    }
                }
            }
            NodeStyle::Aggregated => {
                // The utilized branch is the one contributing the most mass
                // to the chosen answer.
                let branch = record
                    .branches
                    .iter()
                    .map(|b| {
                        let mass = b
                            .conditional
                            .iter()
                            .find(|c| c.answer == answer)
                            .map(|c| c.prob * b.weight)
                            .unwrap_or(0.0);
                        (b, mass)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(b, _)| b)
                    .ok_or_else(|| {
                        EvalError::IncompleteTrace(format!(
                            "node {} has no branches",
                            record.node_id
                        ))
                    })?;
                for entry in &branch.strategies {
                    if entry.votes.iter().any(|v| v.answer == answer) {
                        *counts.entry(entry.kind).or_insert(0) += 1;
                    }
                }
                for (dep_node, dep_answer) in branch.combo_nodes.iter().zip(&branch.combo_canonical)
                {
                    let child = by_id.get(dep_node.as_str()).ok_or_else(|| {
                        EvalError::IncompleteTrace(format!("branch child {dep_node} missing"))
                    })?;
                    stack.push((child, dep_answer.clone()));
                }
            }
        }
    }

    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(EvalError::IncompleteTrace(
            "no strategy votes found along the winning path".into(),
        ));
    }
    Ok(counts
        .into_iter()
        .map(|(kind, count)| (kind, count as f64 / total as f64))
        .collect())
}
