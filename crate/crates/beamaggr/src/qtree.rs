//! Question decomposition trees: the mapping document format, placeholder
//! resolution, structural validation, post-order traversal, and placeholder
//! substitution.
//!
//! A decomposition document is a JSON object mapping each composite question
//! to its ordered list of sub-questions. Sub-question texts may contain
//! placeholders `#1`..`#9` referring to earlier siblings in the same list; a
//! composite question may instead carry a trailing dependency annotation such
//! as `(#2, #4)` naming the children whose answers it consumes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamcore::CandidateSet;

/// Placeholders are single-digit, `#1` through `#9`.
pub const MAX_PLACEHOLDER_INDEX: u8 = 9;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed decomposition document: {0}")]
    Syntax(String),
    #[error("invalid decomposition structure: {}", render_violations(.0))]
    Structure(Vec<Violation>),
    #[error("placeholder #{index} has no answer (combination holds {available})")]
    MissingAnswer { index: u8, available: usize },
}

fn render_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A single rule violation, naming the offending node (or question text when
/// no node exists yet) and the rule that failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: String,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    fn new(node: impl Into<String>, rule: &str, detail: impl Into<String>) -> Self {
        Self {
            node: node.into(),
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.node, self.detail)
    }
}

/// The raw mapping document: composite question text to ordered sub-questions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecompositionMap {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl DecompositionMap {
    /// Parse a JSON decomposition document. Errors are syntactic only;
    /// structural rules are checked by [`parse_decomposition`].
    pub fn from_json(raw: &str) -> Result<Self, TreeError> {
        serde_json::from_str(raw).map_err(|e| TreeError::Syntax(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("mapping serializes")
    }

    /// The entry keys that are never referenced as a sub-question of another
    /// entry; a valid mapping has exactly one (the root).
    pub fn root_candidates(&self) -> Vec<&str> {
        let referenced: BTreeSet<&str> = self
            .entries
            .values()
            .flat_map(|subs| subs.iter().map(String::as_str))
            .collect();
        self.entries
            .keys()
            .map(String::as_str)
            .filter(|k| !referenced.contains(*k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Atomic,
    Composite,
}

/// One node of a question tree.
///
/// `question` is the display text with any trailing dependency annotation
/// stripped; `fill_template` keeps the original text so substitution can
/// inject answers where the annotation stood. `deps` holds the placeholder
/// indices this node consumes: positions into its own child list for
/// composite nodes, positions into its sibling list for atomic nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionNode {
    pub id: String,
    pub question: String,
    pub fill_template: String,
    pub deps: Vec<u8>,
    pub children: Vec<String>,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSet>,
}

impl QuestionNode {
    pub fn is_atomic(&self) -> bool {
        matches!(self.kind, NodeKind::Atomic)
    }
}

/// A parsed question tree. Immutable after construction; the engine clones it
/// per solve when it wants to fill in candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTree {
    pub nodes: BTreeMap<String, QuestionNode>,
    pub root: String,
}

impl QuestionTree {
    pub fn node(&self, id: &str) -> Option<&QuestionNode> {
        self.nodes.get(id)
    }

    pub fn root_node(&self) -> &QuestionNode {
        &self.nodes[&self.root]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A one-node atomic tree holding the original question unchanged.
    pub fn atomic_fallback(question: &str) -> Self {
        let node = QuestionNode {
            id: "q1".to_string(),
            question: question.to_string(),
            fill_template: question.to_string(),
            deps: Vec::new(),
            children: Vec::new(),
            kind: NodeKind::Atomic,
            candidates: None,
        };
        QuestionTree {
            nodes: BTreeMap::from([(node.id.clone(), node)]),
            root: "q1".to_string(),
        }
    }

    /// Parent id of each node.
    pub fn parents(&self) -> BTreeMap<String, String> {
        let mut parents = BTreeMap::new();
        for (id, node) in &self.nodes {
            for child in &node.children {
                parents.insert(child.clone(), id.clone());
            }
        }
        parents
    }

    /// Reconstruct the mapping document this tree was parsed from. Composite
    /// node questions keep their dependency annotations so the round trip is
    /// exact.
    pub fn to_mapping(&self) -> DecompositionMap {
        let mut entries = BTreeMap::new();
        for node in self.nodes.values() {
            if !node.children.is_empty() {
                let subs = node
                    .children
                    .iter()
                    .map(|c| self.nodes[c].fill_template.clone())
                    .collect();
                entries.insert(node.fill_template.clone(), subs);
            }
        }
        DecompositionMap { entries }
    }

    /// Flat `Q1. ...` rendering in post-order, with sibling-local placeholder
    /// indices renumbered to flat question numbers. Display format only.
    pub fn render_flat(&self) -> String {
        let order = post_order(self);
        let position: BTreeMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i + 1))
            .collect();
        let parents = self.parents();
        let mut lines = Vec::with_capacity(order.len());
        for id in &order {
            let node = &self.nodes[id];
            let frame: Vec<&str> = if node.is_atomic() {
                parents
                    .get(id)
                    .map(|p| self.nodes[p].children.iter().map(String::as_str).collect())
                    .unwrap_or_default()
            } else {
                node.children.iter().map(String::as_str).collect()
            };
            let mut text = String::with_capacity(node.fill_template.len());
            let mut chars = node.fill_template.chars().peekable();
            while let Some(c) = chars.next() {
                if c == '#' {
                    if let Some(d) = chars.peek().and_then(|p| p.to_digit(10)) {
                        if (1..=MAX_PLACEHOLDER_INDEX as u32).contains(&d) {
                            let referenced = frame.get(d as usize - 1).copied();
                            if let Some(flat) = referenced.and_then(|r| position.get(r)) {
                                text.push('#');
                                text.push_str(&flat.to_string());
                                chars.next();
                                continue;
                            }
                        }
                    }
                }
                text.push(c);
            }
            lines.push(format!("Q{}. {}", position[id.as_str()], text));
        }
        lines.join("\n")
    }
}

/// Extract `#i` placeholder indices in order of first appearance.
fn placeholder_indices(text: &str) -> Vec<u8> {
    let mut seen = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '#' {
            if let Some(d) = chars.peek().and_then(|p| p.to_digit(10)) {
                if (1..=MAX_PLACEHOLDER_INDEX as u32).contains(&d) {
                    let idx = d as u8;
                    if !seen.contains(&idx) {
                        seen.push(idx);
                    }
                    chars.next();
                }
            }
        }
    }
    seen
}

/// Split a trailing dependency annotation like `(#2, #4)` off a question.
/// Returns the stripped text and the annotated indices, or `None` when the
/// question has no such suffix.
fn split_annotation(text: &str) -> Option<(String, Vec<u8>)> {
    let trimmed = text.trim_end();
    if !trimmed.ends_with(')') {
        return None;
    }
    let open = trimmed.rfind('(')?;
    let inner = &trimmed[open + 1..trimmed.len() - 1];
    let mut indices = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        let rest = part.strip_prefix('#')?;
        if rest.len() != 1 {
            return None;
        }
        let digit = rest.chars().next()?.to_digit(10)?;
        if !(1..=MAX_PLACEHOLDER_INDEX as u32).contains(&digit) {
            return None;
        }
        indices.push(digit as u8);
    }
    if indices.is_empty() {
        return None;
    }
    Some((trimmed[..open].trim_end().to_string(), indices))
}

struct TreeBuilder<'a> {
    map: &'a DecompositionMap,
    nodes: Vec<QuestionNode>,
    violations: Vec<Violation>,
}

impl<'a> TreeBuilder<'a> {
    /// Expand `text` into a subtree, returning the slot index of its node.
    /// `stack` holds the composite texts currently being expanded, for cycle
    /// detection.
    fn expand(&mut self, text: &str, stack: &mut Vec<String>) -> Option<usize> {
        if stack.iter().any(|s| s == text) {
            self.violations.push(Violation::new(
                text,
                "cycle",
                "question is its own ancestor",
            ));
            return None;
        }
        let subs = self.map.entries.get(text);
        let mut children = Vec::new();
        if let Some(subs) = subs {
            if subs.is_empty() {
                self.violations.push(Violation::new(
                    text,
                    "empty-children",
                    "composite entry has no sub-questions",
                ));
                return None;
            }
            stack.push(text.to_string());
            for sub in subs {
                match self.expand(sub, stack) {
                    Some(slot) => children.push(slot),
                    None => {
                        stack.pop();
                        return None;
                    }
                }
            }
            stack.pop();
        }
        let (question, deps) = match split_annotation(text) {
            Some((stripped, annotated)) => {
                let mut deps = placeholder_indices(&stripped);
                for idx in annotated {
                    if !deps.contains(&idx) {
                        deps.push(idx);
                    }
                }
                (stripped, deps)
            }
            None => (text.to_string(), placeholder_indices(text)),
        };
        let slot = self.nodes.len();
        self.nodes.push(QuestionNode {
            id: String::new(),
            question,
            fill_template: text.to_string(),
            deps,
            children: children.iter().map(|c| c.to_string()).collect(),
            kind: if subs.is_some() {
                NodeKind::Composite
            } else {
                NodeKind::Atomic
            },
            candidates: None,
        });
        Some(slot)
    }
}

/// Parse a decomposition document into a question tree rooted at
/// `original_question`.
///
/// Structural rules: the mapping has exactly one unreferenced key and it must
/// match the original question (after stripping any dependency annotation),
/// every entry is reachable from the root, no reachable question cycles, no
/// empty sub-question lists, and every placeholder resolves within its frame
/// (own children for composite nodes, earlier siblings for atomic ones).
pub fn parse_decomposition(original_question: &str, raw: &str) -> Result<QuestionTree, TreeError> {
    let map = DecompositionMap::from_json(raw)?;
    parse_decomposition_map(original_question, &map)
}

/// Like [`parse_decomposition`] but over an already-parsed mapping.
pub fn parse_decomposition_map(
    original_question: &str,
    map: &DecompositionMap,
) -> Result<QuestionTree, TreeError> {
    let mut violations = Vec::new();
    let roots = map.root_candidates();
    let root_text = match roots.as_slice() {
        [] => {
            violations.push(Violation::new(
                original_question,
                "missing-root",
                "no entry key is unreferenced; the root cannot be identified",
            ));
            return Err(TreeError::Structure(violations));
        }
        [only] => only.to_string(),
        many => {
            violations.push(Violation::new(
                original_question,
                "missing-root",
                format!("{} unreferenced entry keys, expected exactly 1", many.len()),
            ));
            return Err(TreeError::Structure(violations));
        }
    };
    let stripped_root = split_annotation(&root_text)
        .map(|(s, _)| s)
        .unwrap_or_else(|| root_text.clone());
    if root_text != original_question && stripped_root != original_question {
        violations.push(Violation::new(
            root_text.clone(),
            "missing-root",
            format!("root entry does not match the original question {original_question:?}"),
        ));
        return Err(TreeError::Structure(violations));
    }

    let mut builder = TreeBuilder {
        map,
        nodes: Vec::new(),
        violations,
    };
    let root_slot = builder.expand(&root_text, &mut Vec::new());
    let mut violations = builder.violations;
    let root_slot = match root_slot {
        Some(slot) if violations.is_empty() => slot,
        _ => return Err(TreeError::Structure(violations)),
    };

    // Reachability: every entry key must occur as a composite node.
    let expanded: BTreeSet<&str> = builder
        .nodes
        .iter()
        .filter(|n| !n.children.is_empty())
        .map(|n| n.fill_template.as_str())
        .collect();
    for key in map.entries.keys() {
        if !expanded.contains(key.as_str()) {
            violations.push(Violation::new(
                key.clone(),
                "unreachable-entry",
                "entry is not reachable from the root",
            ));
        }
    }
    if !violations.is_empty() {
        return Err(TreeError::Structure(violations));
    }

    // Assign post-order ids over the slot graph, then rewrite child links.
    let mut order = Vec::with_capacity(builder.nodes.len());
    post_order_slots(&builder.nodes, root_slot, &mut order);
    let mut slot_to_id = vec![String::new(); builder.nodes.len()];
    for (pos, slot) in order.iter().enumerate() {
        slot_to_id[*slot] = format!("q{}", pos + 1);
    }
    let mut nodes = BTreeMap::new();
    for (slot, mut node) in builder.nodes.into_iter().enumerate() {
        node.id = slot_to_id[slot].clone();
        node.children = node
            .children
            .iter()
            .map(|c| slot_to_id[c.parse::<usize>().expect("slot index")].clone())
            .collect();
        nodes.insert(node.id.clone(), node);
    }
    let tree = QuestionTree {
        nodes,
        root: slot_to_id[root_slot].clone(),
    };

    let violations = validate(&tree);
    if violations.is_empty() {
        Ok(tree)
    } else {
        Err(TreeError::Structure(violations))
    }
}

fn post_order_slots(nodes: &[QuestionNode], slot: usize, out: &mut Vec<usize>) {
    for child in &nodes[slot].children {
        post_order_slots(nodes, child.parse().expect("slot index"), out);
    }
    out.push(slot);
}

/// Check every tree invariant, returning one violation per broken rule. An
/// empty report means the tree is valid.
pub fn validate(tree: &QuestionTree) -> Vec<Violation> {
    let mut violations = Vec::new();
    if !tree.nodes.contains_key(&tree.root) {
        violations.push(Violation::new(
            tree.root.clone(),
            "missing-root",
            "root id not in tree",
        ));
        return violations;
    }

    // Each node must be reached exactly once from the root.
    let mut visits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut stack = vec![tree.root.as_str()];
    let mut cycle_guard = 0usize;
    let budget = tree.nodes.len() * (tree.nodes.len() + 1) + 1;
    while let Some(id) = stack.pop() {
        cycle_guard += 1;
        if cycle_guard > budget {
            violations.push(Violation::new(id, "cycle", "node graph is not a tree"));
            return violations;
        }
        *visits.entry(id).or_insert(0) += 1;
        if visits[id] > 1 {
            violations.push(Violation::new(id, "cycle", "node visited more than once"));
            return violations;
        }
        match tree.nodes.get(id) {
            Some(node) => stack.extend(node.children.iter().map(String::as_str)),
            None => {
                violations.push(Violation::new(id, "dangling-child", "child id not in tree"));
                return violations;
            }
        }
    }
    for id in tree.nodes.keys() {
        if !visits.contains_key(id.as_str()) {
            violations.push(Violation::new(
                id.clone(),
                "unreachable-node",
                "node is not reachable from the root",
            ));
        }
    }

    let parents = tree.parents();
    for (id, node) in &tree.nodes {
        match node.kind {
            NodeKind::Atomic if !node.children.is_empty() => {
                violations.push(Violation::new(
                    id.clone(),
                    "kind-mismatch",
                    "atomic node has children",
                ));
            }
            NodeKind::Composite if node.children.is_empty() => {
                violations.push(Violation::new(
                    id.clone(),
                    "empty-children",
                    "composite node has no children",
                ));
            }
            _ => {}
        }
        if node.is_atomic() {
            // Atomic placeholders point at earlier siblings.
            let (siblings, own_pos) = match parents.get(id) {
                Some(parent) => {
                    let children = &tree.nodes[parent].children;
                    let pos = children.iter().position(|c| c == id).unwrap_or(0) + 1;
                    (children.len(), pos)
                }
                None => (0, 1),
            };
            for dep in &node.deps {
                let dep = *dep as usize;
                if dep > siblings || dep >= own_pos {
                    violations.push(Violation::new(
                        id.clone(),
                        "dangling-placeholder",
                        format!("placeholder #{dep} does not resolve to an earlier sibling"),
                    ));
                }
            }
        } else {
            for dep in &node.deps {
                if *dep as usize > node.children.len() {
                    violations.push(Violation::new(
                        id.clone(),
                        "placeholder-out-of-range",
                        format!(
                            "placeholder #{dep} exceeds the {} children",
                            node.children.len()
                        ),
                    ));
                }
            }
        }
        if let Some(candidates) = &node.candidates {
            let sum: f64 = candidates.items().iter().map(|c| c.prob).sum();
            if (sum - 1.0).abs() > crate::beamcore::PROB_SUM_TOLERANCE {
                violations.push(Violation::new(
                    id.clone(),
                    "invalid-candidates",
                    format!("candidate probabilities sum to {sum}"),
                ));
            }
        }
    }
    violations
}

/// Node ids in post-order: children before parents, sibling order preserved,
/// root last.
pub fn post_order(tree: &QuestionTree) -> Vec<String> {
    fn walk(tree: &QuestionTree, id: &str, out: &mut Vec<String>) {
        if let Some(node) = tree.nodes.get(id) {
            for child in &node.children {
                walk(tree, child, out);
            }
        }
        out.push(id.to_string());
    }
    let mut out = Vec::with_capacity(tree.nodes.len());
    walk(tree, &tree.root, &mut out);
    out
}

/// Replace every placeholder `#i` in `question` with `combo[i-1]`, leaving
/// all other characters untouched.
///
/// ```
/// let filled = beamaggr::qtree::mask_fill(
///     "When did #1 become the capital of #2?",
///     &["Austin".to_string(), "Texas".to_string()],
/// ).unwrap();
/// assert_eq!(filled, "When did Austin become the capital of Texas?");
/// ```
pub fn mask_fill(question: &str, combo: &[String]) -> Result<String, TreeError> {
    let mut out = String::with_capacity(question.len());
    let mut chars = question.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '#' {
            if let Some(d) = chars.peek().and_then(|p| p.to_digit(10)) {
                if (1..=MAX_PLACEHOLDER_INDEX as u32).contains(&d) {
                    let idx = d as usize;
                    if idx > combo.len() {
                        return Err(TreeError::MissingAnswer {
                            index: d as u8,
                            available: combo.len(),
                        });
                    }
                    out.push_str(&combo[idx - 1]);
                    chars.next();
                    continue;
                }
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// A source of candidate decomposition documents for a question.
pub trait DecompositionGenerator {
    fn generate(&self, question: &str) -> Result<String, String>;
}

impl<F> DecompositionGenerator for F
where
    F: Fn(&str) -> Result<String, String>,
{
    fn generate(&self, question: &str) -> Result<String, String> {
        self(question)
    }
}

/// Ask `generator` for a decomposition up to `max_retries` times and return
/// the first structurally valid tree; fall back to a one-node atomic tree
/// when the budget is exhausted. Never fails.
pub fn regenerate_or_fallback(
    original_question: &str,
    generator: &dyn DecompositionGenerator,
    max_retries: usize,
) -> QuestionTree {
    for _ in 0..max_retries {
        let raw = match generator.generate(original_question) {
            Ok(raw) => raw,
            Err(_) => continue,
        };
        if let Ok(tree) = parse_decomposition(original_question, &raw) {
            return tree;
        }
    }
    QuestionTree::atomic_fallback(original_question)
}

/// External tree serialization: `{root, nodes: [{id, question, children,
/// kind, deps}]}` with nodes in post-order.
#[derive(Debug, Serialize, Deserialize)]
struct TreeFile {
    root: String,
    nodes: Vec<QuestionNode>,
}

pub fn tree_to_json(tree: &QuestionTree) -> String {
    let nodes = post_order(tree)
        .into_iter()
        .map(|id| {
            let mut node = tree.nodes[&id].clone();
            node.candidates = None;
            node
        })
        .collect();
    serde_json::to_string_pretty(&TreeFile {
        root: tree.root.clone(),
        nodes,
    })
    .expect("tree serializes")
}

pub fn tree_from_json(raw: &str) -> Result<QuestionTree, TreeError> {
    let file: TreeFile = serde_json::from_str(raw).map_err(|e| TreeError::Syntax(e.to_string()))?;
    let tree = QuestionTree {
        nodes: file.nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
        root: file.root,
    };
    let violations = validate(&tree);
    if violations.is_empty() {
        Ok(tree)
    } else {
        Err(TreeError::Structure(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TREASURER: &str = r#"{"Who is the general treasurer of the state where Israel Arnold House is located?": ["What state is Israel Arnold House located?", "Who is the general treasurer of #1?"]}"#;

    const COMPARISON: &str = r#"{"Which film has the director who was born later, Money On The Street or She-Devils On Wheels? (#2, #4)": ["Who is the director of film Money On The Street?", "When was #1 born?", "Who is the director of film She-Devils On Wheels?", "When was #3 born?"]}"#;

    const NESTED: &str = r#"{"Who is the performer of Live at this studio that employs the person who coined the term theatre of the absurd?": ["Where did the person who coined the term the theatre of the absurd work?", "Who is the performer at the Live at the #1 event?"], "Where did the person who coined the term the theatre of the absurd work?": ["Who coined the term the theatre of the absurd", "Where is #1 worked?"]}"#;

    #[test]
    fn parse_two_hop_bridge() {
        let question =
            "Who is the general treasurer of the state where Israel Arnold House is located?";
        let tree = parse_decomposition(question, TREASURER).unwrap();
        assert_eq!(tree.len(), 3);
        let root = tree.root_node();
        assert_eq!(root.question, question);
        assert_eq!(root.kind, NodeKind::Composite);
        assert_eq!(root.children.len(), 2);
        let first = tree.node(&root.children[0]).unwrap();
        let second = tree.node(&root.children[1]).unwrap();
        assert_eq!(first.kind, NodeKind::Atomic);
        assert!(first.deps.is_empty());
        assert_eq!(second.kind, NodeKind::Atomic);
        assert_eq!(second.deps, vec![1]);
    }

    #[test]
    fn parse_rejects_empty_sub_list() {
        let raw = r#"{"Why?": []}"#;
        let err = parse_decomposition("Why?", raw).unwrap_err();
        match err {
            TreeError::Structure(v) => assert!(v.iter().any(|x| x.rule == "empty-children")),
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn parse_comparison_annotation() {
        let question = "Which film has the director who was born later, Money On The Street or She-Devils On Wheels?";
        let tree = parse_decomposition(question, COMPARISON).unwrap();
        let root = tree.root_node();
        assert_eq!(root.question, question);
        assert_eq!(root.deps, vec![2, 4]);
        assert_eq!(root.children.len(), 4);
        assert!(root.fill_template.ends_with("(#2, #4)"));
        let second = tree.node(&root.children[1]).unwrap();
        assert_eq!(second.deps, vec![1]);
        let fourth = tree.node(&root.children[3]).unwrap();
        assert_eq!(fourth.deps, vec![3]);
    }

    #[test]
    fn parse_nested_mapping() {
        let question = "Who is the performer of Live at this studio that employs the person who coined the term theatre of the absurd?";
        let tree = parse_decomposition(question, NESTED).unwrap();
        assert_eq!(tree.len(), 5);
        let root = tree.root_node();
        let inner = tree.node(&root.children[0]).unwrap();
        assert_eq!(inner.kind, NodeKind::Composite);
        assert_eq!(inner.children.len(), 2);
    }

    #[test]
    fn parse_rejects_cycle() {
        let raw = r#"{"A?": ["B?"], "B?": ["A?"]}"#;
        let err = parse_decomposition("A?", raw).unwrap_err();
        match err {
            TreeError::Structure(v) => {
                // Both keys reference each other so neither is a free root.
                assert!(v
                    .iter()
                    .any(|x| x.rule == "missing-root" || x.rule == "cycle"));
            }
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_self_ancestor() {
        let raw = r#"{"root?": ["A?"], "A?": ["B?"], "B?": ["A?"]}"#;
        let err = parse_decomposition("root?", raw).unwrap_err();
        match err {
            TreeError::Structure(v) => assert!(v.iter().any(|x| x.rule == "cycle")),
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_malformed_json() {
        let err = parse_decomposition("x", "{not json").unwrap_err();
        assert!(matches!(err, TreeError::Syntax(_)));
    }

    #[test]
    fn parse_rejects_root_mismatch() {
        let err = parse_decomposition("a different question", TREASURER).unwrap_err();
        match err {
            TreeError::Structure(v) => assert!(v.iter().any(|x| x.rule == "missing-root")),
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn validate_accepts_valid_tree() {
        let question =
            "Who is the general treasurer of the state where Israel Arnold House is located?";
        let tree = parse_decomposition(question, TREASURER).unwrap();
        assert!(validate(&tree).is_empty());
    }

    #[test]
    fn validate_reports_placeholder_out_of_range() {
        let question =
            "Who is the general treasurer of the state where Israel Arnold House is located?";
        let mut tree = parse_decomposition(question, TREASURER).unwrap();
        let root_id = tree.root.clone();
        let root = tree.nodes.get_mut(&root_id).unwrap();
        root.question = "Who is #3?".to_string();
        root.fill_template = root.question.clone();
        root.deps = vec![3];
        let report = validate(&tree);
        assert!(report
            .iter()
            .any(|v| v.rule == "placeholder-out-of-range" && v.node == root_id));
    }

    #[test]
    fn validate_reports_forward_sibling_reference() {
        let raw = r#"{"root?": ["What is #2?", "second?"]}"#;
        let err = parse_decomposition("root?", raw).unwrap_err();
        match err {
            TreeError::Structure(v) => {
                assert!(v.iter().any(|x| x.rule == "dangling-placeholder"));
            }
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn post_order_single_node() {
        let tree = QuestionTree::atomic_fallback("Who founded Rome?");
        assert_eq!(post_order(&tree), vec!["q1".to_string()]);
    }

    #[test]
    fn post_order_children_before_root() {
        let question =
            "Who is the general treasurer of the state where Israel Arnold House is located?";
        let tree = parse_decomposition(question, TREASURER).unwrap();
        let order = post_order(&tree);
        assert_eq!(order, vec!["q1", "q2", "q3"]);
        assert_eq!(order.last().unwrap(), &tree.root);
    }

    #[test]
    fn post_order_matches_flat_rendering() {
        let question = "Which film has the director who was born later, Money On The Street or She-Devils On Wheels?";
        let tree = parse_decomposition(question, COMPARISON).unwrap();
        let order = post_order(&tree);
        assert_eq!(order.len(), 5);
        assert_eq!(order.last().unwrap(), &tree.root);
        let flat = tree.render_flat();
        let lines: Vec<&str> = flat.lines().collect();
        assert_eq!(
            lines[0],
            "Q1. Who is the director of film Money On The Street?"
        );
        assert_eq!(lines[1], "Q2. When was #1 born?");
        assert_eq!(lines[3], "Q4. When was #3 born?");
        assert!(lines[4].starts_with("Q5. Which film has the director who was born later"));
        assert!(lines[4].ends_with("(#2, #4)"));
    }

    #[test]
    fn mask_fill_substitutes_placeholders() {
        let out = mask_fill(
            "When did #1 become the capital of #2?",
            &["Austin".to_string(), "Texas".to_string()],
        )
        .unwrap();
        assert_eq!(out, "When did Austin become the capital of Texas?");
    }

    #[test]
    fn mask_fill_without_placeholders_is_identity() {
        let out = mask_fill("Who founded Rome?", &[]).unwrap();
        assert_eq!(out, "Who founded Rome?");
    }

    #[test]
    fn mask_fill_repeats_indices() {
        let out = mask_fill("What is #1 plus #1?", &["two".to_string()]).unwrap();
        assert_eq!(out, "What is two plus two?");
    }

    #[test]
    fn mask_fill_rejects_missing_answer() {
        let err = mask_fill("Who is #2?", &["x".to_string()]).unwrap_err();
        assert!(matches!(
            err,
            TreeError::MissingAnswer {
                index: 2,
                available: 1
            }
        ));
    }

    #[test]
    fn mapping_round_trip() {
        for (question, raw) in [
            ("Who is the general treasurer of the state where Israel Arnold House is located?", TREASURER),
            ("Which film has the director who was born later, Money On The Street or She-Devils On Wheels?", COMPARISON),
            ("Who is the performer of Live at this studio that employs the person who coined the term theatre of the absurd?", NESTED),
        ] {
            let tree = parse_decomposition(question, raw).unwrap();
            let mapping = tree.to_mapping();
            let reparsed = parse_decomposition_map(question, &mapping).unwrap();
            assert_eq!(tree, reparsed);
        }
    }

    #[test]
    fn tree_json_round_trip() {
        let question = "Which film has the director who was born later, Money On The Street or She-Devils On Wheels?";
        let tree = parse_decomposition(question, COMPARISON).unwrap();
        let json = tree_to_json(&tree);
        let loaded = tree_from_json(&json).unwrap();
        assert_eq!(tree, loaded);
    }

    #[test]
    fn regenerate_uses_first_valid_attempt() {
        let calls = std::cell::Cell::new(0);
        let generator = |q: &str| -> Result<String, String> {
            calls.set(calls.get() + 1);
            if calls.get() == 1 {
                Ok("{broken".to_string())
            } else {
                Ok(format!(r#"{{"{q}": ["Who?", "Where is #1?"]}}"#))
            }
        };
        let tree = regenerate_or_fallback("top?", &generator, 2);
        assert_eq!(tree.len(), 3);
        assert_eq!(calls.get(), 2);
    }

    #[test]
    fn regenerate_returns_valid_first_try() {
        let generator = |q: &str| -> Result<String, String> {
            Ok(format!(r#"{{"{q}": ["Who?", "Where is #1?"]}}"#))
        };
        let tree = regenerate_or_fallback("top?", &generator, 3);
        assert_eq!(tree.len(), 3);
    }

    #[test]
    fn regenerate_falls_back_after_budget() {
        let generator = |_: &str| -> Result<String, String> { Ok("{broken".to_string()) };
        let tree = regenerate_or_fallback("What is the capital of France?", &generator, 2);
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.root_node().question, "What is the capital of France?");
        assert_eq!(tree.root_node().kind, NodeKind::Atomic);
    }

    #[test]
    fn duplicate_sub_questions_become_distinct_nodes() {
        let raw = r#"{"Are the two founders the same? (#1, #2)": ["Who founded it?", "Who founded it?"]}"#;
        let tree = parse_decomposition("Are the two founders the same?", raw).unwrap();
        let root = tree.root_node();
        assert_eq!(root.children.len(), 2);
        assert_ne!(root.children[0], root.children[1]);
    }
}
