//! The four knowledge-reasoning strategies: closed-book chain-of-thought,
//! parametric knowledge generation plus reading, Wikipedia-style sparse
//! retrieval reading, and web-search reading. Each strategy samples several
//! reasoning chains, extracts the final answers, and votes over them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamcore::{
    canonicalize_answer, merge_votes, normalize_truncate, vote, CandidateSet, FrequencyTable,
};
use crate::llmio::{
    LlmBackend, LlmError, Prompt, TokenUsage, KNOWLEDGE_MAX_TOKENS, REASONING_MAX_TOKENS,
};
use crate::retrieval::{ResultSource, RetrievalError, SearchResult, SerpProvider};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("{kind} backend: {source}")]
    Backend {
        kind: StrategyKind,
        #[source]
        source: LlmError,
    },
    #[error("{kind} retrieval: {source}")]
    Retrieval {
        kind: StrategyKind,
        #[source]
        source: RetrievalError,
    },
    #[error("strategy {kind} requires a configured retriever")]
    MissingRetriever { kind: StrategyKind },
    #[error("unknown prompt template {0}")]
    MissingTemplate(String),
    #[error("no knowledge source produced any answer for {question:?}")]
    AllSourcesEmpty { question: String },
}

/// The four knowledge sources, in their canonical merge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Closebook,
    Parametric,
    Wiki,
    Serp,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Closebook,
        StrategyKind::Parametric,
        StrategyKind::Wiki,
        StrategyKind::Serp,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::Closebook => "closebook",
            StrategyKind::Parametric => "parametric",
            StrategyKind::Wiki => "wiki",
            StrategyKind::Serp => "serp",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-strategy knobs. Retrieval depth is zero for the internal strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub samples: usize,
    pub sample_temperature: f64,
    pub prompt_id: String,
    pub retrieval_doc_count: usize,
}

impl StrategyConfig {
    /// Defaults: five self-consistency samples at temperature 0.7; five
    /// retrieved documents for wiki, three organic results for serp.
    pub fn default_for(kind: StrategyKind) -> Self {
        let (prompt_id, retrieval_doc_count) = match kind {
            StrategyKind::Closebook => ("closebook", 0),
            StrategyKind::Parametric => ("parametric", 0),
            StrategyKind::Wiki => ("wiki", 5),
            StrategyKind::Serp => ("serp", 3),
        };
        Self {
            kind,
            samples: 5,
            sample_temperature: 0.7,
            prompt_id: prompt_id.to_string(),
            retrieval_doc_count,
        }
    }
}

/// What one strategy produced for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    pub raw_completions: Vec<String>,
    pub extracted: Vec<String>,
    pub table: FrequencyTable,
    pub usage: TokenUsage,
}

/// Few-shot prompt templates, keyed by id. Templates are plain text with
/// `{question}` and `{context}` placeholders; the built-in set mirrors the
/// shipped `prompts/*.txt` files.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            "closebook".into(),
            include_str!("../prompts/closebook.txt").into(),
        );
        templates.insert(
            "parametric".into(),
            include_str!("../prompts/parametric.txt").into(),
        );
        templates.insert(
            "parametric_knowledge".into(),
            include_str!("../prompts/parametric_knowledge.txt").into(),
        );
        templates.insert("wiki".into(), include_str!("../prompts/wiki.txt").into());
        templates.insert("serp".into(), include_str!("../prompts/serp.txt").into());
        templates.insert(
            "decompose".into(),
            include_str!("../prompts/decompose.txt").into(),
        );
        Self { templates }
    }

    /// Load `*.txt` templates from a directory on top of the built-ins; the
    /// file stem becomes the template id.
    pub fn with_overrides(mut self, dir: &std::path::Path) -> std::io::Result<Self> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    self.templates
                        .insert(stem.to_string(), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(self)
    }

    pub fn render(&self, id: &str, question: &str, context: &str) -> Result<String, StrategyError> {
        let template = self
            .templates
            .get(id)
            .ok_or_else(|| StrategyError::MissingTemplate(id.to_string()))?;
        Ok(template
            .replace("{context}", context)
            .replace("{question}", question))
    }
}

/// Document search half of retrieval; implemented by the BM25 index.
pub trait DocSearcher: Send + Sync {
    fn search(&self, query: &str, top_n: usize) -> Vec<SearchResult>;
}

impl DocSearcher for crate::retrieval::InvertedIndex {
    fn search(&self, query: &str, top_n: usize) -> Vec<SearchResult> {
        crate::retrieval::InvertedIndex::search(self, query, top_n)
    }
}

/// Retrievers available to the strategies. Strategies that need one fail
/// with `MissingRetriever` when it is absent.
#[derive(Clone, Default)]
pub struct RetrievalHandles {
    pub wiki: Option<Arc<dyn DocSearcher>>,
    pub serp: Option<Arc<dyn SerpProvider>>,
}

/// Pull the final answer out of a reasoning completion.
///
/// The answer is the text inside the last `**...**` span after the last
/// occurrence of "the answer is" (case-insensitive); if no span follows the
/// phrase, the tail of the sentence after the phrase is used. Completions
/// without the phrase, and answers that canonicalize to "unknown", yield
/// nothing.
pub fn extract_answer(completion: &str) -> Option<String> {
    let lowered = completion.to_lowercase();
    let phrase = "the answer is";
    let at = lowered.rfind(phrase)?;
    let tail = &completion[at + phrase.len()..];

    let mut last_span: Option<&str> = None;
    let mut cursor = 0usize;
    while let Some(start) = tail[cursor..].find("**") {
        let open = cursor + start + 2;
        match tail[open..].find("**") {
            Some(len) => {
                last_span = Some(&tail[open..open + len]);
                cursor = open + len + 2;
            }
            None => break,
        }
    }

    let answer = match last_span {
        Some(span) => span.trim().to_string(),
        None => {
            let end = tail.find(['.', '!', '?', '\n']).unwrap_or(tail.len());
            tail[..end]
                .replace('*', "")
                .trim()
                .trim_start_matches(':')
                .trim()
                .to_string()
        }
    };
    if answer.is_empty() || canonicalize_answer(&answer) == "unknown" {
        None
    } else {
        Some(answer)
    }
}

fn format_wiki_context(results: &[SearchResult]) -> String {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "#{} Wikipedia Title: {}\nText: {}",
                i + 1,
                r.title,
                r.snippet
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_serp_context(results: &[SearchResult]) -> String {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label = match r.source {
                ResultSource::AnswerBox => "Answerbox Title",
                _ => "Title",
            };
            format!("#{} {}: {}\nSnippet: {}", i + 1, label, r.title, r.snippet)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One zero-shot completion describing background knowledge for the
/// question, used as the context document of the parametric strategy.
pub fn build_parametric_context(
    question: &str,
    backend: &dyn LlmBackend,
    prompts: &PromptLibrary,
) -> Result<(Option<String>, TokenUsage), StrategyError> {
    let prompt_text = prompts.render("parametric_knowledge", question, "")?;
    let prompt = Prompt::new(prompt_text, 0.0, 1, KNOWLEDGE_MAX_TOKENS);
    let completions = backend
        .complete_n(&prompt)
        .map_err(|source| StrategyError::Backend {
            kind: StrategyKind::Parametric,
            source,
        })?;
    let completion = &completions[0];
    let usage = completion.usage;
    if completion.is_filtered() {
        return Ok((None, usage));
    }
    Ok((Some(completion.text.trim().to_string()), usage))
}

/// Run one strategy on one question: assemble the prompt, sample `n`
/// reasoning chains, extract answers, and vote. Content-filtered completions
/// are excluded from extraction without failing the strategy.
pub fn run_strategy(
    question: &str,
    config: &StrategyConfig,
    backend: &dyn LlmBackend,
    retrieval: &RetrievalHandles,
    prompts: &PromptLibrary,
) -> Result<StrategyOutcome, StrategyError> {
    let mut usage = TokenUsage::default();
    let context = match config.kind {
        StrategyKind::Closebook => String::new(),
        StrategyKind::Parametric => {
            let (knowledge, knowledge_usage) =
                build_parametric_context(question, backend, prompts)?;
            usage += knowledge_usage;
            match knowledge {
                Some(text) => text,
                // The knowledge request itself was refused; the strategy
                // contributes nothing.
                None => {
                    return Ok(StrategyOutcome {
                        kind: config.kind,
                        raw_completions: Vec::new(),
                        extracted: Vec::new(),
                        table: FrequencyTable::default(),
                        usage,
                    })
                }
            }
        }
        StrategyKind::Wiki => {
            let searcher = retrieval
                .wiki
                .as_ref()
                .ok_or(StrategyError::MissingRetriever { kind: config.kind })?;
            format_wiki_context(&searcher.search(question, config.retrieval_doc_count))
        }
        StrategyKind::Serp => {
            let provider = retrieval
                .serp
                .as_ref()
                .ok_or(StrategyError::MissingRetriever { kind: config.kind })?;
            let results = provider
                .fetch(question)
                .map_err(|source| StrategyError::Retrieval {
                    kind: config.kind,
                    source,
                })?;
            format_serp_context(&results)
        }
    };

    let prompt_text = prompts.render(&config.prompt_id, question, &context)?;
    let prompt = Prompt {
        text: prompt_text,
        temperature: config.sample_temperature,
        n: config.samples,
        max_tokens: REASONING_MAX_TOKENS,
        stop: None,
    };
    let completions = backend
        .complete_n(&prompt)
        .map_err(|source| StrategyError::Backend {
            kind: config.kind,
            source,
        })?;

    let mut raw_completions = Vec::with_capacity(completions.len());
    let mut extracted = Vec::new();
    for completion in &completions {
        usage += completion.usage;
        raw_completions.push(completion.text.clone());
        if completion.is_filtered() {
            continue;
        }
        if let Some(answer) = extract_answer(&completion.text) {
            extracted.push(answer);
        }
    }
    let table = vote(&extracted);
    Ok(StrategyOutcome {
        kind: config.kind,
        raw_completions,
        extracted,
        table,
        usage,
    })
}

/// A multi-source answer: the aggregated candidate distribution, the
/// per-strategy outcomes that fed it, and which strategies voted for each
/// surviving answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSourceAnswer {
    pub candidates: CandidateSet,
    /// Full normalized distribution over every merged answer, before top-k.
    pub pre_truncation: Vec<(String, f64)>,
    pub outcomes: Vec<StrategyOutcome>,
    pub voted_by: BTreeMap<String, Vec<StrategyKind>>,
    pub usage: TokenUsage,
}

/// Run every configured strategy on a question, merge their votes, and
/// normalize to the top-k candidate distribution.
///
/// Strategies may execute concurrently; results are merged in the fixed
/// [`StrategyKind`] order so the outcome is schedule-independent.
pub fn answer_question_multisource(
    question: &str,
    configs: &[StrategyConfig],
    vote_temperature: f64,
    k: usize,
    backend: &dyn LlmBackend,
    retrieval: &RetrievalHandles,
    prompts: &PromptLibrary,
) -> Result<MultiSourceAnswer, StrategyError> {
    use rayon::prelude::*;

    let mut outcomes = configs
        .par_iter()
        .map(|config| run_strategy(question, config, backend, retrieval, prompts))
        .collect::<Result<Vec<_>, _>>()?;
    outcomes.sort_by_key(|o| o.kind);

    let tables: Vec<FrequencyTable> = outcomes.iter().map(|o| o.table.clone()).collect();
    let merged = merge_votes(&tables);
    if merged.is_empty() {
        return Err(StrategyError::AllSourcesEmpty {
            question: question.to_string(),
        });
    }
    let candidates = normalize_truncate(&merged, vote_temperature, k)
        .expect("non-empty merged table normalizes");
    let pre_truncation = crate::beamcore::softmax_distribution(&merged, vote_temperature)
        .into_iter()
        .map(|(canonical, _, prob)| (canonical, prob))
        .collect();

    let mut voted_by = BTreeMap::new();
    for candidate in candidates.items() {
        let kinds: Vec<StrategyKind> = outcomes
            .iter()
            .filter(|o| o.table.contains(&candidate.answer))
            .map(|o| o.kind)
            .collect();
        voted_by.insert(candidate.answer.clone(), kinds);
    }
    let usage = outcomes.iter().fold(TokenUsage::default(), |mut acc, o| {
        acc += o.usage;
        acc
    });
    Ok(MultiSourceAnswer {
        candidates,
        pre_truncation,
        outcomes,
        voted_by,
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmio::{ScriptedBackend, ScriptedCompletion};
    use crate::retrieval::{SerpEntry, SerpFixture};

    fn reasoning(answer: &str) -> String {
        format!("Some reasoning about the question. So the answer is **{answer}**.")
    }

    /// Scripted backend that keys answers on the question embedded in the
    /// prompt and distinguishes strategies by their instruction headers.
    fn bamboogle_q1_backend() -> ScriptedBackend {
        ScriptedBackend::new(|prompt, i| {
            let text = &prompt.text;
            if text.starts_with("Provide the necessary background knowledge") {
                return Some(ScriptedCompletion::stop(
                    "Cologne is a major German city on the Rhine.",
                ));
            }
            let answers: &[&str] =
                if text.starts_with("Given a question and the relevant documents") {
                    &["Cologne"; 5]
                } else if text.starts_with("Given a question and the relevant Wikipedia text") {
                    &[
                        "Regensburg",
                        "Regensburg",
                        "Regensburg",
                        "Unknown",
                        "Unknown",
                    ]
                } else if text.starts_with("Please answer the question based on the snippet") {
                    &["Darmstadt"; 5]
                } else {
                    &["Frankfurt", "Frankfurt", "Frankfurt", "Cologne", "Cologne"]
                };
            Some(ScriptedCompletion::stop(reasoning(answers[i])))
        })
    }

    fn handles() -> RetrievalHandles {
        let index = crate::retrieval::build_index(
            [crate::retrieval::Document {
                doc_id: "d1".into(),
                title: "Fourth largest city in Germany".into(),
                body: "Cologne is the fourth largest city in Germany.".into(),
            }],
            crate::retrieval::DEFAULT_K1,
            crate::retrieval::DEFAULT_B,
        )
        .unwrap();
        let serp = crate::retrieval::ScriptedSerpProvider::new(|q| SerpFixture {
            query: q.to_string(),
            answer_box: Some(SerpEntry {
                title: "Box".into(),
                snippet: "Darmstadt".into(),
            }),
            organic: vec![SerpEntry {
                title: "T".into(),
                snippet: "S".into(),
            }],
        });
        RetrievalHandles {
            wiki: Some(Arc::new(index)),
            serp: Some(Arc::new(serp)),
        }
    }

    #[test]
    fn extract_answer_prefers_last_bold_span() {
        let text =
            "Miguel Morayta directed it. Miguel Morayta died on 19 June 2013. So the answer is **19 June 2013**.";
        assert_eq!(extract_answer(text), Some("19 June 2013".to_string()));
    }

    #[test]
    fn extract_answer_no_pattern_is_none() {
        assert_eq!(extract_answer("I cannot determine this."), None);
    }

    #[test]
    fn extract_answer_keeps_short_bold_answers() {
        assert_eq!(
            extract_answer("So the answer is **no**."),
            Some("no".to_string())
        );
    }

    #[test]
    fn extract_answer_falls_back_to_sentence_tail() {
        assert_eq!(
            extract_answer("Thus the answer is Paris. Extra trailing text."),
            Some("Paris".to_string())
        );
    }

    #[test]
    fn extract_answer_drops_unknown() {
        assert_eq!(extract_answer("So the answer is **Unknown**."), None);
        assert_eq!(extract_answer("So the answer is unknown."), None);
    }

    #[test]
    fn extract_answer_uses_last_phrase_occurrence() {
        let text = "the answer is **wrong**. Checking again, the answer is **right**.";
        assert_eq!(extract_answer(text), Some("right".to_string()));
    }

    #[test]
    fn extract_answer_never_contains_markers() {
        let inputs = [
            "the answer is **a** and **b**.",
            "the answer is **unclosed",
            "the answer is ****.",
            "the answer is *x*.",
        ];
        for input in inputs {
            if let Some(answer) = extract_answer(input) {
                assert!(!answer.contains("**"), "from {input:?} got {answer:?}");
            }
        }
    }

    #[test]
    fn closebook_strategy_votes_match_script() {
        let config = StrategyConfig::default_for(StrategyKind::Closebook);
        let outcome = run_strategy(
            "What is the fourth largest city in Germany?",
            &config,
            &bamboogle_q1_backend(),
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(outcome.table.count("frankfurt"), 3);
        assert_eq!(outcome.table.count("cologne"), 2);
        assert_eq!(outcome.raw_completions.len(), 5);
        assert_eq!(outcome.extracted.len(), 5);
    }

    #[test]
    fn serp_strategy_uses_answer_box_fixture() {
        let config = StrategyConfig::default_for(StrategyKind::Serp);
        let outcome = run_strategy(
            "What is the fourth largest city in Germany?",
            &config,
            &bamboogle_q1_backend(),
            &handles(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(outcome.table.count("darmstadt"), 5);
    }

    #[test]
    fn all_refused_completions_vote_nothing() {
        let backend = ScriptedBackend::new(|_, _| Some(ScriptedCompletion::filtered()));
        let config = StrategyConfig::default_for(StrategyKind::Closebook);
        let outcome = run_strategy(
            "anything",
            &config,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert!(outcome.table.is_empty());
        assert!(outcome.extracted.is_empty());
        assert_eq!(outcome.raw_completions.len(), 5);
    }

    #[test]
    fn wiki_without_retriever_is_an_error() {
        let config = StrategyConfig::default_for(StrategyKind::Wiki);
        let err = run_strategy(
            "q",
            &config,
            &bamboogle_q1_backend(),
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            StrategyError::MissingRetriever {
                kind: StrategyKind::Wiki
            }
        ));
    }

    #[test]
    fn parametric_context_feeds_reading_prompt() {
        let backend = ScriptedBackend::new(|prompt, _| {
            if prompt
                .text
                .starts_with("Provide the necessary background knowledge")
            {
                Some(ScriptedCompletion::stop("Cologne sits on the Rhine."))
            } else {
                assert!(
                    prompt.text.contains("Cologne sits on the Rhine."),
                    "knowledge must appear as the context document"
                );
                Some(ScriptedCompletion::stop(reasoning("Cologne")))
            }
        });
        let config = StrategyConfig::default_for(StrategyKind::Parametric);
        let outcome = run_strategy(
            "What is the fourth largest city in Germany?",
            &config,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(outcome.table.count("cologne"), 5);
    }

    #[test]
    fn empty_knowledge_still_runs_parametric_reading() {
        let backend = ScriptedBackend::new(|prompt, _| {
            if prompt
                .text
                .starts_with("Provide the necessary background knowledge")
            {
                Some(ScriptedCompletion::stop(""))
            } else {
                Some(ScriptedCompletion::stop("So the answer is **Unknown**."))
            }
        });
        let config = StrategyConfig::default_for(StrategyKind::Parametric);
        let outcome = run_strategy(
            "q",
            &config,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        // The reading prompt ran with an empty context document and every
        // sample abstained.
        assert_eq!(outcome.raw_completions.len(), 5);
        assert!(outcome.extracted.is_empty());
        assert!(outcome.table.is_empty());
    }

    #[test]
    fn every_bundled_decomposition_demo_parses() {
        let template = include_str!("../prompts/decompose.txt");
        let mut demos = 0;
        let mut lines = template.lines().peekable();
        while let Some(line) = lines.next() {
            let Some(question) = line.strip_prefix("Question: ") else {
                continue;
            };
            if question == "{question}" {
                continue;
            }
            let mapping = lines
                .next()
                .and_then(|l| l.strip_prefix("Decompose: "))
                .unwrap_or_else(|| panic!("demo for {question:?} lacks a mapping line"));
            crate::qtree::parse_decomposition(question, mapping)
                .unwrap_or_else(|e| panic!("demo mapping for {question:?} is invalid: {e}"));
            demos += 1;
        }
        assert_eq!(demos, 24);
    }

    #[test]
    fn refused_knowledge_empties_parametric_outcome() {
        let backend = ScriptedBackend::new(|prompt, _| {
            if prompt
                .text
                .starts_with("Provide the necessary background knowledge")
            {
                Some(ScriptedCompletion::filtered())
            } else {
                panic!("reading prompt must not run after a refused knowledge call");
            }
        });
        let config = StrategyConfig::default_for(StrategyKind::Parametric);
        let outcome = run_strategy(
            "q",
            &config,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert!(outcome.table.is_empty());
        assert!(outcome.raw_completions.is_empty());
    }

    #[test]
    fn multisource_reproduces_worked_q1_aggregation() {
        let configs: Vec<StrategyConfig> = StrategyKind::ALL
            .iter()
            .map(|k| StrategyConfig::default_for(*k))
            .collect();
        let answer = answer_question_multisource(
            "What is the fourth largest city in Germany?",
            &configs,
            3.0,
            2,
            &bamboogle_q1_backend(),
            &handles(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(answer.candidates.items()[0].surface, "Cologne");
        assert!((answer.candidates.items()[0].prob - 0.6607).abs() < 5e-4);
        assert!((answer.candidates.items()[1].prob - 0.3392).abs() < 5e-4);
        assert_eq!(
            answer.voted_by["cologne"],
            vec![StrategyKind::Closebook, StrategyKind::Parametric]
        );
        assert_eq!(answer.voted_by["darmstadt"], vec![StrategyKind::Serp]);
    }

    #[test]
    fn multisource_single_sample_is_certain() {
        let backend = ScriptedBackend::new(|_, _| Some(ScriptedCompletion::stop(reasoning("X"))));
        let mut config = StrategyConfig::default_for(StrategyKind::Closebook);
        config.samples = 1;
        let answer = answer_question_multisource(
            "q",
            &[config],
            3.0,
            2,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(answer.candidates.len(), 1);
        assert!((answer.candidates.top().prob - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multisource_symmetric_votes_split_evenly() {
        let backend = ScriptedBackend::new(|prompt, _| {
            let answer = if prompt
                .text
                .starts_with("Given a question and the relevant documents")
            {
                "b"
            } else {
                "a"
            };
            Some(ScriptedCompletion::stop(reasoning(answer)))
        });
        let mut closebook = StrategyConfig::default_for(StrategyKind::Closebook);
        closebook.samples = 1;
        let mut parametric = StrategyConfig::default_for(StrategyKind::Parametric);
        parametric.samples = 1;
        let answer = answer_question_multisource(
            "q",
            &[closebook, parametric],
            3.0,
            2,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap();
        assert_eq!(answer.candidates.len(), 2);
        assert!((answer.candidates.items()[0].prob - 0.5).abs() < 1e-12);
        assert_eq!(answer.candidates.items()[0].answer, "a");
    }

    #[test]
    fn multisource_all_empty_is_an_error() {
        let backend = ScriptedBackend::new(|_, _| Some(ScriptedCompletion::filtered()));
        let configs = vec![StrategyConfig::default_for(StrategyKind::Closebook)];
        let err = answer_question_multisource(
            "q",
            &configs,
            3.0,
            2,
            &backend,
            &RetrievalHandles::default(),
            &PromptLibrary::builtin(),
        )
        .unwrap_err();
        assert!(matches!(err, StrategyError::AllSourcesEmpty { .. }));
    }

    #[test]
    fn outcome_tables_are_order_invariant() {
        let samples = ["b", "a", "b", "c", "b"];
        let mut shuffled = samples;
        shuffled.reverse();
        let t1 = vote(&samples);
        let t2 = vote(&shuffled);
        let c1: Vec<(&str, u32)> = t1.counts().collect();
        let c2: Vec<(&str, u32)> = t2.counts().collect();
        assert_eq!(c1, c2);
    }
}
