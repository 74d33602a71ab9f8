//! Multi-hop question answering through question-tree decomposition,
//! complementary multi-source reasoning, and probabilistic beam aggregation.
//!
//! A complex question is parsed into a tree of sub-questions ([`qtree`]).
//! Leaves are answered by four knowledge strategies that each sample several
//! reasoning chains and vote over the extracted answers ([`strategies`],
//! [`retrieval`], [`llmio`]). Vote frequencies become probability
//! distributions, dependent questions are asked once per combination of
//! upstream candidate answers, and branch distributions are aggregated
//! marginally with top-k pruning ([`beamcore`]). The [`engine`] orchestrates
//! the bottom-up pass and records a replayable trace; [`evalkit`] scores
//! predictions and analyzes traces.
//!
//! The long-form guide lives in `book/`; its code snippets compile as
//! doctests of this crate.

pub mod beamcore;
pub mod engine;
pub mod evalkit;
pub mod llmio;
pub mod qtree;
pub mod retrieval;
pub mod strategies;

pub use beamcore::{Candidate, CandidateSet, FrequencyTable};
pub use engine::{
    run_dataset, solve, solve_greedy, EngineConfig, ReasoningTrace, RunConfig, SolveOutput,
};
pub use evalkit::{load_dataset, max_alias_f1, token_f1, DatasetFormat, EvalReport, QAInstance};
pub use llmio::{Completion, LlmBackend, Prompt, TokenUsage, UsageLedger};
pub use qtree::{parse_decomposition, QuestionTree};
pub use retrieval::{build_index, Document, InvertedIndex, SearchResult};
pub use strategies::{StrategyConfig, StrategyKind, StrategyOutcome};

// Book chapters double as doctests so the guide can never drift from the
// API it documents.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/question-trees.md")]
    mod question_trees {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
