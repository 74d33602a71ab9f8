//! Sparse retrieval: an Okapi BM25 inverted index over a JSONL corpus, plus a
//! web-search (SERP) provider abstraction with record/replay fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::beamcore::canonicalize_answer;

/// Magic header on serialized index files.
pub const INDEX_MAGIC: &str = "BAGGIDX1";
/// Snippets are a fixed-width prefix of the document body.
pub const SNIPPET_CHARS: usize = 400;
/// Organic SERP results kept per query.
pub const SERP_ORGANIC_LIMIT: usize = 3;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(String),
    #[error("unknown doc_id {0}")]
    UnknownDoc(String),
    #[error("corpus line {line}: {message}")]
    CorpusFormat { line: usize, message: String },
    #[error("index file {path}: {message}")]
    IndexFormat { path: String, message: String },
    #[error("no serp fixture for query {query:?} (key {key})")]
    FixtureMiss { query: String, key: String },
    #[error("serp provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultSource {
    Organic,
    AnswerBox,
    Local,
}

/// One ranked retrieval hit, from either the local index or a SERP provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub rank: u32,
    pub source: ResultSource,
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredDoc {
    doc_id: String,
    title: String,
    body: String,
    length: u32,
}

/// Okapi BM25 inverted index. Immutable after build; concurrent queries are
/// safe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    docs: Vec<StoredDoc>,
    id_to_slot: BTreeMap<String, u32>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.id_to_slot
            .get(doc_id)
            .map(|s| self.docs[*s as usize].length)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }

    pub fn postings(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.postings.get(term).map(|p| p.len()).unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_doc_score(&self, term: &str, slot: u32) -> f64 {
        let tf = self
            .postings
            .get(term)
            .and_then(|postings| {
                postings
                    .binary_search_by_key(&slot, |(doc, _)| *doc)
                    .ok()
                    .map(|i| postings[i].1)
            })
            .unwrap_or(0) as f64;
        if tf == 0.0 {
            return 0.0;
        }
        let len = self.docs[slot as usize].length as f64;
        let norm = tf + self.k1 * (1.0 - self.b + self.b * len / self.avg_doc_length);
        self.idf(term) * tf * (self.k1 + 1.0) / norm
    }

    /// BM25 score of one document for a bag of query terms. Additive over
    /// terms; terms absent from the document contribute zero.
    pub fn bm25_score(&self, query_terms: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let slot = *self
            .id_to_slot
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
        Ok(query_terms
            .iter()
            .map(|t| self.term_doc_score(t, slot))
            .sum())
    }

    /// Top-`top_n` documents for a free-text query, ranked by BM25 score with
    /// ties broken by ascending doc_id. Documents matching no query term are
    /// omitted, so fewer than `top_n` results may come back.
    pub fn search(&self, query: &str, top_n: usize) -> Vec<SearchResult> {
        let terms = tokenize(query);
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            if let Some(postings) = self.postings.get(term) {
                let idf = self.idf(term);
                for (slot, tf) in postings {
                    let len = self.docs[*slot as usize].length as f64;
                    let tf = *tf as f64;
                    let norm = tf + self.k1 * (1.0 - self.b + self.b * len / self.avg_doc_length);
                    *scores.entry(*slot).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / norm;
                }
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    self.docs[a.0 as usize]
                        .doc_id
                        .cmp(&self.docs[b.0 as usize].doc_id)
                })
        });
        ranked
            .into_iter()
            .take(top_n)
            .enumerate()
            .map(|(i, (slot, _))| {
                let doc = &self.docs[slot as usize];
                SearchResult {
                    title: doc.title.clone(),
                    snippet: doc.body.chars().take(SNIPPET_CHARS).collect(),
                    rank: i as u32 + 1,
                    source: ResultSource::Local,
                }
            })
            .collect()
    }

    /// Serialize with the `BAGGIDX1` magic header. The byte output depends
    /// only on the corpus bytes and parameters.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let payload = serde_json::to_string(self).expect("index serializes");
        fs::write(path, format!("{INDEX_MAGIC}\n{payload}"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let raw = fs::read_to_string(path)?;
        let rest = raw
            .strip_prefix(INDEX_MAGIC)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| RetrievalError::IndexFormat {
                path: path.display().to_string(),
                message: format!("missing {INDEX_MAGIC} header"),
            })?;
        serde_json::from_str(rest).map_err(|e| RetrievalError::IndexFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Build a BM25 index over a document stream.
pub fn build_index<I>(corpus: I, k1: f64, b: f64) -> Result<InvertedIndex, RetrievalError>
where
    I: IntoIterator<Item = Document>,
{
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut docs = Vec::new();
    let mut id_to_slot = BTreeMap::new();
    let mut total_length = 0u64;
    for document in corpus {
        let slot = docs.len() as u32;
        if id_to_slot.insert(document.doc_id.clone(), slot).is_some() {
            return Err(RetrievalError::DuplicateDocId(document.doc_id));
        }
        let tokens = tokenize(&format!("{} {}", document.title, document.body));
        let mut frequencies: BTreeMap<String, u32> = BTreeMap::new();
        for token in &tokens {
            *frequencies.entry(token.clone()).or_insert(0) += 1;
        }
        for (term, tf) in frequencies {
            postings.entry(term).or_default().push((slot, tf));
        }
        total_length += tokens.len() as u64;
        docs.push(StoredDoc {
            doc_id: document.doc_id,
            title: document.title,
            body: document.body,
            length: tokens.len() as u32,
        });
    }
    if docs.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let avg_doc_length = total_length as f64 / docs.len() as f64;
    Ok(InvertedIndex {
        postings,
        docs,
        id_to_slot,
        avg_doc_length,
        k1,
        b,
    })
}

/// Read a JSONL corpus: one `{"doc_id","title","body"}` object per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let file = fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusFormat {
                line: i + 1,
                message: e.to_string(),
            })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Key a SERP fixture by the canonicalized query text.
pub fn serp_fixture_key(query: &str) -> String {
    hex::encode(Sha256::digest(canonicalize_answer(query).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerpEntry {
    pub title: String,
    pub snippet: String,
}

/// Stored form of one SERP response, one JSON file per query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerpFixture {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_box: Option<SerpEntry>,
    pub organic: Vec<SerpEntry>,
}

impl SerpFixture {
    /// Expand to ranked results: the answer box (if any) first, then the
    /// top organic hits. Ranks run from 1 within each source.
    pub fn to_results(&self) -> Vec<SearchResult> {
        let mut results = Vec::new();
        if let Some(entry) = &self.answer_box {
            results.push(SearchResult {
                title: entry.title.clone(),
                snippet: entry.snippet.clone(),
                rank: 1,
                source: ResultSource::AnswerBox,
            });
        }
        for (i, entry) in self.organic.iter().take(SERP_ORGANIC_LIMIT).enumerate() {
            results.push(SearchResult {
                title: entry.title.clone(),
                snippet: entry.snippet.clone(),
                rank: i as u32 + 1,
                source: ResultSource::Organic,
            });
        }
        results
    }
}

/// A web-search endpoint. Implementations must tolerate concurrent reads.
pub trait SerpProvider: Send + Sync {
    fn fetch(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError>;
}

/// Replays recorded SERP fixtures keyed by query digest.
pub struct ReplaySerpProvider {
    dir: PathBuf,
}

impl ReplaySerpProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl SerpProvider for ReplaySerpProvider {
    fn fetch(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
        let key = serp_fixture_key(query);
        let path = self.dir.join(format!("{key}.json"));
        let raw = fs::read_to_string(&path).map_err(|_| RetrievalError::FixtureMiss {
            query: query.to_string(),
            key,
        })?;
        let fixture: SerpFixture =
            serde_json::from_str(&raw).map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(fixture.to_results())
    }
}

/// Wraps a provider and persists each response as a replayable fixture.
pub struct RecordingSerpProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: SerpProvider> RecordingSerpProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<P: SerpProvider> SerpProvider for RecordingSerpProvider<P> {
    fn fetch(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
        let results = self.inner.fetch(query)?;
        let fixture = SerpFixture {
            query: query.to_string(),
            answer_box: results
                .iter()
                .find(|r| r.source == ResultSource::AnswerBox)
                .map(|r| SerpEntry {
                    title: r.title.clone(),
                    snippet: r.snippet.clone(),
                }),
            organic: results
                .iter()
                .filter(|r| r.source == ResultSource::Organic)
                .map(|r| SerpEntry {
                    title: r.title.clone(),
                    snippet: r.snippet.clone(),
                })
                .collect(),
        };
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(format!("{}.json", serp_fixture_key(query)));
        fs::write(
            &path,
            serde_json::to_string_pretty(&fixture).expect("fixture serializes"),
        )?;
        Ok(results)
    }
}

/// A provider driven by a fixture-producing function, for tests and fixture
/// authoring.
pub struct ScriptedSerpProvider {
    responder: Box<dyn Fn(&str) -> SerpFixture + Send + Sync>,
}

impl ScriptedSerpProvider {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&str) -> SerpFixture + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
        }
    }
}

impl SerpProvider for ScriptedSerpProvider {
    fn fetch(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
        Ok((self.responder)(query).to_results())
    }
}

/// Settings for a live SERP endpoint (serper.dev wire shape).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveSerpSettings {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

impl LiveSerpSettings {
    pub fn resolved(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var("SERP_API_KEY").ok();
        }
        self
    }
}

#[cfg(feature = "live")]
pub use live_serp::LiveSerpProvider;

#[cfg(feature = "live")]
mod live_serp {
    use super::*;

    /// Live Google-SERP client posting `{"q": query}` with an `X-API-KEY`
    /// header and reading `answerBox` plus `organic` results.
    pub struct LiveSerpProvider {
        settings: LiveSerpSettings,
        client: reqwest::blocking::Client,
    }

    #[derive(Deserialize)]
    struct WireAnswerBox {
        #[serde(default)]
        title: String,
        #[serde(default)]
        snippet: Option<String>,
        #[serde(default)]
        answer: Option<String>,
    }

    #[derive(Deserialize)]
    struct WireOrganic {
        #[serde(default)]
        title: String,
        #[serde(default)]
        snippet: String,
    }

    #[derive(Deserialize)]
    struct WireSerp {
        #[serde(default, rename = "answerBox")]
        answer_box: Option<WireAnswerBox>,
        #[serde(default)]
        organic: Vec<WireOrganic>,
    }

    impl LiveSerpProvider {
        pub fn new(settings: LiveSerpSettings) -> Self {
            Self {
                settings,
                client: reqwest::blocking::Client::new(),
            }
        }
    }

    impl SerpProvider for LiveSerpProvider {
        fn fetch(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
            let mut request = self
                .client
                .post(&self.settings.endpoint)
                .json(&serde_json::json!({ "q": query }));
            if let Some(key) = &self.settings.api_key {
                request = request.header("X-API-KEY", key);
            }
            let response = request
                .send()
                .map_err(|e| RetrievalError::Provider(e.to_string()))?;
            if !response.status().is_success() {
                return Err(RetrievalError::Provider(format!(
                    "http status {}",
                    response.status()
                )));
            }
            let wire: WireSerp = response
                .json()
                .map_err(|e| RetrievalError::Provider(e.to_string()))?;
            let fixture = SerpFixture {
                query: query.to_string(),
                answer_box: wire.answer_box.map(|b| SerpEntry {
                    snippet: b.snippet.or(b.answer).unwrap_or_default(),
                    title: b.title,
                }),
                organic: wire
                    .organic
                    .into_iter()
                    .map(|o| SerpEntry {
                        title: o.title,
                        snippet: o.snippet,
                    })
                    .collect(),
            };
            Ok(fixture.to_results())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, body: &str) -> Document {
        Document {
            doc_id: id.to_string(),
            title: title.to_string(),
            body: body.to_string(),
        }
    }

    #[test]
    fn build_counts_term_frequencies() {
        let index = build_index([doc("d", "", "a b a")], DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(index.postings("a"), Some(&[(0, 2)][..]));
        assert_eq!(index.postings("b"), Some(&[(0, 1)][..]));
        assert_eq!(index.doc_length("d"), Some(3));
        assert_eq!(index.avg_doc_length(), 3.0);
    }

    #[test]
    fn build_rejects_duplicate_ids() {
        let err = build_index(
            [doc("d", "", "x"), doc("d", "", "y")],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicateDocId(id) if id == "d"));
    }

    #[test]
    fn build_rejects_empty_corpus() {
        let err = build_index(std::iter::empty(), DEFAULT_K1, DEFAULT_B).unwrap_err();
        assert!(matches!(err, RetrievalError::EmptyCorpus));
    }

    #[test]
    fn build_matches_hand_table() {
        let index = build_index(
            [
                doc("a", "alpha", "the cat sat"),
                doc("b", "beta", "the dog sat down"),
                doc("c", "gamma", "cat dog cat"),
            ],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        // Tokens include titles: a -> [alpha the cat sat], etc.
        assert_eq!(index.doc_length("a"), Some(4));
        assert_eq!(index.doc_length("b"), Some(5));
        assert_eq!(index.doc_length("c"), Some(4));
        assert!((index.avg_doc_length() - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(index.postings("cat"), Some(&[(0, 1), (2, 2)][..]));
        assert_eq!(index.postings("the"), Some(&[(0, 1), (1, 1)][..]));
        assert_eq!(index.postings("down"), Some(&[(1, 1)][..]));
    }

    #[test]
    fn score_of_absent_term_is_zero() {
        let index = build_index([doc("d", "", "a b a")], DEFAULT_K1, DEFAULT_B).unwrap();
        let score = index.bm25_score(&["missing".to_string()], "d").unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn single_doc_idf_matches_hand_computation() {
        let index = build_index([doc("d", "", "a")], DEFAULT_K1, DEFAULT_B).unwrap();
        // ln(1 + 0.5/1.5), frozen independently.
        assert!((index.idf("a") - 0.287682072452).abs() < 1e-9);
        // One term, tf 1, len == avglen: the tf factor is (k1+1)/(1+k1).
        let score = index.bm25_score(&["a".to_string()], "d").unwrap();
        assert!((score - 0.287682072452).abs() < 1e-9);
    }

    #[test]
    fn containing_doc_outranks_missing_doc() {
        let index = build_index(
            [doc("a", "", "rust search"), doc("b", "", "other words")],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let sa = index.bm25_score(&["rust".to_string()], "a").unwrap();
        let sb = index.bm25_score(&["rust".to_string()], "b").unwrap();
        assert!(sa > sb);
        assert_eq!(sb, 0.0);
    }

    #[test]
    fn unknown_doc_is_an_error() {
        let index = build_index([doc("d", "", "a")], DEFAULT_K1, DEFAULT_B).unwrap();
        assert!(matches!(
            index.bm25_score(&["a".to_string()], "nope"),
            Err(RetrievalError::UnknownDoc(_))
        ));
    }

    #[test]
    fn search_empty_for_unmatched_query() {
        let index = build_index([doc("d", "", "a b a")], DEFAULT_K1, DEFAULT_B).unwrap();
        assert!(index.search("zebra", 5).is_empty());
    }

    #[test]
    fn search_returns_at_most_corpus_size() {
        let index = build_index(
            [doc("a", "", "x"), doc("b", "", "x"), doc("c", "", "x")],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let results = index.search("x", 5);
        assert_eq!(results.len(), 3);
        assert_eq!(results[0].rank, 1);
        assert_eq!(results[2].rank, 3);
    }

    #[test]
    fn search_matches_brute_force_ranking() {
        let docs: Vec<Document> = (0..20)
            .map(|i| {
                doc(
                    &format!("d{i:02}"),
                    "",
                    &format!("term{} term{} filler words {}", i % 5, i % 3, i),
                )
            })
            .collect();
        let index = build_index(docs.clone(), DEFAULT_K1, DEFAULT_B).unwrap();
        let query = "term1 term2 words";
        let terms = tokenize(query);
        let mut brute: Vec<(String, f64)> = docs
            .iter()
            .map(|d| {
                (
                    d.doc_id.clone(),
                    index.bm25_score(&terms, &d.doc_id).unwrap(),
                )
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let got = index.search(query, 7);
        let brute_titles: Vec<&str> = brute.iter().take(7).map(|(id, _)| id.as_str()).collect();
        // Titles are empty, so compare via snippet-producing doc order by
        // rebuilding titles from ids.
        for (result, expected_id) in got.iter().zip(&brute_titles) {
            let body = &docs.iter().find(|d| &d.doc_id == expected_id).unwrap().body;
            assert_eq!(&result.snippet, body, "rank {}", result.rank);
        }
    }

    #[test]
    fn index_serialization_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![doc("a", "t", "x y z"), doc("b", "u", "x x")];
        let p1 = dir.path().join("one.idx");
        let p2 = dir.path().join("two.idx");
        build_index(docs.clone(), DEFAULT_K1, DEFAULT_B)
            .unwrap()
            .save(&p1)
            .unwrap();
        build_index(docs, DEFAULT_K1, DEFAULT_B)
            .unwrap()
            .save(&p2)
            .unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let loaded = InvertedIndex::load(&p1).unwrap();
        assert_eq!(loaded.doc_count(), 2);
    }

    #[test]
    fn index_load_rejects_missing_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        fs::write(&path, "{}").unwrap();
        assert!(matches!(
            InvertedIndex::load(&path),
            Err(RetrievalError::IndexFormat { .. })
        ));
    }

    fn fixture_with_answer_box() -> SerpFixture {
        SerpFixture {
            query: "who built it".to_string(),
            answer_box: Some(SerpEntry {
                title: "Box".into(),
                snippet: "Darmstadt".into(),
            }),
            organic: vec![
                SerpEntry {
                    title: "One".into(),
                    snippet: "s1".into(),
                },
                SerpEntry {
                    title: "Two".into(),
                    snippet: "s2".into(),
                },
                SerpEntry {
                    title: "Three".into(),
                    snippet: "s3".into(),
                },
                SerpEntry {
                    title: "Four".into(),
                    snippet: "s4".into(),
                },
            ],
        }
    }

    #[test]
    fn serp_replay_orders_answer_box_first() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = fixture_with_answer_box();
        let key = serp_fixture_key(&fixture.query);
        fs::write(
            dir.path().join(format!("{key}.json")),
            serde_json::to_string(&fixture).unwrap(),
        )
        .unwrap();
        let provider = ReplaySerpProvider::new(dir.path());
        let results = provider.fetch("Who built it?").unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(results[0].source, ResultSource::AnswerBox);
        assert_eq!(results[0].rank, 1);
        assert_eq!(results[1].source, ResultSource::Organic);
        assert_eq!(results[1].rank, 1);
        assert_eq!(results[3].rank, 3);
    }

    #[test]
    fn serp_replay_without_answer_box() {
        let dir = tempfile::tempdir().unwrap();
        let mut fixture = fixture_with_answer_box();
        fixture.answer_box = None;
        let key = serp_fixture_key(&fixture.query);
        fs::write(
            dir.path().join(format!("{key}.json")),
            serde_json::to_string(&fixture).unwrap(),
        )
        .unwrap();
        let provider = ReplaySerpProvider::new(dir.path());
        let results = provider.fetch("who built it").unwrap();
        assert_eq!(results.len(), 3);
        assert!(results.iter().all(|r| r.source == ResultSource::Organic));
    }

    #[test]
    fn serp_replay_misses_unknown_query() {
        let dir = tempfile::tempdir().unwrap();
        let provider = ReplaySerpProvider::new(dir.path());
        assert!(matches!(
            provider.fetch("never recorded"),
            Err(RetrievalError::FixtureMiss { .. })
        ));
    }

    #[test]
    fn serp_record_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scripted = ScriptedSerpProvider::new(|q| SerpFixture {
            query: q.to_string(),
            answer_box: None,
            organic: vec![SerpEntry {
                title: "T".into(),
                snippet: "S".into(),
            }],
        });
        let recorder = RecordingSerpProvider::new(scripted, dir.path());
        let live = recorder.fetch("some query").unwrap();
        let replayed = ReplaySerpProvider::new(dir.path())
            .fetch("some query")
            .unwrap();
        assert_eq!(live, replayed);
    }
}
