//! Regenerates the bundled mini dataset under `data/mini/`: the dataset and
//! corpus files, the SERP fixtures, and the LLM completion transcripts that
//! the replay backend serves. Runs the real engine in record mode over a
//! scripted backend, so the recorded prompts are exactly the prompts a
//! replay run rebuilds.
//!
//! Usage: `cargo run -p beamaggr --example record_fixtures`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use beamaggr::engine::{run_dataset, EngineConfig, MultiSourceAnswerer};
use beamaggr::evalkit::{load_dataset, DatasetFormat};
use beamaggr::llmio::{RecordingBackend, ScriptedBackend, ScriptedCompletion};
use beamaggr::retrieval::{
    build_index, read_corpus, Document, RecordingSerpProvider, ScriptedSerpProvider, SerpEntry,
    SerpFixture, DEFAULT_B, DEFAULT_K1,
};
use beamaggr::strategies::{PromptLibrary, RetrievalHandles};

/// Per-question scripted answers: five self-consistency samples per strategy
/// in closebook / parametric / wiki / serp order. "Unknown" samples vote for
/// nothing.
fn answer_script() -> BTreeMap<&'static str, [[&'static str; 5]; 4]> {
    let mut script: BTreeMap<&'static str, [[&'static str; 5]; 4]> = BTreeMap::new();

    // mini-001: the two-hop originally-called question.
    script.insert(
        "What is the fourth largest city in Germany?",
        [
            ["Frankfurt", "Frankfurt", "Frankfurt", "Cologne", "Cologne"],
            ["Cologne", "Cologne", "Cologne", "Cologne", "Cologne"],
            [
                "Regensburg",
                "Regensburg",
                "Regensburg",
                "Unknown",
                "Unknown",
            ],
            [
                "Darmstadt",
                "Darmstadt",
                "Darmstadt",
                "Darmstadt",
                "Darmstadt",
            ],
        ],
    );
    script.insert(
        "What was Cologne originally called?",
        [
            [
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Agrippina",
            ],
            [
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
                "Colonia Claudia Ara Agrippinensium",
            ],
            [
                "Colonia Agrippina",
                "Colonia Agrippina",
                "Colonia Agrippina",
                "Colonia Agrippina",
                "Unknown",
            ],
            ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
        ],
    );
    script.insert(
        "What was Darmstadt originally called?",
        [
            [
                "Darmundestat",
                "Darmundestat",
                "Darmundestat",
                "the Grand Duchy of Hesse",
                "the Grand Duchy of Hesse",
            ],
            [
                "Darmundestat",
                "Darmundestat",
                "Darmundestat",
                "Darmundestat",
                "Darmundestat",
            ],
            ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
            ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
        ],
    );

    // mini-002: the annotated tower comparison.
    script.insert(
        "When was the Eiffel Tower completed?",
        [
            ["1889", "1889", "1889", "1930", "1889"],
            ["1889", "1889", "1889", "1889", "1889"],
            ["1889", "1889", "1889", "1889", "1889"],
            ["1889", "1889", "1889", "1889", "1930"],
        ],
    );
    script.insert(
        "When was Blackpool Tower completed?",
        [
            ["1894", "1894", "1894", "1890", "1894"],
            ["1894", "1894", "1894", "1894", "1894"],
            ["1894", "1894", "1894", "1894", "1890"],
            ["1894", "1894", "1894", "1894", "1894"],
        ],
    );
    for (substituted, answers) in [
        (
            "Which tower was completed earlier, the Eiffel Tower or Blackpool Tower? (1889, 1894)",
            [
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                ],
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                ],
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Unknown",
                    "Unknown",
                    "Unknown",
                ],
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Unknown",
                    "Unknown",
                ],
            ],
        ),
        (
            "Which tower was completed earlier, the Eiffel Tower or Blackpool Tower? (1889, 1890)",
            [
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                ],
                [
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Eiffel Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                ],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
            ],
        ),
        (
            "Which tower was completed earlier, the Eiffel Tower or Blackpool Tower? (1930, 1894)",
            [
                [
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                ],
                [
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                ],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
            ],
        ),
        (
            "Which tower was completed earlier, the Eiffel Tower or Blackpool Tower? (1930, 1890)",
            [
                [
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Unknown",
                ],
                [
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                    "Blackpool Tower",
                ],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
                ["Unknown", "Unknown", "Unknown", "Unknown", "Unknown"],
            ],
        ),
    ] {
        script.insert(substituted, answers);
    }

    // mini-003: the Macintosh founder bridge.
    script.insert(
        "Which company created the Macintosh?",
        [
            [
                "Apple",
                "Apple",
                "Apple",
                "Apple Computer",
                "Apple Computer",
            ],
            ["Apple", "Apple", "Apple", "Apple", "Apple"],
            ["Apple", "Apple", "Apple", "Apple", "Unknown"],
            ["Apple", "Apple", "Apple", "Apple", "Apple"],
        ],
    );
    script.insert(
        "Who founded Apple?",
        [
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Wozniak",
            ],
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
            ],
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Wozniak",
                "Steve Wozniak",
                "Unknown",
            ],
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Unknown",
                "Unknown",
            ],
        ],
    );
    script.insert(
        "Who founded Apple Computer?",
        [
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Wozniak",
                "Steve Wozniak",
            ],
            [
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
                "Steve Jobs",
            ],
            [
                "Steve Wozniak",
                "Steve Wozniak",
                "Unknown",
                "Unknown",
                "Unknown",
            ],
            ["Steve Jobs", "Unknown", "Unknown", "Unknown", "Unknown"],
        ],
    );

    // mini-004: three hops through the telephone inventor.
    script.insert(
        "Who invented the telephone?",
        [
            [
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Antonio Meucci",
            ],
            [
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
            ],
            [
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Unknown",
                "Unknown",
            ],
            [
                "Alexander Graham Bell",
                "Alexander Graham Bell",
                "Antonio Meucci",
                "Unknown",
                "Unknown",
            ],
        ],
    );
    script.insert(
        "Where did Alexander Graham Bell die?",
        [
            ["Canada", "Canada", "Canada", "Nova Scotia", "Nova Scotia"],
            ["Canada", "Canada", "Canada", "Canada", "Canada"],
            ["Canada", "Canada", "Nova Scotia", "Unknown", "Unknown"],
            ["Canada", "Canada", "Canada", "Unknown", "Unknown"],
        ],
    );
    script.insert(
        "Where did Antonio Meucci die?",
        [
            ["New York", "New York", "New York", "New York", "New York"],
            ["New York", "New York", "New York", "New York", "New York"],
            ["New York", "New York", "Unknown", "Unknown", "Unknown"],
            ["New York", "New York", "New York", "Unknown", "Unknown"],
        ],
    );
    for (question, answer) in [
        ("What is the currency of Canada?", "Canadian dollar"),
        ("What is the currency of Nova Scotia?", "Canadian dollar"),
        ("What is the currency of New York?", "United States dollar"),
    ] {
        script.insert(
            question,
            [[answer; 5], [answer; 5], [answer; 5], ["Unknown"; 5]],
        );
    }

    // mini-005: yes/no comparison over countries.
    script.insert(
        "Which country is Paris located in?",
        [
            ["France", "France", "France", "France", "France"],
            ["France", "France", "France", "France", "France"],
            ["France", "France", "France", "France", "France"],
            ["France", "France", "France", "France", "France"],
        ],
    );
    script.insert(
        "Which country is Marseille located in?",
        [
            ["France", "France", "France", "France", "Monaco"],
            ["France", "France", "France", "France", "France"],
            ["France", "France", "France", "Unknown", "Unknown"],
            ["France", "France", "France", "France", "Monaco"],
        ],
    );
    script.insert(
        "Are Paris and Marseille located in the same country? (France, France)",
        [
            ["yes", "yes", "yes", "yes", "yes"],
            ["yes", "yes", "yes", "yes", "yes"],
            ["yes", "yes", "yes", "Unknown", "Unknown"],
            ["yes", "yes", "yes", "yes", "Unknown"],
        ],
    );
    script.insert(
        "Are Paris and Marseille located in the same country? (France, Monaco)",
        [
            ["no", "no", "no", "no", "yes"],
            ["no", "no", "no", "no", "no"],
            ["no", "no", "Unknown", "Unknown", "Unknown"],
            ["no", "no", "no", "Unknown", "Unknown"],
        ],
    );

    script
}

fn knowledge_script() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        (
            "What is the fourth largest city in Germany?",
            "Germany's largest cities by population are Berlin, Hamburg, Munich and Cologne. Cologne lies on the Rhine and is the largest city of the Rhineland.",
        ),
        (
            "What was Cologne originally called?",
            "Cologne was founded as a Roman colony in the first century and grew around a legionary settlement on the west bank of the Rhine.",
        ),
        (
            "What was Darmstadt originally called?",
            "Darmstadt is a city in the state of Hesse. It appears in medieval records under an older name and later became the seat of the Grand Duchy of Hesse.",
        ),
    ])
}

/// One reasoning completion per sample, varying slightly by sample index so
/// transcripts look like sampled generations.
fn reasoning_text(question: &str, answer: &str, sample: usize) -> String {
    let opener = match sample % 5 {
        0 => "Working through this step by step.",
        1 => "Let me reason about the question.",
        2 => "Considering the available evidence.",
        3 => "Recalling the relevant facts.",
        _ => "Checking what is known here.",
    };
    if answer == "Unknown" {
        format!("{opener} The question was: {question} I cannot settle this reliably. So the answer is **Unknown**.")
    } else {
        format!("{opener} The question was: {question} The evidence points one way. So the answer is **{answer}**.")
    }
}

fn dataset_jsonl() -> String {
    let lines = [
        r#"{"id":"mini-001","question":"The fourth largest city in Germany was originally called what?","answers":["Colonia Claudia Ara Agrippinensium"],"qtype":"2hop","decomposition":{"The fourth largest city in Germany was originally called what?":["What is the fourth largest city in Germany?","What was #1 originally called?"]}}"#,
        r#"{"id":"mini-002","question":"Which tower was completed earlier, the Eiffel Tower or Blackpool Tower?","answers":["Eiffel Tower","the Eiffel Tower"],"qtype":"comparison","decomposition":{"Which tower was completed earlier, the Eiffel Tower or Blackpool Tower? (#1, #2)":["When was the Eiffel Tower completed?","When was Blackpool Tower completed?"]}}"#,
        r#"{"id":"mini-003","question":"Who founded the company that created the Macintosh?","answers":["Steve Jobs","Steven Paul Jobs"],"qtype":"2hop","decomposition":{"Who founded the company that created the Macintosh?":["Which company created the Macintosh?","Who founded #1?"]}}"#,
        r#"{"id":"mini-004","question":"What is the currency of the country where the inventor of the telephone died?","answers":["Canadian dollar"],"qtype":"3hop1","decomposition":{"What is the currency of the country where the inventor of the telephone died?":["Where did the inventor of the telephone die?","What is the currency of #1?"],"Where did the inventor of the telephone die?":["Who invented the telephone?","Where did #1 die?"]}}"#,
        r#"{"id":"mini-005","question":"Are Paris and Marseille located in the same country?","answers":["yes"],"qtype":"comparison","decomposition":{"Are Paris and Marseille located in the same country? (#1, #2)":["Which country is Paris located in?","Which country is Marseille located in?"]}}"#,
    ];
    lines.join("\n") + "\n"
}

fn corpus_docs() -> Vec<Document> {
    let docs = [
        ("wiki-001", "Cologne", "Cologne is the largest city of the Rhineland and the fourth largest city in Germany. The city was founded as a Roman colony on the Rhine and served as the capital of the Roman province of Germania Inferior."),
        ("wiki-002", "Darmstadt", "Darmstadt is a city in the state of Hesse in Germany. The city appears in late medieval records and later served as the capital of the Grand Duchy of Hesse."),
        ("wiki-003", "Frankfurt", "Frankfurt am Main is a metropolis in Hesse, Germany, and a major financial centre on the river Main."),
        ("wiki-004", "Regensburg", "Regensburg is a city in Bavaria, Germany, at the confluence of the Danube, Naab and Regen rivers, known for its medieval centre."),
        ("wiki-005", "Germany largest cities", "The largest cities in Germany by population are Berlin, Hamburg, Munich and Cologne, followed by Frankfurt am Main and Stuttgart."),
        ("wiki-006", "Eiffel Tower", "The Eiffel Tower is a wrought-iron lattice tower in Paris, France. It was completed in 1889 as the entrance arch of the World's Fair."),
        ("wiki-007", "Blackpool Tower", "Blackpool Tower is a tourist attraction in Blackpool, England. The tower was completed in 1894 and was inspired by the Eiffel Tower."),
        ("wiki-008", "Macintosh", "The Macintosh is a family of personal computers created by Apple. The original Macintosh was introduced in January 1984."),
        ("wiki-009", "Apple Inc.", "Apple was founded as Apple Computer by Steve Jobs, Steve Wozniak and Ronald Wayne to develop and sell personal computers."),
        ("wiki-010", "Alexander Graham Bell", "Alexander Graham Bell was a scientist credited with patenting the first practical telephone. Bell died in 1922 at his estate in Nova Scotia, Canada."),
        ("wiki-011", "Antonio Meucci", "Antonio Meucci was an Italian inventor who developed a voice-communication apparatus and spent his later life in New York."),
        ("wiki-012", "Canadian dollar", "The Canadian dollar is the currency of Canada, abbreviated CAD and divided into 100 cents."),
        ("wiki-013", "United States dollar", "The United States dollar is the official currency of the United States and several other countries."),
        ("wiki-014", "Paris", "Paris is the capital and largest city of France, located on the Seine in the north of the country."),
        ("wiki-015", "Marseille", "Marseille is a major port city in southern France, the prefecture of the Bouches-du-Rhone department."),
        ("wiki-016", "Telephone", "The telephone is a telecommunications device that converts speech into electronic signals; its invention is commonly credited to Alexander Graham Bell."),
        ("wiki-017", "Rhine", "The Rhine is one of the major European rivers, flowing through Switzerland, Germany and the Netherlands, passing cities such as Cologne."),
        ("wiki-018", "Grand Duchy of Hesse", "The Grand Duchy of Hesse was a state of the German Confederation with its capital at Darmstadt."),
    ];
    docs.iter()
        .map(|(id, title, body)| Document {
            doc_id: id.to_string(),
            title: title.to_string(),
            body: body.to_string(),
        })
        .collect()
}

fn serp_script(query: &str) -> SerpFixture {
    // A handful of queries get an answer box; everything else gets three
    // deterministic organic results derived from the query.
    let answer_box = match query {
        "What is the fourth largest city in Germany?" => Some(SerpEntry {
            title: "Largest German cities".to_string(),
            snippet:
                "Darmstadt is sometimes listed among the largest cities of the Rhine-Main region."
                    .to_string(),
        }),
        "When was the Eiffel Tower completed?" => Some(SerpEntry {
            title: "Eiffel Tower".to_string(),
            snippet: "The Eiffel Tower was completed in 1889.".to_string(),
        }),
        "Which country is Paris located in?" => Some(SerpEntry {
            title: "Paris".to_string(),
            snippet: "Paris is the capital of France.".to_string(),
        }),
        _ => None,
    };
    let organic = (1..=3)
        .map(|i| SerpEntry {
            title: format!("Result {i} for {query}"),
            snippet: format!("Snippet {i} discussing: {query}"),
        })
        .collect();
    SerpFixture {
        query: query.to_string(),
        answer_box,
        organic,
    }
}

fn main() {
    let data_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini");
    let llm_dir = data_dir.join("llm");
    let serp_dir = data_dir.join("serp");
    for dir in [&data_dir, &llm_dir, &serp_dir] {
        fs::create_dir_all(dir).expect("create data directories");
    }

    fs::write(data_dir.join("dataset.jsonl"), dataset_jsonl()).expect("write dataset");

    let corpus = corpus_docs();
    let corpus_jsonl: String = corpus
        .iter()
        .map(|d| serde_json::to_string(d).expect("doc serializes"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    fs::write(data_dir.join("corpus.jsonl"), corpus_jsonl).expect("write corpus");

    let instances =
        load_dataset(&data_dir.join("dataset.jsonl"), DatasetFormat::Generic).expect("load");
    let manifest: Vec<serde_json::Value> = instances
        .iter()
        .map(|i| {
            serde_json::json!({
                "id": i.id,
                "qtype": i.qtype,
                "gold": i.gold_answers,
            })
        })
        .collect();
    fs::write(
        data_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .expect("write manifest");

    let answers = answer_script();
    let knowledge = knowledge_script();
    let scripted = ScriptedBackend::new(move |prompt, sample| {
        let text = &prompt.text;
        let question = text
            .lines()
            .rev()
            .find_map(|line| line.strip_prefix("Question: "))
            .unwrap_or("")
            .to_string();
        if text.starts_with("Provide the necessary background knowledge") {
            let paragraph = knowledge.get(question.as_str()).copied().unwrap_or(
                "Relevant background: the entities in this question are well documented.",
            );
            return Some(ScriptedCompletion::stop(paragraph));
        }
        let strategy = if text.starts_with("Given a question and the relevant documents") {
            1
        } else if text.starts_with("Given a question and the relevant Wikipedia text") {
            2
        } else if text.starts_with("Please answer the question based on the snippet") {
            3
        } else {
            0
        };
        let per_strategy = answers.get(question.as_str())?;
        let answer = per_strategy[strategy][sample];
        Some(ScriptedCompletion::stop(reasoning_text(
            &question, answer, sample,
        )))
    });
    let backend = Arc::new(RecordingBackend::new(scripted, &llm_dir));

    let serp = RecordingSerpProvider::new(ScriptedSerpProvider::new(serp_script), &serp_dir);
    let index = build_index(
        read_corpus(&data_dir.join("corpus.jsonl")).expect("read corpus"),
        DEFAULT_K1,
        DEFAULT_B,
    )
    .expect("build index");
    let retrieval = RetrievalHandles {
        wiki: Some(Arc::new(index)),
        serp: Some(Arc::new(serp)),
    };

    let config = EngineConfig::default();
    let answerer = MultiSourceAnswerer {
        backend,
        retrieval,
        prompts: Arc::new(PromptLibrary::builtin()),
        configs: config.strategy_configs(),
        vote_temperature: config.vote_temperature,
        k: config.effective_beam_size(),
    };
    let outcome = run_dataset(&instances, "mini", &config, &answerer, None, 2);

    assert!(
        outcome.eval.skipped.is_empty(),
        "skips: {:?}",
        outcome.eval.skipped
    );
    let expected = [
        ("mini-001", "Colonia Claudia Ara Agrippinensium"),
        ("mini-002", "Eiffel Tower"),
        ("mini-003", "Steve Jobs"),
        ("mini-004", "Canadian dollar"),
        ("mini-005", "yes"),
    ];
    for (id, answer) in expected {
        let row = outcome.eval.rows.iter().find(|r| r.id == id).expect(id);
        assert_eq!(row.prediction, answer, "{id} prediction drifted");
    }

    let recorded = fs::read_dir(&llm_dir).expect("list llm fixtures").count();
    let serp_count = fs::read_dir(&serp_dir).expect("list serp fixtures").count();
    println!(
        "recorded {recorded} llm fixtures, {serp_count} serp fixtures, mean f1 {:.4}",
        outcome.eval.mean_f1
    );
}
