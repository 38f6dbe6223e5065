//! Builds small mock worlds: a question file, a generator fixture with a
//! pool of recitations per question, a judge fixture answering every
//! factuality and attribution prompt those recitations can produce, and a
//! pipeline config tying them together.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use har_core::corpus::{prompt_hash, SourceQuestion};
use har_core::filters::{build_attribution_prompt, build_factuality_prompt, JudgeTemplate};
use har_core::gateway::{FixtureEntry, MockFixture};
use har_core::quality::{format_hypothesis, format_premise, MockNliScorer, NliDistribution, NliQuery};
use har_core::recitation::RecitationPromptTemplate;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Recital {
    pub document: String,
    pub answer: String,
    /// Judge probability that the answer is the gold answer.
    pub factual_yes: f64,
    /// Judge probability that the document supports the answer.
    pub attribution_yes: f64,
}

pub fn recital(document: &str, answer: &str, factual_yes: f64, attribution_yes: f64) -> Recital {
    Recital {
        document: document.into(),
        answer: answer.into(),
        factual_yes,
        attribution_yes,
    }
}

#[derive(Debug, Clone)]
pub struct WorldQuestion {
    pub question: SourceQuestion,
    pub recitals: Vec<Recital>,
    /// Extra raw completions for the pool, typically malformed ones.
    pub raw: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct World {
    pub questions: Vec<WorldQuestion>,
}

pub fn question(qid: &str, text: &str, golds: &[&str]) -> SourceQuestion {
    SourceQuestion {
        question_id: qid.into(),
        question_text: text.into(),
        gold_answers: golds.iter().map(|s| s.to_string()).collect(),
        source_dataset: "fixture".into(),
    }
}

fn yes_no(p: f64) -> BTreeMap<String, f64> {
    [("Yes".to_string(), p), ("No".to_string(), 1.0 - p)].into_iter().collect()
}

impl World {
    pub fn add(&mut self, question: SourceQuestion, recitals: Vec<Recital>) -> &mut Self {
        self.questions.push(WorldQuestion {
            question,
            recitals,
            raw: Vec::new(),
        });
        self
    }

    pub fn add_raw(&mut self, qid: &str, raw: &str) -> &mut Self {
        let q = self
            .questions
            .iter_mut()
            .find(|q| q.question.question_id == qid)
            .expect("question exists");
        q.raw.push(raw.into());
        self
    }

    pub fn source_questions(&self) -> Vec<SourceQuestion> {
        self.questions.iter().map(|q| q.question.clone()).collect()
    }

    pub fn generator_fixture(&self) -> MockFixture {
        let tpl = RecitationPromptTemplate::default();
        let mut fx = MockFixture::default();
        for wq in &self.questions {
            let prompt = tpl.build_prompt(&wq.question).unwrap();
            for r in &wq.recitals {
                fx.add_completion(&prompt, None, &tpl.render_as_completion(&r.document, &r.answer));
            }
            for raw in &wq.raw {
                fx.add_completion(&prompt, None, raw);
            }
        }
        fx
    }

    pub fn judge_fixture(&self) -> MockFixture {
        let ft = JudgeTemplate::default_factuality();
        let at = JudgeTemplate::default_attribution();
        let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut put = |prompt: String, p: f64| {
            let probs = yes_no(p);
            let prev = table.insert(prompt_hash(&prompt), probs.clone());
            assert!(prev.is_none_or(|v| v == probs), "conflicting judge entries for one prompt");
        };
        for wq in &self.questions {
            let q = &wq.question;
            for r in &wq.recitals {
                put(
                    build_factuality_prompt(&ft, &q.question_text, &r.answer, q.canonical_gold()).unwrap(),
                    r.factual_yes,
                );
                put(
                    build_attribution_prompt(&at, &q.question_text, &r.document, &r.answer).unwrap(),
                    r.attribution_yes,
                );
            }
        }
        MockFixture {
            entries: table
                .into_iter()
                .map(|(h, probs)| FixtureEntry {
                    prompt_hash: h,
                    sample_index: None,
                    completion: None,
                    token_probs: Some(probs),
                })
                .collect(),
        }
    }

    /// NLI scorer agreeing with the judges: entailment of a generated answer
    /// is its attribution probability, contradiction of the gold answer is
    /// one minus its factuality probability.
    pub fn nli_scorer(&self) -> MockNliScorer {
        let mut s = MockNliScorer::new();
        for wq in &self.questions {
            let q = &wq.question;
            for r in &wq.recitals {
                let premise = format_premise(&r.document, &q.question_text).unwrap();
                let generated = NliQuery::new(
                    premise.clone(),
                    format_hypothesis(&q.question_text, &r.answer).unwrap(),
                )
                .unwrap();
                s.insert(
                    &generated,
                    NliDistribution {
                        entailment: r.attribution_yes,
                        neutral: 1.0 - r.attribution_yes,
                        contradiction: 0.0,
                    },
                );
                let gold = NliQuery::new(
                    premise,
                    format_hypothesis(&q.question_text, q.canonical_gold()).unwrap(),
                )
                .unwrap();
                s.insert(
                    &gold,
                    NliDistribution {
                        entailment: 0.0,
                        neutral: r.factual_yes,
                        contradiction: 1.0 - r.factual_yes,
                    },
                );
            }
        }
        s
    }

    /// Writes questions, fixtures and `config.json` into `dir`; the output
    /// directory is `dir/out`. `tweak` edits the config before it is saved.
    pub fn write(&self, dir: &Path, k: u32, tweak: impl FnOnce(&mut Value)) -> PathBuf {
        std::fs::create_dir_all(dir).unwrap();
        let lines: String = self
            .questions
            .iter()
            .map(|q| serde_json::to_string(&q.question).unwrap() + "\n")
            .collect();
        std::fs::write(dir.join("questions.jsonl"), lines).unwrap();
        self.generator_fixture().write(dir.join("generator.jsonl")).unwrap();
        self.judge_fixture().write(dir.join("judge.jsonl")).unwrap();
        let mut config = json!({
            "source": {"path": "questions.jsonl", "format": "generic-jsonl"},
            "generator": {"kind": "mock", "id": "mock-generator", "fixture": "generator.jsonl"},
            "judge": {"kind": "mock", "id": "mock-judge", "fixture": "judge.jsonl"},
            "recitation": {"k_samples": k, "temperature": 0.7},
            "output_dir": "out",
            "seed": 17,
            "fixed_timestamp": "2024-01-01T00:00:00Z",
            "concurrency": {"max_inflight": 4},
            "retry": {"max_retries": 1, "backoff_base_ms": 0, "backoff_max_ms": 0}
        });
        tweak(&mut config);
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        path
    }
}

/// Ten questions with varied recitation pools: counterfactual answers with
/// strong and weak grounding, surface matches of the gold, paraphrases the
/// judge recognises as factual, and the odd malformed completion.
pub fn ten_question_world() -> World {
    let mut w = World::default();
    let specs: [(&str, &str, &[&str]); 10] = [
        ("q00", "Who wrote the novel Tiger Eyes?", &["Judy Blume"]),
        ("q01", "What is the capital of France?", &["Paris"]),
        ("q02", "Which Greek god was the personification of wealth?", &["Plutus"]),
        ("q03", "Which insect produces cuckoo spit?", &["Froghopper", "Spittlebugs"]),
        ("q04", "Which element has atomic number 71?", &["Lutetium"]),
        ("q05", "Who painted Liberty Leading the People?", &["Eugène Delacroix"]),
        ("q06", "In which decade did the Great Depression begin?", &["1930s"]),
        ("q07", "Which planet is known for its prominent rings?", &["Saturn"]),
        ("q08", "Who sculpted the statue of David in Florence?", &["Michelangelo"]),
        ("q09", "What is the chemical symbol for sodium?", &["Na"]),
    ];
    let alt = ["Shirley Conran", "Lyon", "Hermes", "Ladybird", "Ytterbium", "Gustave Courbet", "1920s", "Jupiter", "Donatello", "So"];
    let alt2 = ["Roald Dahl", "Marseille", "Zeus", "Dragonfly", "Hafnium", "Jacques-Louis David", "1940s", "Uranus", "Bernini", "Sd"];
    for (i, (qid, text, golds)) in specs.iter().enumerate() {
        let gold = golds[0];
        let mut recitals = vec![
            recital(
                &format!("A reference work states that the answer is {}.\nIt is widely cited.", alt[i]),
                alt[i],
                0.05 + 0.01 * i as f64,
                0.6 + 0.03 * i as f64,
            ),
            recital(
                &format!("Some claim {} is the answer, though sources differ.", alt2[i]),
                alt2[i],
                0.1,
                0.3 + 0.05 * (i % 3) as f64,
            ),
            recital(
                &format!("It is well known that the answer is {gold}."),
                &gold.to_uppercase(),
                0.95,
                0.97,
            ),
        ];
        if i % 2 == 0 {
            recitals.push(recital(
                &format!("Paraphrased account pointing to {gold} indirectly."),
                &format!("{gold} (commonly)"),
                0.8,
                0.9,
            ));
        }
        if i % 4 == 3 {
            // every counterfactual answer is weakly grounded here
            recitals[0].attribution_yes = 0.2;
        }
        w.add(question(qid, text, golds), recitals);
        if i % 3 == 0 {
            w.add_raw(qid, "No blank line before\nAnswer: broken");
        }
    }
    w
}
