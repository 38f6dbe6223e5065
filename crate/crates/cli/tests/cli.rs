use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use har_core::corpus::{prompt_hash, SourceQuestion};
use har_core::filters::{build_attribution_prompt, build_factuality_prompt, JudgeTemplate};
use har_core::gateway::{FixtureEntry, MockFixture};
use har_core::quality::{format_hypothesis, format_premise, MockNliScorer, NliDistribution, NliQuery};
use har_core::recitation::RecitationPromptTemplate;
use serde_json::json;

fn har(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_har")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// (document, answer, factual p(Yes), attribution p(Yes))
type Recital = (&'static str, &'static str, f64, f64);

fn world() -> Vec<(SourceQuestion, Vec<Recital>)> {
    let q = |id: &str, text: &str, gold: &str| SourceQuestion {
        question_id: id.into(),
        question_text: text.into(),
        gold_answers: vec![gold.into()],
        source_dataset: "fixture".into(),
    };
    vec![
        (
            q("q1", "Who wrote the novel Tiger Eyes?", "Judy Blume"),
            vec![
                ("Tiger Eyes is a novel by Shirley Conran.", "Shirley Conran", 0.1, 0.9),
                ("Tiger Eyes was written by Judy Blume.", "Judy Blume", 0.97, 0.95),
            ],
        ),
        (
            q("q2", "What is the capital of France?", "Paris"),
            vec![
                ("The capital of France is Lyon.", "Lyon", 0.05, 0.8),
                ("Paris is the capital.", "PARIS", 0.96, 0.9),
            ],
        ),
    ]
}

/// Writes questions, mock fixtures, an NLI fixture and a config into `dir`.
fn setup(dir: &Path) -> PathBuf {
    let rt = RecitationPromptTemplate::default();
    let ft = JudgeTemplate::default_factuality();
    let at = JudgeTemplate::default_attribution();
    let mut generator = MockFixture::default();
    let mut judge = BTreeMap::new();
    let mut nli = MockNliScorer::new();
    let mut questions = String::new();
    for (q, recitals) in world() {
        questions += &(serde_json::to_string(&q).unwrap() + "\n");
        let prompt = rt.build_prompt(&q).unwrap();
        for (doc, answer, fact, attr) in recitals {
            generator.add_completion(&prompt, None, &rt.render_as_completion(doc, answer));
            let probs = |p: f64| BTreeMap::from([("Yes".to_string(), p), ("No".to_string(), 1.0 - p)]);
            judge.insert(
                prompt_hash(&build_factuality_prompt(&ft, &q.question_text, answer, &q.gold_answers[0]).unwrap()),
                probs(fact),
            );
            judge.insert(
                prompt_hash(&build_attribution_prompt(&at, &q.question_text, doc, answer).unwrap()),
                probs(attr),
            );
            let premise = format_premise(doc, &q.question_text).unwrap();
            nli.insert(
                &NliQuery::new(premise.clone(), format_hypothesis(&q.question_text, answer).unwrap()).unwrap(),
                NliDistribution {
                    entailment: attr,
                    neutral: 1.0 - attr,
                    contradiction: 0.0,
                },
            );
            nli.insert(
                &NliQuery::new(premise, format_hypothesis(&q.question_text, &q.gold_answers[0]).unwrap()).unwrap(),
                NliDistribution {
                    entailment: 0.0,
                    neutral: fact,
                    contradiction: 1.0 - fact,
                },
            );
        }
    }
    std::fs::write(dir.join("questions.jsonl"), questions).unwrap();
    generator.write(dir.join("generator.jsonl")).unwrap();
    MockFixture {
        entries: judge
            .into_iter()
            .map(|(h, p)| FixtureEntry {
                prompt_hash: h,
                sample_index: None,
                completion: None,
                token_probs: Some(p),
            })
            .collect(),
    }
    .write(dir.join("judge.jsonl"))
    .unwrap();
    nli.write(dir.join("nli.jsonl")).unwrap();
    let config = json!({
        "source": {"path": "questions.jsonl", "format": "generic-jsonl"},
        "generator": {"kind": "mock", "id": "gen", "fixture": "generator.jsonl"},
        "judge": {"kind": "mock", "id": "judge", "fixture": "judge.jsonl"},
        "recitation": {"k_samples": 6},
        "output_dir": "out",
        "seed": 3,
        "fixed_timestamp": "2024-01-01T00:00:00Z",
        "quality": {"scorer": {"kind": "mock", "fixture": "nli.jsonl"}}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn staged_run_matches_one_shot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    for cmd in ["generate", "filter", "select"] {
        let o = har(&[cmd, "--config", cfg]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let staged = std::fs::read(dir.path().join("out/dataset.jsonl")).unwrap();
    let text = String::from_utf8(staged.clone()).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("Shirley Conran") && text.contains("Lyon"));

    let other = tempfile::tempdir().unwrap();
    let cfg2 = setup(other.path());
    let o = har(&["pipeline", "--config", cfg2.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("2 records"));
    assert_eq!(std::fs::read(other.path().join("out/dataset.jsonl")).unwrap(), staged);

    let o = har(&["stats", "--config", cfg]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("raw_samples") && s.contains("12"), "{s}");
}

#[test]
fn factual_mode_override_keeps_gold_answers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let o = har(&["pipeline", "--config", cfg.to_str().unwrap(), "--mode", "factual", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/dataset.jsonl")).unwrap();
    assert!(text.contains("Judy Blume") && text.contains("PARIS"));
    assert!(!text.contains("Shirley Conran"));
}

#[test]
fn quality_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(har(&["pipeline", "--config", cfg]).status.success());
    let out = dir.path().join("quality.json");
    let o = har(&["quality", "--config", cfg, "--fraction-above", "0.5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["n"], 2);
    let mean = report["attribution_mean"].as_f64().unwrap();
    assert!((mean - 0.85).abs() < 1e-9, "{mean}");
    assert_eq!(report["attribution_fraction_above"], 1.0);
}

#[test]
fn quality_without_scorer_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("quality");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = har(&["quality", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn score_prints_table_with_ood_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("a.jsonl"),
        "{\"header\": {\"dataset\": \"SQuAD\"}}\n{\"context\": \"c\", \"qas\": [{\"qid\": \"s1\", \"question\": \"Q?\", \"answers\": [\"Paris\"]}]}\n",
    )
    .unwrap();
    std::fs::write(d.join("b.jsonl"), "{\"qid\": \"b1\", \"question\": \"Q?\", \"answers\": [\"potato\"]}\n").unwrap();
    std::fs::write(
        d.join("preds.jsonl"),
        "{\"qid\": \"s1\", \"answer\": \"Paris\"}\n{\"qid\": \"b1\", \"answer\": \"King Edward potato\"}\n",
    )
    .unwrap();
    let path = |f: &str| d.join(f).to_str().unwrap().to_string();
    let b = format!("BioASQ={}", path("b.jsonl"));
    let out = path("report.json");
    let o = har(&[
        "score", "--dataset", &path("a.jsonl"), "--dataset", &b, "--predictions", &path("preds.jsonl"), "--ood",
        "BioASQ", "--out", &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("OOD Avg."), "{table}");
    assert!(table.contains("50.0") && table.contains("100.0"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["per_dataset"]["BioASQ"]["f1"], 50.0);

    let o = har(&[
        "score", "--dataset", &path("a.jsonl"), "--predictions", &path("preds.jsonl"), "--ood", "NQ",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    assert_eq!(har(&["generate"]).status.code(), Some(1));
    assert_eq!(har(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(har(&["--help"]).status.code(), Some(0));
    assert_eq!(har(&["pipeline", "--config", "/nonexistent/config.json"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/candidates.jsonl"), "not json\n").unwrap();
    assert_eq!(har(&["filter", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));

    // a generator fixture without any matching prompt fails every request
    std::fs::write(dir.path().join("generator.jsonl"), "").unwrap();
    let o = har(&["generate", "--config", cfg.to_str().unwrap(), "--cache-dir", dir.path().join("c2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
