//! Seeded synthetic fact corpus with queries, judgments and scripted
//! scenarios.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rico_core::metrics::{Judgment, RelevanceJudgments};
use rico_core::store::DocumentRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::vocab::Vocabulary;

pub const ATTRIBUTE_NAMES: [&str; 8] = ["color", "size", "shape", "metal", "mood", "era", "taste", "sound"];
pub const SPECIAL_WORDS: [&str; 5] = [".", "?", "Q", "is", "of"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_entities: usize,
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    /// Fact documents; each is one distinct (entity, attribute) pair.
    pub num_facts: usize,
    /// One query per held-out fact.
    pub num_queries: usize,
    /// Judged grade-0 documents per query; `None` keeps every document that
    /// shares the query's entity or attribute.
    pub distractors_per_query: Option<usize>,
    pub num_redundancy: usize,
    pub num_repeat_probes: usize,
    pub num_landscape_pairs: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_entities: 200,
            num_attributes: 2,
            values_per_attribute: 10,
            num_facts: 200,
            num_queries: 100,
            distractors_per_query: None,
            num_redundancy: 100,
            num_repeat_probes: 20,
            num_landscape_pairs: 20,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_owned()));
        if self.num_entities == 0 || self.num_attributes == 0 || self.values_per_attribute == 0 {
            return bad("entity, attribute and value counts must be positive");
        }
        if self.num_attributes > ATTRIBUTE_NAMES.len() {
            return bad("at most 8 attributes are supported");
        }
        if self.num_facts == 0 || self.num_queries == 0 {
            return bad("num_facts and num_queries must be positive");
        }
        if self.num_facts > self.num_entities * self.num_attributes {
            return bad("num_facts exceeds the number of (entity, attribute) pairs");
        }
        if self.num_queries >= self.num_facts {
            return bad("num_queries must leave at least one training fact");
        }
        if self.num_repeat_probes > self.num_queries || self.num_landscape_pairs > self.num_queries {
            return bad("probe and landscape counts cannot exceed num_queries");
        }
        if self.num_redundancy > 0 && self.num_entities < 2 {
            return bad("redundancy scenarios need two entities");
        }
        Ok(())
    }

    pub fn entity_word(&self, e: usize) -> String {
        format!("e{e:03}")
    }

    pub fn attribute_word(&self, a: usize) -> String {
        ATTRIBUTE_NAMES[a].to_owned()
    }

    pub fn value_word(&self, a: usize, v: usize) -> String {
        format!("{}{v}", &ATTRIBUTE_NAMES[a][..3])
    }

    /// Specials, then entities, attributes and values.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend((0..self.num_entities).map(|e| self.entity_word(e)));
        words.extend((0..self.num_attributes).map(|a| self.attribute_word(a)));
        for a in 0..self.num_attributes {
            words.extend((0..self.values_per_attribute).map(|v| self.value_word(a, v)));
        }
        Vocabulary::from(words)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub entity: usize,
    pub attribute: usize,
    pub value: usize,
}

impl Fact {
    pub fn doc_text(&self, spec: &CorpusSpec) -> String {
        format!(
            "{} {} is {} .",
            spec.entity_word(self.entity),
            spec.attribute_word(self.attribute),
            spec.value_word(self.attribute, self.value)
        )
    }

    pub fn question_text(&self, spec: &CorpusSpec, template: usize) -> String {
        let e = spec.entity_word(self.entity);
        let a = spec.attribute_word(self.attribute);
        match template % 2 {
            0 => format!("Q {e} {a} ?"),
            _ => format!("Q {a} of {e} ?"),
        }
    }

    pub fn answer_text(&self, spec: &CorpusSpec) -> String {
        spec.value_word(self.attribute, self.value)
    }

    /// Shares the entity or the attribute, but is a different pair.
    pub fn is_distractor_for(&self, other: &Fact) -> bool {
        (self.entity == other.entity) != (self.attribute == other.attribute)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocSplit {
    /// Seen as document text during training.
    Train,
    /// Held out from training; retrieval targets.
    Eval,
    /// Scenario-only documents (e.g. a restated question).
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Doc {
    pub doc_id: String,
    pub text: String,
    pub split: DocSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<Fact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub question: String,
    pub answer: String,
    pub supporting_doc_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// `doc_ids = [novel, redundant]`; the question opens by restating the
    /// redundant document.
    Redundancy,
    /// `doc_ids = [supporting, probe]`; the probe document is the question.
    RepeatedQuestion,
    /// `doc_ids = [supporting, distractor]`.
    LandscapePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub question: String,
    pub answer: String,
    pub doc_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub docs: Vec<Doc>,
    pub queries: Vec<Query>,
    pub judgments: Vec<Judgment>,
    pub scenarios: Vec<Scenario>,
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(usize, usize)> = (0..spec.num_entities)
        .flat_map(|e| (0..spec.num_attributes).map(move |a| (e, a)))
        .collect();
    pairs.shuffle(&mut rng);
    let facts: Vec<Fact> = pairs[..spec.num_facts]
        .iter()
        .map(|&(entity, attribute)| Fact {
            entity,
            attribute,
            value: rng.gen_range(0..spec.values_per_attribute),
        })
        .collect();

    // ids are assigned from an independent shuffle so they carry no role
    let mut id_order: Vec<usize> = (0..facts.len()).collect();
    id_order.shuffle(&mut rng);
    let mut docs: Vec<Doc> = vec![];
    let mut doc_of = vec![String::new(); facts.len()];
    for (slot, &fi) in id_order.iter().enumerate() {
        doc_of[fi] = format!("d{slot:04}");
    }
    for (fi, f) in facts.iter().enumerate() {
        docs.push(Doc {
            doc_id: doc_of[fi].clone(),
            text: f.doc_text(spec),
            split: if fi < spec.num_queries {
                DocSplit::Eval
            } else {
                DocSplit::Train
            },
            fact: Some(*f),
        });
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut judgments = Vec::new();
    for (qi, f) in facts[..spec.num_queries].iter().enumerate() {
        let query_id = format!("q{qi:04}");
        queries.push(Query {
            query_id: query_id.clone(),
            question: f.question_text(spec, rng.gen_range(0..2)),
            answer: f.answer_text(spec),
            supporting_doc_ids: vec![doc_of[qi].clone()],
        });
        judgments.push(Judgment {
            query_id: query_id.clone(),
            doc_id: doc_of[qi].clone(),
            grade: 1,
        });
        let mut distractors: Vec<&String> = facts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_distractor_for(f))
            .map(|(gi, _)| &doc_of[gi])
            .collect();
        distractors.shuffle(&mut rng);
        if let Some(cap) = spec.distractors_per_query {
            distractors.truncate(cap);
        }
        distractors.sort();
        judgments.extend(distractors.into_iter().map(|d| Judgment {
            query_id: query_id.clone(),
            doc_id: d.clone(),
            grade: 0,
        }));
    }

    let mut scenarios = Vec::new();
    let train_facts: Vec<usize> = (spec.num_queries..facts.len()).collect();
    for i in 0..spec.num_redundancy {
        let novel = i % spec.num_queries;
        let f2 = facts[novel];
        let candidates: Vec<usize> = train_facts
            .iter()
            .copied()
            .filter(|&t| facts[t].entity != f2.entity)
            .collect();
        let Some(&red) = candidates.choose(&mut rng) else {
            break;
        };
        scenarios.push(Scenario {
            scenario_id: format!("r{i:03}"),
            kind: ScenarioKind::Redundancy,
            query_id: None,
            question: format!(
                "{} {}",
                facts[red].doc_text(spec),
                f2.question_text(spec, rng.gen_range(0..2))
            ),
            answer: f2.answer_text(spec),
            doc_ids: vec![doc_of[novel].clone(), doc_of[red].clone()],
        });
    }
    for (i, q) in queries.iter().take(spec.num_repeat_probes).enumerate() {
        let probe_id = format!("p{i:04}");
        docs.push(Doc {
            doc_id: probe_id.clone(),
            text: q.question.clone(),
            split: DocSplit::Probe,
            fact: None,
        });
        scenarios.push(Scenario {
            scenario_id: format!("f{i:03}"),
            kind: ScenarioKind::RepeatedQuestion,
            query_id: Some(q.query_id.clone()),
            question: q.question.clone(),
            answer: q.answer.clone(),
            doc_ids: vec![q.supporting_doc_ids[0].clone(), probe_id],
        });
    }
    for (i, q) in queries.iter().take(spec.num_landscape_pairs).enumerate() {
        let Some(distractor) = judgments.iter().find(|j| j.query_id == q.query_id && j.grade == 0) else {
            continue;
        };
        scenarios.push(Scenario {
            scenario_id: format!("l{i:03}"),
            kind: ScenarioKind::LandscapePair,
            query_id: Some(q.query_id.clone()),
            question: q.question.clone(),
            answer: q.answer.clone(),
            doc_ids: vec![q.supporting_doc_ids[0].clone(), distractor.doc_id.clone()],
        });
    }

    let corpus = Corpus {
        spec: spec.clone(),
        vocab: spec.vocabulary(),
        docs,
        queries,
        judgments,
        scenarios,
    };
    corpus.audit()?;
    Ok(corpus)
}

/// Counts checked by [`Corpus::audit`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub queries: usize,
    pub judged_distractors: usize,
    pub redundancy: usize,
    pub repeat_probes: usize,
    pub landscape_pairs: usize,
}

impl Corpus {
    pub fn doc(&self, doc_id: &str) -> Option<&Doc> {
        self.docs
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &self.docs[i])
            .or_else(|| self.docs.iter().find(|d| d.doc_id == doc_id))
    }

    pub fn query(&self, query_id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    pub fn relevance(&self) -> RelevanceJudgments {
        RelevanceJudgments::from_judgments(self.judgments.iter().cloned())
    }

    /// Judged documents of a query, in ascending id order.
    pub fn candidates(&self, query_id: &str) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .judgments
            .iter()
            .filter(|j| j.query_id == query_id)
            .map(|j| j.doc_id.as_str())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.vocab.encode(text)
    }

    /// Every document with its token ids, for state precomputation.
    pub fn document_records(&self) -> Result<Vec<DocumentRecord>> {
        self.docs
            .iter()
            .map(|d| {
                Ok(DocumentRecord {
                    doc_id: d.doc_id.clone(),
                    token_ids: self.encode(&d.text)?,
                    source_text: Some(d.text.clone()),
                })
            })
            .collect()
    }

    pub fn facts(&self, split: DocSplit) -> Vec<Fact> {
        self.docs
            .iter()
            .filter(|d| d.split == split)
            .filter_map(|d| d.fact)
            .collect()
    }

    /// Check every structural promise the generator makes.
    pub fn audit(&self) -> Result<AuditReport> {
        let fail = |m: String| Err(HarnessError::Audit(m));
        let mut ids = HashSet::new();
        for d in &self.docs {
            if !ids.insert(d.doc_id.as_str()) {
                return fail(format!("duplicate doc id {}", d.doc_id));
            }
            self.encode(&d.text)?;
        }
        let fact_of: HashMap<&str, Fact> = self
            .docs
            .iter()
            .filter_map(|d| d.fact.map(|f| (d.doc_id.as_str(), f)))
            .collect();
        let mut report = AuditReport::default();
        for q in &self.queries {
            self.encode(&q.question)?;
            self.encode(&q.answer)?;
            if q.supporting_doc_ids.is_empty() {
                return fail(format!("{} has no supporting document", q.query_id));
            }
            for s in &q.supporting_doc_ids {
                let Some(doc) = self.doc(s) else {
                    return fail(format!("{} cites missing document {s}", q.query_id));
                };
                if !doc.text.split_whitespace().any(|w| w == q.answer) {
                    return fail(format!("{}: answer not in supporting document", q.query_id));
                }
            }
            let target = fact_of[q.supporting_doc_ids[0].as_str()];
            for j in self
                .judgments
                .iter()
                .filter(|j| j.query_id == q.query_id && j.grade == 0)
            {
                match fact_of.get(j.doc_id.as_str()) {
                    Some(f) if f.is_distractor_for(&target) => report.judged_distractors += 1,
                    _ => return fail(format!("{}: {} is not a valid distractor", q.query_id, j.doc_id)),
                }
            }
            report.queries += 1;
        }
        for s in &self.scenarios {
            self.encode(&s.question)?;
            let texts: Vec<&str> = s
                .doc_ids
                .iter()
                .map(|d| self.doc(d).map(|d| d.text.as_str()))
                .collect::<Option<_>>()
                .ok_or_else(|| HarnessError::Audit(format!("{} cites a missing document", s.scenario_id)))?;
            if texts.len() != 2 {
                return fail(format!("{} must name two documents", s.scenario_id));
            }
            match s.kind {
                ScenarioKind::Redundancy => {
                    let q: HashSet<&str> = s.question.split_whitespace().collect();
                    if !texts[1].split_whitespace().all(|w| q.contains(w)) || !s.question.starts_with(texts[1]) {
                        return fail(format!(
                            "{}: redundant document does not restate the question",
                            s.scenario_id
                        ));
                    }
                    if !texts[0].split_whitespace().any(|w| w == s.answer) || s.question.contains(texts[0]) {
                        return fail(format!("{}: novel document is not novel", s.scenario_id));
                    }
                    report.redundancy += 1;
                }
                ScenarioKind::RepeatedQuestion => {
                    if texts[1] != s.question {
                        return fail(format!("{}: probe does not repeat the question", s.scenario_id));
                    }
                    report.repeat_probes += 1;
                }
                ScenarioKind::LandscapePair => report.landscape_pairs += 1,
            }
        }
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        write_json(&dir.join("spec.json"), &self.spec)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_jsonl(&dir.join("docs.jsonl"), &self.docs)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("judgments.jsonl"), &self.judgments)?;
        write_jsonl(&dir.join("scenarios.jsonl"), &self.scenarios)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut docs: Vec<Doc> = read_jsonl(&dir.join("docs.jsonl"))?;
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let corpus = Corpus {
            spec: read_json(&dir.join("spec.json"))?,
            vocab: read_json(&dir.join("vocab.json"))?,
            docs,
            queries: read_jsonl(&dir.join("queries.jsonl"))?,
            judgments: read_jsonl(&dir.join("judgments.jsonl"))?,
            scenarios: read_jsonl(&dir.join("scenarios.jsonl"))?,
        };
        corpus.audit()?;
        Ok(corpus)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::json(path.display().to_string(), e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| HarnessError::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| HarnessError::json(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}
