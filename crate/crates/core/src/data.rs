//! Core entities, the multi-domain corpus container and its on-disk format.
//!
//! A corpus directory holds a `manifest.json` listing the domains and, per
//! domain, a CSV log file (`student_id,question_id,score`) and a JSON array of
//! question records (`{"id", "concepts", "text"}`). Student ids are global across
//! domains; question and concept ids are scoped to their domain.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOG_HEADER: [&str; 3] = ["student_id", "question_id", "score"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

/// One first-attempt response.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PracticeLog {
    pub student_id: String,
    pub question_id: String,
    pub score: u8,
    pub domain_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    #[serde(rename = "id")]
    pub question_id: String,
    #[serde(skip)]
    pub domain_id: String,
    #[serde(rename = "concepts")]
    pub concept_ids: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub role: DomainRole,
    /// Sorted, unique; every student has at least one log.
    pub students: Vec<String>,
    pub questions: Vec<Question>,
    /// Sorted union of all question concept ids.
    pub concepts: Vec<String>,
    pub logs: Vec<PracticeLog>,
}

impl DomainDataset {
    /// Builds a dataset and checks every invariant: binary scores, known
    /// questions, non-empty concept lists and one log per (student, question).
    pub fn new(
        domain_id: impl Into<String>,
        role: DomainRole,
        mut questions: Vec<Question>,
        mut logs: Vec<PracticeLog>,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        let mut seen_q = HashSet::new();
        let mut concepts = BTreeSet::new();
        for (i, q) in questions.iter_mut().enumerate() {
            if !seen_q.insert(q.question_id.clone()) {
                return Err(Error::Validation(format!(
                    "domain {domain_id}: duplicate question id `{}` (record {})",
                    q.question_id,
                    i + 1
                )));
            }
            if q.concept_ids.is_empty() {
                return Err(Error::Validation(format!(
                    "domain {domain_id}: question `{}` has no concepts",
                    q.question_id
                )));
            }
            q.domain_id = domain_id.clone();
            concepts.extend(q.concept_ids.iter().cloned());
        }
        let mut seen_pair = HashSet::new();
        let mut students = BTreeSet::new();
        for (i, log) in logs.iter_mut().enumerate() {
            if log.score > 1 {
                return Err(Error::Validation(format!(
                    "domain {domain_id}: log {} has score {} (expected 0 or 1)",
                    i + 1,
                    log.score
                )));
            }
            if !seen_q.contains(&log.question_id) {
                return Err(Error::Validation(format!(
                    "domain {domain_id}: log {} references unknown question `{}`",
                    i + 1,
                    log.question_id
                )));
            }
            if !seen_pair.insert((log.student_id.clone(), log.question_id.clone())) {
                return Err(Error::Validation(format!(
                    "domain {domain_id}: duplicate first-attempt log ({}, {})",
                    log.student_id, log.question_id
                )));
            }
            log.domain_id = domain_id.clone();
            students.insert(log.student_id.clone());
        }
        Ok(Self {
            domain_id,
            role,
            students: students.into_iter().collect(),
            questions,
            concepts: concepts.into_iter().collect(),
            logs,
        })
    }

    pub fn concept_index(&self) -> HashMap<String, usize> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect()
    }

    pub fn question_index(&self) -> HashMap<&str, usize> {
        self.questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.question_id.as_str(), i))
            .collect()
    }

    pub fn student_index(&self) -> HashMap<&str, usize> {
        self.students
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == id)
    }

    fn logs_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(LOG_HEADER).expect("in-memory write");
        for log in &self.logs {
            let score = log.score.to_string();
            w.write_record([log.student_id.as_str(), log.question_id.as_str(), score.as_str()])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    fn questions_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(&self.questions).expect("questions serialize");
        s.push('\n');
        s.into_bytes()
    }
}

/// Early-bird / unseen partition of the target domain's students.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub early_bird_ids: Vec<String>,
    pub unseen_ids: Vec<String>,
    #[serde(skip)]
    pub early_bird_logs: Vec<PracticeLog>,
}

/// Samples `ceil(fraction * |students|)` early birds uniformly without replacement.
pub fn make_target_split(
    dataset: &DomainDataset,
    early_bird_fraction: f64,
    seed: u64,
) -> Result<TargetSplit> {
    if dataset.role != DomainRole::Target {
        return Err(Error::Precondition(format!(
            "domain {} is not a target domain",
            dataset.domain_id
        )));
    }
    if !(early_bird_fraction > 0.0 && early_bird_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "early-bird fraction must lie in (0, 1], got {early_bird_fraction}"
        )));
    }
    let n = dataset.students.len();
    if n == 0 {
        return Err(Error::Precondition(format!(
            "target domain {} has no students with logs",
            dataset.domain_id
        )));
    }
    // 0.07 * 100 = 7.000000000000001 must still give 7
    let wanted = ((early_bird_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = wanted.min(n);
    if count == 0 {
        return Err(Error::Precondition(
            "early-bird fraction yields zero early birds; at least one is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    let chosen: HashSet<usize> = picked.iter().copied().collect();
    let early_bird_ids: Vec<String> = picked.iter().map(|&i| dataset.students[i].clone()).collect();
    let unseen_ids = (0..n)
        .filter(|i| !chosen.contains(i))
        .map(|i| dataset.students[i].clone())
        .collect();
    let eb: HashSet<&str> = early_bird_ids.iter().map(String::as_str).collect();
    let early_bird_logs = dataset
        .logs
        .iter()
        .filter(|l| eb.contains(l.student_id.as_str()))
        .cloned()
        .collect();
    Ok(TargetSplit {
        early_bird_ids,
        unseen_ids,
        early_bird_logs,
    })
}

impl TargetSplit {
    /// Reattaches early-bird logs after deserialization.
    pub fn with_logs_from(mut self, dataset: &DomainDataset) -> Self {
        let eb: HashSet<&str> = self.early_bird_ids.iter().map(String::as_str).collect();
        self.early_bird_logs = dataset
            .logs
            .iter()
            .filter(|l| eb.contains(l.student_id.as_str()))
            .cloned()
            .collect();
        self
    }
}

/// Binary concept-association mask of a question.
pub fn q_mask(question: &Question, concept_index: &HashMap<String, usize>) -> Result<Vec<f64>> {
    if question.concept_ids.is_empty() {
        return Err(Error::Precondition(format!(
            "question `{}` has no concepts",
            question.question_id
        )));
    }
    let mut mask = vec![0.0; concept_index.len()];
    for c in &question.concept_ids {
        let &i = concept_index.get(c).ok_or_else(|| {
            Error::Validation(format!(
                "question `{}` references unknown concept `{c}`",
                question.question_id
            ))
        })?;
        mask[i] = 1.0;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    domains: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    role: DomainRole,
    logs: String,
    questions: String,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_logs(path: &Path, domain_id: &str) -> Result<Vec<PracticeLog>> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::record(&file, 1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::record(&file, 1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != LOG_HEADER {
        return Err(Error::record(
            &file,
            1,
            format!("expected header `{}`", LOG_HEADER.join(",")),
        ));
    }
    let mut logs = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::record(&file, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 3 {
            return Err(Error::record(&file, line, "expected 3 fields"));
        }
        let score = match &row[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::record(
                    &file,
                    line,
                    format!("score must be 0 or 1, got `{other}`"),
                ))
            }
        };
        if row[0].is_empty() || row[1].is_empty() {
            return Err(Error::record(&file, line, "empty identifier"));
        }
        if !seen.insert((row[0].to_string(), row[1].to_string())) {
            return Err(Error::record(
                &file,
                line,
                format!("duplicate first-attempt log ({}, {})", &row[0], &row[1]),
            ));
        }
        logs.push(PracticeLog {
            student_id: row[0].to_string(),
            question_id: row[1].to_string(),
            score,
            domain_id: domain_id.to_string(),
        });
    }
    Ok(logs)
}

fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let file = path.display().to_string();
    let text = read_to_string(path)?;
    let questions: Vec<Question> =
        serde_json::from_str(&text).map_err(|e| Error::record(&file, e.line(), e.to_string()))?;
    for (i, q) in questions.iter().enumerate() {
        if q.concept_ids.is_empty() {
            return Err(Error::record(
                &file,
                i + 1,
                format!("question `{}` has no concepts (record {})", q.question_id, i + 1),
            ));
        }
    }
    Ok(questions)
}

/// Loads and validates every domain listed in `dir/manifest.json`, sorted by domain id.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_to_string(&manifest_path)?).map_err(|e| {
        Error::record(manifest_path.display().to_string(), e.line(), e.to_string())
    })?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        if !ids.insert(entry.id.clone()) {
            return Err(Error::Validation(format!(
                "manifest lists domain `{}` twice",
                entry.id
            )));
        }
        let logs_path = dir.join(&entry.logs);
        let questions_path = dir.join(&entry.questions);
        let logs = read_logs(&logs_path, &entry.id)?;
        let questions = read_questions(&questions_path)?;
        let known: HashSet<&str> = questions.iter().map(|q| q.question_id.as_str()).collect();
        for (i, log) in logs.iter().enumerate() {
            if !known.contains(log.question_id.as_str()) {
                // header occupies line 1
                return Err(Error::record(
                    logs_path.display().to_string(),
                    i + 2,
                    format!("dangling reference to question `{}`", log.question_id),
                ));
            }
        }
        out.push(DomainDataset::new(entry.id.clone(), entry.role, questions, logs)?);
    }
    out.sort_by(|a, b| a.domain_id.cmp(&b.domain_id));
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the canonical on-disk form of `datasets` under `dir` (created if absent).
pub fn write_corpus(datasets: &[DomainDataset], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest { domains: Vec::new() };
    for d in datasets {
        let sub = dir.join(&d.domain_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_file(&sub.join("logs.csv"), &d.logs_csv())?;
        write_file(&sub.join("questions.json"), &d.questions_json())?;
        manifest.domains.push(ManifestEntry {
            id: d.domain_id.clone(),
            role: d.role,
            logs: format!("{}/logs.csv", d.domain_id),
            questions: format!("{}/questions.json", d.domain_id),
        });
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// SHA-256 over the canonical serialization of the corpus.
pub fn corpus_digest(datasets: &[DomainDataset]) -> String {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(d.domain_id.as_bytes());
        h.update([0u8]);
        h.update(match d.role {
            DomainRole::Source => b"source".as_slice(),
            DomainRole::Target => b"target".as_slice(),
        });
        h.update(d.logs_csv());
        h.update(d.questions_json());
    }
    hex::encode(h.finalize())
}
