//! Situational datapoints and the three validity predicates a generated
//! query must pass: abstraction (names no object), binary (yes/no form) and
//! contextual (needs a look at several objects).

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::CategoryLabels;
use crate::provider::ProviderError;
use crate::scene_graph::{ClassRelation, ConsensusState, SceneGraph, StateValue, Target};

/// Auxiliary verbs accepted as the first token of a yes/no question.
pub const DEFAULT_AUXILIARIES: [&str; 15] = [
    "is", "are", "was", "were", "has", "have", "had", "does", "do", "did", "can", "could",
    "should", "will", "would",
];

/// Extra words blocked from every query besides the scene's class names.
pub const DEFAULT_SYNONYMS: [&str; 3] = ["object", "table", "chair"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub batch_index: usize,
    pub iteration: usize,
    pub model_id: String,
    pub regeneration_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One generated `[query, object-states, relationships]` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationalDatapoint {
    pub id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    #[serde(rename = "states")]
    pub consensus_states: Vec<ConsensusState>,
    #[serde(rename = "relations")]
    pub consensus_relations: Vec<ClassRelation>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub labels: Option<CategoryLabels>,
}

impl SituationalDatapoint {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        states: Vec<ConsensusState>,
        relations: Vec<ClassRelation>,
    ) -> Self {
        SituationalDatapoint {
            id: id.into(),
            query_text: query.into(),
            consensus_states: states,
            consensus_relations: relations,
            provenance: Provenance::default(),
            labels: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("datapoint serializes")
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a JSONL stream of any record type, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(
    reader: impl BufRead,
) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// The set of words a situational query must not contain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocklist {
    words: BTreeSet<String>,
}

impl Blocklist {
    /// Builds the blocklist from a scene vocabulary plus extra words.
    /// `"object"` is always included.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        set.insert("object".to_string());
        Blocklist { words: set }
    }

    pub fn from_scene(scene: &SceneGraph, synonyms: &[String]) -> Self {
        let mut words: Vec<String> = scene.vocabulary().into_iter().map(str::to_string).collect();
        words.extend(DEFAULT_SYNONYMS.iter().map(|s| s.to_string()));
        words.extend(synonyms.iter().cloned());
        Blocklist::new(words)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn extended<S: AsRef<str>>(&self, more: impl IntoIterator<Item = S>) -> Self {
        Blocklist::new(
            self.words
                .iter()
                .map(String::as_str)
                .map(str::to_string)
                .chain(more.into_iter().map(|s| s.as_ref().to_string())),
        )
    }
}

pub(crate) fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn plural_matches(word: &str, token: &str) -> bool {
    word == token || word.strip_suffix('s') == Some(token) || word.strip_suffix("es") == Some(token)
}

/// Returns the blocklist entries found in the query (whole words,
/// case-insensitive, with `s`/`es` plural folding).
pub fn abstraction_violations(query: &str, blocklist: &Blocklist) -> Vec<String> {
    let words = words_of(query);
    let mut hits = Vec::new();
    for entry in blocklist.words() {
        let parts: Vec<&str> = entry.split_whitespace().collect();
        let n = parts.len();
        let found = n > 0
            && words.windows(n).any(|w| {
                w[..n - 1].iter().zip(&parts[..n - 1]).all(|(a, b)| a == b)
                    && plural_matches(&w[n - 1], parts[n - 1])
            });
        if found {
            hits.push(entry.to_string());
        }
    }
    hits
}

pub fn check_abstraction(query: &str, blocklist: &Blocklist) -> bool {
    abstraction_violations(query, blocklist).is_empty()
}

pub fn check_binary(query: &str) -> bool {
    check_binary_with(query, &DEFAULT_AUXILIARIES)
}

pub fn check_binary_with<S: AsRef<str>>(query: &str, auxiliaries: &[S]) -> bool {
    let q = query.trim();
    if !q.ends_with('?') {
        return false;
    }
    match words_of(q).first() {
        Some(first) => auxiliaries
            .iter()
            .any(|a| a.as_ref().eq_ignore_ascii_case(first)),
        None => false,
    }
}

/// Outcome of the contextual check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contextual {
    Pass,
    Fail,
    /// No classifier configured; human validation decides.
    Deferred,
}

/// Which judgement a [`QueryClassifier`] is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// `true` = the query needs an assessment of several objects.
    Contextual,
    /// `true` = situational rather than simple.
    Situational,
    /// `true` = temporal rather than spatial.
    Temporal,
}

pub trait QueryClassifier {
    fn classify(&mut self, axis: Axis, query: &str) -> Result<bool, ProviderError>;
}

#[derive(Debug, Error)]
#[error("classifier failed on datapoint `{id}`: {source}")]
pub struct ClassifierError {
    pub id: String,
    #[source]
    pub source: ProviderError,
}

pub fn check_contextual(
    query: &str,
    classifier: Option<&mut dyn QueryClassifier>,
) -> Result<Contextual, ProviderError> {
    match classifier {
        None => Ok(Contextual::Deferred),
        Some(c) => Ok(if c.classify(Axis::Contextual, query)? {
            Contextual::Pass
        } else {
            Contextual::Fail
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub abstraction_ok: bool,
    pub binary_ok: bool,
    pub contextual: Contextual,
    /// Structural consensus checks against the scene.
    pub consensus_ok: bool,
    pub reasons: Vec<String>,
}

impl ValidityVerdict {
    pub fn accepted(&self) -> bool {
        self.abstraction_ok
            && self.binary_ok
            && self.consensus_ok
            && self.contextual != Contextual::Fail
    }
}

/// Validation settings shared across a batch.
#[derive(Debug, Clone)]
pub struct Validator {
    pub blocklist: Blocklist,
    pub auxiliaries: Vec<String>,
}

impl Validator {
    pub fn new(blocklist: Blocklist) -> Self {
        Validator {
            blocklist,
            auxiliaries: DEFAULT_AUXILIARIES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn for_scene(scene: &SceneGraph) -> Self {
        Validator::new(Blocklist::from_scene(scene, &[]))
    }

    pub fn validate(
        &self,
        d: &SituationalDatapoint,
        scene: &SceneGraph,
        classifier: Option<&mut dyn QueryClassifier>,
    ) -> Result<ValidityVerdict, ClassifierError> {
        let mut reasons = Vec::new();

        let hits = abstraction_violations(&d.query_text, &self.blocklist);
        let abstraction_ok = hits.is_empty();
        if !abstraction_ok {
            reasons.push(format!("abstraction: query names {}", hits.join(", ")));
        }

        let binary_ok = check_binary_with(&d.query_text, &self.auxiliaries);
        if !binary_ok {
            reasons.push("binary: query is not a yes/no question".to_string());
        }

        let contextual =
            check_contextual(&d.query_text, classifier).map_err(|source| ClassifierError {
                id: d.id.clone(),
                source,
            })?;
        if contextual == Contextual::Fail {
            reasons.push("contextual: classifier judged the query not situational".to_string());
        }

        let before = reasons.len();
        consensus_reasons(d, scene, &mut reasons);
        let consensus_ok = reasons.len() == before;

        Ok(ValidityVerdict {
            abstraction_ok,
            binary_ok,
            contextual,
            consensus_ok,
            reasons,
        })
    }
}

fn consensus_reasons(d: &SituationalDatapoint, scene: &SceneGraph, reasons: &mut Vec<String>) {
    if d.consensus_states.is_empty() {
        reasons.push("no consensus states".to_string());
    }
    let domains = scene.class_domains();
    for cs in &d.consensus_states {
        match domains.get(cs.class_name.as_str()) {
            None if cs.state == StateValue::Absent => {}
            None => reasons.push(format!("unknown class {}", cs.class_name)),
            Some(ds) if !ds.contains(&cs.state.domain()) => reasons.push(format!(
                "class {} has no {} domain for {}",
                cs.class_name,
                cs.state.domain(),
                cs.state
            )),
            Some(_) => {}
        }
    }
    for rel in &d.consensus_relations {
        if !scene.has_class(&rel.subject) {
            reasons.push(format!("unknown class {}", rel.subject));
            continue;
        }
        if let Target::Object(t) = &rel.target {
            if !scene.has_class(t) {
                reasons.push(format!("unknown class {t}"));
                continue;
            }
        }
        if let Err(e) = scene.check_relation(rel) {
            reasons.push(e.to_string());
        }
    }
}
