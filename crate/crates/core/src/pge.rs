//! Prompt-Generate-Evaluate loop.
//!
//! Each iteration renders a system prompt from the scene and the current
//! cluster representatives, asks the chat model for `n` datapoints, validates
//! and embeds them, and gates the batch on similarity to the query database.
//! A batch that is too similar is sent back within the same conversation with
//! a regeneration prompt, up to `max_regen` times.

use std::collections::BTreeSet;

use serde::de::Deserialize;
use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

use crate::datapoint::{
    ClassifierError, Provenance, QueryClassifier, SituationalDatapoint, Validator,
};
use crate::embedding::{
    cluster_representatives, max_similarity, EmbeddingError, EmbeddingProvider, QueryDatabase,
    SimilarityReport,
};
use crate::provider::{text_hash, ChatProvider, CompletionParams, Message, ProviderError};
use crate::scene_graph::{ClassRelation, ConsensusState, SceneGraph, StateValue, Target};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Datapoints requested per batch.
    pub n: usize,
    /// Maximum iterations.
    pub m: usize,
    /// Representatives fed back into the system prompt.
    pub k: usize,
    /// Per-query cosine similarity threshold.
    pub tau: f64,
    /// Percentage of similar queries above which a batch is regenerated.
    pub x: f64,
    pub max_regen: usize,
    /// Stop once the database holds this many queries.
    pub target_size: usize,
    pub model_id: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n: 10,
            m: 200,
            k: 10,
            tau: 0.90,
            x: 30.0,
            max_regen: 3,
            target_size: 2000,
            model_id: "gpt-4".to_string(),
            temperature: 0.7,
            seed: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid generation config: {0}")]
pub struct ConfigError(pub String);

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("max_regen", self.max_regen),
        ] {
            if v < 1 {
                return Err(ConfigError(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..=100.0).contains(&self.x) {
            return Err(ConfigError(format!("x {} outside [0, 100]", self.x)));
        }
        Ok(())
    }

    fn params(&self) -> CompletionParams {
        CompletionParams {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

pub const SYSTEM_TEMPLATE: &str = "\
I have a list of objects, and their states, and relationships in a household.
Object states are listed in the OBJ_STATE_DICT dictionary below. Each item has the format OBJECT: [STATES].
STATES, IF PRESENT, can switch between ON/OFF and OPEN/CLOSED, and PRESENT/NONE. Do not conjure any new objects or states.
OBJ_REL_DICT contains the initial relationships between the objects. These can be changed. For instance, \"apple INSIDE fridge\" is a valid relation.
OBJ_STATE_DICT :-
{
{OBJ_STATE_DICT}
}
OBJ_REL_DICT :-
{
{OBJ_REL_DICT}
}
GENERATED_QUERIES :-
{
{GENERATED_QUERIES}
}";

pub const USER_TEMPLATE: &str = "\
Using OBJ_STATE_DICT and OBJ_REL_DICT, can you generate {X} potential questions, states and relationships that the user might ask about the environment?
These must be about a potential scenario, requiring situational awareness and a consensus on multiple object, their states and relationships.
The output should be lines of the form [Question, Object-State Pairs, Relationships].
Make sure you generate questions very different from those in GENERATED_QUERIES. Get creative with the potential scenarios!
Make sure to use an exhaustive set of relationships and object-state pairs for each query.
The query must have a Yes/No answer.
The query must not directly reference any object or even contain the word 'object'.
Format: reply with a JSON array only. Each element is an object with keys \"query\" (the question), \"states\" (array of [OBJECT, STATE] pairs) and \"relations\" (array of [SUBJECT, RELATION, TARGET] triples).";

pub const REGEN_TEMPLATE: &str = "\
{X}% of the questions are similar to what you've already generated earlier! Try again, give me {Y} more.
QUERIES:
{QUERIES}";

/// Replaces `{NAME}` placeholders; unknown braces are left alone.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PromptBundle {
    pub system_template: String,
    pub user_template: String,
    pub regen_template: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        PromptBundle {
            system_template: SYSTEM_TEMPLATE.to_string(),
            user_template: USER_TEMPLATE.to_string(),
            regen_template: REGEN_TEMPLATE.to_string(),
        }
    }
}

/// `OBJECT: [STATES]` lines, one per class, listing every reachable state.
pub fn obj_state_dict(scene: &SceneGraph) -> String {
    scene
        .class_domains()
        .into_iter()
        .map(|(class, domains)| {
            let values: Vec<&str> = domains
                .iter()
                .flat_map(|d| d.values())
                .map(StateValue::as_str)
                .collect();
            format!("{class}: [{}]", values.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// `subject RELATION target` lines over class names; room placements appear
/// as `INSIDE <room>`.
pub fn obj_rel_dict(scene: &SceneGraph) -> String {
    let mut lines = BTreeSet::new();
    for r in scene.relationships() {
        let subject = &scene.object(&r.subject).expect("validated").class_name;
        let target = match &r.target {
            Target::Room(room) => room.as_str().to_string(),
            Target::Object(id) => scene.object(id).expect("validated").class_name.clone(),
        };
        lines.insert(format!("{subject} {} {target}", r.relation));
    }
    for o in scene.objects() {
        if let Some(room) = o.room {
            lines.insert(format!("{} INSIDE {room}", o.class_name));
        }
    }
    lines.into_iter().collect::<Vec<_>>().join("\n")
}

fn format_percent(p: f64) -> String {
    let rounded = (p * 100.0).round() / 100.0;
    if rounded.fract() == 0.0 {
        format!("{rounded:.0}")
    } else {
        format!("{rounded}")
    }
}

impl PromptBundle {
    pub fn render_system(&self, scene: &SceneGraph, representatives: &[String]) -> String {
        render_template(
            &self.system_template,
            &[
                ("OBJ_STATE_DICT", &obj_state_dict(scene)),
                ("OBJ_REL_DICT", &obj_rel_dict(scene)),
                ("GENERATED_QUERIES", &representatives.join("\n")),
            ],
        )
    }

    pub fn render_user(&self, n: usize) -> String {
        render_template(&self.user_template, &[("X", &n.to_string())])
    }

    pub fn render_regen(&self, percent_similar: f64, wanted: usize, queries: &[String]) -> String {
        render_template(
            &self.regen_template,
            &[
                ("X", &format_percent(percent_similar)),
                ("Y", &wanted.to_string()),
                ("QUERIES", &queries.join("\n")),
            ],
        )
    }
}

pub fn render_system_prompt(scene: &SceneGraph, representatives: &[String]) -> String {
    PromptBundle::default().render_system(scene, representatives)
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ParseFailure {
    /// Byte offset of the offending element or line in the raw response.
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponse {
    pub datapoints: Vec<SituationalDatapoint>,
    pub failures: Vec<ParseFailure>,
}

/// Parses a model reply. A JSON array of `{query, states, relations}`
/// objects is preferred; otherwise each `[Question, [states], [relations]]`
/// line is parsed on its own. Malformed elements become failures.
pub fn parse_response(raw: &str) -> ParsedResponse {
    match find_json_array(raw) {
        Some(elements) => parse_json_elements(raw, &elements),
        None => parse_bracketed_lines(raw),
    }
}

fn find_json_array(raw: &str) -> Option<Vec<&RawValue>> {
    for (pos, _) in raw.match_indices('[') {
        let mut de = serde_json::Deserializer::from_str(&raw[pos..]);
        if let Ok(elements) = Vec::<&RawValue>::deserialize(&mut de) {
            if elements.iter().any(|e| e.get().starts_with('{')) {
                return Some(elements);
            }
        }
    }
    None
}

fn offset_in(raw: &str, part: &str) -> usize {
    (part.as_ptr() as usize).saturating_sub(raw.as_ptr() as usize)
}

fn parse_json_elements(raw: &str, elements: &[&RawValue]) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    for (i, el) in elements.iter().enumerate() {
        let offset = offset_in(raw, el.get());
        match serde_json::from_str::<Value>(el.get())
            .map_err(|e| e.to_string())
            .and_then(|v| datapoint_from_json(i, &v))
        {
            Ok(d) => out.datapoints.push(d),
            Err(reason) => out.failures.push(ParseFailure { offset, reason }),
        }
    }
    out
}

fn field<'v>(obj: &'v serde_json::Map<String, Value>, names: &[&str]) -> Option<&'v Value> {
    obj.iter()
        .find(|(k, _)| names.iter().any(|n| k.eq_ignore_ascii_case(n)))
        .map(|(_, v)| v)
}

fn datapoint_from_json(index: usize, v: &Value) -> Result<SituationalDatapoint, String> {
    let obj = v.as_object().ok_or("element is not an object")?;
    let query = field(obj, &["query", "question"])
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .ok_or("missing query")?;
    let states_v =
        field(obj, &["states", "object_states", "object-states"]).ok_or("missing states")?;
    let states = json_states(states_v)?;
    let relations = match field(obj, &["relations", "relationships", "object_relationships"]) {
        None | Some(Value::Null) => Vec::new(),
        Some(r) => json_relations(r)?,
    };
    let mut d = SituationalDatapoint::new(format!("cand-{index}"), query, states, relations);
    d.provenance.batch_index = index;
    Ok(d)
}

fn state_values(v: &Value) -> Result<Vec<StateValue>, String> {
    match v {
        Value::String(s) => Ok(vec![s.parse()?]),
        Value::Array(items) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .ok_or("state is not a string".to_string())?
                    .parse()
            })
            .collect(),
        _ => Err("state is not a string".into()),
    }
}

fn json_states(v: &Value) -> Result<Vec<ConsensusState>, String> {
    let mut out = Vec::new();
    match v {
        Value::Object(map) => {
            for (class, s) in map {
                for value in state_values(s)? {
                    out.push(ConsensusState::new(class.trim(), value));
                }
            }
        }
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::Array(pair) if pair.len() == 2 => {
                        let class = pair[0].as_str().ok_or("state class is not a string")?;
                        for value in state_values(&pair[1])? {
                            out.push(ConsensusState::new(class.trim(), value));
                        }
                    }
                    Value::Object(o) => {
                        let class = field(o, &["object", "class"])
                            .and_then(Value::as_str)
                            .ok_or("state entry missing object")?;
                        let s =
                            field(o, &["state", "states"]).ok_or("state entry missing state")?;
                        for value in state_values(s)? {
                            out.push(ConsensusState::new(class.trim(), value));
                        }
                    }
                    Value::String(s) => out.extend(states_from_text(s)?),
                    other => return Err(format!("invalid state entry {other}")),
                }
            }
        }
        _ => return Err("states is not a list".into()),
    }
    Ok(out)
}

fn json_relations(v: &Value) -> Result<Vec<ClassRelation>, String> {
    let items = v.as_array().ok_or("relations is not a list")?;
    let mut out = Vec::new();
    for item in items {
        match item {
            Value::Array(t) if t.len() == 3 => {
                let parts: Vec<&str> = t
                    .iter()
                    .map(|x| x.as_str().ok_or("relation part is not a string"))
                    .collect::<Result<_, _>>()?;
                out.push(ClassRelation::new(
                    parts[0].trim(),
                    parts[1].parse()?,
                    Target::from(parts[2].to_string()),
                ));
            }
            Value::String(s) => {
                if let Some(r) = relation_from_text(s)? {
                    out.push(r);
                }
            }
            other => return Err(format!("invalid relation entry {other}")),
        }
    }
    Ok(out)
}

fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| c == '\'' || c == '"' || c == '`' || c.is_whitespace())
}

fn is_ellipsis(s: &str) -> bool {
    let t = s.trim();
    !t.is_empty() && t.chars().all(|c| c == '.' || c == '…')
}

/// Splits on commas outside of square brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

/// Returns the first balanced `[...]` group in `s` (without the brackets) and
/// the remainder after it.
fn bracket_group(s: &str) -> Option<(&str, &str)> {
    let open = s.find('[')?;
    let mut depth = 0;
    for (i, c) in s[open..].char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    let end = open + i;
                    return Some((&s[open + 1..end], &s[end + 1..]));
                }
            }
            _ => {}
        }
    }
    None
}

/// `lightswitch: ['On'], towels: Present` style entries.
fn states_from_text(text: &str) -> Result<Vec<ConsensusState>, String> {
    let mut out = Vec::new();
    for item in split_top_level(text) {
        let item = item.trim().trim_end_matches(['.', '…']).trim();
        if item.is_empty() || is_ellipsis(item) {
            continue;
        }
        let (class, states) = item
            .split_once(':')
            .ok_or_else(|| format!("state entry `{item}` has no ':'"))?;
        let class = strip_quotes(class);
        let states = states.trim().trim_start_matches('[').trim_end_matches(']');
        for s in states.split(',') {
            if is_ellipsis(s) || strip_quotes(s).is_empty() {
                continue;
            }
            out.push(ConsensusState::new(class, strip_quotes(s).parse()?));
        }
    }
    Ok(out)
}

fn relation_from_text(text: &str) -> Result<Option<ClassRelation>, String> {
    let item = strip_quotes(text.trim().trim_end_matches(['.', '…']));
    if item.is_empty() || is_ellipsis(item) {
        return Ok(None);
    }
    let words: Vec<&str> = item.split_whitespace().collect();
    if words.len() != 3 {
        return Err(format!(
            "relation `{item}` is not `subject RELATION target`"
        ));
    }
    Ok(Some(ClassRelation::new(
        strip_quotes(words[0]),
        words[1].parse()?,
        Target::from(strip_quotes(words[2]).to_string()),
    )))
}

fn parse_bracketed_line(line: &str, index: usize) -> Result<SituationalDatapoint, String> {
    let (inner, _) = bracket_group(line).ok_or("unbalanced brackets")?;
    let q_end = inner.find('?').ok_or("no question mark")?;
    let query = strip_quotes(&inner[..=q_end]).to_string();
    if query.len() <= 1 {
        return Err("missing query".into());
    }
    let rest = &inner[q_end + 1..];
    let (states_text, rest) = bracket_group(rest).ok_or("missing states")?;
    let states = states_from_text(states_text)?;
    let mut relations = Vec::new();
    if let Some((rel_text, _)) = bracket_group(rest) {
        for item in split_top_level(rel_text) {
            if let Some(r) = relation_from_text(item)? {
                relations.push(r);
            }
        }
    }
    let mut d = SituationalDatapoint::new(format!("cand-{index}"), query, states, relations);
    d.provenance.batch_index = index;
    Ok(d)
}

fn parse_bracketed_lines(raw: &str) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    let mut offset = 0;
    let mut index = 0;
    for line in raw.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len();
        let Some(open) = line.find('[') else { continue };
        let prefix = &line[..open];
        if !prefix
            .chars()
            .all(|c| c.is_ascii_digit() || c.is_whitespace() || ".)-*".contains(c))
        {
            continue;
        }
        match parse_bracketed_line(&line[open..], index) {
            Ok(d) => out.datapoints.push(d),
            Err(reason) => out.failures.push(ParseFailure {
                offset: line_offset + open,
                reason,
            }),
        }
        index += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Generation loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Rejection {
    pub query: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AttemptRecord {
    pub response_sha256: String,
    pub parsed: usize,
    pub parse_failures: Vec<ParseFailure>,
    pub rejected: Vec<Rejection>,
    pub similarity: SimilarityReport,
    pub regenerate: bool,
}

/// One line of the generation log.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub attempts: Vec<AttemptRecord>,
    pub regenerations: usize,
    pub accepted_ids: Vec<String>,
    /// Queries dropped for exceeding tau against the database.
    pub dropped_similar: Vec<String>,
    pub db_size_after: usize,
    /// Representative ids injected into the next system prompt.
    pub representatives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutcome {
    pub db: QueryDatabase,
    pub datapoints: Vec<SituationalDatapoint>,
    pub log: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum GenerationFailure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A failed run together with everything accepted before the failure.
#[derive(Debug, Error)]
#[error("generation aborted: {failure}")]
pub struct GenerationError {
    pub failure: GenerationFailure,
    pub partial: Box<GenerationOutcome>,
}

pub struct PgeEngine<'a> {
    scene: &'a SceneGraph,
    config: GenerationConfig,
    prompts: PromptBundle,
    validator: Validator,
}

impl<'a> PgeEngine<'a> {
    pub fn new(scene: &'a SceneGraph, config: GenerationConfig) -> Self {
        PgeEngine {
            scene,
            config,
            prompts: PromptBundle::default(),
            validator: Validator::for_scene(scene),
        }
    }

    pub fn with_prompts(mut self, prompts: PromptBundle) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_validator(mut self, validator: Validator) -> Self {
        self.validator = validator;
        self
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn run(
        &self,
        chat: &mut dyn ChatProvider,
        embedder: &mut dyn EmbeddingProvider,
        mut classifier: Option<&mut dyn QueryClassifier>,
    ) -> Result<GenerationOutcome, GenerationError> {
        let mut out = GenerationOutcome::default();
        if let Err(e) = self.config.validate() {
            return Err(GenerationError {
                failure: e.into(),
                partial: Box::new(out),
            });
        }
        for iteration in 1..=self.config.m {
            if out.db.len() >= self.config.target_size {
                break;
            }
            let mut record = IterationRecord {
                iteration,
                attempts: Vec::new(),
                regenerations: 0,
                accepted_ids: Vec::new(),
                dropped_similar: Vec::new(),
                db_size_after: out.db.len(),
                representatives: out.db.representatives().to_vec(),
                error: None,
            };
            let result = self.iterate(
                iteration,
                chat,
                embedder,
                reborrow(&mut classifier),
                &mut out,
                &mut record,
            );
            record.db_size_after = out.db.len();
            if let Err(failure) = result {
                record.error = Some(failure.to_string());
                out.log.push(record);
                return Err(GenerationError {
                    failure,
                    partial: Box::new(out),
                });
            }
            let reps = cluster_representatives(&out.db, self.config.k);
            out.db.set_representatives(reps.clone());
            record.representatives = reps;
            out.log.push(record);
        }
        Ok(out)
    }

    fn iterate(
        &self,
        iteration: usize,
        chat: &mut dyn ChatProvider,
        embedder: &mut dyn EmbeddingProvider,
        mut classifier: Option<&mut dyn QueryClassifier>,
        out: &mut GenerationOutcome,
        record: &mut IterationRecord,
    ) -> Result<(), GenerationFailure> {
        let cfg = &self.config;
        let rep_texts: Vec<String> = out
            .db
            .representatives()
            .iter()
            .filter_map(|id| out.db.get(id).map(|e| e.text.clone()))
            .collect();
        let mut conversation = vec![
            Message::system(self.prompts.render_system(self.scene, &rep_texts)),
            Message::user(self.prompts.render_user(cfg.n)),
        ];
        let params = cfg.params();

        loop {
            let raw = chat.complete(&conversation, &params)?;
            let parsed = parse_response(&raw);

            let mut valid = Vec::new();
            let mut rejected = Vec::new();
            for d in parsed.datapoints.iter() {
                let verdict = self
                    .validator
                    .validate(d, self.scene, reborrow(&mut classifier))?;
                if verdict.accepted() {
                    valid.push(d.clone());
                } else {
                    rejected.push(Rejection {
                        query: d.query_text.clone(),
                        reasons: verdict.reasons,
                    });
                }
            }

            let texts: Vec<String> = valid.iter().map(|d| d.query_text.clone()).collect();
            let embeddings = if texts.is_empty() {
                Vec::new()
            } else {
                embedder.embed(&texts)?
            };
            let similarity = max_similarity(&embeddings, &out.db, cfg.tau, cfg.x)?;
            let regenerate =
                similarity.exceeds_batch_threshold() && record.regenerations < cfg.max_regen;
            record.attempts.push(AttemptRecord {
                response_sha256: text_hash(&raw),
                parsed: parsed.datapoints.len(),
                parse_failures: parsed.failures,
                rejected,
                similarity: similarity.clone(),
                regenerate,
            });

            if regenerate {
                let offending: Vec<String> = similarity
                    .similar_indices()
                    .into_iter()
                    .map(|i| texts[i].clone())
                    .collect();
                conversation.push(Message::assistant(raw));
                conversation.push(Message::user(self.prompts.render_regen(
                    similarity.batch_percent_similar,
                    cfg.n,
                    &offending,
                )));
                record.regenerations += 1;
                continue;
            }

            // Accept in order, gating each query against everything accepted
            // before it, including earlier queries of this batch.
            for (mut d, emb) in valid.into_iter().zip(embeddings) {
                if record.accepted_ids.len() >= cfg.n || out.db.len() >= cfg.target_size {
                    break;
                }
                if out.db.nearest_similarity(&emb)? > cfg.tau {
                    record.dropped_similar.push(d.query_text);
                    continue;
                }
                d.id = format!("sq{:05}", out.db.len() + 1);
                d.provenance = Provenance {
                    batch_index: d.provenance.batch_index,
                    iteration,
                    model_id: cfg.model_id.clone(),
                    regeneration_count: record.regenerations,
                    temperature: Some(cfg.temperature),
                    seed: cfg.seed,
                };
                out.db.insert(d.id.clone(), d.query_text.clone(), emb)?;
                record.accepted_ids.push(d.id.clone());
                out.datapoints.push(d);
            }
            return Ok(());
        }
    }
}

fn reborrow<'a>(
    c: &'a mut Option<&mut dyn QueryClassifier>,
) -> Option<&'a mut dyn QueryClassifier> {
    match c {
        Some(c) => Some(&mut **c),
        None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{load_scene, Relation, Room};

    fn scene() -> SceneGraph {
        load_scene(include_str!("../../../fixtures/house.json")).unwrap()
    }

    #[test]
    fn system_prompt_first_iteration() {
        let p = render_system_prompt(&scene(), &[]);
        assert!(p.contains("OBJ_STATE_DICT :-"));
        assert!(p.contains("OBJ_REL_DICT :-"));
        assert!(p.contains("GENERATED_QUERIES :-\n{\n\n}"));
        assert!(p.contains("Do not conjure any new objects or states"));
        assert!(p.contains("tv: [ON, OFF]\n"));
        assert!(p.contains("microwave: [ON, OFF, OPEN, CLOSED]"));
        assert!(p.contains("apple INSIDE fridge"));
        assert!(p.contains("fridge INSIDE kitchen"));
    }

    #[test]
    fn representatives_appear_verbatim_once() {
        let q = "Is the bathroom ready for a shower?".to_string();
        let p = render_system_prompt(&scene(), std::slice::from_ref(&q));
        assert_eq!(p.matches(&q).count(), 1);
    }

    #[test]
    fn state_dict_lines_match_scene_domains() {
        let s = scene();
        let dict = obj_state_dict(&s);
        for o in s.objects() {
            let values: Vec<&str> = o
                .domains
                .iter()
                .flat_map(|d| d.values())
                .map(|v| v.as_str())
                .collect();
            let line = format!("{}: [{}]", o.class_name, values.join(", "));
            assert!(dict.lines().any(|l| l == line), "missing {line}");
        }
        assert_eq!(dict.lines().count(), s.vocabulary().len());
    }

    #[test]
    fn user_and_regen_prompts_carry_rules() {
        let b = PromptBundle::default();
        let u = b.render_user(5);
        assert!(u.contains("can you generate 5 potential questions"));
        assert!(u.contains("Get creative with the potential scenarios!"));
        assert!(u.contains("The query must have a Yes/No answer."));
        assert!(u.contains(
            "The query must not directly reference any object or even contain the word 'object'."
        ));
        let r = b.render_regen(60.0, 5, &["Is it?".into()]);
        assert!(r.starts_with("60% of the questions are similar"));
        assert!(r.contains("Try again, give me 5 more."));
        assert!(r.ends_with("QUERIES:\nIs it?"));
        assert!(b.render_regen(33.333, 3, &[]).starts_with("33.33%"));
    }

    #[test]
    fn parses_json_array() {
        let raw = r#"Here you go:
```json
[{"query": "Is the bathroom ready for a shower?", "states": [["lightswitch", "ON"], ["towels", "PRESENT"]], "relations": [["towels", "INSIDE", "bathroom"]]},
 {"query": "Is the kitchen ready for cooking?", "states": {"stove": "ON"}},
 {"query": "Is the house ready for sleeptime?", "states": [{"object": "lamp", "state": "OFF"}], "relations": ["door INSIDE livingroom"]}]
```"#;
        let p = parse_response(raw);
        assert_eq!(p.datapoints.len(), 3, "{:?}", p.failures);
        assert!(p.failures.is_empty());
        assert_eq!(
            p.datapoints[0].consensus_relations[0].target,
            Target::Room(Room::Bathroom)
        );
        assert_eq!(
            p.datapoints[1].consensus_states,
            vec![ConsensusState::new("stove", StateValue::On)]
        );
        assert_eq!(p.datapoints[2].consensus_relations.len(), 1);
    }

    #[test]
    fn partial_salvage_reports_offset() {
        let raw = r#"[{"query": "Is A?", "states": [["tv","ON"]]}, {"query": "Is B?"}, {"query": "Is C?", "states": [["tv","OFF"]]}]"#;
        let p = parse_response(raw);
        assert_eq!(p.datapoints.len(), 2);
        assert_eq!(p.failures.len(), 1);
        assert_eq!(p.failures[0].reason, "missing states");
        assert_eq!(
            &raw[p.failures[0].offset..p.failures[0].offset + 17],
            r#"{"query": "Is B?""#
        );
    }

    #[test]
    fn parses_bracketed_paper_line() {
        let raw = "[Is the bathroom ready for a shower?, [lightswitch: ['On'], towels: ['Present'], Soap: ['Present'] ...], [lightswitch inside bathroom, towels inside bathroom, ... ]]";
        let p = parse_response(raw);
        assert!(p.failures.is_empty(), "{:?}", p.failures);
        let d = &p.datapoints[0];
        assert_eq!(d.query_text, "Is the bathroom ready for a shower?");
        assert_eq!(
            d.consensus_states,
            vec![
                ConsensusState::new("lightswitch", StateValue::On),
                ConsensusState::new("towels", StateValue::Present),
                ConsensusState::new("soap", StateValue::Present),
            ]
        );
        assert_eq!(
            d.consensus_relations,
            vec![
                ClassRelation::new(
                    "lightswitch",
                    Relation::Inside,
                    Target::Room(Room::Bathroom)
                ),
                ClassRelation::new("towels", Relation::Inside, Target::Room(Room::Bathroom)),
            ]
        );
    }

    #[test]
    fn bracketed_lines_with_failures_and_prose() {
        let raw = "Sure! Here are some:\n1. [\"Is the tv room cozy?\", [tv: ON], []]\n2. [Is the stove hot?, [stove: Cooked]]\n- [no question here]\n";
        let p = parse_response(raw);
        assert_eq!(p.datapoints.len(), 1);
        assert_eq!(p.failures.len(), 2);
        assert!(p.failures[0].reason.contains("unknown state"));
        assert_eq!(&raw[p.failures[1].offset..p.failures[1].offset + 3], "[no");
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::default().validate().is_ok());
        let bad = GenerationConfig {
            n: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenerationConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenerationConfig {
            x: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
