//! Answerers and the metric suite: agreement with human ground truth,
//! accuracy and F1 with `Yes` as the positive class, and the joint room/object
//! success metric over recorded VQA predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::GroundTruthLabel;
use crate::datapoint::SituationalDatapoint;
use crate::provider::{leading_token, ChatProvider, CompletionParams, Message, ProviderError};
use crate::scene_graph::{SceneError, SceneGraph};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("id mismatch: missing ground truth for {missing:?}, no prediction for {extra:?}")]
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unparseable answer: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("datapoint `{id}`: {source}")]
    Scene {
        id: String,
        #[source]
        source: SceneError,
    },
    #[error("no recorded predictions for datapoint `{0}`")]
    NoPrediction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum AnswerValue {
    Yes,
    No,
    CannotAnswer,
}

impl AnswerValue {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerValue::Yes => "Yes",
            AnswerValue::No => "No",
            AnswerValue::CannotAnswer => "CannotAnswer",
        }
    }

    pub fn is_definite(self) -> bool {
        self != AnswerValue::CannotAnswer
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl From<AnswerValue> for &'static str {
    fn from(a: AnswerValue) -> Self {
        a.as_str()
    }
}

impl FromStr for AnswerValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_alphabetic())
            .collect::<String>()
            .to_lowercase();
        match folded.as_str() {
            "yes" | "y" => Ok(AnswerValue::Yes),
            "no" | "n" => Ok(AnswerValue::No),
            "cannotanswer" | "cannot" | "c" => Ok(AnswerValue::CannotAnswer),
            _ => Err(format!("unknown answer `{s}`")),
        }
    }
}

impl TryFrom<String> for AnswerValue {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub value: AnswerValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl Answer {
    pub fn new(value: AnswerValue) -> Self {
        Answer {
            value,
            reasoning: None,
        }
    }
}

/// An answerer's output for one datapoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub datapoint_id: String,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub trait Answerer {
    fn name(&self) -> &str;
    fn answer(&mut self, d: &SituationalDatapoint) -> Result<Prediction, EvalError>;
}

/// Yes iff every consensus state and relation holds in the graph.
pub fn oracle_answer(d: &SituationalDatapoint, graph: &SceneGraph) -> Answer {
    let states_hold = d
        .consensus_states
        .iter()
        .all(|cs| graph.query_state(&cs.class_name, cs.state));
    let relations_hold = d
        .consensus_relations
        .iter()
        .all(|r| graph.holds_relation(r));
    Answer::new(if states_hold && relations_hold {
        AnswerValue::Yes
    } else {
        AnswerValue::No
    })
}

/// Reference answerer over a fully observable scene graph. With
/// `apply_consensus`, each datapoint is judged on the scene after its
/// consensus has been programmed in.
#[derive(Debug, Clone)]
pub struct SceneOracle {
    pub scene: SceneGraph,
    pub apply_consensus: bool,
}

impl SceneOracle {
    pub fn new(scene: SceneGraph, apply_consensus: bool) -> Self {
        SceneOracle {
            scene,
            apply_consensus,
        }
    }

    pub fn predict(&self, d: &SituationalDatapoint) -> Result<Prediction, EvalError> {
        let answer = if self.apply_consensus {
            let g = self
                .scene
                .apply_consensus(&d.consensus_states, &d.consensus_relations)
                .map_err(|source| EvalError::Scene {
                    id: d.id.clone(),
                    source,
                })?;
            oracle_answer(d, &g)
        } else {
            oracle_answer(d, &self.scene)
        };
        Ok(Prediction {
            datapoint_id: d.id.clone(),
            answer,
            note: None,
        })
    }

    /// Answers a batch in parallel; output order follows the input.
    pub fn predict_all(
        &self,
        datapoints: &[SituationalDatapoint],
    ) -> Result<Vec<Prediction>, EvalError> {
        datapoints.par_iter().map(|d| self.predict(d)).collect()
    }
}

impl Answerer for SceneOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn answer(&mut self, d: &SituationalDatapoint) -> Result<Prediction, EvalError> {
        self.predict(d)
    }
}

/// `<query>` plus its consensus object data, as shown to the answering model.
pub fn query_and_object_data(d: &SituationalDatapoint) -> String {
    let states: Vec<String> = d
        .consensus_states
        .iter()
        .map(|s| format!("{}: ['{}']", s.class_name, s.state))
        .collect();
    let relations: Vec<String> = d
        .consensus_relations
        .iter()
        .map(ToString::to_string)
        .collect();
    format!(
        "Query: \"{}\"\nObject-States: [{}]\nObject-Relationships: [{}]",
        d.query_text,
        states.join(", "),
        relations.join(", ")
    )
}

pub fn answer_prompt(d: &SituationalDatapoint, graph: &SceneGraph) -> String {
    format!(
        "You are given the complete scene graph of a household, with every object's states and relationships.\n\
         SCENE_GRAPH :-\n{}\n\n{}\n\
         Using the scene graph, answer the query with Yes or No.",
        graph.to_json(),
        query_and_object_data(d)
    )
}

pub fn reasoning_prompt(d: &SituationalDatapoint, verdict: AnswerValue) -> String {
    format!(
        "{}\nYour answer is: {}.\nCan you provide a brief reason for your answer focusing only on the object states and relationships provided?",
        query_and_object_data(d),
        verdict
    )
}

/// Maps the first alphabetic token of a reply onto an answer.
pub fn normalize_answer(reply: &str) -> Result<AnswerValue, EvalError> {
    match leading_token(reply).as_deref() {
        Some("yes") => Ok(AnswerValue::Yes),
        Some("no") => Ok(AnswerValue::No),
        Some("cannot") => Ok(AnswerValue::CannotAnswer),
        _ => Err(EvalError::Unparseable(reply.to_string())),
    }
}

/// Asks a chat model to answer `d` given the full graph; optionally follows
/// up in the same conversation for a short justification.
pub fn llm_answer(
    d: &SituationalDatapoint,
    graph: &SceneGraph,
    chat: &mut dyn ChatProvider,
    params: &CompletionParams,
    with_reasoning: bool,
) -> Result<Answer, EvalError> {
    let mut conversation = vec![Message::user(answer_prompt(d, graph))];
    let reply = chat.complete(&conversation, params)?;
    let value = normalize_answer(&reply)?;
    let mut answer = Answer::new(value);
    if with_reasoning && value.is_definite() {
        conversation.push(Message::assistant(reply));
        conversation.push(Message::user(reasoning_prompt(d, value)));
        answer.reasoning = Some(chat.complete(&conversation, params)?);
    }
    Ok(answer)
}

pub struct LlmAnswerer<P> {
    chat: P,
    params: CompletionParams,
    scene: SceneGraph,
    apply_consensus: bool,
    with_reasoning: bool,
}

impl<P: ChatProvider> LlmAnswerer<P> {
    pub fn new(chat: P, params: CompletionParams, scene: SceneGraph) -> Self {
        LlmAnswerer {
            chat,
            params,
            scene,
            apply_consensus: false,
            with_reasoning: false,
        }
    }

    pub fn with_reasoning(mut self, yes: bool) -> Self {
        self.with_reasoning = yes;
        self
    }

    pub fn applying_consensus(mut self, yes: bool) -> Self {
        self.apply_consensus = yes;
        self
    }

    pub fn into_inner(self) -> P {
        self.chat
    }
}

impl<P: ChatProvider> Answerer for LlmAnswerer<P> {
    fn name(&self) -> &str {
        "llm"
    }

    fn answer(&mut self, d: &SituationalDatapoint) -> Result<Prediction, EvalError> {
        let applied;
        let graph = if self.apply_consensus {
            applied = self
                .scene
                .apply_consensus(&d.consensus_states, &d.consensus_relations)
                .map_err(|source| EvalError::Scene {
                    id: d.id.clone(),
                    source,
                })?;
            &applied
        } else {
            &self.scene
        };
        let (answer, note) =
            match llm_answer(d, graph, &mut self.chat, &self.params, self.with_reasoning) {
                Ok(a) => (a, None),
                Err(EvalError::Unparseable(_)) => (
                    Answer::new(AnswerValue::CannotAnswer),
                    Some("unparseable".to_string()),
                ),
                Err(e) => return Err(e),
            };
        Ok(Prediction {
            datapoint_id: d.id.clone(),
            answer,
            note,
        })
    }
}

/// Runs an answerer over datapoints in order.
pub fn answer_all(
    answerer: &mut dyn Answerer,
    datapoints: &[SituationalDatapoint],
) -> Result<Vec<Prediction>, EvalError> {
    datapoints.iter().map(|d| answerer.answer(d)).collect()
}

// ---------------------------------------------------------------------------
// Recorded VQA predictions and success flags
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Room,
    Object,
}

/// One line of a recorded-prediction file: a model's answer for one image
/// (room level) or one consensus object (object level).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedPrediction {
    pub datapoint_id: String,
    pub unit_id: String,
    pub level: Level,
    pub answer: AnswerValue,
    /// Expected answer for this unit; defaults to the datapoint's label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<AnswerValue>,
}

/// Situational-level answers from recorded room predictions: majority of the
/// room units, `CannotAnswer` on a tie or when no room unit exists.
pub struct RecordedAnswerer {
    name: String,
    by_datapoint: BTreeMap<String, Vec<AnswerValue>>,
}

impl RecordedAnswerer {
    pub fn new(name: impl Into<String>, records: &[RecordedPrediction]) -> Self {
        let mut by_datapoint: BTreeMap<String, Vec<AnswerValue>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.level == Level::Room) {
            by_datapoint
                .entry(r.datapoint_id.clone())
                .or_default()
                .push(r.answer);
        }
        RecordedAnswerer {
            name: name.into(),
            by_datapoint,
        }
    }
}

impl Answerer for RecordedAnswerer {
    fn name(&self) -> &str {
        &self.name
    }

    fn answer(&mut self, d: &SituationalDatapoint) -> Result<Prediction, EvalError> {
        let votes = self
            .by_datapoint
            .get(&d.id)
            .ok_or_else(|| EvalError::NoPrediction(d.id.clone()))?;
        let yes = votes.iter().filter(|v| **v == AnswerValue::Yes).count();
        let no = votes.iter().filter(|v| **v == AnswerValue::No).count();
        let value = match yes.cmp(&no) {
            std::cmp::Ordering::Greater => AnswerValue::Yes,
            std::cmp::Ordering::Less => AnswerValue::No,
            std::cmp::Ordering::Equal => AnswerValue::CannotAnswer,
        };
        Ok(Prediction {
            datapoint_id: d.id.clone(),
            answer: Answer::new(value),
            note: None,
        })
    }
}

/// Confusion counts with `Yes` as the positive class. Predicted
/// `CannotAnswer` counts as a non-positive prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Ground truth definite, prediction `CannotAnswer`.
    pub abstained: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: AnswerValue, expected: AnswerValue) {
        match (predicted, expected) {
            (AnswerValue::Yes, AnswerValue::Yes) => self.tp += 1,
            (AnswerValue::Yes, AnswerValue::No) => self.fp += 1,
            (AnswerValue::No, AnswerValue::No) => self.tn += 1,
            (AnswerValue::No, AnswerValue::Yes) => self.fn_ += 1,
            (AnswerValue::CannotAnswer, AnswerValue::Yes) => {
                self.fn_ += 1;
                self.abstained += 1;
            }
            (AnswerValue::CannotAnswer, AnswerValue::No) => self.abstained += 1,
            (_, AnswerValue::CannotAnswer) => {}
        }
    }

    pub fn matches(&self) -> usize {
        self.tp + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// F1 in [0, 1]; 0 when precision and recall are both 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Joint success: 1 if either the room-level or the object-level answer
/// succeeded.
pub fn joint(room: bool, object: bool) -> bool {
    room || object
}

/// Per-query scores in [0, 1] and their 0.5-thresholded success flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessFlags {
    pub accuracy_room: f64,
    pub accuracy_object: f64,
    pub f1_room: f64,
    pub f1_object: f64,
    pub r_accuracy: bool,
    pub o_accuracy: bool,
    pub r_f1: bool,
    pub o_f1: bool,
}

pub const SUCCESS_THRESHOLD: f64 = 0.5;

impl SuccessFlags {
    pub fn from_scores(
        accuracy_room: f64,
        accuracy_object: f64,
        f1_room: f64,
        f1_object: f64,
    ) -> Self {
        SuccessFlags {
            accuracy_room,
            accuracy_object,
            f1_room,
            f1_object,
            r_accuracy: accuracy_room >= SUCCESS_THRESHOLD,
            o_accuracy: accuracy_object >= SUCCESS_THRESHOLD,
            r_f1: f1_room >= SUCCESS_THRESHOLD,
            o_f1: f1_object >= SUCCESS_THRESHOLD,
        }
    }

    pub fn joint_accuracy(&self) -> bool {
        joint(self.r_accuracy, self.o_accuracy)
    }

    pub fn joint_f1(&self) -> bool {
        joint(self.r_f1, self.o_f1)
    }
}

/// Room/object accuracy and F1, as percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub room_accuracy_pct: f64,
    pub room_f1_pct: f64,
    pub object_accuracy_pct: f64,
    pub object_f1_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlagSet {
    pub per_query: BTreeMap<String, SuccessFlags>,
    /// Scores pooled over every unit of every scored query.
    pub pooled: LevelScores,
}

fn unit_scores(units: &[(AnswerValue, AnswerValue)]) -> (f64, f64) {
    if units.is_empty() {
        return (0.0, 0.0);
    }
    let mut c = Confusion::default();
    for (p, e) in units {
        c.add(*p, *e);
    }
    let acc = c.matches() as f64 / units.len() as f64;
    // A query whose units are all correct negatives has nothing to detect;
    // score it as perfect rather than 0.
    let f1 = if c.tp + c.fp + c.fn_ == 0 && c.matches() == units.len() {
        1.0
    } else {
        c.f1()
    };
    (acc, f1)
}

/// Derives per-query success flags from recorded unit predictions. Queries
/// whose ground truth is `CannotAnswer` are skipped.
pub fn compute_flags(records: &[RecordedPrediction], ground_truth: &[GroundTruthLabel]) -> FlagSet {
    let gt: BTreeMap<&str, AnswerValue> = ground_truth
        .iter()
        .map(|g| (g.task_id.as_str(), g.label))
        .collect();
    let mut grouped: BTreeMap<&str, [Vec<(AnswerValue, AnswerValue)>; 2]> = BTreeMap::new();
    for r in records {
        let Some(&label) = gt.get(r.datapoint_id.as_str()) else {
            continue;
        };
        if !label.is_definite() {
            continue;
        }
        let expected = r.expected.unwrap_or(label);
        let slot = match r.level {
            Level::Room => 0,
            Level::Object => 1,
        };
        grouped.entry(&r.datapoint_id).or_default()[slot].push((r.answer, expected));
    }

    let mut per_query = BTreeMap::new();
    let mut pooled_units: [Vec<(AnswerValue, AnswerValue)>; 2] = [Vec::new(), Vec::new()];
    for (id, [room, object]) in grouped {
        let (ar, fr) = unit_scores(&room);
        let (ao, fo) = unit_scores(&object);
        per_query.insert(id.to_string(), SuccessFlags::from_scores(ar, ao, fr, fo));
        pooled_units[0].extend(room);
        pooled_units[1].extend(object);
    }
    let pooled_level = |units: &[(AnswerValue, AnswerValue)]| {
        let mut c = Confusion::default();
        for (p, e) in units {
            c.add(*p, *e);
        }
        (100.0 * ratio(c.matches(), units.len()), 100.0 * c.f1())
    };
    let (ra, rf) = pooled_level(&pooled_units[0]);
    let (oa, of) = pooled_level(&pooled_units[1]);
    FlagSet {
        per_query,
        pooled: LevelScores {
            room_accuracy_pct: ra,
            room_f1_pct: rf,
            object_accuracy_pct: oa,
            object_f1_pct: of,
        },
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub datapoint_id: String,
    pub prediction: AnswerValue,
    pub ground_truth: AnswerValue,
    /// None when the ground truth is `CannotAnswer` (excluded).
    pub matched: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<SuccessFlags>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub queries: usize,
    pub per_query_mean: LevelScores,
    pub pooled: LevelScores,
    pub joint_accuracy_pct: f64,
    pub joint_f1_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub answerer: String,
    pub total: usize,
    pub matches: usize,
    pub mismatches: usize,
    pub excluded: usize,
    pub confusion: Confusion,
    pub agreement_pct: f64,
    pub accuracy_pct: f64,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
    /// Share of all ground-truth labels that are `CannotAnswer`.
    pub cannot_answer_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointReport>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn index_unique<'a, T>(
    items: &'a [T],
    id: impl Fn(&'a T) -> &'a str,
) -> Result<BTreeMap<&'a str, &'a T>, EvalError> {
    let mut out = BTreeMap::new();
    for item in items {
        if out.insert(id(item), item).is_some() {
            return Err(EvalError::DuplicateId(id(item).to_string()));
        }
    }
    Ok(out)
}

/// Joins predictions with ground truth by datapoint id and computes the
/// aggregate metrics. Rows come out sorted by id, so input order does not
/// matter.
pub fn compute_report(
    answerer: &str,
    predictions: &[Prediction],
    ground_truth: &[GroundTruthLabel],
    flags: Option<&FlagSet>,
) -> Result<EvalReport, EvalError> {
    let preds = index_unique(predictions, |p| p.datapoint_id.as_str())?;
    let gts = index_unique(ground_truth, |g| g.task_id.as_str())?;
    let pred_ids: BTreeSet<&str> = preds.keys().copied().collect();
    let gt_ids: BTreeSet<&str> = gts.keys().copied().collect();
    if pred_ids != gt_ids {
        return Err(EvalError::IdMismatch {
            missing: pred_ids
                .difference(&gt_ids)
                .map(|s| s.to_string())
                .collect(),
            extra: gt_ids
                .difference(&pred_ids)
                .map(|s| s.to_string())
                .collect(),
        });
    }

    let mut confusion = Confusion::default();
    let mut rows = Vec::with_capacity(preds.len());
    let (mut matches, mut mismatches, mut excluded) = (0, 0, 0);
    for (id, p) in &preds {
        let gt = gts[id].label;
        let predicted = p.answer.value;
        let matched = if gt.is_definite() {
            confusion.add(predicted, gt);
            let m = predicted == gt;
            if m {
                matches += 1;
            } else {
                mismatches += 1;
            }
            Some(m)
        } else {
            excluded += 1;
            None
        };
        rows.push(ReportRow {
            datapoint_id: id.to_string(),
            prediction: predicted,
            ground_truth: gt,
            matched,
            flags: flags.and_then(|f| f.per_query.get(*id).copied()),
            reasoning: p.answer.reasoning.clone(),
            note: p.note.clone(),
        });
    }
    let total = rows.len();
    let scored = matches + mismatches;
    let agreement_pct = 100.0 * ratio(matches, scored);

    let joint = flags.map(|_| {
        let scored_rows: Vec<&ReportRow> = rows.iter().filter(|r| r.matched.is_some()).collect();
        let n = scored_rows.len();
        let none = SuccessFlags::from_scores(0.0, 0.0, 0.0, 0.0);
        let fl: Vec<SuccessFlags> = scored_rows
            .iter()
            .map(|r| r.flags.unwrap_or(none))
            .collect();
        let mean = |f: fn(&SuccessFlags) -> f64| {
            100.0
                * if n == 0 {
                    0.0
                } else {
                    fl.iter().map(f).sum::<f64>() / n as f64
                }
        };
        JointReport {
            queries: n,
            per_query_mean: LevelScores {
                room_accuracy_pct: mean(|f| f.accuracy_room),
                room_f1_pct: mean(|f| f.f1_room),
                object_accuracy_pct: mean(|f| f.accuracy_object),
                object_f1_pct: mean(|f| f.f1_object),
            },
            pooled: flags.map(|f| f.pooled).unwrap_or_default(),
            joint_accuracy_pct: mean(|f| if f.joint_accuracy() { 1.0 } else { 0.0 }),
            joint_f1_pct: mean(|f| if f.joint_f1() { 1.0 } else { 0.0 }),
        }
    });

    Ok(EvalReport {
        answerer: answerer.to_string(),
        total,
        matches,
        mismatches,
        excluded,
        confusion,
        agreement_pct,
        accuracy_pct: agreement_pct,
        precision_pct: 100.0 * confusion.precision(),
        recall_pct: 100.0 * confusion.recall(),
        f1_pct: 100.0 * confusion.f1(),
        cannot_answer_pct: 100.0 * ratio(excluded, total),
        joint,
        rows,
        config: serde_json::Value::Null,
    })
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.clone()));
    }
    out.push('\n');
    out
}

/// Plain-text rendering: an agreement summary and, when joint scores exist,
/// a room/object/joint table in both aggregation modes.
pub fn render_reports(reports: &[EvalReport]) -> String {
    let pct = |v: f64| format!("{v:.2}");
    let summary: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.answerer.clone(),
                r.total.to_string(),
                pct(r.agreement_pct),
                pct(r.accuracy_pct),
                pct(r.f1_pct),
                pct(r.cannot_answer_pct),
            ]
        })
        .collect();
    let mut out = table(
        &[
            "Answerer",
            "N",
            "Agreement %",
            "Accuracy %",
            "F1 %",
            "Cannot Answer %",
        ],
        &summary,
    );
    for (mode, pick) in [
        (
            "per_query_mean",
            (|j: &JointReport| j.per_query_mean) as fn(&JointReport) -> LevelScores,
        ),
        ("pooled", |j: &JointReport| j.pooled),
    ] {
        let rows: Vec<Vec<String>> = reports
            .iter()
            .filter_map(|r| r.joint.as_ref().map(|j| (r, j)))
            .map(|(r, j)| {
                let s = pick(j);
                vec![
                    r.answerer.clone(),
                    pct(s.room_accuracy_pct),
                    pct(s.room_f1_pct),
                    pct(s.object_accuracy_pct),
                    pct(s.object_f1_pct),
                    pct(j.joint_accuracy_pct),
                    pct(j.joint_f1_pct),
                ]
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        out.push_str(&format!("\n[{mode}]\n"));
        out.push_str(&table(
            &[
                "Model",
                "Room Acc",
                "Room F1",
                "Object Acc",
                "Object F1",
                "J_A",
                "J_F1",
            ],
            &rows,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ReplayProvider;
    use crate::scene_graph::{load_scene, ConsensusState, StateValue};

    fn scene() -> SceneGraph {
        load_scene(include_str!("../../../fixtures/house.json")).unwrap()
    }

    fn gt(id: &str, label: AnswerValue) -> GroundTruthLabel {
        GroundTruthLabel::from_label(id, label)
    }

    fn pred(id: &str, v: AnswerValue) -> Prediction {
        Prediction {
            datapoint_id: id.into(),
            answer: Answer::new(v),
            note: None,
        }
    }

    fn movie_night() -> SituationalDatapoint {
        SituationalDatapoint::new(
            "mv",
            "Is the living room prepared for a movie night?",
            vec![
                ConsensusState::new("tv", StateValue::On),
                ConsensusState::new("lamp", StateValue::Off),
                ConsensusState::new("remotecontrol", StateValue::On),
            ],
            vec![],
        )
    }

    #[test]
    fn oracle_yes_after_apply_and_no_after_flip() {
        let g = scene();
        let d = movie_night();
        let applied = g.apply_consensus(&d.consensus_states, &[]).unwrap();
        assert_eq!(oracle_answer(&d, &applied).value, AnswerValue::Yes);
        let flipped = applied
            .apply_consensus(&[ConsensusState::new("lamp", StateValue::On)], &[])
            .unwrap();
        assert_eq!(oracle_answer(&d, &flipped).value, AnswerValue::No);
    }

    #[test]
    fn oracle_absent_class_expected_present_is_no() {
        let g = scene();
        let d = SituationalDatapoint::new(
            "h",
            "Is it ready?",
            vec![ConsensusState::new("hologram", StateValue::Present)],
            vec![],
        );
        assert_eq!(oracle_answer(&d, &g).value, AnswerValue::No);
        // every fixture object made absent reads as No when PRESENT is expected
        for o in g.objects().filter(|o| {
            o.domains
                .contains(&crate::scene_graph::StateDomain::PresentNone)
        }) {
            let gone = g
                .apply_consensus(
                    &[ConsensusState::new(&o.class_name, StateValue::Absent)],
                    &[],
                )
                .unwrap();
            let d = SituationalDatapoint::new(
                "x",
                "Is it?",
                vec![ConsensusState::new(&o.class_name, StateValue::Present)],
                vec![],
            );
            assert_eq!(oracle_answer(&d, &gone).value, AnswerValue::No);
        }
    }

    #[test]
    fn llm_answer_normalizes_leading_token() {
        let g = scene();
        let d = movie_night();
        let mut chat = ReplayProvider::from_responses(["NO"]);
        let a = llm_answer(&d, &g, &mut chat, &CompletionParams::default(), false).unwrap();
        assert_eq!(a.value, AnswerValue::No);
        let prompt = &chat.seen()[0][0].content;
        assert!(prompt.contains("Is the living room prepared for a movie night?"));
        assert!(prompt.contains("\"remotecontrol_1\""));

        let mut chat = ReplayProvider::from_responses(["yes, the room is ready"]);
        let a = llm_answer(&d, &g, &mut chat, &CompletionParams::default(), false).unwrap();
        assert_eq!(a.value, AnswerValue::Yes);
    }

    #[test]
    fn llm_reasoning_is_captured_verbatim() {
        let g = scene();
        let d = movie_night();
        let reason = "The lights are off but the remote control is ON, which is odd.\n  Trailing  ";
        let mut chat = ReplayProvider::from_responses(["No", reason]);
        let a = llm_answer(&d, &g, &mut chat, &CompletionParams::default(), true).unwrap();
        assert_eq!(a.reasoning.as_deref(), Some(reason));
        let follow = &chat.seen()[1];
        assert_eq!(follow.len(), 3);
        assert!(follow[2].content.contains("Your answer is: No."));
        assert!(follow[2]
            .content
            .ends_with("focusing only on the object states and relationships provided?"));
    }

    #[test]
    fn unparseable_becomes_cannot_answer() {
        let mut a = LlmAnswerer::new(
            ReplayProvider::from_responses(["Perhaps."]),
            CompletionParams::default(),
            scene(),
        );
        let p = a.answer(&movie_night()).unwrap();
        assert_eq!(p.answer.value, AnswerValue::CannotAnswer);
        assert_eq!(p.note.as_deref(), Some("unparseable"));
        assert!(matches!(
            normalize_answer("hmm"),
            Err(EvalError::Unparseable(_))
        ));
    }

    #[test]
    fn joint_truth_table() {
        assert!(joint(true, false));
        assert!(joint(false, true));
        assert!(joint(true, true));
        assert!(!joint(false, false));
        for a in [false, true] {
            for b in [false, true] {
                assert_eq!(joint(a, b), joint(b, a));
            }
        }
    }

    #[test]
    fn agreement_three_of_four() {
        use AnswerValue::*;
        let preds = [
            pred("a", Yes),
            pred("b", No),
            pred("c", Yes),
            pred("d", Yes),
        ];
        let gts = [gt("a", Yes), gt("b", No), gt("c", Yes), gt("d", No)];
        let r = compute_report("t", &preds, &gts, None).unwrap();
        assert_eq!(r.agreement_pct, 75.0);
        assert_eq!(r.matches + r.mismatches + r.excluded, r.total);
    }

    #[test]
    fn identity_is_perfect() {
        use AnswerValue::*;
        let preds = [pred("a", Yes), pred("b", No)];
        let gts = [gt("a", Yes), gt("b", No)];
        let r = compute_report("t", &preds, &gts, None).unwrap();
        assert_eq!(r.agreement_pct, 100.0);
        assert_eq!(r.f1_pct, 100.0);
    }

    #[test]
    fn f1_from_confusion_counts() {
        use AnswerValue::*;
        // TP=2, FP=1, FN=1, TN=1 -> P = R = F1 = 2/3
        let preds = [
            pred("1", Yes),
            pred("2", Yes),
            pred("3", Yes),
            pred("4", No),
            pred("5", No),
        ];
        let gts = [
            gt("1", Yes),
            gt("2", Yes),
            gt("3", No),
            gt("4", Yes),
            gt("5", No),
        ];
        let r = compute_report("t", &preds, &gts, None).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 1,
                abstained: 0
            }
        );
        assert!((r.precision_pct - 66.6667).abs() < 0.01);
        assert!((r.recall_pct - 66.6667).abs() < 0.01);
        assert!((r.f1_pct - 66.6667).abs() < 0.01);
    }

    #[test]
    fn cannot_answer_ground_truth_is_excluded() {
        use AnswerValue::*;
        let preds = [pred("a", Yes), pred("b", No), pred("c", CannotAnswer)];
        let gts = [gt("a", Yes), gt("b", CannotAnswer), gt("c", No)];
        let r = compute_report("t", &preds, &gts, None).unwrap();
        assert_eq!((r.matches, r.mismatches, r.excluded), (1, 1, 1));
        assert_eq!(r.agreement_pct, 50.0);
        assert!((r.cannot_answer_pct - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.confusion.abstained, 1);
    }

    #[test]
    fn id_mismatch_and_duplicates() {
        use AnswerValue::*;
        let err = compute_report(
            "t",
            &[pred("a", Yes), pred("x", No)],
            &[gt("a", Yes), gt("y", No)],
            None,
        )
        .unwrap_err();
        match err {
            EvalError::IdMismatch { missing, extra } => {
                assert_eq!(missing, ["x"]);
                assert_eq!(extra, ["y"]);
            }
            e => panic!("{e}"),
        }
        assert!(matches!(
            compute_report("t", &[pred("a", Yes), pred("a", No)], &[gt("a", Yes)], None),
            Err(EvalError::DuplicateId(_))
        ));
    }

    #[test]
    fn flags_and_joint_aggregates() {
        use AnswerValue::*;
        let rec = |d: &str, u: &str, level, answer| RecordedPrediction {
            datapoint_id: d.into(),
            unit_id: u.into(),
            level,
            answer,
            expected: None,
        };
        let records = vec![
            // q1: room 1/2 right, object 2/2 right
            rec("q1", "r1", Level::Room, Yes),
            rec("q1", "r2", Level::Room, No),
            rec("q1", "o1", Level::Object, Yes),
            rec("q1", "o2", Level::Object, Yes),
            // q2 (gt No): room wrong, object wrong
            rec("q2", "r1", Level::Room, Yes),
            rec("q2", "o1", Level::Object, Yes),
        ];
        let gts = [gt("q1", Yes), gt("q2", No)];
        let flags = compute_flags(&records, &gts);
        let f1 = flags.per_query["q1"];
        assert_eq!(f1.accuracy_room, 0.5);
        assert!(f1.r_accuracy);
        assert!((f1.f1_room - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1.accuracy_object, 1.0);
        let f2 = flags.per_query["q2"];
        assert!(!f2.joint_accuracy());
        assert!((flags.pooled.room_accuracy_pct - 100.0 / 3.0).abs() < 1e-9);

        let mut ans = RecordedAnswerer::new("vqa", &records);
        let d1 = SituationalDatapoint::new("q1", "q?", vec![], vec![]);
        let d2 = SituationalDatapoint::new("q2", "q?", vec![], vec![]);
        let preds = answer_all(&mut ans, &[d1, d2]).unwrap();
        assert_eq!(preds[0].answer.value, CannotAnswer);
        assert_eq!(preds[1].answer.value, Yes);

        let r = compute_report("vqa", &preds, &gts, Some(&flags)).unwrap();
        let j = r.joint.as_ref().unwrap();
        assert_eq!(j.joint_accuracy_pct, 50.0);
        assert_eq!(j.per_query_mean.object_accuracy_pct, 50.0);
        let text = render_reports(&[r]);
        assert!(text.contains("J_A"));
        assert!(text.contains("[pooled]"));
    }

    #[test]
    fn answer_value_parsing() {
        assert_eq!(
            "Cannot Answer".parse::<AnswerValue>().unwrap(),
            AnswerValue::CannotAnswer
        );
        assert_eq!("yes".parse::<AnswerValue>().unwrap(), AnswerValue::Yes);
        assert_eq!(
            serde_json::to_string(&AnswerValue::CannotAnswer).unwrap(),
            "\"CannotAnswer\""
        );
    }
}
