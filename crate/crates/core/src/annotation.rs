//! Annotation study state: tasks, the append-only annotation log, task
//! assignment and ground-truth aggregation. Transport-agnostic; the HTTP
//! service in the cli crate wraps an [`AnnotationStore`].

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapoint::SituationalDatapoint;
use crate::decomposition::decompose;
use crate::evaluation::AnswerValue;
use crate::scene_graph::{ClassRelation, ConsensusState};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("worker `{worker_id}` already annotated task `{task_id}`")]
    DuplicateAnnotation { worker_id: String, task_id: String },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` already has all its annotations")]
    TaskComplete(String),
    #[error("task `{task_id}` has {have} of {need} annotations")]
    IncompleteTask {
        task_id: String,
        have: usize,
        need: usize,
    },
    #[error("task `{task_id}` is a {expected:?} task, record says {got:?}")]
    ModeMismatch {
        task_id: String,
        expected: Mode,
        got: Mode,
    },
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("annotators_per_task must be odd and positive, got {0}")]
    EvenAnnotators(usize),
    #[error("annotation log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("annotation log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Situational,
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub mode: Mode,
    pub query: String,
    #[serde(default)]
    pub states: Vec<ConsensusState>,
    #[serde(default)]
    pub relations: Vec<ClassRelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_refs: Option<Vec<String>>,
}

/// Relative weight of situational vs consensus tasks in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeMix {
    pub situational: usize,
    pub consensus: usize,
}

impl Default for ModeMix {
    fn default() -> Self {
        ModeMix {
            situational: 1,
            consensus: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub annotators_per_task: usize,
    pub mode_mix: ModeMix,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            annotators_per_task: 5,
            mode_mix: ModeMix::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.annotators_per_task.is_multiple_of(2) {
            return Err(AnnotationError::EvenAnnotators(self.annotators_per_task));
        }
        Ok(())
    }
}

pub fn situational_task(d: &SituationalDatapoint) -> Task {
    Task {
        task_id: d.id.clone(),
        mode: Mode::Situational,
        query: d.query_text.clone(),
        states: d.consensus_states.clone(),
        relations: d.consensus_relations.clone(),
        parent_id: None,
        image_refs: None,
    }
}

/// Builds the task list for a study. Situational tasks come one per
/// datapoint; consensus tasks are decomposed from the same datapoints and
/// taken in datapoint order up to the mix ratio. With a zero situational
/// weight only consensus tasks are produced.
pub fn build_study(datapoints: &[SituationalDatapoint], mix: ModeMix) -> Vec<Task> {
    let consensus: Vec<Task> = datapoints
        .iter()
        .flat_map(|d| {
            decompose(d).into_iter().enumerate().map(|(i, q)| Task {
                task_id: format!("{}-c{}", q.parent_id, i + 1),
                mode: Mode::Consensus,
                query: q.text,
                states: vec![ConsensusState::new(q.class_name, q.state)],
                relations: vec![],
                parent_id: Some(q.parent_id),
                image_refs: None,
            })
        })
        .collect();
    match (datapoints.len() * mix.consensus).checked_div(mix.situational) {
        None if mix.consensus > 0 => consensus,
        None => Vec::new(),
        Some(wanted) => datapoints
            .iter()
            .map(situational_task)
            .chain(consensus.into_iter().take(wanted))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub worker_id: String,
    pub task_id: String,
    pub mode: Mode,
    pub response: AnswerValue,
    #[serde(default)]
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoteCounts {
    pub yes: usize,
    pub no: usize,
    pub cannot: usize,
}

impl VoteCounts {
    pub fn tally<'a>(votes: impl IntoIterator<Item = &'a AnswerValue>) -> Self {
        let mut c = VoteCounts::default();
        for v in votes {
            c.add(*v);
        }
        c
    }

    pub fn add(&mut self, v: AnswerValue) {
        match v {
            AnswerValue::Yes => self.yes += 1,
            AnswerValue::No => self.no += 1,
            AnswerValue::CannotAnswer => self.cannot += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.yes + self.no + self.cannot
    }

    /// `CannotAnswer` if any vote says so, else the strict Yes/No majority;
    /// None on a Yes/No tie.
    pub fn label(&self) -> Option<AnswerValue> {
        if self.cannot > 0 {
            return Some(AnswerValue::CannotAnswer);
        }
        match self.yes.cmp(&self.no) {
            std::cmp::Ordering::Greater => Some(AnswerValue::Yes),
            std::cmp::Ordering::Less => Some(AnswerValue::No),
            std::cmp::Ordering::Equal => None,
        }
    }

    /// Share of votes that went to the most common response.
    pub fn agreement(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.yes.max(self.no).max(self.cannot) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub task_id: String,
    pub label: AnswerValue,
    pub vote_counts: VoteCounts,
    pub annotator_count: usize,
}

impl GroundTruthLabel {
    /// Aggregates a task's votes; None on a Yes/No tie.
    pub fn from_votes(task_id: impl Into<String>, votes: &[AnswerValue]) -> Option<Self> {
        let vote_counts = VoteCounts::tally(votes);
        Some(GroundTruthLabel {
            task_id: task_id.into(),
            label: vote_counts.label()?,
            vote_counts,
            annotator_count: votes.len(),
        })
    }

    /// A single-vote label, for ground truth that did not come from a study.
    pub fn from_label(task_id: impl Into<String>, label: AnswerValue) -> Self {
        GroundTruthLabel::from_votes(task_id, &[label]).expect("one vote never ties")
    }
}

/// One line of the ground-truth export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthExport {
    pub task_id: String,
    pub label: AnswerValue,
    pub votes: VoteCounts,
    pub mode: Mode,
}

impl From<GroundTruthExport> for GroundTruthLabel {
    fn from(e: GroundTruthExport) -> Self {
        GroundTruthLabel {
            task_id: e.task_id,
            label: e.label,
            annotator_count: e.votes.total(),
            vote_counts: e.votes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    pub count: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub task_id: String,
    pub mode: Mode,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_tasks: usize,
    pub completed_tasks: usize,
    pub total_annotations: usize,
    pub annotators_per_task: usize,
    pub tasks: Vec<TaskProgress>,
    pub workers: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub tasks: usize,
    pub completed: usize,
    /// None until a task of this mode completes.
    pub cannot_answer_pct: Option<f64>,
    pub agreement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub total_tasks: usize,
    pub completed_tasks: usize,
    pub complete: bool,
    pub answerability_pct: Option<f64>,
    /// Ordered by ascending CannotAnswer rate, then by mode.
    pub modes: Vec<ModeSummary>,
}

/// Study state. Every accepted record is appended to the log (when one is
/// attached) before the in-memory index changes.
#[derive(Debug)]
pub struct AnnotationStore {
    config: StudyConfig,
    tasks: BTreeMap<String, Task>,
    votes: BTreeMap<String, BTreeMap<String, AnswerValue>>,
    records: Vec<AnnotationRecord>,
    log: Option<(PathBuf, File)>,
}

impl AnnotationStore {
    pub fn new(tasks: Vec<Task>, config: StudyConfig) -> Result<Self> {
        config.validate()?;
        let mut map = BTreeMap::new();
        for t in tasks {
            let id = t.task_id.clone();
            if map.insert(id.clone(), t).is_some() {
                return Err(AnnotationError::DuplicateTask(id));
            }
        }
        Ok(AnnotationStore {
            config,
            votes: map.keys().map(|k| (k.clone(), BTreeMap::new())).collect(),
            tasks: map,
            records: Vec::new(),
            log: None,
        })
    }

    /// Rebuilds state from a log without attaching it for writing.
    pub fn replay(tasks: Vec<Task>, config: StudyConfig, log: impl BufRead) -> Result<Self> {
        let mut store = AnnotationStore::new(tasks, config)?;
        for (i, line) in log.lines().enumerate() {
            let line = line.map_err(|e| AnnotationError::CorruptLog {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord =
                serde_json::from_str(&line).map_err(|e| AnnotationError::CorruptLog {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            store
                .submit_record(rec)
                .map_err(|e| AnnotationError::CorruptLog {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(store)
    }

    /// Replays `path` if it exists, then appends new records to it.
    pub fn open(tasks: Vec<Task>, config: StudyConfig, path: &Path) -> Result<Self> {
        let io = |source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut store = match File::open(path) {
            Ok(f) => AnnotationStore::replay(tasks, config, BufReader::new(f))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                AnnotationStore::new(tasks, config)?
            }
            Err(e) => return Err(io(e)),
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.get(id)
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn count(&self, task_id: &str) -> usize {
        self.votes.get(task_id).map_or(0, BTreeMap::len)
    }

    pub fn is_complete(&self, task_id: &str) -> bool {
        self.count(task_id) >= self.config.annotators_per_task
    }

    /// Least-annotated unfinished task this worker has not seen; ties go to
    /// the smaller task id.
    pub fn next_task(&self, worker_id: &str) -> Option<&Task> {
        self.votes
            .iter()
            .filter(|(_, v)| {
                v.len() < self.config.annotators_per_task && !v.contains_key(worker_id)
            })
            .min_by_key(|(id, v)| (v.len(), id.as_str()))
            .map(|(id, _)| &self.tasks[id])
    }

    pub fn submit(
        &mut self,
        worker_id: &str,
        task_id: &str,
        response: AnswerValue,
        timestamp: impl Into<String>,
    ) -> Result<Ack> {
        let mode = self
            .tasks
            .get(task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(task_id.to_string()))?
            .mode;
        self.submit_record(AnnotationRecord {
            worker_id: worker_id.to_string(),
            task_id: task_id.to_string(),
            mode,
            response,
            timestamp: timestamp.into(),
        })
    }

    pub fn submit_record(&mut self, rec: AnnotationRecord) -> Result<Ack> {
        let task = self
            .tasks
            .get(&rec.task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(rec.task_id.clone()))?;
        if task.mode != rec.mode {
            return Err(AnnotationError::ModeMismatch {
                task_id: rec.task_id.clone(),
                expected: task.mode,
                got: rec.mode,
            });
        }
        let votes = &self.votes[&rec.task_id];
        if votes.contains_key(&rec.worker_id) {
            return Err(AnnotationError::DuplicateAnnotation {
                worker_id: rec.worker_id.clone(),
                task_id: rec.task_id.clone(),
            });
        }
        if votes.len() >= self.config.annotators_per_task {
            return Err(AnnotationError::TaskComplete(rec.task_id.clone()));
        }
        if let Some((path, file)) = &mut self.log {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|source| AnnotationError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        let votes = self
            .votes
            .get_mut(&rec.task_id)
            .expect("task checked above");
        votes.insert(rec.worker_id.clone(), rec.response);
        let ack = Ack {
            task_id: rec.task_id.clone(),
            count: votes.len(),
            complete: votes.len() >= self.config.annotators_per_task,
        };
        self.records.push(rec);
        Ok(ack)
    }

    pub fn aggregate(&self, task_id: &str) -> Result<GroundTruthLabel> {
        let votes = self
            .votes
            .get(task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(task_id.to_string()))?;
        let need = self.config.annotators_per_task;
        if votes.len() < need {
            return Err(AnnotationError::IncompleteTask {
                task_id: task_id.to_string(),
                have: votes.len(),
                need,
            });
        }
        let v: Vec<AnswerValue> = votes.values().copied().collect();
        Ok(GroundTruthLabel::from_votes(task_id, &v).expect("odd vote count never ties"))
    }

    /// Labels for every completed task, sorted by task id.
    pub fn ground_truth(&self) -> Vec<GroundTruthLabel> {
        self.votes
            .keys()
            .filter(|id| self.is_complete(id))
            .map(|id| self.aggregate(id).expect("complete task aggregates"))
            .collect()
    }

    pub fn export_ground_truth(&self) -> Vec<GroundTruthExport> {
        self.ground_truth()
            .into_iter()
            .map(|g| GroundTruthExport {
                mode: self.tasks[&g.task_id].mode,
                task_id: g.task_id,
                label: g.label,
                votes: g.vote_counts,
            })
            .collect()
    }

    pub fn export_ground_truth_jsonl(&self) -> String {
        crate::datapoint::write_jsonl(&self.export_ground_truth())
    }

    pub fn progress(&self) -> Progress {
        let mut workers = BTreeMap::new();
        for r in &self.records {
            *workers.entry(r.worker_id.clone()).or_insert(0) += 1;
        }
        Progress {
            total_tasks: self.tasks.len(),
            completed_tasks: self.votes.keys().filter(|id| self.is_complete(id)).count(),
            total_annotations: self.records.len(),
            annotators_per_task: self.config.annotators_per_task,
            tasks: self
                .tasks
                .values()
                .map(|t| TaskProgress {
                    task_id: t.task_id.clone(),
                    mode: t.mode,
                    count: self.count(&t.task_id),
                })
                .collect(),
            workers,
        }
    }

    pub fn summary(&self) -> StudySummary {
        let labels = self.ground_truth();
        let mut modes = Vec::new();
        for mode in [Mode::Situational, Mode::Consensus] {
            let tasks = self.tasks.values().filter(|t| t.mode == mode).count();
            if tasks == 0 {
                continue;
            }
            let done: Vec<&GroundTruthLabel> = labels
                .iter()
                .filter(|g| self.tasks[&g.task_id].mode == mode)
                .collect();
            let n = done.len();
            let (cannot_answer_pct, agreement_pct) = if n == 0 {
                (None, None)
            } else {
                let cannot = done
                    .iter()
                    .filter(|g| g.label == AnswerValue::CannotAnswer)
                    .count();
                let agree: f64 = done.iter().map(|g| g.vote_counts.agreement()).sum();
                (
                    Some(100.0 * cannot as f64 / n as f64),
                    Some(100.0 * agree / n as f64),
                )
            };
            modes.push(ModeSummary {
                mode,
                tasks,
                completed: n,
                cannot_answer_pct,
                agreement_pct,
            });
        }
        modes.sort_by(|a, b| {
            let key = |m: &ModeSummary| m.cannot_answer_pct.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b)).then(a.mode.cmp(&b.mode))
        });
        StudySummary {
            total_tasks: self.tasks.len(),
            completed_tasks: labels.len(),
            complete: labels.len() == self.tasks.len(),
            answerability_pct: answerability_pct(&labels),
            modes,
        }
    }
}

/// Share of labels that are Yes or No; None for an empty slice.
pub fn answerability_pct(labels: &[GroundTruthLabel]) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let answerable = labels.iter().filter(|g| g.label.is_definite()).count();
    Some(100.0 * answerable as f64 / labels.len() as f64)
}
