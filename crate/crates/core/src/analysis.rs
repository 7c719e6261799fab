//! Dataset statistics: room categories, situational/temporal labels and
//! query length distributions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapoint::{Axis, ClassifierError, QueryClassifier, SituationalDatapoint};
use crate::decomposition::room_mentions;
use crate::scene_graph::{Room, SceneGraph, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoomCategory {
    #[serde(rename = "kitchen")]
    Kitchen,
    #[serde(rename = "livingroom")]
    Livingroom,
    #[serde(rename = "bedroom")]
    Bedroom,
    #[serde(rename = "bathroom")]
    Bathroom,
    #[serde(rename = "multi-room")]
    MultiRoom,
    #[serde(rename = "no-room")]
    NoRoom,
}

impl RoomCategory {
    pub const ALL: [RoomCategory; 6] = [
        RoomCategory::Kitchen,
        RoomCategory::Livingroom,
        RoomCategory::Bedroom,
        RoomCategory::Bathroom,
        RoomCategory::MultiRoom,
        RoomCategory::NoRoom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoomCategory::Kitchen => "kitchen",
            RoomCategory::Livingroom => "livingroom",
            RoomCategory::Bedroom => "bedroom",
            RoomCategory::Bathroom => "bathroom",
            RoomCategory::MultiRoom => "multi-room",
            RoomCategory::NoRoom => "no-room",
        }
    }
}

impl From<Room> for RoomCategory {
    fn from(r: Room) -> Self {
        match r {
            Room::Kitchen => RoomCategory::Kitchen,
            Room::Livingroom => RoomCategory::Livingroom,
            Room::Bedroom => RoomCategory::Bedroom,
            Room::Bathroom => RoomCategory::Bathroom,
        }
    }
}

impl fmt::Display for RoomCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Situational {
    Yes,
    No,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Temporal {
    Spatial,
    Temporal,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabels {
    pub room: RoomCategory,
    pub situational: Situational,
    pub temporal: Temporal,
}

fn category_of(rooms: &[Room]) -> RoomCategory {
    match rooms {
        [] => RoomCategory::NoRoom,
        [r] => (*r).into(),
        _ => RoomCategory::MultiRoom,
    }
}

/// Room named in the query text if any; otherwise inferred from where the
/// consensus objects live in the scene.
pub fn categorize_room(d: &SituationalDatapoint, scene: Option<&SceneGraph>) -> RoomCategory {
    let named = room_mentions(&d.query_text);
    if !named.is_empty() {
        return category_of(&named);
    }
    let Some(scene) = scene else {
        return RoomCategory::NoRoom;
    };
    let mut rooms = std::collections::BTreeSet::new();
    for cs in &d.consensus_states {
        rooms.extend(scene.rooms_of_class(&cs.class_name));
    }
    for rel in &d.consensus_relations {
        match &rel.target {
            Target::Room(r) => {
                rooms.insert(*r);
            }
            Target::Object(o) => rooms.extend(scene.rooms_of_class(o)),
        }
    }
    category_of(&rooms.into_iter().collect::<Vec<_>>())
}

/// Situational and temporal labels from a classifier, or `Deferred` for both
/// when none is configured.
pub fn classify(
    d: &SituationalDatapoint,
    classifier: Option<&mut dyn QueryClassifier>,
) -> Result<(Situational, Temporal), ClassifierError> {
    let Some(c) = classifier else {
        return Ok((Situational::Deferred, Temporal::Deferred));
    };
    let wrap = |source| ClassifierError {
        id: d.id.clone(),
        source,
    };
    let situational = if c.classify(Axis::Situational, &d.query_text).map_err(wrap)? {
        Situational::Yes
    } else {
        Situational::No
    };
    let temporal = if c.classify(Axis::Temporal, &d.query_text).map_err(wrap)? {
        Temporal::Temporal
    } else {
        Temporal::Spatial
    };
    Ok((situational, temporal))
}

pub fn label(
    d: &SituationalDatapoint,
    scene: Option<&SceneGraph>,
    classifier: Option<&mut dyn QueryClassifier>,
) -> Result<CategoryLabels, ClassifierError> {
    let (situational, temporal) = classify(d, classifier)?;
    Ok(CategoryLabels {
        room: categorize_room(d, scene),
        situational,
        temporal,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no queries to measure")]
pub struct EmptyInputError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthOptions {
    /// Leave a single trailing `?` out of the character count.
    pub strip_question_mark: bool,
    /// Width of the character-count histogram bins.
    pub char_bin: usize,
}

impl Default for LengthOptions {
    fn default() -> Self {
        LengthOptions {
            strip_question_mark: true,
            char_bin: 10,
        }
    }
}

pub fn char_length(query: &str, opts: &LengthOptions) -> usize {
    let q = query.trim();
    let q = if opts.strip_question_mark {
        q.strip_suffix('?').unwrap_or(q).trim_end()
    } else {
        q
    };
    q.chars().count()
}

pub fn word_length(query: &str) -> usize {
    query.split_whitespace().count()
}

pub fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub median_chars: f64,
    pub median_words: f64,
    /// Lower bin edge -> count.
    pub char_histogram: BTreeMap<usize, usize>,
    /// Word count -> count.
    pub word_histogram: BTreeMap<usize, usize>,
}

pub fn length_stats<S: AsRef<str>>(
    queries: &[S],
    opts: &LengthOptions,
) -> Result<LengthStats, EmptyInputError> {
    if queries.is_empty() {
        return Err(EmptyInputError);
    }
    let chars: Vec<usize> = queries
        .iter()
        .map(|q| char_length(q.as_ref(), opts))
        .collect();
    let words: Vec<usize> = queries.iter().map(|q| word_length(q.as_ref())).collect();
    let bin = opts.char_bin.max(1);
    let mut char_histogram = BTreeMap::new();
    for c in &chars {
        *char_histogram.entry(c / bin * bin).or_insert(0) += 1;
    }
    let mut word_histogram = BTreeMap::new();
    for w in &words {
        *word_histogram.entry(*w).or_insert(0) += 1;
    }
    Ok(LengthStats {
        count: queries.len(),
        median_chars: median(&chars).unwrap_or_default(),
        median_words: median(&words).unwrap_or_default(),
        char_histogram,
        word_histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub room_distribution: BTreeMap<RoomCategory, usize>,
    pub room_pct: BTreeMap<RoomCategory, f64>,
    /// Share of classified queries that are situational; None if all deferred.
    pub situational_pct: Option<f64>,
    /// Share of classified queries that are spatial; None if all deferred.
    pub spatial_pct: Option<f64>,
    pub median_chars: f64,
    pub median_words: f64,
    pub histogram: LengthStats,
}

fn pct_of<T: PartialEq>(items: &[T], hit: T, skip: T) -> Option<f64> {
    let considered: Vec<&T> = items.iter().filter(|x| **x != skip).collect();
    if considered.is_empty() {
        None
    } else {
        Some(
            100.0 * considered.iter().filter(|x| ***x == hit).count() as f64
                / considered.len() as f64,
        )
    }
}

/// Aggregates labelled datapoints. Datapoints without labels count as
/// `no-room` and deferred on both axes.
pub fn stats_report(
    datapoints: &[SituationalDatapoint],
    opts: &LengthOptions,
) -> Result<StatsReport, EmptyInputError> {
    let queries: Vec<&str> = datapoints.iter().map(|d| d.query_text.as_str()).collect();
    let histogram = length_stats(&queries, opts)?;
    let labels: Vec<CategoryLabels> = datapoints
        .iter()
        .map(|d| {
            d.labels.unwrap_or(CategoryLabels {
                room: RoomCategory::NoRoom,
                situational: Situational::Deferred,
                temporal: Temporal::Deferred,
            })
        })
        .collect();
    let mut room_distribution: BTreeMap<RoomCategory, usize> =
        RoomCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for l in &labels {
        *room_distribution.entry(l.room).or_insert(0) += 1;
    }
    let total = datapoints.len();
    let room_pct = room_distribution
        .iter()
        .map(|(k, v)| (*k, 100.0 * *v as f64 / total as f64))
        .collect();
    let sit: Vec<Situational> = labels.iter().map(|l| l.situational).collect();
    let tem: Vec<Temporal> = labels.iter().map(|l| l.temporal).collect();
    Ok(StatsReport {
        total,
        room_distribution,
        room_pct,
        situational_pct: pct_of(&sit, Situational::Yes, Situational::Deferred),
        spatial_pct: pct_of(&tem, Temporal::Spatial, Temporal::Deferred),
        median_chars: histogram.median_chars,
        median_words: histogram.median_words,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{load_scene, ConsensusState, StateValue};
    use crate::test_support::ScriptedClassifier;

    fn scene() -> SceneGraph {
        load_scene(include_str!("../../../fixtures/house.json")).unwrap()
    }

    fn dp(q: &str, states: &[(&str, StateValue)]) -> SituationalDatapoint {
        SituationalDatapoint::new(
            "d",
            q,
            states
                .iter()
                .map(|(c, s)| ConsensusState::new(*c, *s))
                .collect(),
            vec![],
        )
    }

    #[test]
    fn room_keyword_wins() {
        let d = dp(
            "Is the bedroom ready for sleep?",
            &[("stove", StateValue::Off)],
        );
        assert_eq!(categorize_room(&d, Some(&scene())), RoomCategory::Bedroom);
        let d = dp("Are the kitchen and the bathroom clean?", &[]);
        assert_eq!(categorize_room(&d, None), RoomCategory::MultiRoom);
    }

    #[test]
    fn room_inferred_from_scene() {
        let g = scene();
        let d = dp(
            "Is dinner being cooked?",
            &[("stove", StateValue::On), ("microwave", StateValue::On)],
        );
        assert_eq!(categorize_room(&d, Some(&g)), RoomCategory::Kitchen);
        let d = dp(
            "Is everyone asleep?",
            &[("tv", StateValue::Off), ("desklamp", StateValue::Off)],
        );
        assert_eq!(categorize_room(&d, Some(&g)), RoomCategory::MultiRoom);
        let d = dp("Is it quiet?", &[]);
        assert_eq!(categorize_room(&d, Some(&g)), RoomCategory::NoRoom);
    }

    #[test]
    fn classify_uses_both_axes() {
        let d = dp("Is it bedtime?", &[]);
        let mut c = ScriptedClassifier::new([true, true]);
        assert_eq!(
            classify(&d, Some(&mut c)).unwrap(),
            (Situational::Yes, Temporal::Temporal)
        );
        assert_eq!(
            classify(&d, None).unwrap(),
            (Situational::Deferred, Temporal::Deferred)
        );
        let mut empty = ScriptedClassifier::new([]);
        assert!(classify(&d, Some(&mut empty)).is_err());
    }

    #[test]
    fn lengths_and_medians() {
        let opts = LengthOptions::default();
        assert_eq!(char_length("Is it on?", &opts), 8);
        assert_eq!(
            char_length(
                "Is it on?",
                &LengthOptions {
                    strip_question_mark: false,
                    ..opts
                }
            ),
            9
        );
        assert_eq!(word_length("Is  the room\tready?"), 4);
        let s = length_stats(
            &[
                "Is it on?",
                "Is the room ready for dinner?",
                "Are we done?",
                "Is x?",
            ],
            &opts,
        )
        .unwrap();
        assert_eq!(s.median_words, 3.0);
        assert_eq!(s.word_histogram[&3], 2);
        assert_eq!(length_stats::<&str>(&[], &opts), Err(EmptyInputError));
        assert_eq!(median(&[3, 1, 2]), Some(2.0));
    }

    #[test]
    fn report_percentages() {
        let mut a = dp("Is the kitchen ready?", &[]);
        a.labels = Some(CategoryLabels {
            room: RoomCategory::Kitchen,
            situational: Situational::Yes,
            temporal: Temporal::Spatial,
        });
        let mut b = dp("Is it late?", &[]);
        b.labels = Some(CategoryLabels {
            room: RoomCategory::NoRoom,
            situational: Situational::No,
            temporal: Temporal::Temporal,
        });
        let r = stats_report(&[a, b], &LengthOptions::default()).unwrap();
        assert_eq!(r.room_distribution[&RoomCategory::Kitchen], 1);
        assert_eq!(r.room_pct[&RoomCategory::NoRoom], 50.0);
        assert_eq!(r.situational_pct, Some(50.0));
        assert_eq!(r.spatial_pct, Some(50.0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["room_distribution"].get("multi-room").is_some());
    }
}
