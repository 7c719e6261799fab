//! Household world model: object classes, binary state domains, rooms and
//! spatial relationships, with a feasibility denylist for relations the
//! simulator would refuse to set.
//!
//! A [`SceneGraph`] is immutable once built. [`SceneGraph::apply_consensus`]
//! returns a modified copy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene document does not match the schema: {0}")]
    Schema(String),
    #[error("invalid scene entity `{entity}`: {reason}")]
    Invariant { entity: String, reason: String },
    #[error("unknown object class `{0}`")]
    UnknownObject(String),
    #[error("relation `{0}` is not feasible: {1}")]
    InfeasibleRelation(String, String),
    #[error("object class `{class}` has no {domain} domain, cannot set {state}")]
    DomainMismatch {
        class: String,
        domain: StateDomain,
        state: StateValue,
    },
}

fn invariant(entity: impl Into<String>, reason: impl Into<String>) -> SceneError {
    SceneError::Invariant {
        entity: entity.into(),
        reason: reason.into(),
    }
}

/// A binary state property an object may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateDomain {
    OnOff,
    OpenClosed,
    PresentNone,
}

impl StateDomain {
    pub const ALL: [StateDomain; 3] = [
        StateDomain::OnOff,
        StateDomain::OpenClosed,
        StateDomain::PresentNone,
    ];

    pub fn values(self) -> [StateValue; 2] {
        match self {
            StateDomain::OnOff => [StateValue::On, StateValue::Off],
            StateDomain::OpenClosed => [StateValue::Open, StateValue::Closed],
            StateDomain::PresentNone => [StateValue::Present, StateValue::Absent],
        }
    }
}

impl fmt::Display for StateDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateDomain::OnOff => "ON/OFF",
            StateDomain::OpenClosed => "OPEN/CLOSED",
            StateDomain::PresentNone => "PRESENT/NONE",
        })
    }
}

/// One value of a [`StateDomain`]. Serialized upper-case (`"ON"`, `"NONE"`),
/// parsed case-insensitively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum StateValue {
    On,
    Off,
    Open,
    Closed,
    Present,
    /// The `NONE` side of the presence domain.
    Absent,
}

impl StateValue {
    pub const ALL: [StateValue; 6] = [
        StateValue::On,
        StateValue::Off,
        StateValue::Open,
        StateValue::Closed,
        StateValue::Present,
        StateValue::Absent,
    ];

    pub fn domain(self) -> StateDomain {
        match self {
            StateValue::On | StateValue::Off => StateDomain::OnOff,
            StateValue::Open | StateValue::Closed => StateDomain::OpenClosed,
            StateValue::Present | StateValue::Absent => StateDomain::PresentNone,
        }
    }

    /// The other value of the same domain.
    pub fn opposite(self) -> StateValue {
        match self {
            StateValue::On => StateValue::Off,
            StateValue::Off => StateValue::On,
            StateValue::Open => StateValue::Closed,
            StateValue::Closed => StateValue::Open,
            StateValue::Present => StateValue::Absent,
            StateValue::Absent => StateValue::Present,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StateValue::On => "ON",
            StateValue::Off => "OFF",
            StateValue::Open => "OPEN",
            StateValue::Closed => "CLOSED",
            StateValue::Present => "PRESENT",
            StateValue::Absent => "NONE",
        }
    }

    /// Word used when the state is read out in a question.
    pub fn surface(self) -> &'static str {
        match self {
            StateValue::On => "On",
            StateValue::Off => "Off",
            StateValue::Open => "Open",
            StateValue::Closed => "Closed",
            StateValue::Present => "Present",
            StateValue::Absent => "Absent",
        }
    }
}

impl fmt::Display for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<StateValue> for &'static str {
    fn from(v: StateValue) -> Self {
        v.as_str()
    }
}

impl FromStr for StateValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s
            .trim()
            .trim_matches(|c: char| c == '\'' || c == '"' || c == '`')
            .to_ascii_lowercase();
        Ok(match t.as_str() {
            "on" => StateValue::On,
            "off" => StateValue::Off,
            "open" | "opened" => StateValue::Open,
            "closed" | "close" => StateValue::Closed,
            "present" => StateValue::Present,
            "none" | "absent" => StateValue::Absent,
            _ => return Err(format!("unknown state `{}`", s.trim())),
        })
    }
}

impl TryFrom<String> for StateValue {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum Room {
    Kitchen,
    Livingroom,
    Bedroom,
    Bathroom,
}

impl Room {
    pub const ALL: [Room; 4] = [
        Room::Kitchen,
        Room::Livingroom,
        Room::Bedroom,
        Room::Bathroom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Room::Kitchen => "kitchen",
            Room::Livingroom => "livingroom",
            Room::Bedroom => "bedroom",
            Room::Bathroom => "bathroom",
        }
    }
}

impl fmt::Display for Room {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Room> for &'static str {
    fn from(r: Room) -> Self {
        r.as_str()
    }
}

impl FromStr for Room {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .trim()
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match folded.as_str() {
            "kitchen" => Room::Kitchen,
            "livingroom" => Room::Livingroom,
            "bedroom" => Room::Bedroom,
            "bathroom" => Room::Bathroom,
            _ => return Err(format!("unknown room `{}`", s.trim())),
        })
    }
}

impl TryFrom<String> for Room {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum Relation {
    Inside,
    On,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Inside => "INSIDE",
            Relation::On => "ON",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Relation> for &'static str {
    fn from(r: Relation) -> Self {
        r.as_str()
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inside" | "in" => Ok(Relation::Inside),
            "on" | "ontop" => Ok(Relation::On),
            _ => Err(format!("unknown relation `{}`", s.trim())),
        }
    }
}

impl TryFrom<String> for Relation {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Right-hand side of a relationship: a room, or an object named by id (in a
/// scene) or by class (in consensus data).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Target {
    Room(Room),
    Object(String),
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Room(r) => r.as_str(),
            Target::Object(o) => o,
        }
    }
}

impl From<String> for Target {
    fn from(s: String) -> Self {
        match s.parse::<Room>() {
            Ok(r) => Target::Room(r),
            Err(_) => Target::Object(s.trim().to_ascii_lowercase()),
        }
    }
}

impl From<Target> for String {
    fn from(t: Target) -> Self {
        t.name().to_string()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectNode {
    pub id: String,
    pub class_name: String,
    pub domains: BTreeSet<StateDomain>,
    pub states: BTreeMap<StateDomain, StateValue>,
    pub room: Option<Room>,
    /// Set for objects deliberately left without a room.
    pub unplaced: bool,
}

impl ObjectNode {
    pub fn state(&self, domain: StateDomain) -> Option<StateValue> {
        self.states.get(&domain).copied()
    }
}

/// A relationship between scene objects, by object id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relationship {
    pub subject: String,
    pub relation: Relation,
    pub target: Target,
}

impl fmt::Display for Relationship {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.subject, self.relation, self.target)
    }
}

/// A forbidden `(subject_class, relation, target_class)` triple. Rooms may
/// appear as the target class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(
    from = "(String, Relation, String)",
    into = "(String, Relation, String)"
)]
pub struct FeasibilityRule {
    pub subject_class: String,
    pub relation: Relation,
    pub target_class: String,
}

impl From<(String, Relation, String)> for FeasibilityRule {
    fn from((s, r, t): (String, Relation, String)) -> Self {
        FeasibilityRule {
            subject_class: s.to_ascii_lowercase(),
            relation: r,
            target_class: t.to_ascii_lowercase(),
        }
    }
}

impl From<FeasibilityRule> for (String, Relation, String) {
    fn from(r: FeasibilityRule) -> Self {
        (r.subject_class, r.relation, r.target_class)
    }
}

/// `(class, state)` pair required by a situational datapoint.
/// Serialized as a two-element array.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(String, StateValue)", into = "(String, StateValue)")]
pub struct ConsensusState {
    pub class_name: String,
    pub state: StateValue,
}

impl ConsensusState {
    pub fn new(class_name: impl Into<String>, state: StateValue) -> Self {
        ConsensusState {
            class_name: class_name.into().to_ascii_lowercase(),
            state,
        }
    }
}

impl From<(String, StateValue)> for ConsensusState {
    fn from((c, s): (String, StateValue)) -> Self {
        ConsensusState::new(c, s)
    }
}

impl From<ConsensusState> for (String, StateValue) {
    fn from(c: ConsensusState) -> Self {
        (c.class_name, c.state)
    }
}

impl fmt::Display for ConsensusState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class_name, self.state)
    }
}

/// Relationship expressed over class names, as generated consensus data
/// states it ("towels INSIDE bathroom"). Serialized as a three-element array.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(
    from = "(String, Relation, Target)",
    into = "(String, Relation, Target)"
)]
pub struct ClassRelation {
    pub subject: String,
    pub relation: Relation,
    pub target: Target,
}

impl ClassRelation {
    pub fn new(subject: impl Into<String>, relation: Relation, target: Target) -> Self {
        ClassRelation {
            subject: subject.into().to_ascii_lowercase(),
            relation,
            target,
        }
    }
}

impl From<(String, Relation, Target)> for ClassRelation {
    fn from((s, r, t): (String, Relation, Target)) -> Self {
        ClassRelation::new(s, r, t)
    }
}

impl From<ClassRelation> for (String, Relation, Target) {
    fn from(c: ClassRelation) -> Self {
        (c.subject, c.relation, c.target)
    }
}

impl fmt::Display for ClassRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.subject, self.relation, self.target)
    }
}

// ---------------------------------------------------------------------------
// Document schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub objects: Vec<ObjectDoc>,
    pub relationships: Vec<RelationshipDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feasibility_denylist: Vec<FeasibilityRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    pub id: String,
    #[serde(rename = "class")]
    pub class_name: String,
    pub domains: Vec<StateDomain>,
    pub states: Vec<StateValue>,
    pub room: Option<Room>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unplaced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationshipDoc {
    pub subject: String,
    pub relation: Relation,
    pub target: String,
}

// ---------------------------------------------------------------------------
// SceneGraph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    objects: BTreeMap<String, ObjectNode>,
    relationships: BTreeSet<Relationship>,
    denylist: BTreeSet<FeasibilityRule>,
}

/// Parses and validates a scene document.
pub fn load_scene(source: &str) -> Result<SceneGraph, SceneError> {
    let doc: SceneDocument =
        serde_json::from_str(source).map_err(|e| SceneError::Schema(e.to_string()))?;
    SceneGraph::from_document(doc)
}

impl SceneGraph {
    pub fn from_document(doc: SceneDocument) -> Result<Self, SceneError> {
        let mut objects = BTreeMap::new();
        for o in doc.objects {
            if Room::from_str(&o.id).is_ok() {
                return Err(invariant(&o.id, "object id collides with a room name"));
            }
            if o.class_name.is_empty()
                || o.class_name.chars().any(char::is_whitespace)
                || o.class_name != o.class_name.to_ascii_lowercase()
            {
                return Err(invariant(
                    &o.id,
                    format!("class `{}` must be a lowercase token", o.class_name),
                ));
            }
            let domains: BTreeSet<StateDomain> = o.domains.iter().copied().collect();
            if domains.len() != o.domains.len() {
                return Err(invariant(&o.id, "domain listed twice"));
            }
            let mut states = BTreeMap::new();
            for s in &o.states {
                if !domains.contains(&s.domain()) {
                    return Err(invariant(
                        &o.id,
                        format!("state {s} outside declared domains"),
                    ));
                }
                if states.insert(s.domain(), *s).is_some() {
                    return Err(invariant(&o.id, format!("two states for {}", s.domain())));
                }
            }
            if states.len() != domains.len() {
                return Err(invariant(&o.id, "every declared domain needs one state"));
            }
            let node = ObjectNode {
                id: o.id.clone(),
                class_name: o.class_name,
                domains,
                states,
                room: o.room,
                unplaced: o.unplaced,
            };
            if objects.insert(o.id.clone(), node).is_some() {
                return Err(invariant(&o.id, "duplicate object id"));
            }
        }

        let denylist: BTreeSet<FeasibilityRule> = doc.feasibility_denylist.into_iter().collect();
        let mut graph = SceneGraph {
            objects,
            relationships: BTreeSet::new(),
            denylist,
        };

        for r in doc.relationships {
            if !graph.objects.contains_key(&r.subject) {
                return Err(invariant(&r.subject, "dangling relationship subject"));
            }
            let target = match r.target.parse::<Room>() {
                Ok(room) => Target::Room(room),
                Err(_) if graph.objects.contains_key(&r.target) => Target::Object(r.target.clone()),
                Err(_) => return Err(invariant(&r.target, "dangling relationship target")),
            };
            if target == Target::Object(r.subject.clone()) {
                return Err(invariant(&r.subject, "object related to itself"));
            }
            let rel = Relationship {
                subject: r.subject,
                relation: r.relation,
                target,
            };
            if let Some(rule) = graph.violated_rule(&rel) {
                return Err(invariant(
                    rel.to_string(),
                    format!(
                        "forbidden by feasibility rule ({} {} {})",
                        rule.subject_class, rule.relation, rule.target_class
                    ),
                ));
            }
            graph.relationships.insert(rel);
        }

        for node in graph.objects.values() {
            if node.room.is_none() && !node.unplaced && graph.resolved_room(&node.id).is_none() {
                return Err(invariant(
                    &node.id,
                    "object has no room, no relationship chain to a room, and is not flagged unplaced",
                ));
            }
        }
        Ok(graph)
    }

    pub fn to_document(&self) -> SceneDocument {
        SceneDocument {
            objects: self
                .objects
                .values()
                .map(|o| ObjectDoc {
                    id: o.id.clone(),
                    class_name: o.class_name.clone(),
                    domains: o.domains.iter().copied().collect(),
                    states: o.states.values().copied().collect(),
                    room: o.room,
                    unplaced: o.unplaced,
                })
                .collect(),
            relationships: self
                .relationships
                .iter()
                .map(|r| RelationshipDoc {
                    subject: r.subject.clone(),
                    relation: r.relation,
                    target: r.target.name().to_string(),
                })
                .collect(),
            feasibility_denylist: self.denylist.iter().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("scene document serializes")
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectNode> {
        self.objects.values()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectNode> {
        self.objects.get(id)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn relationships(&self) -> impl Iterator<Item = &Relationship> {
        self.relationships.iter()
    }

    pub fn denylist(&self) -> impl Iterator<Item = &FeasibilityRule> {
        self.denylist.iter()
    }

    /// Objects of a class, in id order.
    pub fn objects_of_class<'a>(
        &'a self,
        class: &'a str,
    ) -> impl Iterator<Item = &'a ObjectNode> + 'a {
        self.objects.values().filter(move |o| o.class_name == class)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.objects_of_class(class).next().is_some()
    }

    /// Distinct class names present in the scene.
    pub fn vocabulary(&self) -> BTreeSet<&str> {
        self.objects
            .values()
            .map(|o| o.class_name.as_str())
            .collect()
    }

    /// Union of the domains declared by objects of each class.
    pub fn class_domains(&self) -> BTreeMap<&str, BTreeSet<StateDomain>> {
        let mut out: BTreeMap<&str, BTreeSet<StateDomain>> = BTreeMap::new();
        for o in self.objects.values() {
            out.entry(o.class_name.as_str())
                .or_default()
                .extend(o.domains.iter().copied());
        }
        out
    }

    /// Room of an object: its own room, or the room reached by following
    /// relationships through containing objects.
    pub fn resolved_room(&self, id: &str) -> Option<Room> {
        let mut seen = BTreeSet::new();
        let mut frontier = vec![id.to_string()];
        while let Some(cur) = frontier.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            let node = self.objects.get(&cur)?;
            if let Some(room) = node.room {
                return Some(room);
            }
            for r in self.relationships.iter().filter(|r| r.subject == cur) {
                match &r.target {
                    Target::Room(room) => return Some(*room),
                    Target::Object(o) => frontier.push(o.clone()),
                }
            }
        }
        None
    }

    /// Rooms in which any object of the class resides.
    pub fn rooms_of_class(&self, class: &str) -> BTreeSet<Room> {
        self.objects_of_class(class)
            .filter_map(|o| self.resolved_room(&o.id))
            .collect()
    }

    fn class_of_target<'a>(&'a self, target: &'a Target) -> &'a str {
        match target {
            Target::Room(r) => r.as_str(),
            Target::Object(id) => self
                .objects
                .get(id)
                .map(|o| o.class_name.as_str())
                .unwrap_or(id),
        }
    }

    fn violated_rule(&self, rel: &Relationship) -> Option<&FeasibilityRule> {
        let subject_class = self.objects.get(&rel.subject)?.class_name.as_str();
        let target_class = self.class_of_target(&rel.target);
        self.rule_for(subject_class, rel.relation, target_class)
    }

    fn rule_for(
        &self,
        subject: &str,
        relation: Relation,
        target: &str,
    ) -> Option<&FeasibilityRule> {
        self.denylist.iter().find(|rule| {
            rule.subject_class == subject
                && rule.relation == relation
                && rule.target_class == target
        })
    }

    /// Checks a class-level relation against the denylist and vocabulary
    /// without applying it.
    pub fn check_relation(&self, rel: &ClassRelation) -> Result<(), SceneError> {
        if !self.has_class(&rel.subject) {
            return Err(SceneError::UnknownObject(rel.subject.clone()));
        }
        if let Target::Object(class) = &rel.target {
            if !self.has_class(class) {
                return Err(SceneError::UnknownObject(class.clone()));
            }
            if *class == rel.subject {
                return Err(SceneError::InfeasibleRelation(
                    rel.to_string(),
                    "subject and target are the same".into(),
                ));
            }
        }
        if self
            .rule_for(&rel.subject, rel.relation, rel.target.name())
            .is_some()
        {
            return Err(SceneError::InfeasibleRelation(
                rel.to_string(),
                "forbidden by feasibility denylist".into(),
            ));
        }
        Ok(())
    }

    /// Returns a copy of the graph in which every listed class holds its
    /// requested state and every listed relation is present.
    ///
    /// States apply to every object of the class. Setting `NONE` on a class
    /// missing from the scene is a no-op since absence already satisfies it.
    pub fn apply_consensus(
        &self,
        states: &[ConsensusState],
        relations: &[ClassRelation],
    ) -> Result<SceneGraph, SceneError> {
        let mut next = self.clone();
        for cs in states {
            let ids: Vec<String> = self
                .objects_of_class(&cs.class_name)
                .map(|o| o.id.clone())
                .collect();
            if ids.is_empty() {
                if cs.state == StateValue::Absent {
                    continue;
                }
                return Err(SceneError::UnknownObject(cs.class_name.clone()));
            }
            let domain = cs.state.domain();
            for id in ids {
                let node = next.objects.get_mut(&id).expect("id from same graph");
                if !node.domains.contains(&domain) {
                    return Err(SceneError::DomainMismatch {
                        class: cs.class_name.clone(),
                        domain,
                        state: cs.state,
                    });
                }
                node.states.insert(domain, cs.state);
            }
        }

        for rel in relations {
            self.check_relation(rel)?;
            let target = match &rel.target {
                Target::Room(r) => Target::Room(*r),
                Target::Object(class) => Target::Object(
                    self.objects_of_class(class)
                        .next()
                        .map(|o| o.id.clone())
                        .expect("checked above"),
                ),
            };
            let subjects: Vec<String> = self
                .objects_of_class(&rel.subject)
                .map(|o| o.id.clone())
                .collect();
            for subject in subjects {
                if let (Relation::Inside, Target::Room(room)) = (rel.relation, &target) {
                    next.relationships.retain(|r| {
                        !(r.subject == subject
                            && r.relation == Relation::Inside
                            && matches!(r.target, Target::Room(_)))
                    });
                    next.objects.get_mut(&subject).expect("same graph").room = Some(*room);
                }
                next.relationships.insert(Relationship {
                    subject,
                    relation: rel.relation,
                    target: target.clone(),
                });
            }
        }
        Ok(next)
    }

    /// True iff some object of `class` holds `expected`.
    ///
    /// Presence is existential: a class missing from the scene reads as
    /// `NONE`, and an object without a presence domain reads as `PRESENT`.
    pub fn query_state(&self, class: &str, expected: StateValue) -> bool {
        let mut objs = self.objects_of_class(class).peekable();
        if objs.peek().is_none() {
            return expected == StateValue::Absent;
        }
        objs.any(|o| match o.state(expected.domain()) {
            Some(v) => v == expected,
            None => expected == StateValue::Present,
        })
    }

    /// True iff some object of the subject class stands in the relation to
    /// the target. `INSIDE <room>` also holds through the resolved room.
    pub fn holds_relation(&self, rel: &ClassRelation) -> bool {
        self.objects_of_class(&rel.subject)
            .any(|subject| match &rel.target {
                Target::Room(room) => {
                    self.relationships.contains(&Relationship {
                        subject: subject.id.clone(),
                        relation: rel.relation,
                        target: Target::Room(*room),
                    }) || (rel.relation == Relation::Inside
                        && self.resolved_room(&subject.id) == Some(*room))
                }
                Target::Object(class) => self.objects_of_class(class).any(|t| {
                    self.relationships.contains(&Relationship {
                        subject: subject.id.clone(),
                        relation: rel.relation,
                        target: Target::Object(t.id.clone()),
                    })
                }),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture() -> SceneGraph {
        load_scene(include_str!("../../../fixtures/house.json")).unwrap()
    }

    #[test]
    fn fixture_loads_with_thirty_objects() {
        let g = fixture();
        assert_eq!(g.len(), 30);
        assert_eq!(g.vocabulary().len(), 30);
        assert_eq!(g.resolved_room("apple_1"), Some(Room::Kitchen));
        assert_eq!(g.resolved_room("remotecontrol_1"), Some(Room::Livingroom));
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let doc = r#"{"objects":[{"id":"tv_1","class":"tv","domains":["on_off"],"states":["ON"],"room":"livingroom"}],
            "relationships":[{"subject":"tv_1","relation":"ON","target":"ghost"}]}"#;
        match load_scene(doc) {
            Err(SceneError::Invariant { entity, .. }) => assert_eq!(entity, "ghost"),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn forbidden_relation_in_document_is_rejected() {
        let doc = r#"{"objects":[
            {"id":"c","class":"computer","domains":["on_off"],"states":["OFF"],"room":"bedroom"},
            {"id":"f","class":"fridge","domains":["open_closed"],"states":["CLOSED"],"room":"kitchen"}],
            "relationships":[{"subject":"c","relation":"INSIDE","target":"f"}],
            "feasibility_denylist":[["computer","INSIDE","fridge"]]}"#;
        assert!(matches!(load_scene(doc), Err(SceneError::Invariant { .. })));
    }

    #[test]
    fn duplicate_id_and_bad_states_rejected() {
        let dup = r#"{"objects":[
            {"id":"a","class":"tv","domains":[],"states":[],"room":"kitchen"},
            {"id":"a","class":"lamp","domains":[],"states":[],"room":"kitchen"}],"relationships":[]}"#;
        assert!(
            matches!(load_scene(dup), Err(SceneError::Invariant { entity, .. }) if entity == "a")
        );
        let missing = r#"{"objects":[{"id":"a","class":"tv","domains":["on_off"],"states":[],"room":"kitchen"}],"relationships":[]}"#;
        assert!(load_scene(missing).is_err());
        let wrong = r#"{"objects":[{"id":"a","class":"tv","domains":["on_off"],"states":["OPEN"],"room":"kitchen"}],"relationships":[]}"#;
        assert!(load_scene(wrong).is_err());
        let unplaced = r#"{"objects":[{"id":"a","class":"tv","domains":[],"states":[],"room":null}],"relationships":[]}"#;
        assert!(load_scene(unplaced).is_err());
        let flagged = r#"{"objects":[{"id":"a","class":"tv","domains":[],"states":[],"room":null,"unplaced":true}],"relationships":[]}"#;
        assert!(load_scene(flagged).is_ok());
    }

    #[test]
    fn malformed_document_is_schema_error() {
        assert!(matches!(
            load_scene("{\"objects\": 3}"),
            Err(SceneError::Schema(_))
        ));
        assert!(matches!(load_scene("not json"), Err(SceneError::Schema(_))));
    }

    #[test]
    fn apply_sets_state_and_leaves_others_untouched() {
        let g = fixture();
        let tv = g
            .apply_consensus(&[ConsensusState::new("tv", StateValue::On)], &[])
            .unwrap();
        assert_eq!(
            tv.object("tv_1").unwrap().state(StateDomain::OnOff),
            Some(StateValue::On)
        );

        let opened = g
            .apply_consensus(&[ConsensusState::new("fridge", StateValue::Open)], &[])
            .unwrap();
        assert!(opened.query_state("fridge", StateValue::Open));
        for o in g.objects().filter(|o| o.class_name != "fridge") {
            assert_eq!(opened.object(&o.id), Some(o));
        }
        assert_eq!(
            g.relationships().collect::<Vec<_>>(),
            opened.relationships().collect::<Vec<_>>()
        );
    }

    #[test]
    fn apply_errors() {
        let g = fixture();
        let infeasible = ClassRelation::new(
            "computer",
            Relation::Inside,
            Target::Object("fridge".into()),
        );
        assert!(matches!(
            g.apply_consensus(&[], &[infeasible]),
            Err(SceneError::InfeasibleRelation(..))
        ));
        assert!(matches!(
            g.apply_consensus(&[ConsensusState::new("tv", StateValue::Open)], &[]),
            Err(SceneError::DomainMismatch { .. })
        ));
        assert!(matches!(
            g.apply_consensus(&[ConsensusState::new("unicorn", StateValue::On)], &[]),
            Err(SceneError::UnknownObject(c)) if c == "unicorn"
        ));
        // absence of an absent class is already satisfied
        assert!(g
            .apply_consensus(&[ConsensusState::new("unicorn", StateValue::Absent)], &[])
            .is_ok());
    }

    #[test]
    fn query_state_semantics() {
        let g = fixture();
        let lit = g
            .apply_consensus(&[ConsensusState::new("lightswitch", StateValue::On)], &[])
            .unwrap();
        assert!(lit.query_state("lightswitch", StateValue::On));
        assert!(!g.query_state("unicorn", StateValue::Present));
        assert!(g.query_state("unicorn", StateValue::Absent));
        // sofa has no presence domain but exists
        assert!(g.query_state("sofa", StateValue::Present));
        assert!(!g.query_state("towels", StateValue::Present));
        let towels = g
            .apply_consensus(&[ConsensusState::new("towels", StateValue::Present)], &[])
            .unwrap();
        assert!(towels.query_state("towels", StateValue::Present));
    }

    #[test]
    fn apply_then_read_over_every_fixture_state() {
        let g = fixture();
        for o in g.objects() {
            for d in &o.domains {
                for v in d.values() {
                    let next = g
                        .apply_consensus(&[ConsensusState::new(&o.class_name, v)], &[])
                        .unwrap();
                    assert!(next.query_state(&o.class_name, v), "{} {v}", o.class_name);
                    assert!(!next.query_state(&o.class_name, v.opposite()));
                }
            }
        }
    }

    #[test]
    fn room_relation_moves_object() {
        let g = fixture();
        let rel = ClassRelation::new("towels", Relation::Inside, Target::Room(Room::Bedroom));
        assert!(!g.holds_relation(&rel));
        let moved = g.apply_consensus(&[], std::slice::from_ref(&rel)).unwrap();
        assert!(moved.holds_relation(&rel));
        assert_eq!(
            moved.rooms_of_class("towels"),
            BTreeSet::from([Room::Bedroom])
        );
        let on = ClassRelation::new("apple", Relation::On, Target::Object("kitchentable".into()));
        let placed = g.apply_consensus(&[], std::slice::from_ref(&on)).unwrap();
        assert!(placed.holds_relation(&on));
        // existing containment already holds
        assert!(g.holds_relation(&ClassRelation::new(
            "apple",
            Relation::Inside,
            Target::Object("fridge".into())
        )));
        assert!(g.holds_relation(&ClassRelation::new(
            "apple",
            Relation::Inside,
            Target::Room(Room::Kitchen)
        )));
    }

    #[test]
    fn state_value_parsing_is_lenient() {
        assert_eq!("'On'".parse::<StateValue>().unwrap(), StateValue::On);
        assert_eq!("NONE".parse::<StateValue>().unwrap(), StateValue::Absent);
        assert_eq!(
            " present ".parse::<StateValue>().unwrap(),
            StateValue::Present
        );
        assert!("cooked".parse::<StateValue>().is_err());
        assert_eq!("living room".parse::<Room>().unwrap(), Room::Livingroom);
    }
}
