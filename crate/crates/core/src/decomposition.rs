//! Expands a situational datapoint into per-object consensus questions and
//! strips room names from queries.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datapoint::SituationalDatapoint;
use crate::scene_graph::{Room, StateValue};

/// `Is the <class> <State>?` derived from one consensus state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusQuery {
    pub parent_id: String,
    #[serde(rename = "class")]
    pub class_name: String,
    pub state: StateValue,
    pub text: String,
}

pub fn consensus_text(class_name: &str, state: StateValue) -> String {
    format!("Is the {class_name} {}?", state.surface())
}

pub fn decompose(d: &SituationalDatapoint) -> Vec<ConsensusQuery> {
    d.consensus_states
        .iter()
        .map(|cs| ConsensusQuery {
            parent_id: d.id.clone(),
            class_name: cs.class_name.clone(),
            state: cs.state,
            text: consensus_text(&cs.class_name, cs.state),
        })
        .collect()
}

const GENERIC_PLACE: &str = "this place";

fn room_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(the\s+)?(living[\s_-]*room|kitchen|bedroom|bathroom)\b")
            .expect("room pattern compiles")
    })
}

/// Rooms named in the text, in order of first mention, without repeats.
pub fn room_mentions(text: &str) -> Vec<Room> {
    let mut seen = BTreeSet::new();
    room_regex()
        .captures_iter(text)
        .filter_map(|c| c[2].parse::<Room>().ok())
        .filter(|r| seen.insert(*r))
        .collect()
}

/// Replaces each room mention (with its leading "the") by "this place".
/// Capitalization of the first letter is kept.
pub fn genericize_room(query: &str) -> String {
    room_regex()
        .replace_all(query, |caps: &regex::Captures<'_>| {
            let starts_upper = caps[0].chars().next().is_some_and(char::is_uppercase);
            if starts_upper {
                "This place".to_string()
            } else {
                GENERIC_PLACE.to_string()
            }
        })
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::ConsensusState;

    #[test]
    fn working_in_bedroom_example() {
        let d = SituationalDatapoint::new(
            "d7",
            "Was someone working in the bedroom?",
            vec![
                ConsensusState::new("computer", StateValue::On),
                ConsensusState::new("lightswitch", StateValue::On),
            ],
            vec![],
        );
        let texts: Vec<String> = decompose(&d).into_iter().map(|q| q.text).collect();
        assert_eq!(texts, ["Is the computer On?", "Is the lightswitch On?"]);
    }

    #[test]
    fn singleton_and_absent_surface() {
        let d = SituationalDatapoint::new(
            "d8",
            "Is it?",
            vec![ConsensusState::new("soap", StateValue::Present)],
            vec![],
        );
        assert_eq!(decompose(&d)[0].text, "Is the soap Present?");
        assert_eq!(
            consensus_text("popcorn", StateValue::Absent),
            "Is the popcorn Absent?"
        );
    }

    #[test]
    fn consensus_query_jsonl_keys() {
        let q = ConsensusQuery {
            parent_id: "p".into(),
            class_name: "tv".into(),
            state: StateValue::On,
            text: "Is the tv On?".into(),
        };
        assert_eq!(
            serde_json::to_string(&q).unwrap(),
            r#"{"parent_id":"p","class":"tv","state":"ON","text":"Is the tv On?"}"#
        );
    }

    #[test]
    fn genericize_examples() {
        assert_eq!(
            genericize_room("Is the living room ready for movie night?"),
            "Is this place ready for movie night?"
        );
        assert_eq!(
            genericize_room("Is the living room prepared for a movie night?"),
            "Is this place prepared for a movie night?"
        );
        assert_eq!(
            genericize_room("Is the house ready for sleeptime?"),
            "Is the house ready for sleeptime?"
        );
        assert_eq!(
            genericize_room("Was someone in bedroom today?"),
            "Was someone in this place today?"
        );
        assert_eq!(
            genericize_room("The kitchen is clean?"),
            "This place is clean?"
        );
        assert_eq!(
            genericize_room("Is the livingroom tidy?"),
            "Is this place tidy?"
        );
        // class tokens that merely contain a room word stay intact
        assert_eq!(
            genericize_room("Is the kitchentable set?"),
            "Is the kitchentable set?"
        );
    }

    #[test]
    fn room_mentions_dedup() {
        assert_eq!(
            room_mentions("Are the kitchen and the living room and Kitchen clean?"),
            vec![Room::Kitchen, Room::Livingroom]
        );
        assert!(room_mentions("Is the house ready?").is_empty());
    }
}
