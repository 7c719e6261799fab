//! Situational embodied-QA dataset tooling: a household scene-graph model,
//! the iterative generate/deduplicate loop, validation, consensus
//! decomposition, annotation aggregation and evaluation metrics.

pub mod analysis;
pub mod annotation;
pub mod datapoint;
pub mod decomposition;
pub mod embedding;
pub mod evaluation;
pub mod pge;
pub mod provider;
pub mod scene_graph;

pub use analysis::{CategoryLabels, RoomCategory};
pub use annotation::{
    AnnotationRecord, AnnotationStore, GroundTruthLabel, Mode, StudyConfig, Task,
};
pub use datapoint::{SituationalDatapoint, Validator, ValidityVerdict};
pub use embedding::{EmbeddingProvider, HashedBowEmbedder, QueryDatabase};
pub use evaluation::{Answer, AnswerValue, EvalReport, Prediction};
pub use pge::{GenerationConfig, PgeEngine};
pub use provider::{ChatProvider, CompletionParams, Message, ReplayProvider};
pub use scene_graph::{load_scene, SceneGraph, StateValue};

#[cfg(test)]
pub(crate) mod test_support {
    use std::collections::VecDeque;

    use crate::datapoint::{Axis, QueryClassifier};
    use crate::provider::ProviderError;

    /// Answers classification calls from a fixed queue.
    pub struct ScriptedClassifier {
        answers: VecDeque<bool>,
        served: usize,
    }

    impl ScriptedClassifier {
        pub fn new<const N: usize>(answers: [bool; N]) -> Self {
            ScriptedClassifier {
                answers: answers.into_iter().collect(),
                served: 0,
            }
        }
    }

    impl QueryClassifier for ScriptedClassifier {
        fn classify(&mut self, _axis: Axis, _query: &str) -> Result<bool, ProviderError> {
            let a = self
                .answers
                .pop_front()
                .ok_or(ProviderError::TranscriptExhausted(self.served))?;
            self.served += 1;
            Ok(a)
        }
    }
}
