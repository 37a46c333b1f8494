//! Domain vocabulary: actions, observations, thoughts, steps and
//! trajectories, plus the text protocol the agent speaks.

mod action;
mod observation;
mod reply;
mod trajectory;

pub use action::{parse_action, Action, ScrollDirection};
pub use observation::{
    observation_fingerprint, Fingerprint, Normalizer, Observation, WhitespaceNormalizer,
};
pub use reply::{parse_agent_reply, render_reply, Thought};
pub use trajectory::{base_query_id, Provenance, VARIANT_SEPARATOR, QueryRecord, Step, Terminal, Trajectory};

/// A violation of the agent's reply protocol.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed action {text:?}: {reason}")]
    MalformedAction { text: String, reason: String },
    #[error("reply has no Thought segment")]
    MissingThought,
    #[error("reply has no Action segment")]
    MissingAction,
}
