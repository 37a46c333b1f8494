use serde::{Deserialize, Serialize};

use super::{Action, Observation, Thought};

/// Which process produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[serde(rename = "self")]
    SelfPlay,
    Lookahead,
    Branch,
    Rollback,
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Stopped,
    StepLimit,
    EnvError,
    /// A synthesized rollback trajectory that ends at its goback step.
    Truncated,
}

/// One (observation, thought, action) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub observation: Observation,
    pub thought: Thought,
    pub action: Action,
    provenance: Provenance,
    pub tokens: u64,
}

impl Step {
    pub fn new(
        observation: Observation,
        thought: Thought,
        action: Action,
        provenance: Provenance,
        tokens: u64,
    ) -> Self {
        Step {
            observation,
            thought,
            action,
            provenance,
            tokens,
        }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Same observation and action with a replacement thought and provenance.
    pub fn rethought(&self, thought: Thought, provenance: Provenance, tokens: u64) -> Self {
        Step {
            observation: self.observation.clone(),
            thought,
            action: self.action.clone(),
            provenance,
            tokens,
        }
    }
}

/// Flat wire form of a step.
#[derive(Serialize, Deserialize)]
struct StepRecord {
    observation: Observation,
    thought: String,
    think_block: Option<String>,
    action: Action,
    provenance: Provenance,
    tokens: u64,
}

impl Serialize for Step {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StepRecord {
            observation: self.observation.clone(),
            thought: self.thought.text.clone(),
            think_block: self.thought.think_block.clone(),
            action: self.action.clone(),
            provenance: self.provenance,
            tokens: self.tokens,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = StepRecord::deserialize(deserializer)?;
        Ok(Step {
            observation: r.observation,
            thought: Thought {
                text: r.thought,
                think_block: r.think_block,
            },
            action: r.action,
            provenance: r.provenance,
            tokens: r.tokens,
        })
    }
}

/// A natural-language task bound to a site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query_text: String,
    pub site: String,
}

impl QueryRecord {
    pub fn new(
        query_id: impl Into<String>,
        query_text: impl Into<String>,
        site: impl Into<String>,
    ) -> Self {
        QueryRecord {
            query_id: query_id.into(),
            query_text: query_text.into(),
            site: site.into(),
        }
    }
}

/// Separator between a base query id and a synthetic variant suffix.
pub const VARIANT_SEPARATOR: char = '#';

/// The query a (possibly variant) id was derived from: `q3#rb1` -> `q3`.
pub fn base_query_id(id: &str) -> &str {
    id.split_once(VARIANT_SEPARATOR).map_or(id, |(base, _)| base)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub query_text: String,
    pub site: String,
    pub steps: Vec<Step>,
    pub terminal: Terminal,
}

impl Trajectory {
    pub fn new(q: &QueryRecord) -> Self {
        Trajectory {
            query_id: q.query_id.clone(),
            query_text: q.query_text.clone(),
            site: q.site.clone(),
            steps: Vec::new(),
            terminal: Terminal::EnvError,
        }
    }

    pub fn query(&self) -> QueryRecord {
        QueryRecord::new(&self.query_id, &self.query_text, &self.site)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens_generated(&self) -> u64 {
        self.steps.iter().map(|s| s.tokens).sum()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Answer of the final Stop, when the episode stopped.
    pub fn final_answer(&self) -> Option<&str> {
        match self.terminal {
            Terminal::Stopped => self.steps.last().and_then(|s| s.action.stop_answer()),
            _ => None,
        }
    }

    /// Checks the structural invariants: a stopped trajectory ends in Stop
    /// and the length stays within `max_steps` (when given).
    pub fn check(&self, max_steps: Option<usize>) -> Result<(), String> {
        if self.terminal == Terminal::Stopped {
            match self.steps.last() {
                Some(s) if s.action.is_stop() => {}
                _ => return Err(format!("{}: stopped trajectory does not end in stop", self.query_id)),
            }
        }
        if self.terminal != Terminal::EnvError && self.steps.is_empty() {
            return Err(format!("{}: empty trajectory", self.query_id));
        }
        if let Some(max) = max_steps {
            if self.steps.len() > max {
                return Err(format!(
                    "{}: {} steps exceeds limit {max}",
                    self.query_id,
                    self.steps.len()
                ));
            }
        }
        if let Some(i) = self.steps.iter().position(|s| s.thought.text.trim().is_empty()) {
            return Err(format!("{}: step {i} has an empty thought", self.query_id));
        }
        Ok(())
    }
}
