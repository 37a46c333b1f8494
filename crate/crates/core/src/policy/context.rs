use crate::model::{Action, Observation, Step, Thought};
use crate::prompts;

/// One earlier step as the agent sees it. `observation` is `None` once the
/// step has fallen outside the clip window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEntry {
    /// 1-based step number.
    pub step: usize,
    pub observation: Option<Observation>,
    pub thought: Thought,
    pub action: Action,
}

/// The agent's input at step `t`: instructions, the query, every earlier
/// thought and action, the observations of the last `k - 1` earlier steps,
/// and the current observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptContext {
    pub system_instructions: String,
    pub query_text: String,
    pub entries: Vec<ContextEntry>,
    pub current: Observation,
    pub k: usize,
}

/// Build the context for the step after `history`, keeping only the most
/// recent `k` observations (current one included). `k` must be at least 1.
pub fn clip_context(
    query_text: &str,
    history: &[Step],
    current: &Observation,
    k: usize,
) -> PromptContext {
    assert!(k >= 1, "clip window must be positive");
    let entries = history
        .iter()
        .enumerate()
        .map(|(i, s)| ContextEntry {
            step: i + 1,
            observation: Some(s.observation.clone()),
            thought: s.thought.clone(),
            action: s.action.clone(),
        })
        .collect();
    PromptContext {
        system_instructions: prompts::system_prompt(),
        query_text: query_text.to_string(),
        entries,
        current: current.clone(),
        k,
    }
    .clip(k)
}

impl PromptContext {
    /// Index `t` of the step being decided.
    pub fn t(&self) -> usize {
        self.entries.len() + 1
    }

    /// Drop observations of steps older than `t - k + 1`.
    pub fn clip(mut self, k: usize) -> Self {
        assert!(k >= 1, "clip window must be positive");
        let t = self.t();
        for e in &mut self.entries {
            if e.step + k <= t {
                e.observation = None;
            }
        }
        self.k = k;
        self
    }

    /// Step numbers whose observations are still present.
    pub fn retained_steps(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.observation.is_some())
            .map(|e| e.step)
            .collect()
    }

    /// The user-turn text: objective, earlier steps, current observation.
    pub fn render_user(&self) -> String {
        let mut out = format!("OBJECTIVE: {}\n\n", self.query_text);
        if !self.entries.is_empty() {
            out.push_str("PREVIOUS STEPS:\n");
            for e in &self.entries {
                out.push_str(&format!("Step {}:\n", e.step));
                match &e.observation {
                    Some(o) => {
                        out.push_str("OBSERVATION:\n");
                        out.push_str(o.tree_text().trim_end());
                        out.push('\n');
                    }
                    None => out.push_str("OBSERVATION: (omitted)\n"),
                }
                out.push_str(&format!(
                    "Thought: {}\nAction: ```{}```\n\n",
                    e.thought.text, e.action
                ));
            }
        }
        out.push_str("CURRENT OBSERVATION:\n");
        out.push_str(self.current.tree_text().trim_end());
        out
    }
}
