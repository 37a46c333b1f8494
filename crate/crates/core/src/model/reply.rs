use serde::{Deserialize, Serialize};

use super::{parse_action, Action, ProtocolError};

/// Free-form rationale emitted before an action.
///
/// `think_block` holds the enumerated candidate deliberation that precedes
/// the outer thought in branch-verbalized replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub text: String,
    #[serde(default)]
    pub think_block: Option<String>,
}

impl Thought {
    pub fn new(text: impl Into<String>) -> Self {
        Thought {
            text: text.into(),
            think_block: None,
        }
    }

    pub fn with_think_block(text: impl Into<String>, block: impl Into<String>) -> Self {
        Thought {
            text: text.into(),
            think_block: Some(block.into()),
        }
    }
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const THOUGHT_MARK: &str = "Thought:";
const ACTION_MARK: &str = "Action:";

/// Render a thought and action in the reply format the agent is prompted to
/// produce. `parse_agent_reply` inverts this.
pub fn render_reply(thought: &Thought, action: &Action) -> String {
    let mut out = String::new();
    if let Some(block) = &thought.think_block {
        out.push_str(THINK_OPEN);
        out.push('\n');
        out.push_str(block);
        out.push('\n');
        out.push_str(THINK_CLOSE);
        out.push_str("\n\n");
    }
    out.push_str(THOUGHT_MARK);
    out.push(' ');
    out.push_str(&thought.text);
    out.push(' ');
    out.push_str(ACTION_MARK);
    out.push_str(" ```");
    out.push_str(&action.render());
    out.push_str("```");
    out
}

/// Split a model completion into its thought (with optional think block) and
/// its fenced action.
pub fn parse_agent_reply(text: &str) -> Result<(Thought, Action), ProtocolError> {
    let (think_block, body) = match text.find(THINK_OPEN) {
        Some(open) => {
            let after_open = &text[open + THINK_OPEN.len()..];
            match after_open.find(THINK_CLOSE) {
                Some(close) => (
                    Some(after_open[..close].trim().to_string()),
                    &after_open[close + THINK_CLOSE.len()..],
                ),
                // An unterminated block swallows the rest of the reply.
                None => (Some(after_open.trim().to_string()), ""),
            }
        }
        None => (None, text),
    };

    let action_pos = body.find(ACTION_MARK);
    let thought_pos = body.find(THOUGHT_MARK).filter(|&t| action_pos.map_or(true, |a| t < a));

    let thought_text = thought_pos.map(|t| {
        let start = t + THOUGHT_MARK.len();
        let end = action_pos.unwrap_or(body.len());
        body[start..end].trim().to_string()
    });
    let thought_text = match thought_text {
        Some(t) if !t.is_empty() => t,
        _ => return Err(ProtocolError::MissingThought),
    };

    let action_pos = action_pos.ok_or(ProtocolError::MissingAction)?;
    let after = &body[action_pos + ACTION_MARK.len()..];
    let expr = match after.find("```") {
        Some(open) => {
            let inner = &after[open + 3..];
            match inner.find("```") {
                Some(close) => &inner[..close],
                None => inner,
            }
        }
        None => after.lines().next().unwrap_or(""),
    };
    if expr.trim().is_empty() {
        return Err(ProtocolError::MissingAction);
    }
    let action = parse_action(expr)?;

    Ok((
        Thought {
            text: thought_text,
            think_block,
        },
        action,
    ))
}
