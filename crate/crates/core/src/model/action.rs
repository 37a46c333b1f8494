use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ProtocolError;

/// Page scroll direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScrollDirection {
    Up,
    Down,
}

impl ScrollDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
        }
    }
}

/// One atomic browser operation.
///
/// The canonical text form is the bracketed grammar the agent emits:
/// `click [7]`, `type [3] [query text] [1]`, `scroll [down]`, `goback`,
/// `restart`, `stop [answer]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click {
        element_id: u32,
    },
    Type {
        element_id: u32,
        content: String,
        press_enter: bool,
    },
    Scroll(ScrollDirection),
    GoBack,
    Restart,
    Stop {
        answer: String,
    },
}

impl Action {
    pub fn click(element_id: u32) -> Self {
        Action::Click { element_id }
    }

    pub fn type_text(element_id: u32, content: impl Into<String>, press_enter: bool) -> Self {
        Action::Type {
            element_id,
            content: content.into(),
            press_enter,
        }
    }

    pub fn stop(answer: impl Into<String>) -> Self {
        Action::Stop {
            answer: answer.into(),
        }
    }

    pub fn verb(&self) -> &'static str {
        match self {
            Action::Click { .. } => "click",
            Action::Type { .. } => "type",
            Action::Scroll(_) => "scroll",
            Action::GoBack => "goback",
            Action::Restart => "restart",
            Action::Stop { .. } => "stop",
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Action::Stop { .. })
    }

    /// Element targeted by the action, if any.
    pub fn element_id(&self) -> Option<u32> {
        match self {
            Action::Click { element_id } | Action::Type { element_id, .. } => Some(*element_id),
            _ => None,
        }
    }

    pub fn stop_answer(&self) -> Option<&str> {
        match self {
            Action::Stop { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click { element_id } => write!(f, "click [{element_id}]"),
            Action::Type {
                element_id,
                content,
                press_enter,
            } => write!(
                f,
                "type [{element_id}] [{content}] [{}]",
                u8::from(*press_enter)
            ),
            Action::Scroll(dir) => write!(f, "scroll [{}]", dir.as_str()),
            Action::GoBack => f.write_str("goback"),
            Action::Restart => f.write_str("restart"),
            Action::Stop { answer } => write!(f, "stop [{answer}]"),
        }
    }
}

impl FromStr for Action {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_action(&raw).map_err(serde::de::Error::custom)
    }
}

/// Strip one layer of triple-backtick fencing from an action expression.
fn strip_fence(text: &str) -> &str {
    let trimmed = text.trim();
    trimmed
        .strip_prefix("```")
        .and_then(|rest| rest.strip_suffix("```"))
        .map(str::trim)
        .unwrap_or(trimmed)
}

fn malformed(text: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedAction {
        text: text.to_string(),
        reason: reason.into(),
    }
}

/// Split `[inner] rest` into `(inner, rest)`, taking the first closing bracket.
fn take_bracket<'a>(original: &str, s: &'a str) -> Result<(&'a str, &'a str), ProtocolError> {
    let s = s.trim_start();
    let rest = s
        .strip_prefix('[')
        .ok_or_else(|| malformed(original, "expected '['"))?;
    let close = rest
        .find(']')
        .ok_or_else(|| malformed(original, "missing ']'"))?;
    Ok((&rest[..close], &rest[close + 1..]))
}

fn parse_element_id(original: &str, raw: &str) -> Result<u32, ProtocolError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(malformed(original, "missing element id"));
    }
    if !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(original, format!("element id '{raw}' is not a non-negative integer")));
    }
    raw.parse::<u32>()
        .map_err(|_| malformed(original, format!("element id '{raw}' out of range")))
}

/// Outermost bracket body: everything between the first `[` and the last `]`.
fn outer_bracket<'a>(original: &str, s: &'a str) -> Result<&'a str, ProtocolError> {
    let s = s.trim();
    let body = s
        .strip_prefix('[')
        .ok_or_else(|| malformed(original, "expected '['"))?;
    body.strip_suffix(']')
        .ok_or_else(|| malformed(original, "missing ']'"))
}

fn parse_enter_flag(raw: &str) -> Option<bool> {
    let raw = raw.trim();
    let value = raw
        .strip_prefix("press_enter_after=")
        .unwrap_or(raw)
        .trim();
    match value {
        "1" => Some(true),
        "0" => Some(false),
        _ => None,
    }
}

/// Parse one action expression, tolerating surrounding whitespace and a
/// triple-backtick fence.
pub fn parse_action(text: &str) -> Result<Action, ProtocolError> {
    let body = strip_fence(text);
    let verb_end = body
        .find(|c: char| c == '[' || c.is_whitespace())
        .unwrap_or(body.len());
    let verb = body[..verb_end].to_ascii_lowercase();
    let args = &body[verb_end..];

    match verb.as_str() {
        "click" => {
            let (id, rest) = take_bracket(text, args)?;
            if !rest.trim().is_empty() {
                return Err(malformed(text, "unexpected text after click target"));
            }
            Ok(Action::Click {
                element_id: parse_element_id(text, id)?,
            })
        }
        "type" => {
            let (id, rest) = take_bracket(text, args)?;
            let element_id = parse_element_id(text, id)?;
            let inner = outer_bracket(text, rest)?;
            // `content] [flag`: the flag is after the last "] [" separator.
            if let Some(pos) = inner.rfind("] [") {
                if let Some(press_enter) = parse_enter_flag(&inner[pos + 3..]) {
                    return Ok(Action::Type {
                        element_id,
                        content: inner[..pos].to_string(),
                        press_enter,
                    });
                }
            }
            // Enter is pressed by default when the flag is omitted.
            Ok(Action::Type {
                element_id,
                content: inner.to_string(),
                press_enter: true,
            })
        }
        "scroll" => {
            let inner = outer_bracket(text, args)?;
            let value = inner.trim();
            let value = value.strip_prefix("direction=").unwrap_or(value);
            match value.trim().to_ascii_lowercase().as_str() {
                "up" => Ok(Action::Scroll(ScrollDirection::Up)),
                "down" => Ok(Action::Scroll(ScrollDirection::Down)),
                other => Err(malformed(text, format!("unknown scroll direction '{other}'"))),
            }
        }
        "goback" | "go_back" => {
            if !args.trim().is_empty() {
                return Err(malformed(text, "goback takes no arguments"));
            }
            Ok(Action::GoBack)
        }
        "restart" => {
            if !args.trim().is_empty() {
                return Err(malformed(text, "restart takes no arguments"));
            }
            Ok(Action::Restart)
        }
        "stop" => {
            if args.trim().is_empty() {
                return Ok(Action::Stop {
                    answer: String::new(),
                });
            }
            Ok(Action::Stop {
                answer: outer_bracket(text, args)?.to_string(),
            })
        }
        "" => Err(malformed(text, "empty action")),
        other => Err(malformed(text, format!("unknown action verb '{other}'"))),
    }
}
