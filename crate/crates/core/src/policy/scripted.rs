use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::{whitespace_tokens, Backend, BackendError, Completion, CompletionRequest};
use crate::model::Fingerprint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn items(&self) -> &[String] {
        match self {
            OneOrMany::One(s) => std::slice::from_ref(s),
            OneOrMany::Many(v) => v,
        }
    }
}

/// Conditions an entry places on a request. Absent fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_contains: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
}

impl ScriptMatch {
    /// Number of conditions that matched, or `None` on any mismatch.
    fn score(&self, request: &CompletionRequest, prompt: &str) -> Option<usize> {
        let tags = &request.tags;
        let mut hits = 0;
        if let Some(qid) = &self.query_id {
            (tags.query_id.as_deref() == Some(qid.as_str())).then_some(())?;
            hits += 1;
        }
        if let Some(fp) = &self.fingerprint {
            (tags.observation.as_ref().map(|o| o.fingerprint()) == Some(fp)).then_some(())?;
            hits += 1;
        }
        if let Some(needles) = &self.observation_contains {
            let text = tags.observation.as_ref()?.tree_text();
            for n in needles.items() {
                text.contains(n.as_str()).then_some(())?;
                hits += 1;
            }
        }
        if let Some(needles) = &self.prompt_contains {
            for n in needles.items() {
                prompt.contains(n.as_str()).then_some(())?;
                hits += 1;
            }
        }
        if let Some(ord) = self.ordinal {
            (tags.ordinal == ord).then_some(())?;
            hits += 1;
        }
        if let Some(att) = self.attempt {
            (tags.attempt == att).then_some(())?;
            hits += 1;
        }
        Some(hits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match", default)]
    pub when: ScriptMatch,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
}

/// Deterministic backend answering from a table of scripted replies.
///
/// The entry with the most satisfied conditions wins; ties go to the
/// earliest entry in the file.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    name: String,
    entries: Vec<ScriptEntry>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend {
            name: name.into(),
            entries,
        }
    }

    pub fn from_jsonl(name: impl Into<String>, text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("script line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(name, entries))
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(name, &text)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    fn describe_miss(&self, request: &CompletionRequest) -> String {
        let tags = &request.tags;
        let last = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let tail: String = last.chars().rev().take(80).collect::<Vec<_>>().into_iter().rev().collect();
        format!(
            "{}: query_id={:?} fingerprint={:?} ordinal={} attempt={} prompt tail={:?}",
            self.name,
            tags.query_id,
            tags.observation.as_ref().map(|o| o.fingerprint().short().to_string()),
            tags.ordinal,
            tags.attempt,
            tail
        )
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        let prompt = request.prompt_text();
        let mut best: Option<(usize, &ScriptEntry)> = None;
        for entry in &self.entries {
            if let Some(score) = entry.when.score(request, &prompt) {
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, entry));
                }
            }
        }
        let (_, entry) = best.ok_or_else(|| BackendError::ScriptMiss {
            key: self.describe_miss(request),
        })?;
        Ok(Completion {
            text: entry.reply.clone(),
            tokens: entry.tokens.unwrap_or_else(|| whitespace_tokens(&entry.reply)),
        })
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use crate::policy::backend::{complete, ChatMessage, RequestTags};

    #[test]
    fn prompt_echo() {
        let b = ScriptedBackend::from_jsonl(
            "t",
            r#"{"match": {"prompt_contains": ["sys", "hello"]}, "reply": "world", "tokens": 7}"#,
        )
        .unwrap();
        let out = complete(&b, "sys", vec![ChatMessage::user("hello")], RequestTags::default()).unwrap();
        assert_eq!(out.text, "world");
        assert_eq!(out.tokens, 7);
    }

    #[test]
    fn miss_names_the_key() {
        let b = ScriptedBackend::from_jsonl("judge", r#"{"match": {"query_id": "a"}, "reply": "x"}"#).unwrap();
        let err = complete(
            &b,
            "",
            vec![ChatMessage::user("unmatched prompt")],
            RequestTags::for_query("b"),
        )
        .unwrap_err();
        match err {
            BackendError::ScriptMiss { key } => {
                assert!(key.contains("judge"));
                assert!(key.contains("\"b\""));
                assert!(key.contains("unmatched prompt"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn most_specific_entry_wins() {
        let obs = Observation::new("[1] RootWebArea 'Phones'");
        let script = format!(
            "{}\n{}\n{}\n",
            r#"{"match": {}, "reply": "fallback reply here"}"#,
            r#"{"match": {"query_id": "q1"}, "reply": "query"}"#,
            serde_json::json!({"match": {"query_id": "q1", "fingerprint": obs.fingerprint()}, "reply": "exact"}),
        );
        let b = ScriptedBackend::from_jsonl("p", &script).unwrap();
        let ask = |tags: RequestTags| complete(&b, "", vec![ChatMessage::user("x")], tags).unwrap();
        assert_eq!(ask(RequestTags::for_query("q1").with_observation(&obs)).text, "exact");
        assert_eq!(ask(RequestTags::for_query("q1")).text, "query");
        let fallback = ask(RequestTags::for_query("q2"));
        assert_eq!(fallback.text, "fallback reply here");
        // no recorded count: whitespace tokens
        assert_eq!(fallback.tokens, 3);
    }

    #[test]
    fn ordinal_and_observation_conditions() {
        let b = ScriptedBackend::from_jsonl(
            "p",
            concat!(
                r#"{"match": {"observation_contains": "Phones", "ordinal": 0}, "reply": "first"}"#,
                "\n",
                r#"{"match": {"observation_contains": "Phones", "ordinal": 1}, "reply": "second"}"#,
            ),
        )
        .unwrap();
        let obs = Observation::new("[1] RootWebArea 'Phones'");
        let tags = RequestTags::default().with_observation(&obs);
        let first = complete(&b, "", vec![ChatMessage::user("x")], tags.clone()).unwrap();
        let second = complete(&b, "", vec![ChatMessage::user("x")], tags.clone().with_ordinal(1)).unwrap();
        assert_eq!((first.text.as_str(), second.text.as_str()), ("first", "second"));
        assert!(complete(&b, "", vec![ChatMessage::user("x")], tags.with_ordinal(2)).is_err());
    }

    #[test]
    fn empty_messages_rejected() {
        let b = ScriptedBackend::default();
        assert_eq!(
            complete(&b, "sys", vec![], RequestTags::default()),
            Err(BackendError::EmptyRequest)
        );
    }

    #[test]
    fn unknown_match_field_rejected() {
        assert!(ScriptedBackend::from_jsonl("p", r#"{"match": {"querry_id": "a"}, "reply": "x"}"#).is_err());
    }
}
