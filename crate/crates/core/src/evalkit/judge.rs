use serde::{Deserialize, Serialize};

use crate::model::Trajectory;
use crate::policy::{complete, Backend, BackendError, ChatMessage, RequestTags};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Success,
    NotSuccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub verdict: Verdict,
    pub rationale: String,
}

impl JudgeVerdict {
    pub fn is_success(&self) -> bool {
        self.verdict == Verdict::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(#[from] BackendError),
    #[error("judge reply has no SUCCESS / NOT SUCCESS verdict: {0:?}")]
    UnparseableVerdict(String),
}

/// Read the verdict from a judge reply. The last `SUCCESS` token wins; it
/// counts as NOT_SUCCESS when immediately preceded by `NOT` (space or
/// underscore separated). Matching is case-sensitive so prose such as
/// "successfully" is ignored.
pub fn parse_verdict(reply: &str) -> Result<JudgeVerdict, JudgeError> {
    const TOKEN: &str = "SUCCESS";
    let mut found = None;
    let mut from = 0;
    while let Some(off) = reply[from..].find(TOKEN) {
        let at = from + off;
        let end = at + TOKEN.len();
        // Skip tokens embedded in longer uppercase words (SUCCESSFUL).
        let boundary = !reply[end..].starts_with(|c: char| c.is_ascii_alphanumeric());
        if boundary {
            found = Some(at);
        }
        from = end;
    }
    let at = found.ok_or_else(|| JudgeError::UnparseableVerdict(reply.to_string()))?;
    let before = &reply[..at];
    let (verdict, cut) = match before
        .strip_suffix("NOT ")
        .or_else(|| before.strip_suffix("NOT_"))
    {
        Some(rest) => (Verdict::NotSuccess, rest.len()),
        None => (Verdict::Success, at),
    };
    let rationale = reply[..cut]
        .trim_end()
        .trim_end_matches(|c: char| c == '\'' || c == '"' || c == '*' || c == ':')
        .trim()
        .to_string();
    Ok(JudgeVerdict { verdict, rationale })
}

/// Ask a judge model whether `traj` accomplished its query. The judge sees
/// the instruction, the last observed tree and the final answer.
pub fn judge_trajectory(backend: &dyn Backend, traj: &Trajectory) -> Result<JudgeVerdict, JudgeError> {
    let last = traj.steps.last().map(|s| &s.observation);
    let tree = last.map(|o| o.tree_text()).unwrap_or("");
    let response = traj.final_answer().unwrap_or("");
    let mut tags = RequestTags::for_query(&traj.query_id);
    if let Some(o) = last {
        tags = tags.with_observation(o);
    }
    let reply = complete(
        backend,
        prompts::JUDGE_SYSTEM,
        vec![ChatMessage::user(prompts::judge_user(&traj.query_text, tree, response))],
        tags,
    )?;
    parse_verdict(&reply.text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_success() {
        let v = parse_verdict("The price matches the page. SUCCESS").unwrap();
        assert_eq!(v.verdict, Verdict::Success);
        assert_eq!(v.rationale, "The price matches the page.");
    }

    #[test]
    fn not_success_contains_success() {
        let v = parse_verdict("The answer is wrong.\nVerdict: NOT SUCCESS").unwrap();
        assert_eq!(v.verdict, Verdict::NotSuccess);
        assert_eq!(v.rationale, "The answer is wrong.\nVerdict");
        assert_eq!(parse_verdict("NOT_SUCCESS").unwrap().verdict, Verdict::NotSuccess);
    }

    #[test]
    fn last_token_wins() {
        let v = parse_verdict("At first it looks like SUCCESS, but the total is off: NOT SUCCESS").unwrap();
        assert_eq!(v.verdict, Verdict::NotSuccess);
        let v = parse_verdict("Not NOT SUCCESS after all, the final verdict is 'SUCCESS'.").unwrap();
        assert_eq!(v.verdict, Verdict::Success);
    }

    #[test]
    fn neither_token() {
        assert!(matches!(
            parse_verdict("The task was completed successfully."),
            Err(JudgeError::UnparseableVerdict(_))
        ));
        assert!(parse_verdict("SUCCESSFUL").is_err());
    }
}
