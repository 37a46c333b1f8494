use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::model::{Action, ScrollDirection};

/// What an element on a page can do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affordance {
    Clickable,
    Typable,
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub tree_text: String,
    pub elements: BTreeMap<u32, Affordance>,
    /// Scrolled-variant pages, keyed by direction.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scroll: BTreeMap<ScrollKey, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollKey {
    Up,
    Down,
}

impl From<ScrollDirection> for ScrollKey {
    fn from(d: ScrollDirection) -> Self {
        match d {
            ScrollDirection::Up => ScrollKey::Up,
            ScrollDirection::Down => ScrollKey::Down,
        }
    }
}

/// Action side of a transition key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionPattern {
    Click(u32),
    /// Typed content is matched case-insensitively against a pattern in which
    /// `*` matches any run of characters; press-enter is ignored.
    Type { element_id: u32, content: String },
}

impl ActionPattern {
    pub fn element_id(&self) -> u32 {
        match self {
            ActionPattern::Click(id) => *id,
            ActionPattern::Type { element_id, .. } => *element_id,
        }
    }

    pub fn matches(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionPattern::Click(id), Action::Click { element_id }) => id == element_id,
            (
                ActionPattern::Type {
                    element_id,
                    content,
                },
                Action::Type {
                    element_id: typed_id,
                    content: typed,
                    ..
                },
            ) => element_id == typed_id && glob_match(content, typed),
            _ => false,
        }
    }
}

/// Case-insensitive glob with `*` as the only metacharacter; both sides are
/// trimmed first.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let pattern: Vec<char> = pattern.trim().to_lowercase().chars().collect();
    let text: Vec<char> = text.trim().to_lowercase().chars().collect();
    let (mut p, mut t) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == '*' {
            star = Some((p, t));
            p += 1;
        } else if p < pattern.len() && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TransitionRecord", into = "TransitionRecord")]
pub struct Transition {
    pub from: String,
    pub pattern: ActionPattern,
    pub to: String,
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    from: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    click: Option<u32>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    type_into: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content: Option<String>,
    to: String,
}

impl TryFrom<TransitionRecord> for Transition {
    type Error = String;

    fn try_from(r: TransitionRecord) -> Result<Self, Self::Error> {
        let pattern = match (r.click, r.type_into, r.content) {
            (Some(id), None, None) => ActionPattern::Click(id),
            (None, Some(id), content) => ActionPattern::Type {
                element_id: id,
                content: content.unwrap_or_else(|| "*".to_string()),
            },
            _ => {
                return Err(format!(
                    "transition {} -> {}: exactly one of `click` or `type` (with optional `content`) is required",
                    r.from, r.to
                ))
            }
        };
        Ok(Transition {
            from: r.from,
            pattern,
            to: r.to,
        })
    }
}

impl From<Transition> for TransitionRecord {
    fn from(t: Transition) -> Self {
        let (click, type_into, content) = match t.pattern {
            ActionPattern::Click(id) => (Some(id), None, None),
            ActionPattern::Type {
                element_id,
                content,
            } => (None, Some(element_id), Some(content)),
        };
        TransitionRecord {
            from: t.from,
            click,
            type_into,
            content,
            to: t.to,
        }
    }
}

/// Rule-based reward for one query. Every present condition must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_page: Option<String>,
    /// Substrings the Stop answer must contain (case-insensitive).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_contains: Vec<String>,
}

impl SuccessPredicate {
    pub fn holds(&self, final_page: &str, answer: &str) -> bool {
        if let Some(page) = &self.final_page {
            if page != final_page {
                return false;
            }
        }
        let answer = answer.to_lowercase();
        self.answer_contains
            .iter()
            .all(|needle| answer.contains(&needle.to_lowercase()))
    }
}

/// A deterministic site: pages, an explicit transition table and
/// per-query success predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub start_page: String,
    pub pages: BTreeMap<String, Page>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    #[serde(default)]
    pub success: BTreeMap<String, SuccessPredicate>,
}

impl SiteSpec {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let site: SiteSpec =
            serde_json::from_str(text).map_err(|e| EnvError::InvalidSite(e.to_string()))?;
        site.validate()?;
        Ok(site)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::InvalidSite(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            EnvError::InvalidSite(msg) => EnvError::InvalidSite(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let invalid = |msg: String| Err(EnvError::InvalidSite(format!("{}: {msg}", self.site_id)));
        if !self.pages.contains_key(&self.start_page) {
            return Err(EnvError::UnknownSite(format!(
                "{}: start page '{}' is not defined",
                self.site_id, self.start_page
            )));
        }
        for (id, page) in &self.pages {
            for target in page.scroll.values() {
                if !self.pages.contains_key(target) {
                    return invalid(format!("page '{id}' scrolls to unknown page '{target}'"));
                }
            }
        }
        for t in &self.transitions {
            let Some(src) = self.pages.get(&t.from) else {
                return invalid(format!("transition from unknown page '{}'", t.from));
            };
            if !self.pages.contains_key(&t.to) {
                return invalid(format!("transition to unknown page '{}'", t.to));
            }
            let id = t.pattern.element_id();
            let wanted = match t.pattern {
                ActionPattern::Click(_) => Affordance::Clickable,
                ActionPattern::Type { .. } => Affordance::Typable,
            };
            match src.elements.get(&id) {
                Some(a) if *a == wanted => {}
                Some(a) => {
                    return invalid(format!(
                        "page '{}' element [{id}] is {a:?}, transition needs {wanted:?}",
                        t.from
                    ))
                }
                None => return invalid(format!("page '{}' has no element [{id}]", t.from)),
            }
        }
        for (qid, pred) in &self.success {
            if let Some(page) = &pred.final_page {
                if !self.pages.contains_key(page) {
                    return invalid(format!("query '{qid}' targets unknown page '{page}'"));
                }
            }
            if pred.final_page.is_none() && pred.answer_contains.is_empty() {
                return invalid(format!("query '{qid}' has an empty success predicate"));
            }
        }
        Ok(())
    }

    pub fn page(&self, id: &str) -> Result<&Page, EnvError> {
        self.pages
            .get(id)
            .ok_or_else(|| EnvError::UnknownPage(format!("{}/{id}", self.site_id)))
    }

    pub fn predicate(&self, query_id: &str) -> Result<&SuccessPredicate, EnvError> {
        self.success
            .get(query_id)
            .ok_or_else(|| EnvError::UnknownQuery(query_id.to_string()))
    }

    /// First transition out of `page` matching `action`, in declaration order.
    pub fn transition(&self, page: &str, action: &Action) -> Option<&Transition> {
        self.transitions
            .iter()
            .find(|t| t.from == page && t.pattern.matches(action))
    }

    /// Pages where the query can be completed: its final page when one is
    /// required, otherwise every page whose text carries all answer strings.
    pub fn success_pages(&self, query_id: &str) -> Result<BTreeSet<String>, EnvError> {
        let pred = self.predicate(query_id)?;
        if let Some(page) = &pred.final_page {
            return Ok(BTreeSet::from([page.clone()]));
        }
        Ok(self
            .pages
            .iter()
            .filter(|(_, p)| {
                let text = p.tree_text.to_lowercase();
                pred.answer_contains
                    .iter()
                    .all(|needle| text.contains(&needle.to_lowercase()))
            })
            .map(|(id, _)| id.clone())
            .collect())
    }

    /// Whether some success page is reachable from `page` through forward
    /// transitions and scroll variants (goback and restart excluded).
    pub fn reaches_success(&self, query_id: &str, page: &str) -> Result<bool, EnvError> {
        let targets = self.success_pages(query_id)?;
        self.page(page)?;
        let mut seen = BTreeSet::from([page.to_string()]);
        let mut queue = VecDeque::from([page.to_string()]);
        while let Some(current) = queue.pop_front() {
            if targets.contains(&current) {
                return Ok(true);
            }
            let scrolls = self.pages[&current].scroll.values();
            let links = self
                .transitions
                .iter()
                .filter(|t| t.from == current)
                .map(|t| &t.to);
            for next in scrolls.chain(links) {
                if seen.insert(next.clone()) {
                    queue.push_back(next.clone());
                }
            }
        }
        Ok(false)
    }
}
