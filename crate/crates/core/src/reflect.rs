//! Loop removal and lookahead re-verbalization of successful trajectories.

use serde::{Deserialize, Serialize};

use crate::curate::{CurationDataset, D_L};
use crate::env::{EnvError, SiteRegistry};
use crate::model::{base_query_id, Fingerprint, Provenance, QueryRecord, Step, Thought, Trajectory};
use crate::parallel::map_ordered;
use crate::policy::{complete, Backend, BackendError, ChatMessage, RequestTags};
use crate::prompts::{lookahead_prompt, LookaheadFields};
use crate::rollout::{self_assess, Judge};

/// Two steps with the same observation, `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopReport {
    pub i: usize,
    pub j: usize,
    pub fingerprint: Fingerprint,
}

/// Smallest `i`, then largest `j > i`, with `keys[i] == keys[j]`.
pub fn find_loop<K: Eq>(keys: &[K]) -> Option<(usize, usize)> {
    (0..keys.len()).find_map(|i| {
        (i + 1..keys.len())
            .rev()
            .find(|&j| keys[j] == keys[i])
            .map(|j| (i, j))
    })
}

/// Remove `items[i..j]` until no key repeats. Returns the survivors and
/// each removed `(i, j)` in the order applied.
pub fn splice_to_fixpoint_by<T, K: Eq>(
    mut items: Vec<T>,
    key: impl Fn(&T) -> K,
) -> (Vec<T>, Vec<(usize, usize)>) {
    let mut applied = Vec::new();
    loop {
        let keys: Vec<K> = items.iter().map(&key).collect();
        let Some((i, j)) = find_loop(&keys) else {
            return (items, applied);
        };
        items.drain(i..j);
        applied.push((i, j));
    }
}

pub fn detect_loop(traj: &Trajectory) -> Option<LoopReport> {
    let keys: Vec<&Fingerprint> = traj.steps.iter().map(|s| s.observation.fingerprint()).collect();
    find_loop(&keys).map(|(i, j)| LoopReport {
        i,
        j,
        fingerprint: keys[i].clone(),
    })
}

/// Drop steps `i..j`; step `j` takes step `i`'s place. Length becomes
/// `T - (j - i)`.
pub fn splice(traj: &Trajectory, r: &LoopReport) -> Trajectory {
    assert!(r.i < r.j && r.j < traj.len(), "loop report out of range");
    let mut out = traj.clone();
    out.steps.drain(r.i..r.j);
    out
}

/// Splice repeatedly until no observation repeats.
pub fn refine(traj: &Trajectory) -> (Trajectory, Vec<LoopReport>) {
    let mut current = traj.clone();
    let mut reports = Vec::new();
    while let Some(r) = detect_loop(&current) {
        current = splice(&current, &r);
        reports.push(r);
    }
    (current, reports)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReflectError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("verbalizer returned an empty thought for step {step}")]
    EmptyVerbalization { step: usize },
    #[error("step {step} out of range for a trajectory of length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("replayed observation differs at step {step}")]
    ReplayMismatch { step: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Replay the trajectory's actions from reset and check every recorded
/// observation is reproduced.
pub fn validate_replay(sites: &SiteRegistry, traj: &Trajectory) -> Result<(), ReflectError> {
    let site = sites.get(&traj.site)?;
    let q = QueryRecord::new(base_query_id(&traj.query_id), &traj.query_text, &traj.site);
    let replay = site.replay(&q, traj.actions())?;
    for (t, step) in traj.steps.iter().enumerate() {
        if replay.observations[t] != step.observation {
            return Err(ReflectError::ReplayMismatch { step: t });
        }
    }
    Ok(())
}

/// `Step n: Thought: .. Action: ..` lines, numbered from `first + 1`.
pub fn render_navigation(steps: &[Step], first: usize) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(n, s)| format!("Step {}: Thought: {} Action: {}", first + n + 1, s.thought.text, s.action))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Tidy a free-text verbalization so it can stand as a reply's thought:
/// drop a leading `Thought:` label and anything from an `Action:` label on.
fn clean_verbalization(text: &str) -> String {
    let mut t = text.trim();
    if let Some(rest) = t.strip_prefix("Thought:") {
        t = rest.trim_start();
    }
    if let Some(cut) = t.find("Action:") {
        t = &t[..cut];
    }
    t.trim().to_string()
}

/// Ask the verbalizer for a lookahead thought for step `t_c`, given the
/// steps before it and the steps after it.
pub fn verbalize_lookahead(
    traj: &Trajectory,
    t_c: usize,
    verbalizer: &dyn Backend,
) -> Result<(Thought, u64), ReflectError> {
    let step = traj.steps.get(t_c).ok_or(ReflectError::StepOutOfRange {
        step: t_c,
        len: traj.len(),
    })?;
    let prompt = lookahead_prompt(&LookaheadFields {
        demonstration: &step.thought.text,
        task: &traj.query_text,
        history: &render_navigation(&traj.steps[..t_c], 0),
        observation: step.observation.tree_text(),
        action: &step.action,
        lookahead: &render_navigation(&traj.steps[t_c + 1..], t_c + 1),
    });
    let tags = RequestTags::for_query(&traj.query_id)
        .with_observation(&step.observation)
        .with_ordinal(t_c as u32);
    let reply = complete(verbalizer, "", vec![ChatMessage::user(prompt)], tags)?;
    let text = clean_verbalization(&reply.text);
    if text.is_empty() {
        return Err(ReflectError::EmptyVerbalization { step: t_c });
    }
    Ok((Thought::new(text), reply.tokens))
}

/// Replace every thought with its lookahead verbalization.
pub fn verbalize_all(traj: &Trajectory, verbalizer: &dyn Backend) -> Result<Trajectory, ReflectError> {
    let mut out = traj.clone();
    for t in 0..traj.len() {
        let (thought, tokens) = verbalize_lookahead(traj, t, verbalizer)?;
        out.steps[t] = traj.steps[t].rethought(thought, Provenance::Lookahead, tokens);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectOutcome {
    Kept,
    NoLoop,
    ReplayMismatch,
    NotSuccess,
    Failed,
}

/// Sidecar line for one input trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectRecord {
    pub query_id: String,
    pub loops: Vec<LoopReport>,
    pub original_len: usize,
    pub refined_len: usize,
    pub outcome: ReflectOutcome,
    pub verbalizer_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ReflectionSet {
    pub dataset: CurationDataset,
    pub records: Vec<ReflectRecord>,
}

impl ReflectionSet {
    pub fn failures(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.outcome == ReflectOutcome::Failed)
            .count()
    }
}

fn reflect_one(
    traj: &Trajectory,
    sites: &SiteRegistry,
    judge: Judge<'_>,
    verbalizer: &dyn Backend,
    refine_all: bool,
) -> (Option<Trajectory>, ReflectRecord) {
    let (refined, loops) = refine(traj);
    let mut record = ReflectRecord {
        query_id: traj.query_id.clone(),
        original_len: traj.len(),
        refined_len: refined.len(),
        loops,
        outcome: ReflectOutcome::Kept,
        verbalizer_tokens: 0,
        error: None,
    };
    let fail = |mut r: ReflectRecord, outcome, err: Option<String>| {
        r.outcome = outcome;
        r.error = err;
        (None, r)
    };
    if record.loops.is_empty() && !refine_all {
        return fail(record, ReflectOutcome::NoLoop, None);
    }
    match validate_replay(sites, &refined) {
        Ok(()) => {}
        Err(ReflectError::ReplayMismatch { step }) => {
            return fail(record, ReflectOutcome::ReplayMismatch, Some(format!("step {step}")))
        }
        Err(e) => return fail(record, ReflectOutcome::Failed, Some(e.to_string())),
    }
    // The judge reads the task, final page and answer, none of which
    // verbalization changes, so judge before paying for it.
    match self_assess(&refined, judge) {
        Ok(s) if s == 1.0 => {}
        Ok(_) => return fail(record, ReflectOutcome::NotSuccess, None),
        Err(e) => return fail(record, ReflectOutcome::Failed, Some(e.to_string())),
    }
    match verbalize_all(&refined, verbalizer) {
        Ok(t) => {
            record.verbalizer_tokens = t.tokens_generated();
            (Some(t), record)
        }
        Err(e) => fail(record, ReflectOutcome::Failed, Some(e.to_string())),
    }
}

/// Splice, validate, judge and verbalize each trajectory of `pool`. Only
/// trajectories with a loop are considered unless `refine_all` is set.
pub fn build_reflection_set(
    pool: &[Trajectory],
    sites: &SiteRegistry,
    judge: Judge<'_>,
    verbalizer: &dyn Backend,
    refine_all: bool,
    jobs: usize,
) -> ReflectionSet {
    let results = map_ordered(jobs, pool, |t| reflect_one(t, sites, judge, verbalizer, refine_all));
    let mut out = ReflectionSet {
        dataset: CurationDataset::new(D_L),
        records: Vec::with_capacity(pool.len()),
    };
    for (kept, record) in results {
        if let Some(t) = kept {
            if out.dataset.contains(&t.query_id) {
                log::warn!("{}: duplicate trajectory in pool ignored", t.query_id);
            } else {
                out.dataset.insert(t).expect("checked");
            }
        }
        out.records.push(record);
    }
    out
}
