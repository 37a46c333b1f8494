//! Model-predictive action selection: propose candidates, simulate their
//! outcomes, score them, act on the best, and fold the deliberation into
//! the step's thought.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::curate::{CurationDataset, D_B};
use crate::env::WebEnvironment;
use crate::model::{Action, Observation, Provenance, QueryRecord, Thought, Trajectory};
use crate::policy::{
    complete, request_decision, Backend, BackendError, ChatMessage, PolicyError, PromptContext,
    RequestTags,
};
use crate::prompts;
use crate::rollout::{
    drive_episode, rejection_sample, DecideError, Decider, Judge, RolloutConfig, RolloutError,
    StepChoice,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based proposal order.
    pub index: usize,
    pub thought: String,
    pub action: Action,
    pub simulation: String,
    pub score: f64,
    pub score_rationale: String,
    /// The score was missing or out of range in the scorer's reply.
    #[serde(default)]
    pub score_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BranchError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no valid candidate action was proposed")]
    NoValidCandidate,
}

/// Tokens spent by each role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTokens {
    pub proposer: u64,
    pub simulator: u64,
    pub scorer: u64,
}

impl RoleTokens {
    pub fn total(&self) -> u64 {
        self.proposer + self.simulator + self.scorer
    }
}

/// Up to `k` distinct (thought, action) proposals. Each request after the
/// first lists the earlier proposals and asks for something different. A
/// duplicate is re-requested once, then its slot is dropped; a reply that
/// stays malformed after the re-prompt also drops its slot.
pub fn propose_actions(
    backend: &dyn Backend,
    ctx: &PromptContext,
    query_id: &str,
    k: usize,
) -> Result<(Vec<(Thought, Action)>, u64), BranchError> {
    assert!(k >= 1, "k must be positive");
    let mut accepted: Vec<(Thought, Action)> = Vec::new();
    let mut tokens = 0;
    for slot in 0..k {
        let prior: Vec<(String, Action)> = accepted
            .iter()
            .map(|(t, a)| (t.text.clone(), a.clone()))
            .collect();
        let mut user = ctx.render_user();
        if !prior.is_empty() {
            user.push_str("\n\n");
            user.push_str(&prompts::proposal_exclusion(&prior));
        }
        let tags = RequestTags::for_query(query_id)
            .with_observation(&ctx.current)
            .with_ordinal(slot as u32);
        for attempt in 0..2u32 {
            let d = match request_decision(
                backend,
                &ctx.system_instructions,
                user.clone(),
                tags.clone().with_attempt(attempt),
            ) {
                Ok(d) => d,
                Err(PolicyError::Backend(e)) => return Err(e.into()),
                Err(PolicyError::ProtocolViolation(e)) => {
                    log::debug!("{query_id}: proposal {slot} dropped: {e}");
                    break;
                }
            };
            tokens += d.tokens;
            if accepted.iter().any(|(_, a)| a == &d.action) {
                log::debug!("{query_id}: proposal {slot} repeats `{}`", d.action);
                continue;
            }
            accepted.push((d.thought, d.action));
            break;
        }
    }
    if accepted.is_empty() {
        return Err(BranchError::NoValidCandidate);
    }
    Ok((accepted, tokens))
}

/// Chain `depth` simulator turns predicting what follows `action`.
pub fn simulate(
    backend: &dyn Backend,
    query_id: &str,
    observation: &Observation,
    action: &Action,
    depth: usize,
) -> Result<(String, u64), BranchError> {
    assert!(depth >= 1, "simulation depth must be positive");
    let mut messages = vec![ChatMessage::user(prompts::simulation_user(
        observation.tree_text(),
        action,
    ))];
    let mut predictions = Vec::with_capacity(depth);
    let mut tokens = 0;
    for d in 0..depth {
        if d > 0 {
            let last: &String = predictions.last().expect("non-empty");
            messages.push(ChatMessage::assistant(last.clone()));
            messages.push(ChatMessage::user(prompts::simulation_followup(d, last)));
        }
        let tags = RequestTags::for_query(query_id)
            .with_observation(observation)
            .with_ordinal(d as u32);
        let reply = complete(backend, prompts::SIMULATION_SYSTEM, messages.clone(), tags)?;
        tokens += reply.tokens;
        predictions.push(reply.text.trim().to_string());
    }
    Ok((predictions.join("\n"), tokens))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReading {
    pub score: f64,
    pub rationale: String,
    pub flagged: bool,
}

/// Read `Score: x` (last occurrence) clamped to [0, 1]. Missing or
/// unreadable scores become 0; both that and clamping set `flagged`.
pub fn parse_score(reply: &str) -> ScoreReading {
    const MARK: &str = "Score:";
    let at = reply.rfind(MARK);
    let head = &reply[..at.unwrap_or(reply.len())];
    let rationale = match head.find("Thought:") {
        Some(t) => &head[t + "Thought:".len()..],
        None => head,
    }
    .trim()
    .to_string();
    let value = at.and_then(|at| {
        let tail = reply[at + MARK.len()..].trim_start();
        let end = tail
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+'))
            .unwrap_or(tail.len());
        tail[..end].trim_end_matches('.').parse::<f64>().ok()
    });
    match value {
        Some(v) if v.is_finite() => {
            let clamped = v.clamp(0.0, 1.0);
            ScoreReading {
                score: clamped,
                rationale,
                flagged: clamped != v,
            }
        }
        _ => ScoreReading {
            score: 0.0,
            rationale,
            flagged: true,
        },
    }
}

pub fn score_candidate(
    backend: &dyn Backend,
    q: &QueryRecord,
    observation: &Observation,
    action: &Action,
    simulation: &str,
    slot: usize,
) -> Result<(ScoreReading, u64), BranchError> {
    let tags = RequestTags::for_query(&q.query_id)
        .with_observation(observation)
        .with_ordinal(slot as u32);
    let reply = complete(
        backend,
        prompts::SCORER_SYSTEM,
        vec![ChatMessage::user(prompts::scorer_user(
            &q.query_text,
            observation.tree_text(),
            action,
            simulation,
        ))],
        tags,
    )?;
    let reading = parse_score(&reply.text);
    if reading.flagged {
        log::debug!("{}: score flagged in {:?}", q.query_id, reply.text);
    }
    Ok((reading, reply.tokens))
}

/// Index of the first maximum; `None` when empty.
pub fn select_index<T: PartialOrd>(scores: &[T]) -> Option<usize> {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (!scores.is_empty()).then_some(best)
}

pub fn select(candidates: &[Candidate]) -> &Candidate {
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    &candidates[select_index(&scores).expect("candidates must be non-empty")]
}

/// Think block listing every candidate, followed by the chosen one's thought.
pub fn verbalize_branch(candidates: &[Candidate], chosen: &Candidate) -> Thought {
    assert!(candidates.contains(chosen), "chosen candidate must be listed");
    let block = candidates
        .iter()
        .enumerate()
        .map(|(n, c)| {
            format!(
                "{}. Thought: {}\nPossible Step: {}\nSimulated Output: {}\nCritic Evaluation: {} Score: {}",
                n + 1,
                c.thought.trim(),
                c.action,
                c.simulation.trim(),
                c.score_rationale.trim(),
                c.score
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Thought::with_think_block(chosen.thought.clone(), block.trim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub k: usize,
    pub sim_depth: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig { k: 3, sim_depth: 2 }
    }
}

#[derive(Clone, Copy)]
pub struct MpcBackends<'a> {
    pub proposer: &'a dyn Backend,
    pub simulator: &'a dyn Backend,
    pub scorer: &'a dyn Backend,
}

/// One line of the deliberation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationRecord {
    pub query_id: String,
    pub step: usize,
    pub candidates: Vec<Candidate>,
    /// 1-based index of the executed candidate.
    pub chosen: usize,
    pub tokens: RoleTokens,
}

/// One full deliberation for the current context.
pub fn deliberate(
    backends: MpcBackends<'_>,
    q: &QueryRecord,
    ctx: &PromptContext,
    cfg: MpcConfig,
    step: usize,
) -> Result<DeliberationRecord, BranchError> {
    let mut tokens = RoleTokens::default();
    let (proposals, t) = propose_actions(backends.proposer, ctx, &q.query_id, cfg.k)?;
    tokens.proposer = t;
    let mut candidates = Vec::with_capacity(proposals.len());
    for (slot, (thought, action)) in proposals.into_iter().enumerate() {
        let (simulation, t) = simulate(backends.simulator, &q.query_id, &ctx.current, &action, cfg.sim_depth)?;
        tokens.simulator += t;
        let (reading, t) = score_candidate(backends.scorer, q, &ctx.current, &action, &simulation, slot)?;
        tokens.scorer += t;
        candidates.push(Candidate {
            index: slot + 1,
            thought: thought.text,
            action,
            simulation,
            score: reading.score,
            score_rationale: reading.rationale,
            score_flagged: reading.flagged,
        });
    }
    let chosen = select(&candidates).index;
    Ok(DeliberationRecord {
        query_id: q.query_id.clone(),
        step,
        candidates,
        chosen,
        tokens,
    })
}

struct MpcDecider<'a> {
    backends: MpcBackends<'a>,
    cfg: MpcConfig,
    log: Mutex<Vec<DeliberationRecord>>,
}

impl Decider for MpcDecider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::Branch
    }

    fn choose(&self, q: &QueryRecord, ctx: &PromptContext, t: usize) -> Result<StepChoice, DecideError> {
        let record = match deliberate(self.backends, q, ctx, self.cfg, t) {
            Ok(r) => r,
            Err(BranchError::Backend(e)) => return Err(DecideError::Unavailable(e)),
            Err(e @ BranchError::NoValidCandidate) => return Err(DecideError::Abort(e.to_string())),
        };
        let chosen = &record.candidates[record.chosen - 1];
        let choice = StepChoice {
            thought: verbalize_branch(&record.candidates, chosen),
            action: chosen.action.clone(),
            tokens: record.tokens.total(),
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(record);
        Ok(choice)
    }
}

/// Closed-loop MPC episode. Returns the trajectory and its per-step
/// deliberation log.
pub fn run_mpc_episode<E: WebEnvironment>(
    site: &E,
    backends: MpcBackends<'_>,
    q: &QueryRecord,
    cfg: &RolloutConfig,
    mpc: MpcConfig,
) -> Result<(Trajectory, Vec<DeliberationRecord>), RolloutError> {
    let decider = MpcDecider {
        backends,
        cfg: mpc,
        log: Mutex::new(Vec::new()),
    };
    let traj = drive_episode(site, &decider, q, cfg)?;
    Ok((traj, decider.log.into_inner().unwrap_or_else(|e| e.into_inner())))
}

#[derive(Debug, Clone, Default)]
pub struct BranchSet {
    pub dataset: CurationDataset,
    pub pool: Vec<Trajectory>,
    pub log: Vec<DeliberationRecord>,
    pub scores: BTreeMap<String, f64>,
    pub errors: BTreeMap<String, String>,
}

/// Run an MPC episode per query and keep the judged successes.
pub fn build_branch_set<F>(
    queries: &[QueryRecord],
    run: F,
    judge: Judge<'_>,
    jobs: usize,
) -> BranchSet
where
    F: Fn(&QueryRecord) -> Result<(Trajectory, Vec<DeliberationRecord>), RolloutError> + Sync + Send,
{
    let logs = Mutex::new(BTreeMap::new());
    let outcome = rejection_sample(
        queries,
        |q| {
            let (traj, log) = run(q)?;
            logs.lock().unwrap_or_else(|e| e.into_inner()).insert(q.query_id.clone(), log);
            Ok(traj)
        },
        judge,
        jobs,
    );
    let mut logs = logs.into_inner().unwrap_or_else(|e| e.into_inner());
    BranchSet {
        dataset: outcome.dataset.renamed(D_B),
        log: queries
            .iter()
            .flat_map(|q| logs.remove(&q.query_id).unwrap_or_default())
            .collect(),
        pool: outcome.pool,
        scores: outcome.scores,
        errors: outcome.errors,
    }
}
