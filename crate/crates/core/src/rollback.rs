//! Synthesized recovery trajectories: take a wrong turn on purpose at a
//! sampled step of a successful trajectory, then go back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curate::{CurationDataset, D_R};
use crate::env::{EnvError, EnvState, SiteRegistry};
use crate::evalkit::JudgeError;
use crate::model::{
    base_query_id, parse_agent_reply, Action, Observation, Provenance, QueryRecord, Step, Terminal,
    Thought, Trajectory, VARIANT_SEPARATOR,
};
use crate::parallel::map_ordered;
use crate::policy::{
    clip_context, complete, request_decision, Backend, BackendError, ChatMessage, PolicyError,
    RequestTags,
};
use crate::prompts;
use crate::reflect::render_navigation;
use crate::rollout::Judge;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RollbackError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("no alternative to `{attempted}`: {reason}")]
    NoAlternative {
        attempted: String,
        reason: String,
        /// Spent on the rejected proposals.
        tokens: u64,
    },
    #[error("recovery step must be goback, got {got}")]
    WrongRecoveryAction { got: String },
    #[error("replay diverges from the assembled trajectory at step {step}")]
    ReplayMismatch { step: usize },
}

/// Which thought accompanies the wrong action in the assembled trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotThought {
    /// The thought generated with the alternative action.
    #[default]
    Alternative,
    /// The base trajectory's original thought at the pivot.
    Original,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackMode {
    /// Resume the base trajectory after going back.
    #[default]
    Continue,
    /// End at the goback step.
    Truncate,
}

/// Per-trajectory seed: `seed` mixed with a digest of the query id.
pub fn pivot_seed(seed: u64, query_id: &str) -> u64 {
    let digest = Sha256::digest(query_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(head)
}

/// `n` distinct step indices from `0..len-1` (never the final step),
/// ascending. Requires `n <= len - 1`.
pub fn sample_pivots(len: usize, n: usize, seed: u64) -> Vec<usize> {
    assert!(len >= 1 && n < len, "need n <= T - 1 pivots (T = {len}, n = {n})");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len - 1, n).into_vec();
    idx.sort_unstable();
    idx
}

pub fn variant_id(base: &str, n: usize) -> String {
    format!("{base}{VARIANT_SEPARATOR}rb{n}")
}

/// Ask for an action other than `base.steps[j].action` from the context
/// the base trajectory had at step `j`. A repeat is re-requested once.
pub fn alternative_action(
    backend: &dyn Backend,
    base: &Trajectory,
    j: usize,
    clip_k: usize,
) -> Result<(Thought, Action, u64), RollbackError> {
    let original = &base.steps[j];
    let ctx = clip_context(&base.query_text, &base.steps[..j], &original.observation, clip_k);
    let user = format!(
        "{}\n\n{}",
        ctx.render_user(),
        prompts::alternative_request(&original.action)
    );
    let tags = RequestTags::for_query(&base.query_id)
        .with_observation(&original.observation)
        .with_ordinal(j as u32);
    let no_alt = |reason: String, tokens: u64| RollbackError::NoAlternative {
        attempted: original.action.render(),
        reason,
        tokens,
    };
    let mut tokens = 0;
    // Attempts 0 and 2; each may carry its own protocol re-prompt (1, 3).
    for attempt in 0..2u32 {
        let d = match request_decision(
            backend,
            &ctx.system_instructions,
            user.clone(),
            tags.clone().with_attempt(attempt * 2),
        ) {
            Ok(d) => d,
            Err(PolicyError::Backend(e)) => return Err(e.into()),
            Err(PolicyError::ProtocolViolation(e)) => return Err(no_alt(e.to_string(), tokens)),
        };
        tokens += d.tokens;
        if d.action != original.action {
            return Ok((d.thought, d.action, tokens));
        }
    }
    Err(no_alt("the model repeated the original action".into(), tokens))
}

/// Observation and state reached by taking `alternative` instead of step
/// `j`'s action. `None` when it reproduces the base trajectory's next
/// observation.
pub fn materialize_divergence(
    sites: &SiteRegistry,
    base: &Trajectory,
    j: usize,
    alternative: &Action,
) -> Result<Option<(Observation, EnvState)>, RollbackError> {
    assert!(j + 1 < base.len(), "pivot must precede the final step");
    let site = sites.get(&base.site)?;
    let q = QueryRecord::new(base_query_id(&base.query_id), &base.query_text, &base.site);
    let replay = site.replay(&q, base.steps[..j].iter().map(|s| &s.action))?;
    let state = replay.states.last().expect("non-empty");
    let outcome = site.step(state, alternative)?;
    if outcome.observation == base.steps[j + 1].observation {
        return Ok(None);
    }
    Ok(Some((outcome.observation, outcome.state)))
}

/// Read the last `ON TRACK` / `OFF TRACK` verdict; true means off track.
pub fn parse_off_track(reply: &str) -> Result<bool, JudgeError> {
    let on = reply.rfind("ON TRACK");
    let off = reply.rfind("OFF TRACK");
    match (on, off) {
        (None, None) => Err(JudgeError::UnparseableVerdict(reply.to_string())),
        (Some(a), Some(b)) => Ok(b > a),
        (None, Some(_)) => Ok(true),
        (Some(_), None) => Ok(false),
    }
}

/// Whether the divergent state is a real failure. Rule-based: no success
/// page is reachable from it by moving forward. Model-based: the judge
/// calls it off track.
pub fn confirm_failure(
    judge: Judge<'_>,
    base: &Trajectory,
    j: usize,
    alternative: &Action,
    divergent: &Observation,
    state: &EnvState,
) -> Result<bool, RollbackError> {
    match judge {
        Judge::RuleBased(sites) => {
            let site = sites.get(&base.site)?;
            Ok(!site.reaches_success(base_query_id(&base.query_id), &state.current_page)?)
        }
        Judge::ModelBased(backend) => {
            let mut history = render_navigation(&base.steps[..j], 0);
            if !history.is_empty() {
                history.push('\n');
            }
            history.push_str(&format!("Step {}: Action: {alternative}", j + 1));
            let tags = RequestTags::for_query(&base.query_id)
                .with_observation(divergent)
                .with_ordinal(j as u32);
            let reply = complete(
                backend,
                prompts::OFF_TRACK_SYSTEM,
                vec![ChatMessage::user(prompts::off_track_user(
                    &base.query_text,
                    &history,
                    divergent.tree_text(),
                ))],
                tags,
            )
            .map_err(JudgeError::from)?;
            Ok(parse_off_track(&reply.text)?)
        }
    }
}

/// Thought for the goback step, explaining why `attempted` fails. The
/// reply must choose goback; one re-prompt is allowed.
pub fn build_goback_thought(
    backend: &dyn Backend,
    base: &Trajectory,
    j: usize,
    attempted: &Action,
    divergent: &Observation,
) -> Result<(Thought, u64), RollbackError> {
    let last = &base.steps[j].observation;
    let user = format!(
        "OBJECTIVE: {}\n\n{}",
        base.query_text,
        prompts::backtrack_request(attempted, last.tree_text(), divergent.tree_text())
    );
    let tags = RequestTags::for_query(&base.query_id)
        .with_observation(divergent)
        .with_ordinal(j as u32);
    let system = prompts::system_prompt();
    let mut tokens = 0;
    let mut got = String::new();
    for attempt in 0..2u32 {
        let reply = complete(
            backend,
            &system,
            vec![ChatMessage::user(user.clone())],
            tags.clone().with_attempt(attempt),
        )?;
        tokens += reply.tokens;
        match parse_agent_reply(&reply.text) {
            Ok((thought, Action::GoBack)) => return Ok((thought, tokens)),
            Ok((_, other)) => got = other.render(),
            Err(e) => got = e.to_string(),
        }
    }
    Err(RollbackError::WrongRecoveryAction { got })
}

/// The parts synthesized for one pivot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detour {
    pub pivot: usize,
    pub thought: Thought,
    pub action: Action,
    pub action_tokens: u64,
    pub divergent: Observation,
    pub goback_thought: Thought,
    pub goback_tokens: u64,
}

/// Base steps before the pivot, the wrong step, the goback step, then
/// (continue mode) the base steps from the pivot on.
pub fn assemble_rollback_trajectory(
    base: &Trajectory,
    detour: &Detour,
    mode: RollbackMode,
    pivot_thought: PivotThought,
    variant: &str,
) -> Trajectory {
    let j = detour.pivot;
    let pivot = &base.steps[j];
    let thought = match pivot_thought {
        PivotThought::Alternative => detour.thought.clone(),
        PivotThought::Original => pivot.thought.clone(),
    };
    let mut steps: Vec<Step> = base.steps[..j].to_vec();
    steps.push(Step::new(
        pivot.observation.clone(),
        thought,
        detour.action.clone(),
        Provenance::Rollback,
        detour.action_tokens,
    ));
    steps.push(Step::new(
        detour.divergent.clone(),
        detour.goback_thought.clone(),
        Action::GoBack,
        Provenance::Rollback,
        detour.goback_tokens,
    ));
    let terminal = match mode {
        RollbackMode::Continue => {
            steps.extend(base.steps[j..].iter().cloned());
            base.terminal
        }
        RollbackMode::Truncate => Terminal::Truncated,
    };
    Trajectory {
        query_id: variant.to_string(),
        query_text: base.query_text.clone(),
        site: base.site.clone(),
        steps,
        terminal,
    }
}

/// Replay the variant and check every recorded observation, plus that the
/// goback lands on the pivot's observation.
pub fn validate_variant(
    sites: &SiteRegistry,
    variant: &Trajectory,
    pivot: usize,
) -> Result<(), RollbackError> {
    let site = sites.get(&variant.site)?;
    let q = QueryRecord::new(base_query_id(&variant.query_id), &variant.query_text, &variant.site);
    let replay = site.replay(&q, variant.actions())?;
    for (t, step) in variant.steps.iter().enumerate() {
        if replay.observations[t] != step.observation {
            return Err(RollbackError::ReplayMismatch { step: t });
        }
    }
    if replay.observations[pivot + 2] != variant.steps[pivot].observation {
        return Err(RollbackError::ReplayMismatch { step: pivot + 2 });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantOutcome {
    Kept,
    NoAlternative,
    SameObservation,
    NotFailure,
    WrongRecovery,
    ReplayMismatch,
    Failed,
}

/// One line of the synthesis report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub base_query_id: String,
    pub variant_id: String,
    pub pivot: usize,
    pub outcome: VariantOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<Action>,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackConfig {
    pub n: usize,
    pub seed: u64,
    pub clip_k: usize,
    pub mode: RollbackMode,
    pub pivot_thought: PivotThought,
}

impl Default for RollbackConfig {
    fn default() -> Self {
        RollbackConfig {
            n: 2,
            seed: 42,
            clip_k: 3,
            mode: RollbackMode::Continue,
            pivot_thought: PivotThought::Alternative,
        }
    }
}

#[derive(Clone, Copy)]
pub struct RollbackBackends<'a> {
    /// Proposes the wrong action.
    pub proposer: &'a dyn Backend,
    /// Writes the goback thought.
    pub verbalizer: &'a dyn Backend,
}

/// Run the whole chain for one pivot.
pub fn synthesize_variant(
    base: &Trajectory,
    pivot: usize,
    variant: &str,
    sites: &SiteRegistry,
    backends: RollbackBackends<'_>,
    judge: Judge<'_>,
    cfg: &RollbackConfig,
) -> (Option<Trajectory>, VariantRecord) {
    let mut record = VariantRecord {
        base_query_id: base.query_id.clone(),
        variant_id: variant.to_string(),
        pivot,
        outcome: VariantOutcome::Kept,
        alternative: None,
        tokens: 0,
        detail: None,
    };
    let done = |mut r: VariantRecord, outcome, detail: Option<String>| {
        r.outcome = outcome;
        r.detail = detail;
        (None, r)
    };
    let failed = |mut r: VariantRecord, e: RollbackError| {
        if let RollbackError::NoAlternative { tokens, .. } = &e {
            r.tokens += tokens;
        }
        let outcome = match e {
            RollbackError::NoAlternative { .. } => VariantOutcome::NoAlternative,
            RollbackError::WrongRecoveryAction { .. } => VariantOutcome::WrongRecovery,
            RollbackError::ReplayMismatch { .. } => VariantOutcome::ReplayMismatch,
            _ => VariantOutcome::Failed,
        };
        done(r, outcome, Some(e.to_string()))
    };

    let (thought, action, action_tokens) =
        match alternative_action(backends.proposer, base, pivot, cfg.clip_k) {
            Ok(x) => x,
            Err(e) => return failed(record, e),
        };
    record.alternative = Some(action.clone());
    record.tokens += action_tokens;
    let (divergent, state) = match materialize_divergence(sites, base, pivot, &action) {
        Ok(Some(x)) => x,
        Ok(None) => return done(record, VariantOutcome::SameObservation, None),
        Err(e) => return failed(record, e),
    };
    match confirm_failure(judge, base, pivot, &action, &divergent, &state) {
        Ok(true) => {}
        Ok(false) => return done(record, VariantOutcome::NotFailure, None),
        Err(e) => return failed(record, e),
    }
    let (goback_thought, goback_tokens) =
        match build_goback_thought(backends.verbalizer, base, pivot, &action, &divergent) {
            Ok(x) => x,
            Err(e) => return failed(record, e),
        };
    record.tokens += goback_tokens;
    let detour = Detour {
        pivot,
        thought,
        action,
        action_tokens,
        divergent,
        goback_thought,
        goback_tokens,
    };
    let traj = assemble_rollback_trajectory(base, &detour, cfg.mode, cfg.pivot_thought, variant);
    if let Err(e) = validate_variant(sites, &traj, pivot) {
        return failed(record, e);
    }
    (Some(traj), record)
}

#[derive(Debug, Clone, Default)]
pub struct RollbackSet {
    pub dataset: CurationDataset,
    pub records: Vec<VariantRecord>,
}

impl RollbackSet {
    pub fn count(&self, outcome: VariantOutcome) -> usize {
        self.records.iter().filter(|r| r.outcome == outcome).count()
    }
}

/// Sample pivots on every base trajectory and synthesize a variant per
/// pivot. Variants are keyed `<query>#rb<N>`, N counting the pivots of
/// that base from 1. Bases of a single step have no pivot; `n` is capped
/// at `T - 1`.
pub fn build_rollback_set(
    pool: &[Trajectory],
    sites: &SiteRegistry,
    backends: RollbackBackends<'_>,
    judge: Judge<'_>,
    cfg: &RollbackConfig,
    jobs: usize,
) -> RollbackSet {
    let mut tasks = Vec::new();
    for (b, base) in pool.iter().enumerate() {
        if base.len() < 2 {
            continue;
        }
        let n = cfg.n.min(base.len() - 1);
        for (k, pivot) in sample_pivots(base.len(), n, pivot_seed(cfg.seed, &base.query_id))
            .into_iter()
            .enumerate()
        {
            tasks.push((b, pivot, variant_id(&base.query_id, k + 1)));
        }
    }
    let results = map_ordered(jobs, &tasks, |(b, pivot, id)| {
        synthesize_variant(&pool[*b], *pivot, id, sites, backends, judge, cfg)
    });
    let mut out = RollbackSet {
        dataset: CurationDataset::new(D_R),
        records: Vec::with_capacity(results.len()),
    };
    for (traj, record) in results {
        if let Some(t) = traj {
            if let Err(e) = out.dataset.insert(t) {
                log::warn!("{e}");
            }
        }
        out.records.push(record);
    }
    out
}
