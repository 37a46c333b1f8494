//! Episode loop, self-assessment and rejection sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::curate::{CurationDataset, D_REJ};
use crate::env::{EnvError, SiteRegistry, WebEnvironment};
use crate::evalkit::{judge_trajectory, JudgeError};
use crate::model::{base_query_id, Action, Provenance, QueryRecord, Step, Terminal, Thought, Trajectory};
use crate::parallel::map_ordered;
use crate::policy::{clip_context, decide, Backend, BackendError, PolicyError, PromptContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    RuleBased,
    #[default]
    ModelBased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub clip_k: usize,
    pub judge: JudgeKind,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_steps: 15,
            clip_k: 3,
            judge: JudgeKind::ModelBased,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Why a decider could not produce an action.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecideError {
    /// Propagates out of the episode.
    #[error(transparent)]
    Unavailable(#[from] BackendError),
    /// Ends the episode with an env_error terminal.
    #[error("episode aborted: {0}")]
    Abort(String),
}

impl From<PolicyError> for DecideError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Backend(b) => DecideError::Unavailable(b),
            PolicyError::ProtocolViolation(p) => DecideError::Abort(p.to_string()),
        }
    }
}

/// A thought and action chosen for one step, with the tokens it cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepChoice {
    pub thought: Thought,
    pub action: Action,
    pub tokens: u64,
}

/// Anything that can pick the next action from a clipped context.
pub trait Decider: Sync {
    fn provenance(&self) -> Provenance;

    fn choose(&self, q: &QueryRecord, ctx: &PromptContext, t: usize) -> Result<StepChoice, DecideError>;
}

/// The plain policy: one completion per step.
pub struct PolicyDecider<'a> {
    pub backend: &'a dyn Backend,
}

impl Decider for PolicyDecider<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::SelfPlay
    }

    fn choose(&self, q: &QueryRecord, ctx: &PromptContext, _t: usize) -> Result<StepChoice, DecideError> {
        let d = decide(self.backend, ctx, &q.query_id)?;
        Ok(StepChoice {
            thought: d.thought,
            action: d.action,
            tokens: d.tokens,
        })
    }
}

/// Reset, then alternate decide and step until Stop, the step limit, or
/// an error that ends the episode.
pub fn drive_episode<E: WebEnvironment, D: Decider + ?Sized>(
    env: &E,
    decider: &D,
    q: &QueryRecord,
    cfg: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    assert!(cfg.max_steps >= 1, "max_steps must be positive");
    let (mut state, mut obs) = env.reset(q)?;
    let mut traj = Trajectory::new(q);
    traj.terminal = Terminal::StepLimit;
    for t in 0..cfg.max_steps {
        let ctx = clip_context(&q.query_text, &traj.steps, &obs, cfg.clip_k);
        let choice = match decider.choose(q, &ctx, t) {
            Ok(c) => c,
            Err(DecideError::Unavailable(e)) => return Err(e.into()),
            Err(DecideError::Abort(why)) => {
                log::info!("{}: step {t}: {why}", q.query_id);
                traj.terminal = Terminal::EnvError;
                return Ok(traj);
            }
        };
        let outcome = env.step(&state, &choice.action);
        let stop = choice.action.is_stop();
        traj.steps.push(Step::new(
            obs.clone(),
            choice.thought,
            choice.action,
            decider.provenance(),
            choice.tokens,
        ));
        match outcome {
            Ok(o) => {
                state = o.state;
                obs = o.observation;
            }
            Err(e) => {
                log::warn!("{}: step {t}: {e}", q.query_id);
                traj.terminal = Terminal::EnvError;
                return Ok(traj);
            }
        }
        if stop {
            traj.terminal = Terminal::Stopped;
            break;
        }
    }
    Ok(traj)
}

/// One policy episode on `site`.
pub fn run_episode<E: WebEnvironment>(
    site: &E,
    backend: &dyn Backend,
    q: &QueryRecord,
    cfg: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    drive_episode(site, &PolicyDecider { backend }, q, cfg)
}

/// Reward source for self-assessment.
#[derive(Clone, Copy)]
pub enum Judge<'a> {
    RuleBased(&'a SiteRegistry),
    ModelBased(&'a dyn Backend),
}

impl<'a> Judge<'a> {
    pub fn select(kind: JudgeKind, sites: &'a SiteRegistry, backend: &'a dyn Backend) -> Self {
        match kind {
            JudgeKind::RuleBased => Judge::RuleBased(sites),
            JudgeKind::ModelBased => Judge::ModelBased(backend),
        }
    }
}

/// Reward in {0, 1}. Trajectories that did not stop score 0 without
/// consulting the judge.
pub fn self_assess(traj: &Trajectory, judge: Judge<'_>) -> Result<f64, RolloutError> {
    if traj.terminal != Terminal::Stopped {
        return Ok(0.0);
    }
    let ok = match judge {
        Judge::RuleBased(sites) => {
            let q = QueryRecord::new(base_query_id(&traj.query_id), &traj.query_text, &traj.site);
            sites.get(&traj.site)?.is_success(&q, traj)?
        }
        Judge::ModelBased(backend) => judge_trajectory(backend, traj)?.is_success(),
    };
    Ok(if ok { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Default)]
pub struct RejectionOutcome {
    /// Trajectories scored 1, one per query.
    pub dataset: CurationDataset,
    /// Every episode that completed, kept or not, in query order.
    pub pool: Vec<Trajectory>,
    pub scores: BTreeMap<String, f64>,
    /// Queries whose episode or judgment failed, with the reason.
    pub errors: BTreeMap<String, String>,
}

/// Run one episode per query and keep the trajectories the judge accepts.
pub fn rejection_sample<F>(
    queries: &[QueryRecord],
    run: F,
    judge: Judge<'_>,
    jobs: usize,
) -> RejectionOutcome
where
    F: Fn(&QueryRecord) -> Result<Trajectory, RolloutError> + Sync + Send,
{
    let results = map_ordered(jobs, queries, |q| {
        let traj = run(q)?;
        let score = self_assess(&traj, judge);
        Ok::<_, RolloutError>((traj, score))
    });
    let mut out = RejectionOutcome {
        dataset: CurationDataset::new(D_REJ),
        ..Default::default()
    };
    for (q, r) in queries.iter().zip(results) {
        match r {
            Ok((traj, Ok(score))) => {
                out.scores.insert(q.query_id.clone(), score);
                if score == 1.0 && !out.dataset.contains(&q.query_id) {
                    out.dataset.insert(traj.clone()).expect("checked");
                }
                out.pool.push(traj);
            }
            Ok((traj, Err(e))) => {
                out.errors.insert(q.query_id.clone(), e.to_string());
                out.pool.push(traj);
            }
            Err(e) => {
                out.errors.insert(q.query_id.clone(), e.to_string());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SiteSpec;
    use crate::policy::ScriptedBackend;

    const SITE: &str = r#"{
        "site_id": "mini",
        "start_page": "home",
        "pages": {
            "home": {"tree_text": "[1] RootWebArea 'Mini'\n[2] link 'Docs'", "elements": {"2": "clickable"}},
            "docs": {"tree_text": "[1] RootWebArea 'Docs'\n[3] StaticText 'Version 4.2'", "elements": {}}
        },
        "transitions": [{"from": "home", "click": 2, "to": "docs"}],
        "success": {"m1": {"final_page": "docs", "answer_contains": ["4.2"]}}
    }"#;

    fn site() -> SiteSpec {
        SiteSpec::from_json(SITE).unwrap()
    }

    fn q() -> QueryRecord {
        QueryRecord::new("m1", "Which version is documented?", "mini")
    }

    fn script(lines: &[&str]) -> ScriptedBackend {
        ScriptedBackend::from_jsonl("policy", &lines.join("\n")).unwrap()
    }

    fn solver() -> ScriptedBackend {
        script(&[
            r#"{"match": {"observation_contains": "'Mini'"}, "reply": "Thought: open the docs. Action: ```click [2]```", "tokens": 5}"#,
            r#"{"match": {"observation_contains": "'Docs'"}, "reply": "Thought: the version is shown. Action: ```stop [4.2]```", "tokens": 7}"#,
        ])
    }

    #[test]
    fn scripted_success() {
        let t = run_episode(&site(), &solver(), &q(), &RolloutConfig::default()).unwrap();
        assert_eq!(t.terminal, Terminal::Stopped);
        assert_eq!(t.len(), 2);
        assert_eq!(t.tokens_generated(), 12);
        assert!(t.steps.iter().all(|s| s.provenance() == Provenance::SelfPlay));
        let mut sites = SiteRegistry::new();
        sites.insert(site());
        assert_eq!(self_assess(&t, Judge::RuleBased(&sites)).unwrap(), 1.0);
    }

    #[test]
    fn never_stopping_hits_limit() {
        let b = script(&[r#"{"match": {}, "reply": "Thought: look around. Action: ```scroll [down]```"}"#]);
        let cfg = RolloutConfig { max_steps: 4, ..Default::default() };
        let t = run_episode(&site(), &b, &q(), &cfg).unwrap();
        assert_eq!((t.terminal, t.len()), (Terminal::StepLimit, 4));
        let judge = script(&[r#"{"match": {}, "reply": "SUCCESS"}"#]);
        assert_eq!(self_assess(&t, Judge::ModelBased(&judge)).unwrap(), 0.0);
    }

    #[test]
    fn malformed_twice_is_env_error() {
        let b = script(&[r#"{"match": {}, "reply": "Thought: hmm. Action: ```jump [3]```"}"#]);
        let t = run_episode(&site(), &b, &q(), &RolloutConfig::default()).unwrap();
        assert_eq!((t.terminal, t.len()), (Terminal::EnvError, 0));
    }

    #[test]
    fn missing_script_propagates() {
        let b = script(&[]);
        assert!(matches!(
            run_episode(&site(), &b, &q(), &RolloutConfig::default()),
            Err(RolloutError::Backend(BackendError::ScriptMiss { .. }))
        ));
    }

    #[test]
    fn model_judge_not_success() {
        let t = run_episode(&site(), &solver(), &q(), &RolloutConfig::default()).unwrap();
        let judge = script(&[r#"{"match": {}, "reply": "The answer is unsupported. NOT SUCCESS"}"#]);
        assert_eq!(self_assess(&t, Judge::ModelBased(&judge)).unwrap(), 0.0);
    }

    #[test]
    fn rejection_keeps_successes_only() {
        let s = site();
        let mut sites = SiteRegistry::new();
        sites.insert(s.clone());
        let good = solver();
        let queries = vec![q(), QueryRecord::new("m2", "other", "mini")];
        let run = |q: &QueryRecord| {
            if q.query_id == "m1" {
                run_episode(&s, &good, q, &RolloutConfig::default())
            } else {
                let mut t = Trajectory::new(q);
                t.terminal = Terminal::StepLimit;
                Ok(t)
            }
        };
        let a = rejection_sample(&queries, run, Judge::RuleBased(&sites), 2);
        let b = rejection_sample(&queries, run, Judge::RuleBased(&sites), 1);
        assert_eq!(a.dataset.query_set(), ["m1".to_string()].into());
        assert_eq!(a.scores["m2"], 0.0);
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.pool.len(), 2);
    }
}
