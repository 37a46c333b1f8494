//! Query-indexed datasets, the cumulative union used to stack stages, and
//! chat-format SFT export.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{render_reply, Provenance, Trajectory};
use crate::policy::{clip_context, ChatMessage, Role};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset {dataset} already holds a trajectory for {query_id}")]
    Duplicate { dataset: String, query_id: String },
}

/// Named collection holding at most one trajectory per query id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CurationDataset {
    pub name: String,
    entries: BTreeMap<String, Trajectory>,
}

impl CurationDataset {
    pub fn new(name: impl Into<String>) -> Self {
        CurationDataset {
            name: name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn from_trajectories(
        name: impl Into<String>,
        trajectories: impl IntoIterator<Item = Trajectory>,
    ) -> Result<Self, DatasetError> {
        let mut ds = Self::new(name);
        for t in trajectories {
            ds.insert(t)?;
        }
        Ok(ds)
    }

    /// Add a trajectory keyed by its query id.
    pub fn insert(&mut self, traj: Trajectory) -> Result<(), DatasetError> {
        if self.entries.contains_key(&traj.query_id) {
            return Err(DatasetError::Duplicate {
                dataset: self.name.clone(),
                query_id: traj.query_id,
            });
        }
        self.entries.insert(traj.query_id.clone(), traj);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&Trajectory> {
        self.entries.get(query_id)
    }

    pub fn contains(&self, query_id: &str) -> bool {
        self.entries.contains_key(query_id)
    }

    pub fn query_set(&self) -> BTreeSet<String> {
        self.entries.keys().cloned().collect()
    }

    /// Trajectories in query-id order.
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.entries.values()
    }

    pub fn into_trajectories(self) -> impl Iterator<Item = Trajectory> {
        self.entries.into_values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.entries.values().map(Trajectory::len).sum()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// `base` plus every entry of `addition` whose query id `base` lacks.
/// Base entries are never replaced.
pub fn cumulative_union(
    base: &CurationDataset,
    addition: &CurationDataset,
    name: impl Into<String>,
) -> CurationDataset {
    let mut out = base.clone().renamed(name);
    for (id, t) in &addition.entries {
        out.entries.entry(id.clone()).or_insert_with(|| t.clone());
    }
    out
}

pub const D_REJ: &str = "D_rej";
pub const D_L: &str = "D_L";
pub const D_B: &str = "D_B";
pub const D_R: &str = "D_R";
pub const D_L_C: &str = "D_L_c";
pub const D_B_C: &str = "D_B_c";
pub const D_R_C: &str = "D_R_c";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineDatasets {
    pub reflection: CurationDataset,
    pub branching: CurationDataset,
    pub rollback: CurationDataset,
}

impl PipelineDatasets {
    pub fn iter(&self) -> impl Iterator<Item = &CurationDataset> {
        [&self.reflection, &self.branching, &self.rollback].into_iter()
    }
}

/// Stack the stage outputs: rejection-sampled, then reflection, branching
/// and rollback additions.
pub fn build_pipeline_datasets(
    rej: &CurationDataset,
    reflection: &CurationDataset,
    branching: &CurationDataset,
    rollback: &CurationDataset,
) -> PipelineDatasets {
    let l = cumulative_union(rej, reflection, D_L_C);
    let b = cumulative_union(&l, branching, D_B_C);
    let r = cumulative_union(&b, rollback, D_R_C);
    PipelineDatasets {
        reflection: l,
        branching: b,
        rollback: r,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDiff {
    pub only_a: BTreeSet<String>,
    pub only_b: BTreeSet<String>,
    pub shared: BTreeSet<String>,
}

pub fn dataset_diff(a: &CurationDataset, b: &CurationDataset) -> DatasetDiff {
    let (qa, qb) = (a.query_set(), b.query_set());
    DatasetDiff {
        only_a: qa.difference(&qb).cloned().collect(),
        only_b: qb.difference(&qa).cloned().collect(),
        shared: qa.intersection(&qb).cloned().collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub trajectories: usize,
    pub steps: usize,
    pub by_provenance: BTreeMap<String, usize>,
}

/// Sidecar describing a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub parent: Option<String>,
    /// Ids this dataset holds that its parent does not.
    pub added_query_ids: Vec<String>,
    pub counts: ManifestCounts,
    /// Per-query judge scores, for stages that judge.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn describe(ds: &CurationDataset, parent: Option<&CurationDataset>) -> Self {
        let added_query_ids = match parent {
            Some(p) => ds.query_set().difference(&p.query_set()).cloned().collect(),
            None => ds.query_set().into_iter().collect(),
        };
        let mut by_provenance = BTreeMap::new();
        for s in ds.trajectories().flat_map(|t| &t.steps) {
            let key = serde_json::to_value(s.provenance())
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *by_provenance.entry(key).or_insert(0) += 1;
        }
        Manifest {
            name: ds.name.clone(),
            parent: parent.map(|p| p.name.clone()),
            added_query_ids,
            counts: ManifestCounts {
                trajectories: ds.len(),
                steps: ds.total_steps(),
                by_provenance,
            },
            scores: BTreeMap::new(),
        }
    }

    pub fn with_scores(mut self, scores: BTreeMap<String, f64>) -> Self {
        self.scores = scores;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub query_id: String,
    /// 0-based step index.
    pub step_index: usize,
    pub provenance: Provenance,
}

/// One supervised example: predict the step's reply from the clipped context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ChatRecord", try_from = "ChatRecord")]
pub struct SftRecord {
    pub system: String,
    pub user_context: String,
    /// Reply text: optional think block, thought, fenced action.
    pub target: String,
    pub meta: SftMeta,
}

/// Wire form: a three-turn chat plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRecord {
    pub messages: Vec<ChatMessage>,
    pub meta: SftMeta,
}

impl From<SftRecord> for ChatRecord {
    fn from(r: SftRecord) -> Self {
        ChatRecord {
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: r.system,
                },
                ChatMessage::user(r.user_context),
                ChatMessage::assistant(r.target),
            ],
            meta: r.meta,
        }
    }
}

impl TryFrom<ChatRecord> for SftRecord {
    type Error = String;

    fn try_from(c: ChatRecord) -> Result<Self, Self::Error> {
        let roles: Vec<Role> = c.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return Err(format!("expected system/user/assistant turns, got {roles:?}"));
        }
        let mut it = c.messages.into_iter().map(|m| m.content);
        Ok(SftRecord {
            system: it.next().expect("checked"),
            user_context: it.next().expect("checked"),
            target: it.next().expect("checked"),
            meta: c.meta,
        })
    }
}

/// One record per step of every trajectory, in dataset order.
pub fn export_sft(ds: &CurationDataset, clip_k: usize, system_prompt: &str) -> Vec<SftRecord> {
    let mut out = Vec::with_capacity(ds.total_steps());
    for traj in ds.trajectories() {
        for (t, step) in traj.steps.iter().enumerate() {
            let ctx = clip_context(&traj.query_text, &traj.steps[..t], &step.observation, clip_k);
            out.push(SftRecord {
                system: system_prompt.to_string(),
                user_context: ctx.render_user(),
                target: render_reply(&step.thought, &step.action),
                meta: SftMeta {
                    query_id: traj.query_id.clone(),
                    step_index: t,
                    provenance: step.provenance(),
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_agent_reply, Action, Observation, QueryRecord, Step, Terminal, Thought};

    fn traj(id: &str, n: usize, marker: &str) -> Trajectory {
        let mut t = Trajectory::new(&QueryRecord::new(id, "task", "shop"));
        for i in 0..n {
            let action = if i + 1 == n { Action::stop("x") } else { Action::click(i as u32) };
            t.steps.push(Step::new(
                Observation::new(format!("page {i}")),
                Thought::new(format!("{marker} {i}")),
                action,
                Provenance::SelfPlay,
                1,
            ));
        }
        t.terminal = Terminal::Stopped;
        t
    }

    fn ds(name: &str, items: &[(&str, &str)]) -> CurationDataset {
        CurationDataset::from_trajectories(name, items.iter().map(|(id, m)| traj(id, 2, m))).unwrap()
    }

    #[test]
    fn union_keeps_base_entries() {
        let base = ds("a", &[("q1", "base"), ("q2", "base")]);
        let add = ds("b", &[("q2", "add"), ("q3", "add")]);
        let u = cumulative_union(&base, &add, "u");
        assert_eq!(u.query_set(), ["q1", "q2", "q3"].map(String::from).into());
        assert_eq!(u.get("q2"), base.get("q2"));
        assert_eq!(u.get("q3"), add.get("q3"));
        assert_eq!(cumulative_union(&ds("e", &[]), &add, "x").query_set(), add.query_set());
    }

    #[test]
    fn stage_sizes() {
        let rej = ds("r", &[("q1", ""), ("q2", ""), ("q3", ""), ("q4", ""), ("q5", ""), ("q6", "")]);
        let l = ds("l", &[("q1", ""), ("q7", ""), ("q8", "")]);
        let b = ds("b", &[("q9", "")]);
        let r = ds("rb", &[("q1#rb1", ""), ("q1#rb2", ""), ("q2#rb1", "")]);
        let p = build_pipeline_datasets(&rej, &l, &b, &r);
        let sizes: Vec<usize> = p.iter().map(CurationDataset::len).collect();
        assert_eq!(sizes, vec![8, 9, 12]);
        assert_eq!(p.rollback.name, D_R_C);
    }

    #[test]
    fn duplicate_rejected() {
        let mut d = ds("x", &[("q1", "")]);
        assert!(d.insert(traj("q1", 1, "")).is_err());
    }

    #[test]
    fn diff_partitions() {
        let d = dataset_diff(&ds("a", &[("q1", "")]), &ds("b", &[("q1", ""), ("q2", "")]));
        assert_eq!(d.only_b, ["q2".to_string()].into());
        assert!(d.only_a.is_empty());
        assert_eq!(d.shared, ["q1".to_string()].into());
    }

    #[test]
    fn export_counts_and_reparses() {
        let d = CurationDataset::from_trajectories("x", [traj("q1", 3, "a"), traj("q2", 4, "b")]).unwrap();
        let recs = export_sft(&d, 3, "SYS");
        assert_eq!(recs.len(), 7);
        assert!(!recs[0].user_context.contains("PREVIOUS STEPS"));
        assert!(recs[1].user_context.contains("Step 1:"));
        for r in &recs {
            parse_agent_reply(&r.target).unwrap();
            let line = serde_json::to_string(r).unwrap();
            assert!(line.starts_with(r#"{"messages":[{"role":"system","content":"SYS"}"#));
            assert_eq!(&serde_json::from_str::<SftRecord>(&line).unwrap(), r);
        }
    }

    #[test]
    fn manifest_tracks_additions() {
        let base = ds("a", &[("q1", "")]);
        let u = cumulative_union(&base, &ds("b", &[("q2", "")]), "u");
        let m = Manifest::describe(&u, Some(&base));
        assert_eq!(m.added_query_ids, vec!["q2".to_string()]);
        assert_eq!(m.counts.steps, 4);
        assert_eq!(m.counts.by_provenance["self"], 4);
    }
}
