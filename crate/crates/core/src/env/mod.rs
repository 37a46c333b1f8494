//! Deterministic simulated web environment over fixture site graphs.

mod sim;
mod site;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub use site::{
    glob_match, ActionPattern, Affordance, Page, ScrollKey, SiteSpec, SuccessPredicate, Transition,
};

use crate::model::{Action, Observation, QueryRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("unknown site: {0}")]
    UnknownSite(String),
    #[error("invalid site: {0}")]
    InvalidSite(String),
    #[error("unknown page: {0}")]
    UnknownPage(String),
    #[error("no success predicate for query {0}")]
    UnknownQuery(String),
}

/// Per-episode environment state. Owned by exactly one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub site_id: String,
    pub current_page: String,
    pub history: Vec<String>,
    pub step_count: usize,
    pub stopped: bool,
    /// Error or warning line appended to the next observation.
    pub banner: Option<String>,
}

/// A problem with an action that the agent gets to see, rather than an
/// error that ends the episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionFault {
    InvalidElement { element_id: u32 },
    NoEffect { action: String },
    EmptyHistory,
    EpisodeOver,
}

impl ActionFault {
    pub fn banner(&self) -> String {
        match self {
            ActionFault::InvalidElement { element_id } => {
                format!("[error] element [{element_id}] does not exist on this page")
            }
            ActionFault::NoEffect { action } => format!("[error] `{action}` had no effect"),
            ActionFault::EmptyHistory => "[warning] no previous page to go back to".to_string(),
            ActionFault::EpisodeOver => "[warning] the episode has already stopped".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome<S = EnvState> {
    pub state: S,
    pub observation: Observation,
    pub fault: Option<ActionFault>,
}

/// Every state and observation visited while replaying an action list.
/// `observations[0]` is the reset observation.
#[derive(Debug, Clone)]
pub struct Replay {
    pub states: Vec<EnvState>,
    pub observations: Vec<Observation>,
    pub faults: Vec<Option<ActionFault>>,
}

/// The environment interface episodes run against. The simulator is one
/// implementation; a live browser could be another.
pub trait WebEnvironment: Send + Sync {
    type State: Clone + Send;

    fn site_id(&self) -> &str;

    fn reset(&self, q: &QueryRecord) -> Result<(Self::State, Observation), EnvError>;

    fn step(&self, state: &Self::State, action: &Action)
        -> Result<StepOutcome<Self::State>, EnvError>;
}

/// All fixture sites, keyed by site id.
#[derive(Debug, Clone, Default)]
pub struct SiteRegistry {
    sites: BTreeMap<String, Arc<SiteSpec>>,
}

impl SiteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: SiteSpec) {
        self.sites.insert(site.site_id.clone(), Arc::new(site));
    }

    /// Load every `*.json` file in `dir` as a site.
    pub fn load_dir(dir: &Path) -> Result<Self, EnvError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| EnvError::InvalidSite(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut registry = SiteRegistry::new();
        for path in paths {
            let site = SiteSpec::load(&path)?;
            if registry.sites.contains_key(&site.site_id) {
                return Err(EnvError::InvalidSite(format!(
                    "duplicate site id '{}' in {}",
                    site.site_id,
                    path.display()
                )));
            }
            registry.insert(site);
        }
        Ok(registry)
    }

    pub fn get(&self, site_id: &str) -> Result<&Arc<SiteSpec>, EnvError> {
        self.sites
            .get(site_id)
            .ok_or_else(|| EnvError::UnknownSite(site_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<SiteSpec>> {
        self.sites.values()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}
