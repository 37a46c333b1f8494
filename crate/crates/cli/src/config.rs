use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rust_decimal::Decimal;
use serde::Deserialize;
use serde_json::Value;
use trajcur::branch::MpcConfig;
use trajcur::policy::{Backend, BackendConfig};
use trajcur::rollback::{PivotThought, RollbackConfig, RollbackMode};
use trajcur::rollout::{JudgeKind, RolloutConfig};

/// Invalid or incomplete configuration. Exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Policy,
    Verbalizer,
    Proposer,
    Simulator,
    Scorer,
    Judge,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Policy,
        Role::Verbalizer,
        Role::Proposer,
        Role::Simulator,
        Role::Scorer,
        Role::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Policy => "policy",
            Role::Verbalizer => "verbalizer",
            Role::Proposer => "proposer",
            Role::Simulator => "simulator",
            Role::Scorer => "scorer",
            Role::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub max_steps: usize,
    pub clip_k: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            max_steps: 15,
            clip_k: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchSection {
    pub k: usize,
    pub sim_depth: usize,
}

impl Default for BranchSection {
    fn default() -> Self {
        BranchSection { k: 3, sim_depth: 2 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollbackSection {
    pub n: usize,
    pub seed: u64,
    pub mode: RollbackMode,
    pub pivot_thought: PivotThought,
}

impl Default for RollbackSection {
    fn default() -> Self {
        RollbackSection {
            n: 2,
            seed: 42,
            mode: RollbackMode::Continue,
            pivot_thought: PivotThought::Alternative,
        }
    }
}

/// `rejection` scores self-play and branch episodes for D_rej; `curation`
/// re-judges refined trajectories, branch episodes and rollback detours.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub rejection: JudgeKind,
    pub curation: JudgeKind,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            rejection: JudgeKind::ModelBased,
            curation: JudgeKind::RuleBased,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingSection {
    /// Charged for every generated token.
    pub usd_per_million_tokens: Decimal,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub sites_dir: PathBuf,
    pub queries: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub branch: BranchSection,
    #[serde(default)]
    pub rollback: RollbackSection,
    #[serde(default)]
    pub judges: JudgeSection,
    #[serde(default)]
    pub pricing: PricingSection,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Replace `${NAME}` in every string value with the environment variable.
pub fn interpolate(value: &mut Value) -> Result<(), String> {
    match value {
        Value::String(s) => {
            *s = expand(s)?;
            Ok(())
        }
        Value::Array(items) => items.iter_mut().try_for_each(interpolate),
        Value::Object(map) => map.values_mut().try_for_each(interpolate),
        _ => Ok(()),
    }
}

fn expand(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let end = tail
            .find('}')
            .ok_or_else(|| format!("unterminated `${{` in {s:?}"))?;
        let name = &tail[..end];
        let val = std::env::var(name)
            .map_err(|_| format!("environment variable {name} is not set (referenced in {s:?})"))?;
        out.push_str(&val);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut raw: Value = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        interpolate(&mut raw).map_err(config_error)?;
        let mut cfg: PipelineConfig = serde_json::from_value(raw)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        for name in self.backends.keys() {
            if !Role::ALL.iter().any(|r| r.as_str() == name) {
                let known: Vec<_> = Role::ALL.iter().map(|r| r.as_str()).collect();
                return Err(config_error(format!(
                    "unknown backend role `{name}` (expected one of {})",
                    known.join(", ")
                )));
            }
        }
        for (name, b) in &self.backends {
            b.validate()
                .map_err(|e| config_error(format!("backend `{name}`: {e}")))?;
        }
        if self.rollout.clip_k == 0 {
            return Err(config_error("rollout.clip_k must be at least 1"));
        }
        if self.rollout.max_steps == 0 {
            return Err(config_error("rollout.max_steps must be at least 1"));
        }
        if self.branch.k == 0 || self.branch.sim_depth == 0 {
            return Err(config_error("branch.k and branch.sim_depth must be at least 1"));
        }
        if self.rollback.n == 0 {
            return Err(config_error("rollback.n must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn sites_dir(&self) -> PathBuf {
        self.resolve(&self.sites_dir)
    }

    pub fn queries_path(&self) -> PathBuf {
        self.resolve(&self.queries)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn backend(&self, role: Role) -> anyhow::Result<Arc<dyn Backend>> {
        let spec = self.backends.get(role.as_str()).ok_or_else(|| {
            config_error(format!(
                "no backend configured for role `{}`",
                role.as_str()
            ))
        })?;
        spec.build(role.as_str(), &self.base_dir)
            .map_err(|e| config_error(format!("backend `{}`: {e}", role.as_str())))
    }

    /// The judge backend, only when `kind` needs one.
    pub fn judge_backend(&self, kind: JudgeKind) -> anyhow::Result<Option<Arc<dyn Backend>>> {
        match kind {
            JudgeKind::RuleBased => Ok(None),
            JudgeKind::ModelBased => self.backend(Role::Judge).map(Some),
        }
    }

    pub fn rollout_config(&self, judge: JudgeKind) -> RolloutConfig {
        RolloutConfig {
            max_steps: self.rollout.max_steps,
            clip_k: self.rollout.clip_k,
            judge,
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            k: self.branch.k,
            sim_depth: self.branch.sim_depth,
        }
    }

    pub fn rollback_config(&self) -> RollbackConfig {
        RollbackConfig {
            n: self.rollback.n,
            seed: self.rollback.seed,
            clip_k: self.rollout.clip_k,
            mode: self.rollback.mode,
            pivot_thought: self.rollback.pivot_thought,
        }
    }

    pub fn usd_per_token(&self) -> Decimal {
        self.pricing.usd_per_million_tokens / Decimal::from(1_000_000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_variables() {
        std::env::set_var("TRAJCUR_TEST_DIR", "/data");
        let mut v = serde_json::json!({"a": "${TRAJCUR_TEST_DIR}/sites", "b": ["x${TRAJCUR_TEST_DIR}"], "c": 3});
        interpolate(&mut v).unwrap();
        assert_eq!(v["a"], "/data/sites");
        assert_eq!(v["b"][0], "x/data");
    }

    #[test]
    fn missing_variable_is_named() {
        let mut v = serde_json::json!("${TRAJCUR_SURELY_UNSET_VAR}");
        let err = interpolate(&mut v).unwrap_err();
        assert!(err.contains("TRAJCUR_SURELY_UNSET_VAR"));
    }

    #[test]
    fn unterminated_reference() {
        assert!(expand("${OOPS").is_err());
    }
}
