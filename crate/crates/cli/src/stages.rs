use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use trajcur::branch::{build_branch_set, run_mpc_episode, DeliberationRecord, MpcBackends};
use trajcur::curate::{
    build_pipeline_datasets, cumulative_union, export_sft, CurationDataset, Manifest, D_B, D_L, D_R, D_REJ,
};
use trajcur::evalkit::{
    cost_ledger, delta_l, success_table, token_stats, DeltaMode, Phase, PhaseEntry, SiteTally,
};
use trajcur::io::{read_jsonl, write_json, write_jsonl};
use trajcur::policy::Backend;
use trajcur::prompts;
use trajcur::reflect::{build_reflection_set, ReflectOutcome, ReflectRecord};
use trajcur::rollback::{build_rollback_set, RollbackBackends, VariantOutcome, VariantRecord};
use trajcur::rollout::{rejection_sample, run_episode, self_assess, Judge, JudgeKind};
use trajcur::{DeltaL, QueryRecord, SiteRegistry, TokenSummary, Trajectory};

use crate::config::{config_error, PipelineConfig, Role};

/// Whether a stage finished with per-item failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    Partial,
}

impl Status {
    fn from_failures(n: usize) -> Self {
        if n == 0 {
            Status::Complete
        } else {
            Status::Partial
        }
    }
}

pub struct Workspace {
    pub cfg: PipelineConfig,
    pub sites: SiteRegistry,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Workspace {
    pub fn open(cfg: PipelineConfig, out: Option<PathBuf>, jobs: usize) -> Result<Self> {
        let sites = SiteRegistry::load_dir(&cfg.sites_dir()).map_err(|e| config_error(e.to_string()))?;
        if sites.len() == 0 {
            return Err(config_error(format!(
                "no site files in {}",
                cfg.sites_dir().display()
            )));
        }
        let out = out.unwrap_or_else(|| cfg.output_dir());
        Ok(Workspace {
            cfg,
            sites,
            out,
            jobs: jobs.max(1),
        })
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn queries(&self) -> Result<Vec<QueryRecord>> {
        let path = self.cfg.queries_path();
        let queries: Vec<QueryRecord> = read_jsonl(&path).map_err(|e| config_error(e.to_string()))?;
        for q in &queries {
            if self.sites.get(&q.site).is_err() {
                return Err(config_error(format!(
                    "query {} refers to unknown site `{}`",
                    q.query_id, q.site
                )));
            }
        }
        Ok(queries)
    }

    fn judge<'a>(&'a self, kind: JudgeKind, backend: &'a Option<std::sync::Arc<dyn Backend>>) -> Judge<'a> {
        match (kind, backend) {
            (JudgeKind::ModelBased, Some(b)) => Judge::ModelBased(b.as_ref()),
            _ => Judge::RuleBased(&self.sites),
        }
    }
}

fn load_dataset(path: &Path, name: &str) -> Result<CurationDataset> {
    let trajs: Vec<Trajectory> = read_jsonl(path)?;
    CurationDataset::from_trajectories(name, trajs).with_context(|| format!("loading {}", path.display()))
}

fn load_optional(path: &Path, name: &str) -> Result<CurationDataset> {
    if path.exists() {
        load_dataset(path, name)
    } else {
        log::info!("{} not found; treating {name} as empty", path.display());
        Ok(CurationDataset::new(name))
    }
}

fn save_dataset(
    dir: &Path,
    ds: &CurationDataset,
    parent: Option<&CurationDataset>,
    scores: BTreeMap<String, f64>,
) -> Result<()> {
    write_jsonl(&dir.join(format!("{}.jsonl", ds.name)), ds.trajectories())?;
    let manifest = Manifest::describe(ds, parent).with_scores(scores);
    write_json(&dir.join(format!("{}.manifest.json", ds.name)), &manifest)?;
    Ok(())
}

fn write_errors(dir: &Path, errors: &BTreeMap<String, String>) -> Result<()> {
    let path = dir.join("errors.json");
    if errors.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
        return Ok(());
    }
    for (q, e) in errors {
        log::warn!("{q}: {e}");
    }
    write_json(&path, errors)?;
    Ok(())
}

pub fn rollout(ws: &Workspace) -> Result<Status> {
    let queries = ws.queries()?;
    let policy = ws.cfg.backend(Role::Policy)?;
    let judge_backend = ws.cfg.judge_backend(ws.cfg.judges.rejection)?;
    let judge = ws.judge(ws.cfg.judges.rejection, &judge_backend);
    let rcfg = ws.cfg.rollout_config(ws.cfg.judges.rejection);
    let sites = &ws.sites;
    let outcome = rejection_sample(
        &queries,
        |q| run_episode(sites.get(&q.site)?.as_ref(), policy.as_ref(), q, &rcfg),
        judge,
        ws.jobs,
    );
    let dir = ws.stage_dir("rollout");
    write_jsonl(&dir.join("pool.jsonl"), &outcome.pool)?;
    save_dataset(&dir, &outcome.dataset, None, outcome.scores.clone())?;
    write_errors(&dir, &outcome.errors)?;
    println!(
        "rollout: {} episodes, {} accepted into {}, {} errors",
        outcome.pool.len(),
        outcome.dataset.len(),
        D_REJ,
        outcome.errors.len()
    );
    Ok(Status::from_failures(outcome.errors.len()))
}

pub fn reflect(ws: &Workspace, dataset: Option<&Path>) -> Result<Status> {
    let verbalizer = ws.cfg.backend(Role::Verbalizer)?;
    let judge_backend = ws.cfg.judge_backend(ws.cfg.judges.curation)?;
    let judge = ws.judge(ws.cfg.judges.curation, &judge_backend);
    let pool_path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.stage_dir("rollout").join("pool.jsonl"));
    let pool: Vec<Trajectory> =
        read_jsonl(&pool_path).with_context(|| "reflect needs the rollout pool; run `rollout` first")?;
    let set = build_reflection_set(&pool, &ws.sites, judge, verbalizer.as_ref(), false, ws.jobs);
    let dir = ws.stage_dir("reflect");
    save_dataset(&dir, &set.dataset, None, BTreeMap::new())?;
    write_jsonl(&dir.join("records.jsonl"), &set.records)?;
    let count = |o: ReflectOutcome| set.records.iter().filter(|r| r.outcome == o).count();
    println!(
        "reflect: {} trajectories, {} with loops kept in {}, {} not successful, {} replay mismatches, {} failed",
        pool.len(),
        set.dataset.len(),
        D_L,
        count(ReflectOutcome::NotSuccess),
        count(ReflectOutcome::ReplayMismatch),
        set.failures()
    );
    for r in set.records.iter().filter(|r| r.outcome == ReflectOutcome::Failed) {
        log::warn!("{}: {}", r.query_id, r.error.as_deref().unwrap_or("failed"));
    }
    Ok(Status::from_failures(set.failures()))
}

pub fn branch(ws: &Workspace) -> Result<Status> {
    let queries = ws.queries()?;
    let proposer = ws.cfg.backend(Role::Proposer)?;
    let simulator = ws.cfg.backend(Role::Simulator)?;
    let scorer = ws.cfg.backend(Role::Scorer)?;
    let judge_backend = ws.cfg.judge_backend(ws.cfg.judges.curation)?;
    let judge = ws.judge(ws.cfg.judges.curation, &judge_backend);
    let rcfg = ws.cfg.rollout_config(ws.cfg.judges.curation);
    let mpc = ws.cfg.mpc_config();
    let backends = MpcBackends {
        proposer: proposer.as_ref(),
        simulator: simulator.as_ref(),
        scorer: scorer.as_ref(),
    };
    let sites = &ws.sites;
    let set = build_branch_set(
        &queries,
        |q| run_mpc_episode(sites.get(&q.site)?.as_ref(), backends, q, &rcfg, mpc),
        judge,
        ws.jobs,
    );
    let dir = ws.stage_dir("branch");
    write_jsonl(&dir.join("pool.jsonl"), &set.pool)?;
    write_jsonl(&dir.join("deliberations.jsonl"), &set.log)?;
    save_dataset(&dir, &set.dataset, None, set.scores.clone())?;
    write_errors(&dir, &set.errors)?;
    println!(
        "branch: {} episodes, {} deliberation steps, {} accepted into {}, {} errors",
        set.pool.len(),
        set.log.len(),
        set.dataset.len(),
        D_B,
        set.errors.len()
    );
    Ok(Status::from_failures(set.errors.len()))
}

/// Union of the stage outputs that precede rollback.
fn rollback_pool(ws: &Workspace) -> Result<CurationDataset> {
    let rej_path = ws.stage_dir("rollout").join(format!("{D_REJ}.jsonl"));
    if !rej_path.exists() {
        bail!("{} not found; run `rollout` first", rej_path.display());
    }
    let rej = load_dataset(&rej_path, D_REJ)?;
    let l = load_optional(&ws.stage_dir("reflect").join(format!("{D_L}.jsonl")), D_L)?;
    let b = load_optional(&ws.stage_dir("branch").join(format!("{D_B}.jsonl")), D_B)?;
    let lc = cumulative_union(&rej, &l, "pool");
    Ok(cumulative_union(&lc, &b, "pool"))
}

pub fn rollback(ws: &Workspace, dataset: Option<&Path>) -> Result<Status> {
    let proposer = ws.cfg.backend(Role::Proposer)?;
    let verbalizer = ws.cfg.backend(Role::Verbalizer)?;
    let judge_backend = ws.cfg.judge_backend(ws.cfg.judges.curation)?;
    let judge = ws.judge(ws.cfg.judges.curation, &judge_backend);
    let pool: Vec<Trajectory> = match dataset {
        Some(p) => read_jsonl(p)?,
        None => rollback_pool(ws)?.into_trajectories().collect(),
    };
    let backends = RollbackBackends {
        proposer: proposer.as_ref(),
        verbalizer: verbalizer.as_ref(),
    };
    let rcfg = ws.cfg.rollback_config();
    let set = build_rollback_set(&pool, &ws.sites, backends, judge, &rcfg, ws.jobs);
    let dir = ws.stage_dir("rollback");
    save_dataset(&dir, &set.dataset, None, BTreeMap::new())?;
    write_jsonl(&dir.join("variants.jsonl"), &set.records)?;
    let mut by_outcome: BTreeMap<String, usize> = BTreeMap::new();
    for r in &set.records {
        let key = serde_json::to_value(r.outcome)?.as_str().unwrap_or("?").to_string();
        *by_outcome.entry(key).or_default() += 1;
    }
    let summary: Vec<String> = by_outcome.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "rollback: {} bases, {} variants attempted, {} kept in {} ({})",
        pool.len(),
        set.records.len(),
        set.dataset.len(),
        D_R,
        summary.join(" ")
    );
    let failed = set.count(VariantOutcome::Failed);
    for r in set.records.iter().filter(|r| r.outcome == VariantOutcome::Failed) {
        log::warn!("{}: {}", r.variant_id, r.detail.as_deref().unwrap_or("failed"));
    }
    Ok(Status::from_failures(failed))
}

pub fn curate(ws: &Workspace) -> Result<Status> {
    let rej_path = ws.stage_dir("rollout").join(format!("{D_REJ}.jsonl"));
    if !rej_path.exists() {
        bail!("{} not found; run `rollout` first", rej_path.display());
    }
    let rej = load_dataset(&rej_path, D_REJ)?;
    let l = load_optional(&ws.stage_dir("reflect").join(format!("{D_L}.jsonl")), D_L)?;
    let b = load_optional(&ws.stage_dir("branch").join(format!("{D_B}.jsonl")), D_B)?;
    let r = load_optional(&ws.stage_dir("rollback").join(format!("{D_R}.jsonl")), D_R)?;
    let stacked = build_pipeline_datasets(&rej, &l, &b, &r);
    let dir = ws.stage_dir("curate");
    save_dataset(&dir, &rej, None, BTreeMap::new())?;
    let mut parent = &rej;
    println!("curate: {} {} trajectories", rej.name, rej.len());
    for ds in stacked.iter() {
        save_dataset(&dir, ds, Some(parent), BTreeMap::new())?;
        println!(
            "curate: {} {} trajectories (+{} over {}), {} steps",
            ds.name,
            ds.len(),
            ds.len() - parent.len(),
            parent.name,
            ds.total_steps()
        );
        parent = ds;
    }
    Ok(Status::Complete)
}

/// A dataset argument is either a file or a name under `curate/`.
fn dataset_path(ws: &Workspace, arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.exists() || arg.ends_with(".jsonl") {
        p
    } else {
        ws.stage_dir("curate").join(format!("{arg}.jsonl"))
    }
}

pub fn export(ws: &Workspace, dataset: Option<&str>) -> Result<Status> {
    let arg = dataset.unwrap_or(trajcur::curate::D_R_C);
    let path = dataset_path(ws, arg);
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let ds = load_dataset(&path, &name)?;
    let records = export_sft(&ds, ws.cfg.rollout.clip_k, &prompts::system_prompt());
    let out = ws.stage_dir("export").join(format!("{name}.sft.jsonl"));
    write_jsonl(&out, &records)?;
    println!(
        "export: {} records from {} trajectories to {}",
        records.len(),
        ds.len(),
        out.display()
    );
    Ok(Status::Complete)
}

pub fn eval(ws: &Workspace, dataset: Option<&str>) -> Result<Status> {
    let path = match dataset {
        Some(arg) => dataset_path(ws, arg),
        None => ws.stage_dir("rollout").join("pool.jsonl"),
    };
    let trajs: Vec<Trajectory> = read_jsonl(&path)?;
    let judge_backend = ws.cfg.judge_backend(ws.cfg.judges.curation)?;
    let judge = ws.judge(ws.cfg.judges.curation, &judge_backend);
    let scores = trajcur::parallel::map_ordered(ws.jobs, &trajs, |t| self_assess(t, judge));
    let mut tallies: BTreeMap<String, SiteTally> = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (t, s) in trajs.iter().zip(scores) {
        match s {
            Ok(score) => {
                let tally = tallies.entry(t.site.clone()).or_default();
                tally.total += 1;
                if score == 1.0 {
                    tally.successes += 1;
                }
            }
            Err(e) => {
                errors.insert(t.query_id.clone(), e.to_string());
            }
        }
    }
    let dir = ws.stage_dir("eval");
    write_errors(&dir, &errors)?;
    if tallies.is_empty() {
        println!("eval: nothing was judged in {}", path.display());
        return Ok(Status::from_failures(errors.len().max(1)));
    }
    let table = success_table(&tallies)?;
    write_json(&dir.join("success.json"), &table)?;
    println!("eval: {}", path.display());
    print!("{}", table.render());
    Ok(Status::from_failures(errors.len()))
}

#[derive(Serialize)]
struct DatasetTokens {
    name: String,
    tokens: Option<TokenSummary>,
}

#[derive(Serialize)]
struct StatsSummary {
    tokens: Vec<DatasetTokens>,
    delta_l_exclude_zeros: Option<DeltaL>,
    delta_l_include_zeros: Option<DeltaL>,
    cost: trajcur::evalkit::CostLedger,
}

pub fn stats(ws: &Workspace) -> Result<Status> {
    let mut tokens = Vec::new();
    let mut sources: Vec<(String, PathBuf)> = vec![("pool".into(), ws.stage_dir("rollout").join("pool.jsonl"))];
    for name in [D_REJ, trajcur::curate::D_L_C, trajcur::curate::D_B_C, trajcur::curate::D_R_C] {
        sources.push((name.to_string(), ws.stage_dir("curate").join(format!("{name}.jsonl"))));
    }
    for (name, path) in sources {
        if !path.exists() {
            continue;
        }
        let trajs: Vec<Trajectory> = read_jsonl(&path)?;
        let per_query: Vec<u64> = trajs.iter().map(Trajectory::tokens_generated).collect();
        tokens.push(DatasetTokens {
            name,
            tokens: token_stats(&per_query),
        });
    }

    let reflect_path = ws.stage_dir("reflect").join("records.jsonl");
    let reflect_records: Vec<ReflectRecord> = if reflect_path.exists() {
        read_jsonl(&reflect_path)?
    } else {
        Vec::new()
    };
    let pairs: Vec<(usize, usize)> = reflect_records
        .iter()
        .filter(|r| matches!(r.outcome, ReflectOutcome::Kept | ReflectOutcome::NoLoop))
        .filter(|r| r.original_len > 0 && r.refined_len > 0)
        .map(|r| (r.refined_len, r.original_len))
        .collect();
    let (dl_ex, dl_in) = if pairs.is_empty() {
        (None, None)
    } else {
        (
            Some(delta_l(&pairs, DeltaMode::ExcludeZeros)),
            Some(delta_l(&pairs, DeltaMode::IncludeZeros)),
        )
    };

    let mut entries = Vec::new();
    let reflection: u64 = reflect_records.iter().map(|r| r.verbalizer_tokens).sum();
    entries.push(PhaseEntry {
        phase: Phase::Reflection,
        tokens: reflection,
        price_usd: None,
    });
    let delib_path = ws.stage_dir("branch").join("deliberations.jsonl");
    if delib_path.exists() {
        let log: Vec<DeliberationRecord> = read_jsonl(&delib_path)?;
        entries.push(PhaseEntry {
            phase: Phase::Branching,
            tokens: log.iter().map(|d| d.tokens.total()).sum(),
            price_usd: None,
        });
    }
    let variants_path = ws.stage_dir("rollback").join("variants.jsonl");
    if variants_path.exists() {
        let records: Vec<VariantRecord> = read_jsonl(&variants_path)?;
        entries.push(PhaseEntry {
            phase: Phase::Rollback,
            tokens: records.iter().map(|r| r.tokens).sum(),
            price_usd: None,
        });
    }
    let cost = cost_ledger(&entries, ws.cfg.usd_per_token());

    for t in &tokens {
        match &t.tokens {
            Some(s) => println!(
                "tokens {}: {} trajectories, mean {:.1}, median {}",
                t.name, s.count, s.mean, s.median
            ),
            None => println!("tokens {}: empty", t.name),
        }
    }
    for d in [&dl_ex, &dl_in].into_iter().flatten() {
        let mode = serde_json::to_value(d.mode)?;
        match (d.mean, d.median) {
            (Some(mean), Some(median)) => println!(
                "length change ({}): mean {mean:.2}, median {median}, {} of {} changed",
                mode.as_str().unwrap_or("?"),
                d.nonzero_count,
                d.values.len()
            ),
            _ => println!(
                "length change ({}): undefined, no trajectory changed length",
                mode.as_str().unwrap_or("?")
            ),
        }
    }
    print!("{}", cost.render());
    write_json(
        &ws.stage_dir("stats").join("summary.json"),
        &StatsSummary {
            tokens,
            delta_l_exclude_zeros: dl_ex,
            delta_l_include_zeros: dl_in,
            cost,
        },
    )?;
    Ok(Status::Complete)
}
