use std::collections::BTreeMap;

use super::train::{train_amalgamate, AmalgamResult};
use super::{derive_seed, AmalgamConfig, LossBreakdown, TaskSet};
use crate::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

/// A trained network in the source pool.
#[derive(Debug, Clone)]
pub struct Source {
    pub id: String,
    pub net: BlockNet,
}

impl Source {
    pub fn new(id: impl Into<String>, net: BlockNet) -> Self {
        Self { id: id.into(), net }
    }

    pub fn tasks(&self) -> TaskSet {
        self.net.task_set()
    }
}

/// Groups sources by user task. Each group holds every source covering that
/// task, so a multi-task source can land in several groups.
pub fn cluster_sources(pool: &[(String, TaskSet)], user_tasks: &TaskSet) -> Result<BTreeMap<String, Vec<String>>> {
    if user_tasks.is_empty() {
        return Err(Error::Config("no user tasks requested".into()));
    }
    let groups: BTreeMap<String, Vec<String>> = user_tasks
        .iter()
        .map(|task| {
            let ids = pool
                .iter()
                .filter(|(_, tasks)| tasks.contains(task))
                .map(|(id, _)| id.clone())
                .collect();
            (task.clone(), ids)
        })
        .collect();
    let missing: Vec<&str> = groups
        .iter()
        .filter(|(_, ids)| ids.is_empty())
        .map(|(t, _)| t.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(format!("no source covers task(s): {}", missing.join(", "))));
    }
    Ok(groups)
}

fn pool_index(pool: &[Source]) -> Vec<(String, TaskSet)> {
    pool.iter().map(|s| (s.id.clone(), s.tasks())).collect()
}

fn head_for(sources: &[&BlockNet], task: &str) -> Result<HeadSpec> {
    sources
        .iter()
        .find_map(|n| n.spec().head(task).cloned())
        .ok_or_else(|| Error::Coverage(format!("no source has a head for {task:?}")))
}

/// Backbone of the first source, without heads.
fn base_spec(sources: &[&BlockNet]) -> Result<BlockNetSpec> {
    let first = sources.first().ok_or_else(|| Error::Coverage("empty source group".into()))?;
    Ok(first.spec().clone().with_heads(Vec::new()))
}

/// Spec of the multi-task target: the source backbone widened, one head per
/// user task in sorted order.
pub fn target_spec(sources: &[&BlockNet], user_tasks: &TaskSet, widen_factor: f64) -> Result<BlockNetSpec> {
    let heads = user_tasks
        .iter()
        .map(|t| head_for(sources, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(base_spec(sources)?.widened(widen_factor).with_heads(heads))
}

fn stage_config(config: &AmalgamConfig, tag: &str) -> AmalgamConfig {
    AmalgamConfig {
        seed: derive_seed(config.seed, tag),
        ..config.clone()
    }
}

/// First stage for one task: a single-task component net, with the source
/// backbone, learned from every source covering the task.
pub fn amalgamate_component(sources: &[&BlockNet], task: &str, unlabeled: &Dataset, config: &AmalgamConfig) -> Result<AmalgamResult> {
    let spec = base_spec(sources)?.with_heads(vec![head_for(sources, task)?]);
    let tag = format!("component/{task}");
    let student = BlockNet::new(spec, derive_seed(config.seed, &format!("{tag}/init")))?;
    train_amalgamate(sources, student, unlabeled, &stage_config(config, &tag))
}

/// Second stage: the widened multi-task target learned from the component
/// nets.
pub fn amalgamate_target(components: &[&BlockNet], unlabeled: &Dataset, config: &AmalgamConfig) -> Result<AmalgamResult> {
    let tasks: TaskSet = components.iter().flat_map(|c| c.task_set()).collect();
    let spec = target_spec(components, &tasks, config.widen_factor)?;
    let student = BlockNet::new(spec, derive_seed(config.seed, "target/init"))?;
    train_amalgamate(components, student, unlabeled, &stage_config(config, "target"))
}

#[derive(Debug, Clone)]
pub struct DualStageResult {
    pub groups: BTreeMap<String, Vec<String>>,
    pub components: BTreeMap<String, BlockNet>,
    pub target: BlockNet,
    pub stage1: BTreeMap<String, LossBreakdown>,
    pub stage2: LossBreakdown,
}

/// Cluster the pool by user task, amalgamate one component per task, then
/// amalgamate the components into one multi-task target.
pub fn dual_stage(pool: &[Source], user_tasks: &TaskSet, unlabeled: &Dataset, config: &AmalgamConfig) -> Result<DualStageResult> {
    config.validate()?;
    let groups = cluster_sources(&pool_index(pool), user_tasks)?;
    let by_id: BTreeMap<&str, &BlockNet> = pool.iter().map(|s| (s.id.as_str(), &s.net)).collect();
    let mut components = BTreeMap::new();
    let mut stage1 = BTreeMap::new();
    for (task, ids) in &groups {
        let sources: Vec<&BlockNet> = ids.iter().map(|id| by_id[id.as_str()]).collect();
        let result = amalgamate_component(&sources, task, unlabeled, config)?;
        stage1.insert(task.clone(), result.history);
        components.insert(task.clone(), result.student);
    }
    let refs: Vec<&BlockNet> = components.values().collect();
    let result = amalgamate_target(&refs, unlabeled, config)?;
    Ok(DualStageResult {
        groups,
        components,
        target: result.student,
        stage1,
        stage2: result.history,
    })
}

/// Single amalgamation straight from every relevant source into the
/// multi-task target, selecting a teacher per task head.
pub fn one_shot_amalgamate(pool: &[Source], user_tasks: &TaskSet, unlabeled: &Dataset, config: &AmalgamConfig) -> Result<AmalgamResult> {
    config.validate()?;
    let groups = cluster_sources(&pool_index(pool), user_tasks)?;
    let teachers: Vec<&BlockNet> = pool
        .iter()
        .filter(|s| groups.values().any(|ids| ids.contains(&s.id)))
        .map(|s| &s.net)
        .collect();
    let spec = target_spec(&teachers, user_tasks, config.widen_factor)?;
    let student = BlockNet::new(spec, derive_seed(config.seed, "target/init"))?;
    let config = AmalgamConfig {
        per_task_selection: true,
        ..stage_config(config, "target")
    };
    train_amalgamate(&teachers, student, unlabeled, &config)
}
