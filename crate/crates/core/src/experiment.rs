//! Small seeded experiments on synthetic scenes: amalgamation gain over the
//! teachers, ablations, teacher-count sweeps, two-stage vs one-shot, and
//! resource accounting. Shared by the command-line driver, the examples and
//! the acceptance tests.

use std::collections::BTreeMap;

use crate::blocknet::{BlockNet, BlockNetSpec, HeadSpec, Resources};
use crate::engine::{
    amalgamate_component, derive_seed, dual_stage, evaluate, one_shot_amalgamate, target_spec, train_supervised,
    AmalgamConfig, LossBreakdown, Source, TaskSet, TrainConfig,
};
use crate::error::{Error, Result};
use crate::synthdata::{default_tasks, generate, split, DatasetSplit, SceneDistribution};

/// Everything that fixes the size and difficulty of a desk experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskSetup {
    pub scenes: SceneDistribution,
    /// Backbone shared by all sources; heads are added per source.
    pub backbone: BlockNetSpec,
    /// Labeled samples in each source's private partition.
    pub samples_per_source: usize,
    pub unlabeled_samples: usize,
    pub test_samples: usize,
    pub teacher: TrainConfig,
    pub amalgam: AmalgamConfig,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            scenes: SceneDistribution::default(),
            backbone: BlockNetSpec::default(),
            samples_per_source: 100,
            unlabeled_samples: 800,
            test_samples: 2000,
            teacher: TrainConfig::default(),
            amalgam: AmalgamConfig {
                epochs: 10,
                batch_size: 16,
                ..AmalgamConfig::default()
            },
        }
    }
}

/// Seeded data for one experiment repetition.
pub fn prepare_data(setup: &DeskSetup, num_sources: usize, seed: u64) -> Result<DatasetSplit> {
    let total = num_sources * setup.samples_per_source + setup.unlabeled_samples + setup.test_samples;
    let data = generate(&setup.scenes, total, derive_seed(seed, "scenes"))?;
    split(
        &data,
        num_sources,
        setup.unlabeled_samples as f64 / total as f64,
        setup.test_samples as f64 / total as f64,
        derive_seed(seed, "split"),
    )
}

/// Head spec of one of the generator's tasks.
pub fn task_head(task: &str) -> Result<HeadSpec> {
    default_tasks()
        .into_iter()
        .find(|h| h.task_id == task)
        .ok_or_else(|| Error::Config(format!("unknown task {task:?}")))
}

/// Trains source `i` on partition `i` with the tasks in `source_tasks[i]`.
pub fn train_sources(setup: &DeskSetup, data: &DatasetSplit, source_tasks: &[Vec<String>], seed: u64) -> Result<Vec<Source>> {
    if source_tasks.len() > data.teacher_train.len() {
        return Err(Error::Size(format!(
            "{} sources requested but only {} partitions",
            source_tasks.len(),
            data.teacher_train.len()
        )));
    }
    source_tasks
        .iter()
        .enumerate()
        .map(|(i, tasks)| {
            let heads = tasks.iter().map(|t| task_head(t)).collect::<Result<Vec<_>>>()?;
            let spec = setup.backbone.clone().with_heads(heads);
            let id = format!("source{i}");
            let mut net = BlockNet::new(spec, derive_seed(seed, &format!("{id}/init")))?;
            let config = TrainConfig {
                seed: derive_seed(seed, &format!("{id}/train")),
                ..setup.teacher.clone()
            };
            train_supervised(&mut net, &data.teacher_train[i], &config)?;
            Ok(Source::new(id, net))
        })
        .collect()
}

pub fn accuracy(net: &BlockNet, data: &DatasetSplit, task: &str) -> Result<f64> {
    Ok(evaluate(net, &data.test, &[task])?[task])
}

/// Sources trained on one task, their test accuracy and the data they came
/// from; the common starting point of the single-task experiments.
#[derive(Debug, Clone)]
pub struct TeacherPool {
    pub task: String,
    pub data: DatasetSplit,
    pub sources: Vec<Source>,
    pub accuracies: Vec<f64>,
}

pub fn teacher_pool(setup: &DeskSetup, task: &str, num_sources: usize, seed: u64) -> Result<TeacherPool> {
    let data = prepare_data(setup, num_sources, seed)?;
    let sources = train_sources(setup, &data, &vec![vec![task.to_string()]; num_sources], seed)?;
    let accuracies = sources
        .iter()
        .map(|s| accuracy(&s.net, &data, task))
        .collect::<Result<_>>()?;
    Ok(TeacherPool {
        task: task.to_string(),
        data,
        sources,
        accuracies,
    })
}

/// Test accuracy of a component net amalgamated from the first `count`
/// sources of the pool.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub accuracy: f64,
    pub history: LossBreakdown,
}

pub fn amalgamate_from_pool(pool: &TeacherPool, count: usize, config: &AmalgamConfig) -> Result<RunOutcome> {
    if count == 0 || count > pool.sources.len() {
        return Err(Error::Size(format!("cannot take {count} of {} sources", pool.sources.len())));
    }
    let teachers: Vec<&BlockNet> = pool.sources[..count].iter().map(|s| &s.net).collect();
    let result = amalgamate_component(&teachers, &pool.task, &pool.data.student_unlabeled, config)?;
    Ok(RunOutcome {
        accuracy: accuracy(&result.student, &pool.data, &pool.task)?,
        history: result.history,
    })
}

/// The four training variants of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Soft targets only, fixed scale, all teachers averaged.
    Kd,
    /// No transfer bridges.
    WithoutBridge,
    /// No teacher selection.
    WithoutSelection,
    Whole,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Kd, Variant::WithoutBridge, Variant::WithoutSelection, Variant::Whole];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Kd => "kd",
            Variant::WithoutBridge => "wo_tb",
            Variant::WithoutSelection => "wo_ts",
            Variant::Whole => "whole",
        }
    }

    pub fn apply(self, base: &AmalgamConfig) -> AmalgamConfig {
        let mut c = base.clone();
        c.kd_only = false;
        c.disable_bridge = false;
        c.disable_selection = false;
        match self {
            Variant::Kd => c.kd_only = true,
            Variant::WithoutBridge => c.disable_bridge = true,
            Variant::WithoutSelection => c.disable_selection = true,
            Variant::Whole => {}
        }
        c
    }
}

pub fn ablation(pool: &TeacherPool, count: usize, base: &AmalgamConfig, variants: &[Variant]) -> Result<BTreeMap<Variant, RunOutcome>> {
    variants
        .iter()
        .map(|&v| amalgamate_from_pool(pool, count, &v.apply(base)).map(|r| (v, r)))
        .collect()
}

/// Accuracy of the component learned from the first `k` sources, for each
/// `k` in `counts`.
pub fn teacher_sweep(pool: &TeacherPool, counts: &[usize], config: &AmalgamConfig) -> Result<Vec<(usize, RunOutcome)>> {
    counts
        .iter()
        .map(|&k| amalgamate_from_pool(pool, k, config).map(|r| (k, r)))
        .collect()
}

/// Per-task accuracy of the two-stage target against the one-shot target.
#[derive(Debug, Clone)]
pub struct StageComparison {
    pub dual_stage: BTreeMap<String, f64>,
    pub one_shot: BTreeMap<String, f64>,
    pub histories: Vec<LossBreakdown>,
}

/// Two user tasks, each covered by `per_task` single-task sources.
pub fn two_stage_vs_one_shot(setup: &DeskSetup, tasks: [&str; 2], per_task: usize, seed: u64) -> Result<StageComparison> {
    let source_tasks: Vec<Vec<String>> = tasks
        .iter()
        .flat_map(|t| std::iter::repeat_n(vec![t.to_string()], per_task))
        .collect();
    let data = prepare_data(setup, source_tasks.len(), seed)?;
    let pool = train_sources(setup, &data, &source_tasks, seed)?;
    let user: TaskSet = tasks.iter().map(|t| t.to_string()).collect();
    let config = AmalgamConfig {
        seed: derive_seed(seed, "amalgam"),
        ..setup.amalgam.clone()
    };
    let dual = dual_stage(&pool, &user, &data.student_unlabeled, &config)?;
    let one = one_shot_amalgamate(&pool, &user, &data.student_unlabeled, &config)?;
    let names: Vec<&str> = tasks.to_vec();
    let mut histories: Vec<LossBreakdown> = dual.stage1.into_values().collect();
    histories.push(dual.stage2);
    histories.push(one.history);
    Ok(StageComparison {
        dual_stage: evaluate(&dual.target, &data.test, &names)?,
        one_shot: evaluate(&one.student, &data.test, &names)?,
        histories,
    })
}

/// Parameter and FLOP counts of a pool of sources and the target that
/// replaces them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceTable {
    pub sources: Vec<(String, Resources)>,
    pub target: Resources,
}

impl ResourceTable {
    pub fn source_params(&self) -> usize {
        self.sources.iter().map(|(_, r)| r.params).sum()
    }

    pub fn source_flops(&self) -> usize {
        self.sources.iter().map(|(_, r)| r.flops_per_image).sum()
    }
}

pub fn resource_table(sources: &[(String, BlockNetSpec)], user_tasks: &TaskSet, widen_factor: f64) -> Result<ResourceTable> {
    let nets = sources
        .iter()
        .map(|(id, spec)| BlockNet::new(spec.clone(), 0).map(|n| (id.clone(), n)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BlockNet> = nets.iter().map(|(_, n)| n).collect();
    let target = BlockNet::new(target_spec(&refs, user_tasks, widen_factor)?, 0)?;
    Ok(ResourceTable {
        sources: nets.iter().map(|(id, n)| (id.clone(), n.count_resources())).collect(),
        target: target.count_resources(),
    })
}

/// Worst finite-difference disagreement seen for one differentiable
/// operation over several seeded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

type GradFn = for<'t> fn(&'t crate::tensor::Tape, &[crate::tensor::Var<'t>]) -> Result<crate::tensor::Var<'t>>;

/// Central differences (step `eps`) against the tape for every
/// differentiable operation, on `cases` seeded inputs each.
pub fn gradient_suite(cases: usize, eps: f64) -> Result<Vec<GradCheck>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::bridge::{fa_forward, transfer_loss, weight_regularization, BlockLoss};
    use crate::engine::{soft_target_loss, total_loss};
    use crate::tensor::{check_gradients, Tensor};

    // (name, input shapes, loss builder); every builder ends in a scalar
    let suite: Vec<(&'static str, Vec<Vec<usize>>, GradFn)> = vec![
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], |_, v| v[0].conv2d(v[1], 2, 1)?.square()?.sum()),
        ("conv2d_1x1", vec![vec![1, 3, 4, 4], vec![2, 3, 1, 1]], |_, v| v[0].conv2d(v[1], 1, 0)?.square()?.mean()),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |_, v| v[0].linear(v[1], v[2])?.square()?.sum()),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |_, v| v[0].add(v[1])?.mul(v[2])?.sub(v[0])?.sum()),
        ("square_scale", vec![vec![4]], |_, v| v[0].square()?.scale(-1.5)?.add_scalar(0.25)?.sum()),
        ("relu", vec![vec![3, 3]], |_, v| v[0].relu()?.square()?.sum()),
        ("scale_by", vec![vec![2, 2], vec![1]], |_, v| v[0].scale_by(v[1])?.square()?.sum()),
        ("sum_mean", vec![vec![2, 3, 2]], |_, v| v[0].square()?.mean()?.add(v[0].sum()?)),
        ("reduce_axes", vec![vec![2, 3, 4]], |_, v| {
            v[0].sum_axes(&[1])?.square()?.mean_axes(&[0, 1])?.sum()
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].softmax()?.mul(v[1])?.sum()),
        ("cross_entropy", vec![vec![4, 3]], |_, v| v[0].cross_entropy(&[0, 2, 1, 2])),
        ("select_rows", vec![vec![4, 2]], |_, v| v[0].select_rows(&[3, 1, 3])?.square()?.sum()),
        ("fa_forward", vec![vec![3, 2], vec![2, 2, 3, 3]], |_, v| fa_forward(v[0], v[1])?.square()?.sum()),
        ("transfer_loss", vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]], |_, v| transfer_loss(v[0], v[1])),
        ("weight_regularization", vec![vec![3, 4]], |_, v| weight_regularization(v[0])),
        ("soft_target_loss", vec![vec![4, 3], vec![4, 3], vec![1]], |_, v| soft_target_loss(v[0], v[1], v[2])),
        ("total_loss", vec![vec![1], vec![1], vec![1], vec![1], vec![1]], |_, v| {
            let blocks = [
                BlockLoss { l_a: v[0].square()?, l_reg: v[1].square()? },
                BlockLoss { l_a: v[2].mul(v[0])?, l_reg: v[3].square()? },
            ];
            total_loss(&blocks, v[4].square()?, 3)
        }),
    ];
    suite
        .into_iter()
        .map(|(op, shapes, f)| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(case as u64, op));
                let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng)).collect();
                worst = worst.max(check_gradients(&inputs, eps, f)?);
            }
            Ok(GradCheck {
                op,
                cases,
                max_rel_error: worst,
            })
        })
        .collect()
}
