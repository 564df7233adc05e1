use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{soft_target_loss, sum_vars};
use super::{derive_seed, AlignedChannels, AmalgamConfig, LossBreakdown, StepRecord};
use crate::blocknet::BlockNet;
use crate::bridge::{bridge_block_loss, FaWeights, Side, TransferBridge};
use crate::error::{Error, Result};
use crate::selector::{argmin_teacher, batch_impurities};
use crate::synthdata::Dataset;
use crate::tensor::{cosine_lr, Sgd, Tape, Tensor, Var};

/// Learnable multiplier on one teacher head's logits in the soft-target
/// loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParam {
    pub teacher_index: usize,
    pub task_id: String,
    pub lambda: Tensor,
}

#[derive(Debug, Clone)]
pub struct AmalgamResult {
    pub student: BlockNet,
    /// `bridges[t][l]` links teacher `t` and the student at block `l`.
    pub bridges: Vec<Vec<TransferBridge>>,
    pub scales: Vec<ScaleParam>,
    pub history: LossBreakdown,
}

/// Teacher outputs over the whole unlabeled set, computed once up front
/// since teacher backbones never change.
struct TeacherCache {
    maps: Vec<Tensor>,
    /// Logits and normalized impurity per shared head, keyed by student head.
    heads: BTreeMap<usize, (Tensor, Vec<f64>)>,
}

/// One loss term of a batch: which rows, which teachers' bridges, which
/// `(student head, teacher)` soft targets, and its weight in the batch sum.
struct Entry {
    rows: Vec<usize>,
    bridge_teachers: Vec<usize>,
    soft: Vec<(usize, usize)>,
    weight: f64,
}

const CACHE_CHUNK: usize = 256;

fn check_geometry(teacher: &BlockNet, student: &BlockNet, index: usize) -> Result<()> {
    let (t, s) = (teacher.spec(), student.spec());
    if t.input_shape != s.input_shape || t.block_strides != s.block_strides {
        return Err(Error::Geometry(format!(
            "teacher {index} ({:?}, strides {:?}) does not share the student's input {:?} and strides {:?}",
            t.input_shape, t.block_strides, s.input_shape, s.block_strides
        )));
    }
    Ok(())
}

fn build_cache(teacher: &BlockNet, shared: &[(usize, usize)], data: &Dataset, bridged: usize, clamp: f64) -> Result<TeacherCache> {
    let n = data.len();
    let mut map_chunks: Vec<Vec<f64>> = vec![Vec::new(); bridged];
    let mut map_shapes = vec![Vec::new(); bridged];
    let mut logit_chunks: Vec<Vec<f64>> = vec![Vec::new(); shared.len()];
    for lo in (0..n).step_by(CACHE_CHUNK) {
        let rows: Vec<usize> = (lo..(lo + CACHE_CHUNK).min(n)).collect();
        let out = teacher.forward(&data.batch(&rows)?)?;
        for l in 0..bridged {
            map_shapes[l] = out.maps[l].shape().to_vec();
            map_chunks[l].extend_from_slice(out.maps[l].data());
        }
        for (j, &(_, th)) in shared.iter().enumerate() {
            logit_chunks[j].extend_from_slice(out.logits[th].1.data());
        }
    }
    let maps = map_chunks
        .into_iter()
        .zip(map_shapes)
        .map(|(d, mut s)| {
            s[0] = n;
            Tensor::new(&s, d)
        })
        .collect::<Result<_>>()?;
    let mut heads = BTreeMap::new();
    for (&(sh, th), data) in shared.iter().zip(logit_chunks) {
        let classes = teacher.spec().heads[th].num_classes;
        let logits = Tensor::new(&[n, classes], data)?;
        let tape = Tape::new();
        let probs = tape.constant(&logits).softmax()?.value();
        heads.insert(sh, (logits, batch_impurities(&probs, clamp)?));
    }
    Ok(TeacherCache { maps, heads })
}

fn rows_of<'t>(v: Var<'t>, rows: &[usize], full: usize) -> Result<Var<'t>> {
    if rows.len() == full {
        Ok(v)
    } else {
        v.select_rows(rows)
    }
}

/// Trains `student` from frozen `teachers` on unlabeled images.
///
/// Each batch is split by the teacher(s) each sample learns from. By
/// default a sample learns from the single least ambiguous teacher (its
/// bridges on blocks `1..L-1` plus its soft targets); with
/// `per_task_selection` every student head picks its own teacher and the
/// bridge terms of the distinct picks are averaged. Group losses are
/// weighted by group size, so the batch loss is a per-sample mean. One
/// optimizer step then updates the student, all alignment weights and all
/// logit scales.
pub fn train_amalgamate(
    teachers: &[&BlockNet],
    mut student: BlockNet,
    unlabeled: &Dataset,
    config: &AmalgamConfig,
) -> Result<AmalgamResult> {
    config.validate()?;
    if teachers.is_empty() {
        return Err(Error::Coverage("no teachers supplied".into()));
    }
    student.check_input(unlabeled.images.shape())?;
    let spec = student.spec().clone();
    let num_blocks = spec.num_blocks();
    let bridged = num_blocks - 1;
    let use_bridges = config.uses_bridges();

    // (student head, teacher head) pairs per teacher
    let mut shared: Vec<Vec<(usize, usize)>> = Vec::with_capacity(teachers.len());
    for (ti, t) in teachers.iter().enumerate() {
        check_geometry(t, &student, ti)?;
        if t.num_blocks() != num_blocks {
            return Err(Error::Geometry(format!(
                "teacher {ti} has {} blocks, student {num_blocks}",
                t.num_blocks()
            )));
        }
        let mut pairs = Vec::new();
        for (sh, head) in spec.heads.iter().enumerate() {
            if let Some(th) = t.head_index(&head.task_id) {
                let tc = t.spec().heads[th].num_classes;
                if tc != head.num_classes {
                    return Err(Error::Shape(format!(
                        "task {:?}: teacher {ti} has {tc} classes, student {}",
                        head.task_id, head.num_classes
                    )));
                }
                pairs.push((sh, th));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Coverage(format!("teacher {ti} covers none of the student's tasks")));
        }
        shared.push(pairs);
    }
    for (sh, head) in spec.heads.iter().enumerate() {
        if !shared.iter().any(|p| p.iter().any(|&(s, _)| s == sh)) {
            return Err(Error::Coverage(format!("no teacher covers task {:?}", head.task_id)));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "bridges"));
    let mut bridges: Vec<Vec<TransferBridge>> = teachers
        .iter()
        .map(|t| {
            (0..bridged)
                .map(|l| {
                    let (tc, sc) = (t.spec().block_channels[l], spec.block_channels[l]);
                    match config.aligned_channels {
                        AlignedChannels::StudentBlock => TransferBridge::init(tc, sc, l, &mut init_rng),
                        AlignedChannels::Fixed(c) => TransferBridge::new(
                            FaWeights::random(c, tc, Side::Teacher, l, &mut init_rng),
                            FaWeights::random(c, sc, Side::Student, l, &mut init_rng),
                        )
                        .expect("matching aligned widths"),
                    }
                })
                .collect()
        })
        .collect();
    let mut scales: Vec<ScaleParam> = shared
        .iter()
        .enumerate()
        .flat_map(|(ti, pairs)| {
            pairs.iter().map(move |&(sh, _)| (ti, sh))
        })
        .map(|(ti, sh)| ScaleParam {
            teacher_index: ti,
            task_id: spec.heads[sh].task_id.clone(),
            lambda: Tensor::scalar(1.0).with_requires_grad(),
        })
        .collect();
    let scale_slot: BTreeMap<(usize, usize), usize> = shared
        .iter()
        .enumerate()
        .flat_map(|(ti, pairs)| pairs.iter().map(move |&(sh, _)| (ti, sh)))
        .enumerate()
        .map(|(i, key)| (key, i))
        .collect();

    let caches = teachers
        .iter()
        .zip(&shared)
        .map(|(t, pairs)| build_cache(t, pairs, unlabeled, if use_bridges { bridged } else { 0 }, config.entropy_clamp))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Sgd::new(config.lr, config.momentum)?;
    if config.grad_clip > 0.0 {
        opt = opt.with_clip(config.grad_clip)?;
    }
    let mut scale_opt = Sgd::new(config.lambda_lr, config.momentum)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut history = LossBreakdown::default();
    let mut step = 0;
    let total_steps = config.epochs * unlabeled.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch_rows in order.chunks(config.batch_size) {
            let b = batch_rows.len();
            let entries = plan_entries(batch_rows, &shared, &caches, spec.heads.len(), config)?;

            let tape = Tape::new();
            let student_vars = student.bind(&tape, true);
            let feats = student.forward_vars(&student_vars, tape.constant(&unlabeled.batch(batch_rows)?))?;
            let bridge_vars: Vec<Vec<_>> = if use_bridges {
                bridges
                    .iter()
                    .map(|per| per.iter().map(|br| br.bind(&tape, true)).collect())
                    .collect()
            } else {
                Vec::new()
            };
            let scale_vars: Vec<Var<'_>> = scales
                .iter()
                .map(|s| if config.kd_only { tape.constant(&s.lambda) } else { tape.param(&s.lambda) })
                .collect();

            let mut record = StepRecord {
                epoch,
                step,
                l_a: vec![0.0; if use_bridges { bridged } else { 0 }],
                l_reg: vec![0.0; if use_bridges { bridged } else { 0 }],
                l_soft: 0.0,
                l_total: 0.0,
                selected: vec![Vec::new(); b],
                lambdas: scales
                    .iter()
                    .map(|s| (s.teacher_index, s.task_id.clone(), s.lambda.item()))
                    .collect(),
            };
            let mut weighted = Vec::with_capacity(entries.len());
            for entry in &entries {
                let global: Vec<usize> = entry.rows.iter().map(|&r| batch_rows[r]).collect();
                for &r in &entry.rows {
                    for &t in &entry.bridge_teachers {
                        if !record.selected[r].contains(&t) {
                            record.selected[r].push(t);
                        }
                    }
                }
                let mut terms = Vec::new();
                if use_bridges {
                    let share = 1.0 / entry.bridge_teachers.len() as f64;
                    let mut per_teacher = Vec::new();
                    for &t in &entry.bridge_teachers {
                        let mut blocks = Vec::with_capacity(bridged);
                        for l in 0..bridged {
                            let s_feat = rows_of(feats.maps[l], &entry.rows, b)?;
                            let t_feat = tape.constant(&caches[t].maps[l].select_rows(&global)?);
                            let bl = bridge_block_loss(bridge_vars[t][l], s_feat, t_feat)?;
                            record.l_a[l] += entry.weight * share * bl.l_a.item();
                            record.l_reg[l] += entry.weight * share * bl.l_reg.item();
                            blocks.push(bl.l_a.add(bl.l_reg)?);
                        }
                        per_teacher.push(sum_vars(blocks)?.expect("at least one bridged block").scale(share)?);
                    }
                    terms.push(sum_vars(per_teacher)?.expect("entry has a teacher"));
                }
                let mut softs = Vec::with_capacity(entry.soft.len());
                for &(sh, t) in &entry.soft {
                    let s_logits = rows_of(feats.logits[sh], &entry.rows, b)?;
                    let t_logits = tape.constant(&caches[t].heads[&sh].0.select_rows(&global)?);
                    let soft = soft_target_loss(s_logits, t_logits, scale_vars[scale_slot[&(t, sh)]])?;
                    record.l_soft += entry.weight * soft.item();
                    softs.push(soft);
                }
                if let Some(s) = sum_vars(softs)? {
                    terms.push(s);
                }
                if let Some(total) = sum_vars(terms)? {
                    weighted.push(total.scale(entry.weight)?);
                }
            }
            let loss = sum_vars(weighted)?.ok_or_else(|| Error::Selection("batch produced no loss terms".into()))?;
            record.l_total = loss.item();
            let grads = tape.backward(loss)?;

            student.params_mut().absorb(&grads, &student_vars);
            let mut trainable: Vec<&mut Tensor> = student.params_mut().tensors_mut().collect();
            if use_bridges {
                for (per, vars) in bridges.iter_mut().zip(&bridge_vars) {
                    for (br, v) in per.iter_mut().zip(vars) {
                        br.teacher_fa.weight.set_grad(grads.get_or_zeros(v.teacher_fa))?;
                        br.student_fa.weight.set_grad(grads.get_or_zeros(v.student_fa))?;
                        trainable.push(&mut br.teacher_fa.weight);
                        trainable.push(&mut br.student_fa.weight);
                    }
                }
            }
            if config.anneal {
                opt.set_lr(cosine_lr(config.lr, step, total_steps))?;
                scale_opt.set_lr(cosine_lr(config.lambda_lr, step, total_steps))?;
            }
            opt.step(&mut trainable)?;
            if !config.kd_only {
                let mut lambdas = Vec::with_capacity(scales.len());
                for (s, v) in scales.iter_mut().zip(&scale_vars) {
                    s.lambda.set_grad(grads.get_or_zeros(*v))?;
                    lambdas.push(&mut s.lambda);
                }
                scale_opt.step(&mut lambdas)?;
            }
            history.records.push(record);
            step += 1;
        }
    }
    Ok(AmalgamResult {
        student,
        bridges,
        scales,
        history,
    })
}

/// Splits a batch into loss entries according to the selection mode.
fn plan_entries(
    batch_rows: &[usize],
    shared: &[Vec<(usize, usize)>],
    caches: &[TeacherCache],
    num_heads: usize,
    config: &AmalgamConfig,
) -> Result<Vec<Entry>> {
    let b = batch_rows.len();
    let all: Vec<usize> = (0..b).collect();
    if !config.uses_selection() {
        let w = 1.0 / shared.len() as f64;
        return Ok(shared
            .iter()
            .enumerate()
            .map(|(t, pairs)| Entry {
                rows: all.clone(),
                bridge_teachers: vec![t],
                soft: pairs.iter().map(|&(sh, _)| (sh, t)).collect(),
                weight: w,
            })
            .collect());
    }

    // per sample: the supervising teacher of every student head, if any
    let mut picks: Vec<Vec<Option<usize>>> = vec![vec![None; num_heads]; b];
    if config.per_task_selection {
        for sh in 0..num_heads {
            let covering: Vec<usize> = (0..shared.len())
                .filter(|&t| caches[t].heads.contains_key(&sh))
                .collect();
            for (i, &g) in batch_rows.iter().enumerate() {
                let t = argmin_teacher(covering.iter().map(|&t| (t, caches[t].heads[&sh].1[g])))?;
                picks[i][sh] = Some(t);
            }
        }
    } else {
        for (i, &g) in batch_rows.iter().enumerate() {
            let t = argmin_teacher(shared.iter().enumerate().map(|(t, pairs)| {
                let score = pairs.iter().map(|(sh, _)| caches[t].heads[sh].1[g]).sum::<f64>() / pairs.len() as f64;
                (t, score)
            }))?;
            for &(sh, _) in &shared[t] {
                picks[i][sh] = Some(t);
            }
        }
    }
    let mut groups: BTreeMap<Vec<Option<usize>>, Vec<usize>> = BTreeMap::new();
    for (i, p) in picks.into_iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(pick, rows)| {
            let mut teachers: Vec<usize> = pick.iter().flatten().copied().collect();
            teachers.sort_unstable();
            teachers.dedup();
            Entry {
                weight: rows.len() as f64 / b as f64,
                rows,
                bridge_teachers: teachers,
                soft: pick
                    .iter()
                    .enumerate()
                    .filter_map(|(sh, t)| t.map(|t| (sh, t)))
                    .collect(),
            }
        })
        .collect())
}
