use super::*;
use crate::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use crate::synthdata::{generate, Dataset, SceneDistribution, BRIGHT_BACKGROUND, IS_RED};
use crate::tensor::Tensor;

fn tiny_spec(heads: &[(&str, usize)]) -> BlockNetSpec {
    BlockNetSpec {
        input_shape: [3, 8, 8],
        stem_channels: 4,
        block_channels: vec![4, 6, 8],
        block_strides: vec![1, 2, 2],
        heads: heads.iter().map(|&(t, c)| HeadSpec::new(t, c)).collect(),
    }
}

fn tiny_data(n: usize, seed: u64) -> Dataset {
    let dist = SceneDistribution {
        image_shape: [3, 8, 8],
        ..SceneDistribution::default()
    };
    generate(&dist, n, seed).unwrap()
}

fn quick(epochs: usize) -> AmalgamConfig {
    AmalgamConfig {
        epochs,
        batch_size: 8,
        lr: 0.01,
        ..AmalgamConfig::default()
    }
}

#[test]
fn derive_seed_separates_tags() {
    assert_eq!(derive_seed(3, "a"), derive_seed(3, "a"));
    assert_ne!(derive_seed(3, "a"), derive_seed(3, "b"));
    assert_ne!(derive_seed(3, "a"), derive_seed(4, "a"));
}

#[test]
fn config_validation() {
    assert!(AmalgamConfig::default().validate().is_ok());
    for bad in [
        AmalgamConfig { lr: 0.0, ..Default::default() },
        AmalgamConfig { batch_size: 0, ..Default::default() },
        AmalgamConfig { momentum: 1.0, ..Default::default() },
        AmalgamConfig { aligned_channels: AlignedChannels::Fixed(0), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn zero_epochs_changes_nothing() {
    let teacher = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(16, 0).without_labels();
    let r = train_amalgamate(&[&teacher], student.clone(), &data, &quick(0)).unwrap();
    assert!(r.student.params().bitwise_eq(student.params()));
    assert!(r.history.is_empty());
}

#[test]
fn selection_is_vacuous_with_one_teacher() {
    let teacher = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(20, 0).without_labels();
    let on = train_amalgamate(&[&teacher], student.clone(), &data, &quick(2)).unwrap();
    let off = train_amalgamate(
        &[&teacher],
        student,
        &data,
        &AmalgamConfig { disable_selection: true, ..quick(2) },
    )
    .unwrap();
    assert!(on.student.params().bitwise_eq(off.student.params()));
    assert_eq!(on.history, off.history);
}

#[test]
fn training_lowers_the_loss_and_records_consistently() {
    let t1 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let t2 = BlockNet::new(tiny_spec(&[(IS_RED, 2), (BRIGHT_BACKGROUND, 2)]), 3).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(48, 1).without_labels();
    let r = train_amalgamate(&[&t1, &t2], student, &data, &quick(5)).unwrap();
    let means = r.history.epoch_means();
    assert_eq!(means.len(), 5);
    assert!(means[4] < means[0], "{means:?}");
    assert!(r.history.max_inconsistency() < 1e-9);
    // every sample is supervised by exactly one teacher
    for rec in &r.history.records {
        assert!(rec.selected.iter().all(|s| s.len() == 1));
    }
}

#[test]
fn teachers_stay_frozen_and_everything_else_moves() {
    let t1 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let t2 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 5).unwrap();
    let (c1, c2) = (t1.clone(), t2.clone());
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(8, 1).without_labels();
    let config = AmalgamConfig { batch_size: 8, ..quick(1) };
    let r = train_amalgamate(&[&t1, &t2], student.clone(), &data, &config).unwrap();
    assert!(t1.params().bitwise_eq(c1.params()) && t2.params().bitwise_eq(c2.params()));
    assert!(!r.student.params().bitwise_eq(student.params()));
    let moved_fa = r.bridges.iter().flatten().any(|b| {
        let fresh_identity = b.student_fa.weight.data().iter().enumerate().all(|(i, &v)| {
            let c = b.student_fa.c_in();
            v == if i / c == i % c { 1.0 } else { 0.0 }
        });
        !fresh_identity
    });
    assert!(moved_fa);
    assert!(r.scales.iter().any(|s| s.lambda.item() != 1.0));
}

#[test]
fn kd_only_keeps_scales_and_builds_no_bridge_terms() {
    let t1 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let t2 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 5).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(16, 1).without_labels();
    let r = train_amalgamate(&[&t1, &t2], student, &data, &AmalgamConfig { kd_only: true, ..quick(1) }).unwrap();
    assert!(r.scales.iter().all(|s| s.lambda.item() == 1.0));
    for rec in &r.history.records {
        assert!(rec.l_a.is_empty() && rec.l_reg.is_empty());
        assert!(rec.selected.iter().all(|s| s == &vec![0, 1]));
    }
    assert!(r.history.max_inconsistency() < 1e-9);
}

#[test]
fn without_bridge_still_selects() {
    let t1 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let t2 = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 5).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    let data = tiny_data(16, 1).without_labels();
    let r = train_amalgamate(&[&t1, &t2], student, &data, &AmalgamConfig { disable_bridge: true, ..quick(1) }).unwrap();
    for rec in &r.history.records {
        assert!(rec.l_a.is_empty());
        assert!(rec.selected.iter().all(|s| s.len() == 1));
    }
}

#[test]
fn coverage_and_geometry_errors() {
    let red = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2), (BRIGHT_BACKGROUND, 2)]), 2).unwrap();
    let data = tiny_data(8, 1).without_labels();
    assert!(matches!(
        train_amalgamate(&[&red], student, &data, &quick(1)),
        Err(Error::Coverage(_))
    ));
    let mut spec = tiny_spec(&[(IS_RED, 2)]);
    spec.block_strides = vec![1, 1, 2];
    let odd = BlockNet::new(spec, 1).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 2).unwrap();
    assert!(matches!(
        train_amalgamate(&[&odd], student.clone(), &data, &quick(1)),
        Err(Error::Geometry(_))
    ));
    assert!(matches!(train_amalgamate(&[], student, &data, &quick(1)), Err(Error::Coverage(_))));
}

#[test]
fn per_task_selection_supervises_every_head() {
    let red = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 1).unwrap();
    let bright = BlockNet::new(tiny_spec(&[(BRIGHT_BACKGROUND, 2)]), 3).unwrap();
    let student = BlockNet::new(tiny_spec(&[(IS_RED, 2), (BRIGHT_BACKGROUND, 2)]), 2).unwrap();
    let data = tiny_data(16, 1).without_labels();
    let literal = train_amalgamate(&[&red, &bright], student.clone(), &data, &quick(1)).unwrap();
    assert!(literal.history.records[0].selected.iter().all(|s| s.len() == 1));
    let per_task = train_amalgamate(
        &[&red, &bright],
        student,
        &data,
        &AmalgamConfig { per_task_selection: true, ..quick(1) },
    )
    .unwrap();
    for rec in &per_task.history.records {
        assert!(rec.selected.iter().all(|s| s == &vec![0, 1]));
    }
    assert!(per_task.history.max_inconsistency() < 1e-9);
}

fn sets(v: &[(&str, &[&str])]) -> Vec<(String, TaskSet)> {
    v.iter().map(|(id, t)| (id.to_string(), task_set(t.iter().copied()))).collect()
}

#[test]
fn clustering_follows_task_membership() {
    let pool = sets(&[("s1", &["A", "B", "C"]), ("s2", &["A"]), ("s3", &["C", "D"]), ("s4", &["B", "D"])]);
    let groups = cluster_sources(&pool, &task_set(["A", "D"])).unwrap();
    assert_eq!(groups["A"], vec!["s1", "s2"]);
    assert_eq!(groups["D"], vec!["s3", "s4"]);

    let both = sets(&[("m", &["A", "D"]), ("x", &["B"])]);
    let groups = cluster_sources(&both, &task_set(["A", "D"])).unwrap();
    assert_eq!(groups["A"], vec!["m"]);
    assert_eq!(groups["D"], vec!["m"]);

    match cluster_sources(&pool, &task_set(["A", "E"])) {
        Err(Error::Coverage(msg)) => assert!(msg.contains('E')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn clustering_union_is_exactly_the_relevant_sources() {
    use proptest::prelude::*;
    let names = ["A", "B", "C", "D", "E"];
    proptest!(|(masks in proptest::collection::vec(1u8..32, 1..7), user in 1u8..32)| {
        let pool: Vec<(String, TaskSet)> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("s{i}"), names.iter().enumerate().filter(|(b, _)| m >> b & 1 == 1).map(|(_, n)| n.to_string()).collect()))
            .collect();
        let user: TaskSet = names.iter().enumerate().filter(|(b, _)| user >> b & 1 == 1).map(|(_, n)| n.to_string()).collect();
        let covered = user.iter().all(|t| pool.iter().any(|(_, s)| s.contains(t)));
        match cluster_sources(&pool, &user) {
            Ok(groups) => {
                prop_assert!(covered);
                let union: std::collections::BTreeSet<&String> = groups.values().flatten().collect();
                let expected: std::collections::BTreeSet<&String> = pool
                    .iter()
                    .filter(|(_, s)| s.intersection(&user).next().is_some())
                    .map(|(id, _)| id)
                    .collect();
                prop_assert_eq!(union, expected);
            }
            Err(Error::Coverage(_)) => prop_assert!(!covered),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    });
}

fn sources(specs: &[(&str, &[(&str, usize)], u64)]) -> Vec<Source> {
    specs
        .iter()
        .map(|(id, heads, seed)| Source::new(*id, BlockNet::new(tiny_spec(heads), *seed).unwrap()))
        .collect()
}

#[test]
fn dual_stage_builds_one_component_per_task() {
    let pool = sources(&[
        ("a1", &[(IS_RED, 2)], 1),
        ("a2", &[(IS_RED, 2), (BRIGHT_BACKGROUND, 2)], 2),
        ("b1", &[(BRIGHT_BACKGROUND, 2)], 3),
    ]);
    let data = tiny_data(16, 1).without_labels();
    let user = task_set([IS_RED, BRIGHT_BACKGROUND]);
    let r = dual_stage(&pool, &user, &data, &quick(1)).unwrap();
    assert_eq!(r.groups[IS_RED], vec!["a1", "a2"]);
    assert_eq!(r.groups[BRIGHT_BACKGROUND], vec!["a2", "b1"]);
    assert_eq!(r.components.len(), 2);
    for (task, c) in &r.components {
        assert_eq!(c.task_set(), task_set([task.as_str()]));
    }
    assert_eq!(r.target.task_set(), user);
    assert_eq!(r.target.spec().block_channels, vec![6, 9, 12]);
    assert!(r.stage1.values().all(|h| !h.is_empty()) && !r.stage2.is_empty());

    let again = dual_stage(&pool, &user, &data, &quick(1)).unwrap();
    assert!(again.target.params().bitwise_eq(r.target.params()));
    assert_eq!(again.stage2, r.stage2);
}

#[test]
fn dual_stage_with_one_task_degenerates() {
    let pool = sources(&[("a1", &[(IS_RED, 2)], 1), ("a2", &[(IS_RED, 2)], 2)]);
    let data = tiny_data(8, 1).without_labels();
    let r = dual_stage(&pool, &task_set([IS_RED]), &data, &quick(1)).unwrap();
    assert_eq!(r.components.len(), 1);
    assert_eq!(r.target.spec().heads.len(), 1);
}

#[test]
fn one_shot_is_deterministic_and_matches_single_source_distillation() {
    let pool = sources(&[("a1", &[(IS_RED, 2), (BRIGHT_BACKGROUND, 2)], 1)]);
    let data = tiny_data(16, 1).without_labels();
    let user = task_set([IS_RED, BRIGHT_BACKGROUND]);
    let a = one_shot_amalgamate(&pool, &user, &data, &quick(1)).unwrap();
    let b = one_shot_amalgamate(&pool, &user, &data, &quick(1)).unwrap();
    assert!(a.student.params().bitwise_eq(b.student.params()));
    let direct = amalgamate_target(&[&pool[0].net], &data, &quick(1)).unwrap();
    assert!(a.student.params().bitwise_eq(direct.student.params()));
}

#[test]
fn one_shot_reports_missing_tasks() {
    let pool = sources(&[("a1", &[(IS_RED, 2)], 1)]);
    let data = tiny_data(8, 1).without_labels();
    assert!(matches!(
        one_shot_amalgamate(&pool, &task_set([IS_RED, BRIGHT_BACKGROUND]), &data, &quick(1)),
        Err(Error::Coverage(_))
    ));
}

fn set_param(net: &mut BlockNet, name: &str, value: Tensor) {
    let i = net.params().iter().position(|(n, _)| n == name).unwrap();
    *net.params_mut().get_mut(i) = value.with_requires_grad();
}

#[test]
fn evaluate_perfect_constant_and_random() {
    // zero head weights leave the bias alone in charge of the logits
    let mut net = BlockNet::new(tiny_spec(&[(IS_RED, 2)]), 4).unwrap();
    let data = tiny_data(64, 2);
    let labels = data.labels_for(IS_RED).unwrap().to_vec();
    let ones: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let positives = data.subset(&ones).unwrap();
    let w_shape = net.params().by_name("head.is_red.weight").unwrap().shape().to_vec();
    set_param(&mut net, "head.is_red.weight", Tensor::zeros(&w_shape));
    set_param(&mut net, "head.is_red.bias", Tensor::new(&[2], vec![-1.0, 1.0]).unwrap());
    assert_eq!(evaluate(&net, &positives, &[IS_RED]).unwrap()[IS_RED], 1.0);

    // constant logits: argmax picks class 0, so accuracy is the share of zeros
    set_param(&mut net, "head.is_red.bias", Tensor::zeros(&[2]));
    let acc = evaluate(&net, &data, &[IS_RED]).unwrap()[IS_RED];
    let zeros = labels.iter().filter(|&&y| y == 0).count() as f64 / labels.len() as f64;
    assert_eq!(acc, zeros);

    assert!(matches!(evaluate(&net, &data, &["shape"]), Err(Error::Coverage(_))));
    assert!(matches!(evaluate(&net, &data.without_labels(), &[IS_RED]), Err(Error::Coverage(_))));
}

#[test]
fn random_net_is_at_chance() {
    let net = BlockNet::new(tiny_spec(&[(BRIGHT_BACKGROUND, 2)]), 8).unwrap();
    let data = tiny_data(2000, 9);
    let acc = evaluate_all(&net, &data).unwrap()[BRIGHT_BACKGROUND];
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn supervised_training_fits_a_small_set() {
    let mut net = BlockNet::new(tiny_spec(&[(BRIGHT_BACKGROUND, 2)]), 8).unwrap();
    let data = tiny_data(64, 3);
    let config = TrainConfig { epochs: 15, batch_size: 16, lr: 0.05, ..TrainConfig::default() };
    let losses = train_supervised(&mut net, &data, &config).unwrap();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert!(evaluate_all(&net, &data).unwrap()[BRIGHT_BACKGROUND] > 0.7);
    let again = {
        let mut n = BlockNet::new(tiny_spec(&[(BRIGHT_BACKGROUND, 2)]), 8).unwrap();
        train_supervised(&mut n, &data, &config).unwrap();
        n
    };
    assert!(again.params().bitwise_eq(net.params()));
    let mut other = BlockNet::new(tiny_spec(&[("shape", 3)]), 8).unwrap();
    assert!(matches!(
        train_supervised(&mut other, &data.without_labels(), &config),
        Err(Error::Coverage(_))
    ));
}
