//! The full pipeline on two tasks: four single-task sources are grouped by
//! task, amalgamated into one component per task, and the components into a
//! widened two-head target. The one-shot alternative is trained alongside.
//! Run with `--release`.

use amalgam::engine::{dual_stage, evaluate, one_shot_amalgamate, task_set, AmalgamConfig};
use amalgam::experiment::{prepare_data, train_sources, DeskSetup};

fn main() -> amalgam::Result<()> {
    let setup = DeskSetup::default();
    let tasks = ["bright_background", "is_red"];
    let source_tasks: Vec<Vec<String>> = tasks.iter().flat_map(|t| [vec![t.to_string()], vec![t.to_string()]]).collect();
    let data = prepare_data(&setup, source_tasks.len(), 3)?;
    let pool = train_sources(&setup, &data, &source_tasks, 3)?;
    for s in &pool {
        let task = s.tasks().into_iter().next().expect("one task per source");
        let acc = evaluate(&s.net, &data.test, &[task.as_str()])?[&task];
        println!("{:<8} {task:<18} {acc:.4}", s.id);
    }

    let user = task_set(tasks);
    let config = AmalgamConfig {
        seed: 9,
        ..setup.amalgam.clone()
    };
    let dual = dual_stage(&pool, &user, &data.student_unlabeled, &config)?;
    for (task, ids) in &dual.groups {
        println!("group {task}: {}", ids.join(", "));
    }
    for (task, net) in &dual.components {
        println!("component {task:<18} {:.4}", evaluate(net, &data.test, &[task.as_str()])?[task]);
    }
    println!("dual-stage target {:?}", evaluate(&dual.target, &data.test, &tasks)?);

    let one = one_shot_amalgamate(&pool, &user, &data.student_unlabeled, &config)?;
    println!("one-shot target   {:?}", evaluate(&one.student, &data.test, &tasks)?);
    println!(
        "target params {} vs sources {}",
        dual.target.count_resources().params,
        pool.iter().map(|s| s.net.count_resources().params).sum::<usize>()
    );
    Ok(())
}
