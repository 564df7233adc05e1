//! Two teachers trained on disjoint labeled partitions are amalgamated,
//! using unlabeled images only, into one component net for their task.
//! Run with `--release`; it takes well under a minute.

use amalgam::engine::AmalgamConfig;
use amalgam::experiment::{amalgamate_from_pool, teacher_pool, DeskSetup};

fn main() -> amalgam::Result<()> {
    let setup = DeskSetup::default();
    let pool = teacher_pool(&setup, "bright_background", 2, 0)?;
    for (s, acc) in pool.sources.iter().zip(&pool.accuracies) {
        println!("{:<8} test accuracy {acc:.4}", s.id);
    }

    let config = AmalgamConfig {
        seed: 1,
        ..setup.amalgam.clone()
    };
    let outcome = amalgamate_from_pool(&pool, 2, &config)?;
    println!("component test accuracy {:.4}", outcome.accuracy);

    let means = outcome.history.epoch_means();
    println!("epoch-mean loss: {:?}", means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>());
    println!("samples supervised by each teacher: {:?}", outcome.history.selection_counts(2));
    Ok(())
}
