//! The ablation grid on one seed: plain distillation, no bridges, no
//! selection and the whole method, all from the same two teachers.
//! Run with `--release`.

use amalgam::engine::{derive_seed, AmalgamConfig};
use amalgam::experiment::{ablation, teacher_pool, DeskSetup, Variant};

fn main() -> amalgam::Result<()> {
    let setup = DeskSetup::default();
    let seed = 2;
    let pool = teacher_pool(&setup, "bright_background", 2, seed)?;
    println!("teachers {:?}", pool.accuracies);
    let config = AmalgamConfig {
        seed: derive_seed(seed, "amalgam"),
        ..setup.amalgam.clone()
    };
    for (variant, outcome) in ablation(&pool, 2, &config, &Variant::ALL)? {
        println!("{:<6} {:.4}", variant.name(), outcome.accuracy);
    }
    Ok(())
}
