//! Reverse-mode gradients on a small expression, then the full
//! finite-difference suite over every differentiable operation.

use amalgam::experiment::gradient_suite;
use amalgam::tensor::{Tape, Tensor};

fn main() -> amalgam::Result<()> {
    // d/dx sum((x * w)^2) = 2 * x * w^2
    let tape = Tape::new();
    let x = tape.param(&Tensor::new(&[3], vec![1.0, -2.0, 0.5])?);
    let w = tape.constant(&Tensor::new(&[3], vec![2.0, 1.0, -3.0])?);
    let loss = x.mul(w)?.square()?.sum()?;
    let grads = tape.backward(loss)?;
    println!("loss = {}", loss.item());
    println!("dloss/dx = {:?}  (expected [8, -4, 9])", grads.get(x).expect("x is a leaf"));

    println!("\nfinite differences, eps = 1e-5, 5 seeded inputs per op:");
    for check in gradient_suite(5, 1e-5)? {
        println!("  {:<24} max rel error {:.2e}", check.op, check.max_rel_error);
    }
    Ok(())
}
