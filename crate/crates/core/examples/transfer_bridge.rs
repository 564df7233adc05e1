//! A single transfer bridge: the penalty on zero alignment weights, then a
//! few hundred gradient steps that align a student map to a teacher map
//! while keeping the alignment rows near unit norm.

use amalgam::bridge::{bridge_block_loss, BridgeVars, FaWeights, Side, TransferBridge};
use amalgam::tensor::{Params, Sgd, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> amalgam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = Tensor::uniform(&[4, 6, 5, 5], -1.0, 1.0, &mut rng);
    let student = Tensor::uniform(&[4, 4, 5, 5], -1.0, 1.0, &mut rng);

    let collapsed = TransferBridge::new(FaWeights::zeros(4, 6, Side::Teacher, 0), FaWeights::zeros(4, 4, Side::Student, 0))?;
    let (l_a, l_reg) = collapsed.block_loss(&student, &teacher)?;
    println!("zero weights: transfer {l_a}, penalty {l_reg} (total {})", l_a + l_reg);

    let bridge = TransferBridge::init(6, 4, 0, &mut rng);
    let mut params = Params::new();
    params.push("teacher_fa", bridge.teacher_fa.weight.clone());
    params.push("student_fa", bridge.student_fa.weight.clone());
    let mut opt = Sgd::new(0.05, 0.9)?;
    for step in 0..=200 {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let bv = BridgeVars {
            teacher_fa: vars[0],
            student_fa: vars[1],
        };
        let loss = bridge_block_loss(bv, tape.constant(&student), tape.constant(&teacher))?;
        let total = loss.l_a.add(loss.l_reg)?;
        if step % 50 == 0 {
            println!("step {step:>3}: transfer {:.5}  penalty {:.5}", loss.l_a.item(), loss.l_reg.item());
        }
        let grads = tape.backward(total)?;
        params.absorb(&grads, &vars);
        opt.step(&mut params.tensors_mut().collect::<Vec<_>>())?;
    }
    Ok(())
}
