//! Entropy-based teacher selection: three teachers score a batch of four
//! samples and each sample goes to the least ambiguous one.

use amalgam::selector::{batch_impurities, select_batch, TeacherBatch, DEFAULT_CLAMP};
use amalgam::tensor::Tensor;

fn main() -> amalgam::Result<()> {
    // softmax outputs of three binary teachers on the same four samples
    let outputs = [
        Tensor::new(&[4, 2], vec![0.9, 0.1, 0.5, 0.5, 0.6, 0.4, 0.99, 0.01])?,
        Tensor::new(&[4, 2], vec![0.7, 0.3, 0.05, 0.95, 0.6, 0.4, 0.5, 0.5])?,
        Tensor::new(&[4, 2], vec![0.97, 0.03, 0.2, 0.8, 0.4, 0.6, 0.8, 0.2])?,
    ];
    for (t, probs) in outputs.iter().enumerate() {
        let h: Vec<String> = batch_impurities(probs, DEFAULT_CLAMP)?.iter().map(|v| format!("{v:.3}")).collect();
        println!("teacher {t} impurity per sample: {}", h.join("  "));
    }
    let batch: Vec<TeacherBatch> = outputs
        .iter()
        .enumerate()
        .map(|(t, probs)| TeacherBatch {
            teacher_index: t,
            task_id: "is_red",
            probs,
        })
        .collect();
    // sample 2 is a three-way tie and goes to the lowest index
    println!("selected teachers: {:?}", select_batch(&batch, DEFAULT_CLAMP)?);
    Ok(())
}
