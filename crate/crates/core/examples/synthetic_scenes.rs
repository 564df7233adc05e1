//! Seeded synthetic scenes: label balance per task, an ASCII rendering of
//! one image, and the disjoint teacher / unlabeled / test split.

use amalgam::synthdata::{default_tasks, generate, generate_scenes, split, SceneDistribution};

fn main() -> amalgam::Result<()> {
    let dist = SceneDistribution::default();
    let data = generate(&dist, 1000, 11)?;
    for (task, labels) in data.tasks.iter().zip(&data.labels) {
        let mut counts = vec![0; task.num_classes];
        labels.iter().for_each(|&y| counts[y] += 1);
        println!("{:<18} class counts {counts:?}", task.task_id);
    }

    let scene = &generate_scenes(&dist, 1, 11)[0];
    let labels: Vec<String> = default_tasks()
        .iter()
        .map(|t| format!("{}={}", t.task_id, scene.label(&t.task_id).expect("known task")))
        .collect();
    println!("\nfirst scene: {}", labels.join(" "));
    let [c, h, w] = dist.image_shape;
    let img = &data.images.data()[..c * h * w];
    for y in 0..h {
        let row: String = (0..w)
            .map(|x| {
                let lum = (0..c).map(|ch| img[ch * h * w + y * w + x]).sum::<f64>() / c as f64;
                [' ', '.', ':', '*', '#'][((lum.clamp(0.0, 0.999)) * 5.0) as usize]
            })
            .collect();
        println!("  |{row}|");
    }

    let parts = split(&data, 3, 0.3, 0.2, 5)?;
    let sizes: Vec<usize> = parts.teacher_train.iter().map(|d| d.len()).collect();
    println!(
        "\nsplit: teachers {sizes:?}, unlabeled {} (labels stripped: {}), test {}",
        parts.student_unlabeled.len(),
        parts.student_unlabeled.tasks.is_empty(),
        parts.test.len()
    );
    Ok(())
}
