use std::collections::BTreeMap;

use crate::blocknet::BlockNet;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

const EVAL_CHUNK: usize = 256;

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of `net` on each requested task.
pub fn evaluate(net: &BlockNet, data: &Dataset, tasks: &[&str]) -> Result<BTreeMap<String, f64>> {
    net.check_input(data.images.shape())?;
    if data.is_empty() {
        return Err(Error::Size("cannot evaluate on an empty dataset".into()));
    }
    let mut wanted = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let head = net
            .head_index(task)
            .ok_or_else(|| Error::Coverage(format!("network has no head for task {task:?}")))?;
        let labels = data
            .labels_for(task)
            .ok_or_else(|| Error::Coverage(format!("dataset has no labels for task {task:?}")))?;
        wanted.push((task, head, labels, 0usize));
    }
    let n = data.len();
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (lo..(lo + EVAL_CHUNK).min(n)).collect();
        let out = net.forward(&data.batch(&rows)?)?;
        for (_, head, labels, correct) in wanted.iter_mut() {
            let logits = &out.logits[*head].1;
            let classes = logits.shape()[1];
            for (i, row) in logits.data().chunks(classes).enumerate() {
                if argmax(row) == labels[rows[i]] {
                    *correct += 1;
                }
            }
        }
    }
    Ok(wanted
        .into_iter()
        .map(|(task, _, _, correct)| (task.to_string(), correct as f64 / n as f64))
        .collect())
}

/// Accuracy on every task the network has a head for.
pub fn evaluate_all(net: &BlockNet, data: &Dataset) -> Result<BTreeMap<String, f64>> {
    let tasks: Vec<String> = net.spec().heads.iter().map(|h| h.task_id.clone()).collect();
    evaluate(net, data, &tasks.iter().map(String::as_str).collect::<Vec<_>>())
}
