use crate::bridge::BlockLoss;
use crate::error::{Error, Result};
use crate::tensor::Var;

/// `(1/C) * ||student - lambda * teacher||^2`, averaged over the batch.
/// The teacher logits should be recorded as constants.
pub fn soft_target_loss<'t>(student_logits: Var<'t>, teacher_logits: Var<'t>, lambda: Var<'t>) -> Result<Var<'t>> {
    let shape = student_logits.shape();
    if shape.len() != 2 || shape != teacher_logits.shape() {
        return Err(Error::Shape(format!(
            "student logits {shape:?} vs teacher logits {:?}",
            teacher_logits.shape()
        )));
    }
    if shape[1] < 2 {
        return Err(Error::Arity(format!("logits need at least 2 classes, got {}", shape[1])));
    }
    student_logits.sub(teacher_logits.scale_by(lambda)?)?.square()?.mean()
}

/// Left fold of `+` starting from the first element, so a single term
/// passes through untouched.
pub fn sum_vars<'t>(terms: impl IntoIterator<Item = Var<'t>>) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => a.add(t)?,
        });
    }
    Ok(acc)
}

/// Bridge terms of blocks `1..L-1` plus the soft-target term.
pub fn total_loss<'t>(bridge_losses: &[BlockLoss<'t>], soft: Var<'t>, num_blocks: usize) -> Result<Var<'t>> {
    if bridge_losses.len() + 1 != num_blocks {
        return Err(Error::Arity(format!(
            "{} bridge terms supplied for a {num_blocks}-block net (expected {})",
            bridge_losses.len(),
            num_blocks.saturating_sub(1)
        )));
    }
    let bridged = sum_vars(bridge_losses.iter().map(|b| b.l_a.add(b.l_reg)).collect::<Result<Vec<_>>>()?)?;
    match bridged {
        Some(b) => b.add(soft),
        None => Ok(soft),
    }
}
