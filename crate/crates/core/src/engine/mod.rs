//! Amalgamation losses, the shared teacher→student training loop, source
//! clustering, the two-stage and one-shot pipelines, and evaluation.

mod eval;
mod loss;
mod pipeline;
mod supervised;
mod train;

#[cfg(test)]
mod tests;

pub use eval::{evaluate, evaluate_all};
pub use loss::{soft_target_loss, sum_vars, total_loss};
pub use pipeline::{
    amalgamate_component, amalgamate_target, cluster_sources, dual_stage, one_shot_amalgamate, target_spec, DualStageResult,
    Source,
};
pub use supervised::{train_supervised, TrainConfig};
pub use train::{train_amalgamate, AmalgamResult, ScaleParam};

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub type TaskSet = BTreeSet<String>;

pub fn task_set<I, S>(tasks: I) -> TaskSet
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    tasks.into_iter().map(Into::into).collect()
}

/// Mixes a base seed with a tag so independent consumers (initialization,
/// shuffling, per-run streams) never share a random stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer over the combination
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Width of the aligned maps a bridge compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignedChannels {
    /// The student block's own channel count.
    StudentBlock,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmalgamConfig {
    pub lr: f64,
    /// Learning rate of the logit scales. Kept well below `lr`: the scale and
    /// the student logits can shrink together towards a zero-loss collapse,
    /// and a slow scale lets the student track the teacher first.
    pub lambda_lr: f64,
    pub momentum: f64,
    /// Joint L2 limit on the gradients of one step; 0 disables clipping.
    pub grad_clip: f64,
    /// Decay the learning rate along a cosine to zero over the run.
    pub anneal: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Channel multiplier of the multi-task target over a component net.
    pub widen_factor: f64,
    pub aligned_channels: AlignedChannels,
    /// Soft-target loss only, selection still active.
    pub disable_bridge: bool,
    /// Average the loss over all teachers instead of the selected one.
    pub disable_selection: bool,
    /// Plain distillation baseline: no bridges, no selection, scale fixed at 1.
    pub kd_only: bool,
    /// Select a teacher per task head rather than one per sample.
    pub per_task_selection: bool,
    pub entropy_clamp: f64,
}

impl Default for AmalgamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lambda_lr: 1e-4,
            momentum: 0.9,
            grad_clip: 1.0,
            anneal: true,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            widen_factor: 1.5,
            aligned_channels: AlignedChannels::StudentBlock,
            disable_bridge: false,
            disable_selection: false,
            kd_only: false,
            per_task_selection: false,
            entropy_clamp: crate::selector::DEFAULT_CLAMP,
        }
    }
}

impl AmalgamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_lr >= 0.0 && self.lambda_lr.is_finite()) {
            return Err(Error::Config(format!("lambda_lr must be non-negative, got {}", self.lambda_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        if !(self.widen_factor > 0.0 && self.widen_factor.is_finite()) {
            return Err(Error::Config(format!("widen_factor must be positive, got {}", self.widen_factor)));
        }
        if !(self.entropy_clamp > 0.0 && self.entropy_clamp < 1.0) {
            return Err(Error::Config(format!("entropy_clamp must lie in (0, 1), got {}", self.entropy_clamp)));
        }
        if self.aligned_channels == AlignedChannels::Fixed(0) {
            return Err(Error::Config("aligned channel count must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_bridges(&self) -> bool {
        !(self.kd_only || self.disable_bridge)
    }

    pub fn uses_selection(&self) -> bool {
        !(self.kd_only || self.disable_selection)
    }
}

/// Loss components of one optimizer step, each already weighted by the
/// share of the batch it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Transfer loss per bridged block.
    pub l_a: Vec<f64>,
    /// Alignment-weight penalty per bridged block.
    pub l_reg: Vec<f64>,
    pub l_soft: f64,
    pub l_total: f64,
    /// Teachers that supervised each sample of the batch.
    pub selected: Vec<Vec<usize>>,
    /// Scale values `(teacher, task, lambda)` used in this step.
    pub lambdas: Vec<(usize, String, f64)>,
}

impl StepRecord {
    pub fn resummed_total(&self) -> f64 {
        self.l_a.iter().zip(&self.l_reg).map(|(a, r)| a + r).sum::<f64>() + self.l_soft
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub records: Vec<StepRecord>,
}

impl LossBreakdown {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest gap between a recorded total and the re-summed components.
    pub fn max_inconsistency(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.l_total - r.resummed_total()).abs())
            .fold(0.0, f64::max)
    }

    /// Mean `l_total` per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.l_total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// Share of samples each teacher supervised over the whole run.
    pub fn selection_counts(&self, num_teachers: usize) -> Vec<usize> {
        let mut counts = vec![0; num_teachers];
        for r in &self.records {
            for sel in &r.selected {
                for &t in sel {
                    counts[t] += 1;
                }
            }
        }
        counts
    }
}
