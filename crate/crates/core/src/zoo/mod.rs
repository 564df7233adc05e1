//! Persistence: a checksummed binary container for networks, datasets and
//! amalgamation state, and a directory-backed registry of networks.

mod checkpoint;
mod registry;

pub use checkpoint::{fnv1a64, Checkpoint, Payload, MAGIC, VERSION};
pub use registry::{Role, ZooEntry, ZooRegistry, INDEX_FILE};

use std::path::Path;

use crate::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use crate::bridge::{FaWeights, Side, TransferBridge};
use crate::engine::ScaleParam;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;
use crate::tensor::{Params, Tensor};

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(field: &str, text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.parse().map_err(|_| Error::Format(format!("{field}: bad integer {s:?}"))))
        .collect()
}

fn encode_heads(heads: &[HeadSpec]) -> String {
    heads
        .iter()
        .map(|h| format!("{}:{}", h.task_id, h.num_classes))
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_heads(text: &str) -> Result<Vec<HeadSpec>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let (task, classes) = item
                .rsplit_once(':')
                .ok_or_else(|| Error::Format(format!("head entry {item:?} is not task:classes")))?;
            let classes = classes
                .parse()
                .map_err(|_| Error::Format(format!("head entry {item:?} has a bad class count")))?;
            Ok(HeadSpec::new(task, classes))
        })
        .collect()
}

pub fn net_checkpoint(net: &BlockNet) -> Checkpoint {
    let spec = net.spec();
    let mut c = Checkpoint::new("net");
    c.set("input_shape", join(&spec.input_shape));
    c.set("stem_channels", spec.stem_channels.to_string());
    c.set("block_channels", join(&spec.block_channels));
    c.set("block_strides", join(&spec.block_strides));
    c.set("heads", encode_heads(&spec.heads));
    for (name, t) in net.params().iter() {
        c.push_f64(name, t);
    }
    c
}

pub fn net_from_checkpoint(c: &Checkpoint) -> Result<BlockNet> {
    c.expect_kind("net")?;
    let input: Vec<usize> = parse_list("input_shape", c.get("input_shape")?)?;
    let input_shape: [usize; 3] = input
        .try_into()
        .map_err(|v| Error::Format(format!("input_shape must have 3 entries, got {v:?}")))?;
    let stem = c.get("stem_channels")?;
    let spec = BlockNetSpec {
        input_shape,
        stem_channels: stem
            .parse()
            .map_err(|_| Error::Format(format!("stem_channels: bad integer {stem:?}")))?,
        block_channels: parse_list("block_channels", c.get("block_channels")?)?,
        block_strides: parse_list("block_strides", c.get("block_strides")?)?,
        heads: decode_heads(c.get("heads")?)?,
    };
    let mut params = Params::new();
    for (name, payload) in &c.tensors {
        match payload {
            Payload::F64(t) => {
                params.push(name.clone(), t.clone().with_requires_grad());
            }
            Payload::U64 { .. } => return Err(Error::Format(format!("net tensor {name:?} is not f64"))),
        }
    }
    BlockNet::from_params(spec, params)
}

pub fn save_net(net: &BlockNet, path: &Path) -> Result<()> {
    net_checkpoint(net).save(path)
}

pub fn load_net(path: &Path) -> Result<BlockNet> {
    net_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new("dataset");
    c.set("tasks", encode_heads(&data.tasks));
    c.push_u64("ids", &[data.len()], data.ids.clone());
    c.push_f64("images", &data.images);
    for (task, labels) in data.tasks.iter().zip(&data.labels) {
        c.push_u64(
            format!("labels/{}", task.task_id),
            &[labels.len()],
            labels.iter().map(|&y| y as u64).collect(),
        );
    }
    c.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let c = Checkpoint::load(path)?;
    c.expect_kind("dataset")?;
    let tasks = decode_heads(c.get("tasks")?)?;
    let labels = tasks
        .iter()
        .map(|t| {
            c.u64(&format!("labels/{}", t.task_id))?
                .iter()
                .map(|&y| usize::try_from(y).map_err(|_| Error::Format(format!("label {y} overflows"))))
                .collect()
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let images = c.f64("images")?.clone();
    Dataset::new(c.u64("ids")?.to_vec(), images, tasks, labels)
}

/// Alignment weights and logit scales left over from an amalgamation run.
pub fn save_amalgam_state(bridges: &[Vec<TransferBridge>], scales: &[ScaleParam], path: &Path) -> Result<()> {
    let mut c = Checkpoint::new("bridges");
    c.set("teachers", bridges.len().to_string());
    c.set("blocks", bridges.first().map_or(0, Vec::len).to_string());
    for (t, per) in bridges.iter().enumerate() {
        for (l, b) in per.iter().enumerate() {
            c.push_f64(format!("bridge.{t}.{l}.teacher_fa"), &b.teacher_fa.weight);
            c.push_f64(format!("bridge.{t}.{l}.student_fa"), &b.student_fa.weight);
        }
    }
    for s in scales {
        c.push_f64(format!("scale.{}.{}", s.teacher_index, s.task_id), &s.lambda);
    }
    c.save(path)
}

pub fn load_amalgam_state(path: &Path) -> Result<(Vec<Vec<TransferBridge>>, Vec<ScaleParam>)> {
    let c = Checkpoint::load(path)?;
    c.expect_kind("bridges")?;
    let count = |key: &str| -> Result<usize> {
        let v = c.get(key)?;
        v.parse().map_err(|_| Error::Format(format!("{key}: bad integer {v:?}")))
    };
    let (teachers, blocks) = (count("teachers")?, count("blocks")?);
    let mut bridges = Vec::with_capacity(teachers);
    for t in 0..teachers {
        let mut per = Vec::with_capacity(blocks);
        for l in 0..blocks {
            let tw = c.f64(&format!("bridge.{t}.{l}.teacher_fa"))?.clone();
            let sw = c.f64(&format!("bridge.{t}.{l}.student_fa"))?.clone();
            per.push(TransferBridge::new(
                FaWeights::new(tw, Side::Teacher, l)?,
                FaWeights::new(sw, Side::Student, l)?,
            )?);
        }
        bridges.push(per);
    }
    let mut scales = Vec::new();
    for (name, payload) in &c.tensors {
        let Some(rest) = name.strip_prefix("scale.") else { continue };
        let (t, task) = rest
            .split_once('.')
            .ok_or_else(|| Error::Format(format!("bad scale entry {name:?}")))?;
        let Payload::F64(lambda) = payload else {
            return Err(Error::Format(format!("scale {name:?} is not f64")));
        };
        scales.push(ScaleParam {
            teacher_index: t.parse().map_err(|_| Error::Format(format!("bad scale entry {name:?}")))?,
            task_id: task.to_string(),
            lambda: Tensor::scalar(lambda.item()).with_requires_grad(),
        });
    }
    Ok((bridges, scales))
}
