//! Block-structured residual conv nets with one classification head per
//! task. Every forward pass exposes the output of each residual stage so
//! transfer bridges can attach to it.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, Params, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub task_id: String,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn new(task_id: impl Into<String>, num_classes: usize) -> Self {
        Self {
            task_id: task_id.into(),
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockNetSpec {
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub heads: Vec<HeadSpec>,
}

impl Default for BlockNetSpec {
    fn default() -> Self {
        Self {
            input_shape: [3, 16, 16],
            stem_channels: 8,
            block_channels: vec![8, 16, 32],
            block_strides: vec![1, 2, 2],
            heads: Vec::new(),
        }
    }
}

impl BlockNetSpec {
    pub fn with_heads(mut self, heads: Vec<HeadSpec>) -> Self {
        self.heads = heads;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.stem_channels)
    }

    /// Same geometry with every channel count scaled by `factor`, rounded up.
    pub fn widened(&self, factor: f64) -> Self {
        let widen = |c: usize| ((c as f64 * factor).ceil() as usize).max(1);
        Self {
            stem_channels: widen(self.stem_channels),
            block_channels: self.block_channels.iter().map(|&c| widen(c)).collect(),
            ..self.clone()
        }
    }

    /// Spatial `(height, width)` at the output of each block.
    pub fn block_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut out = Vec::with_capacity(self.num_blocks());
        for &s in &self.block_strides {
            h = conv_output_size(h, 3, s, 1)?;
            w = conv_output_size(w, 3, s, 1)?;
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn task_ids(&self) -> BTreeSet<String> {
        self.heads.iter().map(|h| h.task_id.clone()).collect()
    }

    pub fn head(&self, task: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.task_id == task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.input_shape.contains(&0) || self.stem_channels == 0 {
            return bad(format!("zero-sized input {:?} or stem", self.input_shape));
        }
        if self.num_blocks() < 2 {
            return bad(format!("need at least 2 blocks, got {}", self.num_blocks()));
        }
        if self.block_strides.len() != self.num_blocks() {
            return bad("block_channels and block_strides differ in length".into());
        }
        if self.block_channels.contains(&0) {
            return bad("block with zero channels".into());
        }
        if let Some(s) = self.block_strides.iter().find(|&&s| s != 1 && s != 2) {
            return bad(format!("block stride must be 1 or 2, got {s}"));
        }
        self.block_sizes()
            .map_err(|e| Error::Spec(format!("spatial size collapses: {e}")))?;
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            if h.num_classes < 2 {
                return bad(format!("head {:?} needs at least 2 classes", h.task_id));
            }
            if h.task_id.is_empty() || h.task_id.contains([',', '\t', '\n', ':', '=']) {
                return bad(format!("invalid task id {:?}", h.task_id));
            }
            if !seen.insert(h.task_id.as_str()) {
                return bad(format!("duplicate head {:?}", h.task_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockLayout {
    conv1: usize,
    conv2: usize,
    shortcut: Option<usize>,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadLayout {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockNet {
    spec: BlockNetSpec,
    params: Params,
    stem: usize,
    blocks: Vec<BlockLayout>,
    heads: Vec<HeadLayout>,
}

/// Per-block feature maps and per-head logits, on a tape.
#[derive(Debug, Clone)]
pub struct FeatureVars<'t> {
    pub maps: Vec<Var<'t>>,
    /// In head order of the net's spec.
    pub logits: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub maps: Vec<Tensor>,
    pub logits: Vec<(String, Tensor)>,
}

impl BlockFeatures {
    pub fn logits_for(&self, task: &str) -> Option<&Tensor> {
        self.logits.iter().find(|(t, _)| t == task).map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resources {
    pub params: usize,
    pub flops_per_image: usize,
}

/// FLOPs (2 per multiply-accumulate) of one convolution over one image.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> usize {
    2 * c_out * c_in * k * k * h_out * w_out
}

pub fn linear_flops(d_in: usize, d_out: usize) -> usize {
    2 * d_in * d_out
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).with_requires_grad()
}

impl BlockNet {
    /// Builds a net with seeded He-uniform conv weights, `±1/sqrt(D)`
    /// uniform head weights and zero head biases.
    pub fn new(spec: BlockNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let c0 = spec.input_shape[0];
        let stem = params.push(
            "stem.weight",
            he_uniform(&[spec.stem_channels, c0, 3, 3], c0 * 9, &mut rng),
        );
        let mut blocks = Vec::new();
        let mut c_in = spec.stem_channels;
        for (b, (&c, &stride)) in spec.block_channels.iter().zip(&spec.block_strides).enumerate() {
            let conv1 = params.push(format!("block{b}.conv1"), he_uniform(&[c, c_in, 3, 3], c_in * 9, &mut rng));
            let conv2 = params.push(format!("block{b}.conv2"), he_uniform(&[c, c, 3, 3], c * 9, &mut rng));
            let shortcut = (c != c_in || stride != 1)
                .then(|| params.push(format!("block{b}.shortcut"), he_uniform(&[c, c_in, 1, 1], c_in, &mut rng)));
            blocks.push(BlockLayout {
                conv1,
                conv2,
                shortcut,
                stride,
            });
            c_in = c;
        }
        let d = spec.feature_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let heads = spec
            .heads
            .iter()
            .map(|h| HeadLayout {
                weight: params.push(
                    format!("head.{}.weight", h.task_id),
                    Tensor::uniform(&[d, h.num_classes], -bound, bound, &mut rng).with_requires_grad(),
                ),
                bias: params.push(
                    format!("head.{}.bias", h.task_id),
                    Tensor::zeros(&[h.num_classes]).with_requires_grad(),
                ),
            })
            .collect();
        Ok(Self {
            spec,
            params,
            stem,
            blocks,
            heads,
        })
    }

    /// Rebuilds a net from a spec and a full parameter table, checking that
    /// names and shapes agree with the layout the spec implies.
    pub fn from_params(spec: BlockNetSpec, params: Params) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        if net.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, got)) in net.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} {:?} does not match expected {want_name:?} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        net.params = params;
        net.params.set_requires_grad(true);
        Ok(net)
    }

    pub fn spec(&self) -> &BlockNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn task_set(&self) -> BTreeSet<String> {
        self.spec.task_ids()
    }

    pub fn head_index(&self, task: &str) -> Option<usize> {
        self.spec.heads.iter().position(|h| h.task_id == task)
    }

    pub fn num_blocks(&self) -> usize {
        self.spec.num_blocks()
    }

    /// Records the parameters on `tape`: trainable leaves when `trainable`,
    /// constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "net expects [N, {}, {}, {}] input, got {shape:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Forward pass over vars from [`BlockNet::bind`].
    pub fn forward_vars<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<FeatureVars<'t>> {
        self.check_input(&x.shape())?;
        let mut h = x.conv2d(vars[self.stem], 1, 1)?.relu()?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let inner = h.conv2d(vars[b.conv1], b.stride, 1)?.relu()?.conv2d(vars[b.conv2], 1, 1)?;
            let skip = match b.shortcut {
                Some(s) => h.conv2d(vars[s], b.stride, 0)?,
                None => h,
            };
            h = inner.add(skip)?.relu()?;
            maps.push(h);
        }
        let pooled = h.mean_axes(&[2, 3])?;
        let logits = self
            .heads
            .iter()
            .map(|hd| pooled.linear(vars[hd.weight], vars[hd.bias]))
            .collect::<Result<_>>()?;
        Ok(FeatureVars { maps, logits })
    }

    /// Read-only forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<BlockFeatures> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.forward_vars(&vars, tape.constant(batch))?;
        Ok(BlockFeatures {
            maps: out.maps.iter().map(Var::value).collect(),
            logits: self
                .spec
                .heads
                .iter()
                .zip(&out.logits)
                .map(|(h, l)| (h.task_id.clone(), l.value()))
                .collect(),
        })
    }

    pub fn count_resources(&self) -> Resources {
        Resources {
            params: self.params.numel(),
            flops_per_image: self.flops_per_image(),
        }
    }

    fn flops_per_image(&self) -> usize {
        let spec = &self.spec;
        let [c0, h0, w0] = spec.input_shape;
        let mut flops = conv_flops(c0, spec.stem_channels, 3, h0, w0);
        let sizes = spec.block_sizes().expect("validated at construction");
        let mut c_in = spec.stem_channels;
        for ((b, &c), &(h, w)) in self.blocks.iter().zip(&spec.block_channels).zip(&sizes) {
            flops += conv_flops(c_in, c, 3, h, w) + conv_flops(c, c, 3, h, w);
            if b.shortcut.is_some() {
                flops += conv_flops(c_in, c, 1, h, w);
            }
            c_in = c;
        }
        flops + spec.heads.iter().map(|h| linear_flops(c_in, h.num_classes)).sum::<usize>()
    }
}
