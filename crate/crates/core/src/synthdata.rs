//! Procedural multi-attribute images: one filled shape on a gray background
//! with pixel noise. Every label is a function of the scene parameters,
//! never of the rendered pixels, so pixel noise and near-threshold scenes
//! make each task imperfectly learnable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocknet::HeadSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IS_CIRCLE: &str = "is_circle";
pub const IS_RED: &str = "is_red";
pub const BRIGHT_BACKGROUND: &str = "bright_background";
pub const IS_LARGE: &str = "is_large";
pub const SHAPE: &str = "shape";

/// Red channel must exceed the larger of green and blue by this much.
pub const RED_MARGIN: f64 = 0.2;
pub const BRIGHT_THRESHOLD: f64 = 0.5;
/// Shape radius threshold, as a fraction of the image height.
pub const LARGE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn index(self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub kind: ShapeKind,
    /// RGB in `[0, 1]`.
    pub fill: [f64; 3],
    pub background: f64,
    /// Offset of the shape centre from the image centre, in pixels.
    pub offset: (f64, f64),
    /// Radius of the equal-area disc, as a fraction of image height.
    pub size: f64,
    pub noise: f64,
}

impl Scene {
    pub fn label(&self, task: &str) -> Option<usize> {
        let bit = |b: bool| usize::from(b);
        Some(match task {
            IS_CIRCLE => bit(self.kind == ShapeKind::Circle),
            IS_RED => bit(self.fill[0] - self.fill[1].max(self.fill[2]) > RED_MARGIN),
            BRIGHT_BACKGROUND => bit(self.background > BRIGHT_THRESHOLD),
            IS_LARGE => bit(self.size > LARGE_THRESHOLD),
            SHAPE => self.kind.index(),
            _ => return None,
        })
    }
}

/// All tasks the generator labels, with their class counts.
pub fn default_tasks() -> Vec<HeadSpec> {
    vec![
        HeadSpec::new(IS_CIRCLE, 2),
        HeadSpec::new(IS_RED, 2),
        HeadSpec::new(BRIGHT_BACKGROUND, 2),
        HeadSpec::new(IS_LARGE, 2),
        HeadSpec::new(SHAPE, 3),
    ]
}

/// Sampling ranges for scenes. Each `*_spread` is the half-width of the
/// uniform band around its label threshold; narrower bands put more scenes
/// near the decision boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDistribution {
    pub image_shape: [usize; 3],
    pub red_spread: f64,
    pub background_spread: f64,
    pub size_spread: f64,
    /// Maximum centre offset, in pixels.
    pub jitter: f64,
    pub noise: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            image_shape: [3, 16, 16],
            red_spread: 0.3,
            background_spread: 0.4,
            size_spread: 0.1,
            jitter: 2.0,
            noise: 0.15,
        }
    }
}

impl SceneDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Scene {
        let kind = match rng.gen_range(0..4) {
            0 | 1 => ShapeKind::Circle,
            2 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let g = rng.gen_range(0.1..0.6);
        let b = rng.gen_range(0.1..0.6);
        let r = (f64::max(g, b) + RED_MARGIN + rng.gen_range(-self.red_spread..self.red_spread)).clamp(0.0, 1.0);
        let background = BRIGHT_THRESHOLD + rng.gen_range(-self.background_spread..self.background_spread);
        let size = LARGE_THRESHOLD + rng.gen_range(-self.size_spread..self.size_spread);
        let offset = (
            rng.gen_range(-self.jitter..=self.jitter),
            rng.gen_range(-self.jitter..=self.jitter),
        );
        Scene {
            kind,
            fill: [r, g, b],
            background,
            offset,
            size,
            noise: self.noise,
        }
    }

    /// Renders `[C, H, W]` pixels in `[0, 1]`. Noise is drawn from `rng`.
    pub fn render<R: Rng + ?Sized>(&self, scene: &Scene, rng: &mut R) -> Vec<f64> {
        let [c, h, w] = self.image_shape;
        let radius = scene.size * h as f64;
        let cy = h as f64 / 2.0 + scene.offset.0;
        let cx = w as f64 / 2.0 + scene.offset.1;
        let half_side = radius * std::f64::consts::PI.sqrt() / 2.0;
        // circumradius of the equilateral triangle with the disc's area
        let tri_r = radius * (4.0 * std::f64::consts::PI / (3.0 * 3f64.sqrt())).sqrt();
        let inside = |y: f64, x: f64| -> bool {
            let (dy, dx) = (y - cy, x - cx);
            match scene.kind {
                ShapeKind::Circle => dy * dy + dx * dx <= radius * radius,
                ShapeKind::Square => dy.abs() <= half_side && dx.abs() <= half_side,
                ShapeKind::Triangle => {
                    // apex up; base at dy = tri_r / 2, edges at slope sqrt(3)
                    dy <= tri_r / 2.0 && dy >= -tri_r && dx.abs() <= (dy + tri_r) / 3f64.sqrt()
                }
            }
        };
        let noise = Normal::new(0.0, scene.noise.max(0.0)).expect("finite noise");
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let hit = inside(y as f64 + 0.5, x as f64 + 0.5);
                for ch in 0..c {
                    let base = if hit { scene.fill[ch.min(2)] } else { scene.background };
                    out[(ch * h + y) * w + x] = base;
                }
            }
        }
        if scene.noise > 0.0 {
            for v in out.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Images with optional per-task labels. Unlabeled sets carry no tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<u64>,
    pub images: Tensor,
    pub tasks: Vec<HeadSpec>,
    /// `labels[t][i]` is sample `i`'s class for `tasks[t]`.
    pub labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(ids: Vec<u64>, images: Tensor, tasks: Vec<HeadSpec>, labels: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        if images.shape().len() != 4 || images.shape()[0] != n {
            return Err(Error::Shape(format!("{n} ids but images {:?}", images.shape())));
        }
        if tasks.len() != labels.len() || labels.iter().any(|l| l.len() != n) {
            return Err(Error::Shape("label table does not match tasks and samples".into()));
        }
        for (t, l) in tasks.iter().zip(&labels) {
            if let Some(&bad) = l.iter().find(|&&y| y >= t.num_classes) {
                return Err(Error::Shape(format!("label {bad} out of range for task {:?}", t.task_id)));
            }
        }
        Ok(Self {
            ids,
            images,
            tasks,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels_for(&self, task: &str) -> Option<&[usize]> {
        self.tasks
            .iter()
            .position(|t| t.task_id == task)
            .map(|i| self.labels[i].as_slice())
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Tensor> {
        self.images.select_rows(rows)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            rows.iter().map(|&r| self.ids[r]).collect(),
            self.images.select_rows(rows)?,
            self.tasks.clone(),
            self.labels.iter().map(|l| rows.iter().map(|&r| l[r]).collect()).collect(),
        )
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            ids: self.ids.clone(),
            images: self.images.clone(),
            tasks: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Keeps only the labels of `tasks`.
    pub fn restrict_tasks(&self, tasks: &[&str]) -> Result<Dataset> {
        let mut heads = Vec::new();
        let mut labels = Vec::new();
        for &t in tasks {
            let i = self
                .tasks
                .iter()
                .position(|h| h.task_id == t)
                .ok_or_else(|| Error::Coverage(format!("dataset has no labels for task {t:?}")))?;
            heads.push(self.tasks[i].clone());
            labels.push(self.labels[i].clone());
        }
        Dataset::new(self.ids.clone(), self.images.clone(), heads, labels)
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scene parameters for samples `0..n`; sample `i` draws from its own
/// stream of the seeded generator.
pub fn generate_scenes(dist: &SceneDistribution, n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64).map(|i| dist.sample(&mut sample_rng(seed, i))).collect()
}

/// `n` labeled samples over [`default_tasks`], ids `0..n`.
pub fn generate(dist: &SceneDistribution, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Size("cannot generate an empty dataset".into()));
    }
    let [c, h, w] = dist.image_shape;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut rng = sample_rng(seed, i);
        let scene = dist.sample(&mut rng);
        pixels.extend(dist.render(&scene, &mut rng));
        scenes.push(scene);
    }
    let tasks = default_tasks();
    let labels = tasks
        .iter()
        .map(|t| scenes.iter().map(|s| s.label(&t.task_id).expect("known task")).collect())
        .collect();
    Dataset::new(
        (0..n as u64).collect(),
        Tensor::new(&[n, c, h, w], pixels)?,
        tasks,
        labels,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub teacher_train: Vec<Dataset>,
    pub student_unlabeled: Dataset,
    pub test: Dataset,
}

/// Seeded disjoint partition: a test share, an unlabeled share, and the
/// remainder dealt into `n_teachers` near-equal labeled parts.
pub fn split(
    data: &Dataset,
    n_teachers: usize,
    unlabeled_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(unlabeled_fraction >= 0.0 && test_fraction >= 0.0 && unlabeled_fraction + test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "fractions {unlabeled_fraction} + {test_fraction} must be non-negative and sum below 1"
        )));
    }
    let n = data.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_unlabeled = (n as f64 * unlabeled_fraction).round() as usize;
    let rest = n.saturating_sub(n_test + n_unlabeled);
    if n_teachers == 0 || rest < n_teachers || n_test == 0 || n_unlabeled == 0 {
        return Err(Error::Size(format!(
            "{n} samples cannot fill {n_teachers} teacher parts plus {n_unlabeled} unlabeled and {n_test} test"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = data.subset(&order[..n_test])?;
    let student_unlabeled = data.subset(&order[n_test..n_test + n_unlabeled])?.without_labels();
    let pool = &order[n_test + n_unlabeled..];
    let teacher_train = (0..n_teachers)
        .map(|t| {
            let lo = t * pool.len() / n_teachers;
            let hi = (t + 1) * pool.len() / n_teachers;
            data.subset(&pool[lo..hi])
        })
        .collect::<Result<_>>()?;
    Ok(DatasetSplit {
        teacher_train,
        student_unlabeled,
        test,
    })
}
