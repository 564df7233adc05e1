//! Command-line driver behind the `amalgam` binary.
//!
//! Every subcommand resolves one flat [`RunConfig`] from, in increasing
//! precedence: built-in defaults, a `key = value` file given by `--config`,
//! `--set key=value` pairs, and the dedicated flags. The resolved config is
//! echoed to stderr and written to `<out>/<run_id>/config.txt`; metrics go
//! to `<out>/<run_id>/metrics.csv` as `run_id,stage,epoch,task,metric,value`
//! rows. Failures print `ERROR <kind> <message>` on stderr and exit with 1
//! (usage or config), 2 (validation or runtime check) or 3 (i/o).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocknet::{BlockNet, BlockNetSpec};
use crate::engine::{
    amalgamate_component, amalgamate_target, cluster_sources, derive_seed, dual_stage, evaluate, one_shot_amalgamate,
    train_supervised, AlignedChannels, AmalgamConfig, LossBreakdown, Source, TaskSet, TrainConfig,
};
use crate::error::{Error, Result};
use crate::experiment::{
    ablation, prepare_data, resource_table, task_head, teacher_pool, teacher_sweep, DeskSetup, Variant,
};
use crate::synthdata::SceneDistribution;
use crate::zoo::{load_dataset, load_net, save_dataset, Role, ZooRegistry};

#[derive(Parser, Debug)]
#[command(name = "amalgam", version, about = "Amalgamate trained networks into one multi-task network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// `key = value` file; `#` starts a comment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed of every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Name of the run directory under --out [default: <command>-<seed>].
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Network registry directory.
    #[arg(long, global = true, value_name = "DIR")]
    zoo: Option<PathBuf>,
    /// Comma-separated task ids.
    #[arg(long, global = true)]
    tasks: Option<String>,
    /// Epochs of the subcommand's main training loop.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Learning rate of the subcommand's main training loop.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Batch size of the subcommand's main training loop.
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Soft-target loss only (no transfer bridges).
    #[arg(long, global = true)]
    no_bridge: bool,
    /// Learn from all teachers instead of the least ambiguous one.
    #[arg(long, global = true)]
    no_selection: bool,
    /// Plain distillation: no bridges, no selection, fixed logit scale.
    #[arg(long, global = true)]
    kd_only: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled teacher partitions, an unlabeled pool and a test set.
    GenData,
    /// Train a source network on labeled data and register it in the zoo.
    TrainTeacher {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Registry id of the new network.
        #[arg(long)]
        id: String,
        /// Labeled set to report accuracy on.
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
    },
    /// Amalgamate the zoo's sources into one component network per task.
    AmalgamateStage1 {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Amalgamate component networks into one multi-task target.
    AmalgamateStage2 {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Comma-separated component ids; by default the single component
        /// registered for each task.
        #[arg(long)]
        components: Option<String>,
    },
    /// Both stages in one run.
    DualStage {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
    },
    /// Amalgamate all relevant sources straight into the target.
    OneShot {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
    },
    /// Per-task accuracy of a network on a labeled set.
    Eval {
        /// Checkpoint file; alternatively `--id` looks one up in the zoo.
        #[arg(long, value_name = "FILE", conflicts_with = "id")]
        net: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Full method against its ablated variants on fresh synthetic data.
    Ablate,
    /// Component accuracy as a function of the number of teachers.
    TeacherSweep {
        /// Comma-separated teacher counts.
        #[arg(long, default_value = "1,2,3,4")]
        counts: String,
    },
    /// Parameter and FLOP counts of sources against their target.
    Resources,
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        cases: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::AmalgamateStage1 { .. } => "amalgamate-stage1",
            Command::AmalgamateStage2 { .. } => "amalgamate-stage2",
            Command::DualStage { .. } => "dual-stage",
            Command::OneShot { .. } => "one-shot",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::TeacherSweep { .. } => "teacher-sweep",
            Command::Resources => "resources",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Every tunable of the driver, as one flat key/value namespace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "runs"),
    ("run_id", ""),
    ("zoo", ""),
    ("tasks", "bright_background,is_red"),
    // amalgamation
    ("lr", "0.01"),
    ("lambda_lr", "0.0001"),
    ("momentum", "0.9"),
    ("grad_clip", "1"),
    ("anneal", "true"),
    ("epochs", "10"),
    ("batch_size", "16"),
    ("widen_factor", "1.5"),
    ("aligned_channels", "student"),
    ("disable_bridge", "false"),
    ("disable_selection", "false"),
    ("kd_only", "false"),
    ("per_task_selection", "false"),
    ("entropy_clamp", "1e-12"),
    // source training
    ("teacher_lr", "0.01"),
    ("teacher_momentum", "0.9"),
    ("teacher_epochs", "20"),
    ("teacher_batch_size", "8"),
    // data and architecture
    ("teachers", "4"),
    ("samples_per_source", "100"),
    ("unlabeled_samples", "800"),
    ("test_samples", "2000"),
    ("image_size", "16"),
    ("noise", "0.15"),
    ("stem_channels", "8"),
    ("block_channels", "8,16,32"),
    ("block_strides", "1,2,2"),
    ("repeats", "1"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn positive(key: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {x} must be a positive finite number")))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_usizes(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s)).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and unparsable values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        let value = value.trim().to_string();
        self.values.insert(k, value);
        // parse eagerly so a bad value is reported where it was given
        self.check_key(k)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    /// Applies a `key = value` text: one pair per line, `#` comments, blank
    /// lines ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_kind(&e))))?;
        }
        Ok(())
    }

    /// The resolved config as `key = value` lines, sorted by key.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn check_key(&self, key: &str) -> Result<()> {
        let v = self.get(key);
        match key {
            "seed" | "epochs" | "batch_size" | "teacher_epochs" | "teacher_batch_size" | "teachers"
            | "samples_per_source" | "unlabeled_samples" | "test_samples" | "image_size" | "stem_channels" | "repeats" => {
                parse::<u64>(key, v).map(drop)
            }
            "lr" | "lambda_lr" | "grad_clip" | "widen_factor" | "entropy_clamp" | "teacher_lr" => {
                positive(key, parse::<f64>(key, v)?)
            }
            "momentum" | "teacher_momentum" | "noise" => {
                let x = parse::<f64>(key, v)?;
                if !(0.0..1.0).contains(&x) {
                    return Err(Error::Config(format!("{key}: {x} is outside [0, 1)")));
                }
                Ok(())
            }
            "anneal" | "disable_bridge" | "disable_selection" | "kd_only" | "per_task_selection" => {
                parse_bool(key, v).map(drop)
            }
            "block_channels" | "block_strides" => parse_usizes(key, v).map(drop),
            "aligned_channels" => self.aligned_channels().map(drop),
            "tasks" => self.tasks().map(drop),
            _ => Ok(()),
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        parse(key, self.get(key))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        parse(key, self.get(key))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        parse(key, self.get(key))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        parse_bool(key, self.get(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    /// The requested task ids, in the order given.
    pub fn tasks(&self) -> Result<Vec<String>> {
        let tasks: Vec<String> = self
            .get("tasks")
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tasks.is_empty() {
            return Err(Error::Config("tasks: at least one task is required".into()));
        }
        for t in &tasks {
            task_head(t)?;
        }
        Ok(tasks)
    }

    fn aligned_channels(&self) -> Result<AlignedChannels> {
        match self.get("aligned_channels") {
            "student" => Ok(AlignedChannels::StudentBlock),
            v => parse::<usize>("aligned_channels", v)
                .map(AlignedChannels::Fixed)
                .map_err(|_| Error::Config(format!("aligned_channels: expected \"student\" or a count, got {v:?}"))),
        }
    }

    pub fn amalgam(&self) -> Result<AmalgamConfig> {
        let c = AmalgamConfig {
            lr: self.f64("lr")?,
            lambda_lr: self.f64("lambda_lr")?,
            momentum: self.f64("momentum")?,
            grad_clip: self.f64("grad_clip")?,
            anneal: self.bool("anneal")?,
            epochs: self.usize("epochs")?,
            batch_size: self.usize("batch_size")?,
            seed: derive_seed(self.seed()?, "amalgam"),
            widen_factor: self.f64("widen_factor")?,
            aligned_channels: self.aligned_channels()?,
            disable_bridge: self.bool("disable_bridge")?,
            disable_selection: self.bool("disable_selection")?,
            kd_only: self.bool("kd_only")?,
            per_task_selection: self.bool("per_task_selection")?,
            entropy_clamp: self.f64("entropy_clamp")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn teacher(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            lr: self.f64("teacher_lr")?,
            momentum: self.f64("teacher_momentum")?,
            grad_clip: self.f64("grad_clip")?,
            anneal: self.bool("anneal")?,
            epochs: self.usize("teacher_epochs")?,
            batch_size: self.usize("teacher_batch_size")?,
            seed: derive_seed(self.seed()?, "teacher"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn backbone(&self) -> Result<BlockNetSpec> {
        let size = self.usize("image_size")?;
        let spec = BlockNetSpec {
            input_shape: [3, size, size],
            stem_channels: self.usize("stem_channels")?,
            block_channels: parse_usizes("block_channels", self.get("block_channels"))?,
            block_strides: parse_usizes("block_strides", self.get("block_strides"))?,
            heads: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn desk(&self) -> Result<DeskSetup> {
        let size = self.usize("image_size")?;
        Ok(DeskSetup {
            scenes: SceneDistribution {
                image_shape: [3, size, size],
                noise: self.f64("noise")?,
                ..SceneDistribution::default()
            },
            backbone: self.backbone()?,
            samples_per_source: self.usize("samples_per_source")?,
            unlabeled_samples: self.usize("unlabeled_samples")?,
            test_samples: self.usize("test_samples")?,
            teacher: self.teacher()?,
            amalgam: self.amalgam()?,
        })
    }
}

fn strip_kind(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((_, rest)) => rest.to_string(),
        None => s,
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
struct Metric {
    stage: String,
    epoch: usize,
    task: String,
    metric: String,
    value: f64,
}

struct Run {
    id: String,
    dir: PathBuf,
    config: RunConfig,
    metrics: Vec<Metric>,
}

impl Run {
    fn record(&mut self, stage: &str, epoch: usize, task: &str, metric: &str, value: f64) {
        self.metrics.push(Metric {
            stage: stage.to_string(),
            epoch,
            task: task.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Per-epoch means of every loss component.
    fn record_history(&mut self, stage: &str, task: &str, history: &LossBreakdown) {
        let mut sums: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
        for r in &history.records {
            let e = sums.entry(r.epoch).or_default();
            e.0[0] += r.l_total;
            e.0[1] += r.l_soft;
            e.0[2] += r.l_a.iter().sum::<f64>();
            e.0[3] += r.l_reg.iter().sum::<f64>();
            e.1 += 1;
        }
        for (epoch, (s, n)) in sums {
            for (name, v) in ["l_total", "l_soft", "l_a", "l_reg"].iter().zip(s) {
                self.record(stage, epoch, task, name, v / n as f64);
            }
        }
    }

    fn zoo(&self) -> Result<ZooRegistry> {
        let dir = match self.config.get("zoo") {
            "" => PathBuf::from(self.config.get("out")).join("zoo"),
            z => PathBuf::from(z),
        };
        ZooRegistry::open(dir)
    }

    fn write_metrics(&self) -> Result<()> {
        let mut csv = String::from("run_id,stage,epoch,task,metric,value\n");
        for m in &self.metrics {
            let _ = writeln!(csv, "{},{},{},{},{},{}", self.id, m.stage, m.epoch, m.task, m.metric, m.value);
        }
        fs::write(self.dir.join("metrics.csv"), csv)?;
        Ok(())
    }
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        config.apply_text(&text, &path.display().to_string())?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        config.set(k.trim(), v)?;
    }
    let teacher_run = matches!(command, Command::TrainTeacher { .. });
    let (epochs, lr, batch) = if teacher_run {
        ("teacher_epochs", "teacher_lr", "teacher_batch_size")
    } else {
        ("epochs", "lr", "batch_size")
    };
    let mut flag = |key: &str, value: Option<String>| value.map_or(Ok(()), |v| config.set(key, &v));
    flag("seed", common.seed.map(|v| v.to_string()))?;
    flag("out", common.out.as_ref().map(|p| p.display().to_string()))?;
    flag("run_id", common.run_id.clone())?;
    flag("zoo", common.zoo.as_ref().map(|p| p.display().to_string()))?;
    flag("tasks", common.tasks.clone())?;
    flag(epochs, common.epochs.map(|v| v.to_string()))?;
    flag(lr, common.lr.map(|v| v.to_string()))?;
    flag(batch, common.batch.map(|v| v.to_string()))?;
    flag("disable_bridge", common.no_bridge.then(|| "true".into()))?;
    flag("disable_selection", common.no_selection.then(|| "true".into()))?;
    flag("kd_only", common.kd_only.then(|| "true".into()))?;
    if config.get("run_id").is_empty() {
        let id = format!("{}-{}", command.name(), config.seed()?);
        config.set("run_id", &id)?;
    }
    let id = config.get("run_id").to_string();
    if id.contains(['/', '\\', ',', '\n']) || id.starts_with('.') {
        return Err(Error::Config(format!("run_id {id:?} is not usable as a directory name")));
    }
    Ok(config)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("ERROR usage {first}");
                eprint!("{}", e.render());
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {} {}", e.code(), strip_kind(&e));
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = resolve(&cli.common, &cli.command)?;
    let id = config.get("run_id").to_string();
    let dir = Path::new(config.get("out")).join(&id);
    fs::create_dir_all(&dir)?;
    let rendered = config.render();
    for line in rendered.lines() {
        eprintln!("config {line}");
    }
    fs::write(dir.join("config.txt"), &rendered)?;
    let mut run = Run {
        id,
        dir,
        config,
        metrics: Vec::new(),
    };
    let outcome = dispatch(&cli.command, &mut run);
    // metrics gathered before a failure are still worth keeping
    run.write_metrics()?;
    outcome
}

fn dispatch(command: &Command, run: &mut Run) -> Result<()> {
    match command {
        Command::GenData => gen_data(run),
        Command::TrainTeacher { data, id, test } => train_teacher(run, data, id, test.as_deref()),
        Command::AmalgamateStage1 { data } => stage1(run, data),
        Command::AmalgamateStage2 { data, components } => stage2(run, data, components.as_deref()),
        Command::DualStage { data, test } => run_dual_stage(run, data, test.as_deref()),
        Command::OneShot { data, test } => run_one_shot(run, data, test.as_deref()),
        Command::Eval { net, id, data } => eval(run, net.as_deref(), id.as_deref(), data),
        Command::Ablate => ablate(run),
        Command::TeacherSweep { counts } => sweep(run, counts),
        Command::Resources => resources(run),
        Command::Gradcheck { cases } => gradcheck(run, *cases),
    }
}

fn gen_data(run: &mut Run) -> Result<()> {
    let setup = run.config.desk()?;
    let teachers = run.config.usize("teachers")?;
    let split = prepare_data(&setup, teachers, run.config.seed()?)?;
    let dir = run.dir.join("data");
    for (i, part) in split.teacher_train.iter().enumerate() {
        let name = format!("teacher{i}");
        save_dataset(part, &dir.join(format!("{name}.amlg")))?;
        run.record("gen-data", 0, "", &format!("{name}_samples"), part.len() as f64);
    }
    save_dataset(&split.student_unlabeled, &dir.join("unlabeled.amlg"))?;
    save_dataset(&split.test, &dir.join("test.amlg"))?;
    run.record("gen-data", 0, "", "unlabeled_samples", split.student_unlabeled.len() as f64);
    run.record("gen-data", 0, "", "test_samples", split.test.len() as f64);
    println!("wrote {} teacher partitions, unlabeled and test sets to {}", teachers, dir.display());
    Ok(())
}

fn report_accuracy(run: &mut Run, stage: &str, net: &BlockNet, test: &Path, tasks: &[String]) -> Result<()> {
    let data = load_dataset(test)?;
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    for (task, acc) in evaluate(net, &data, &names)? {
        println!("{stage} {task} accuracy {acc:.4}");
        run.record(stage, 0, &task, "accuracy", acc);
    }
    Ok(())
}

fn train_teacher(run: &mut Run, data: &Path, id: &str, test: Option<&Path>) -> Result<()> {
    let tasks = run.config.tasks()?;
    let heads = tasks.iter().map(|t| task_head(t)).collect::<Result<Vec<_>>>()?;
    let data = load_dataset(data)?;
    let mut net = BlockNet::new(
        run.config.backbone()?.with_heads(heads),
        derive_seed(run.config.seed()?, "teacher/init"),
    )?;
    let losses = train_supervised(&mut net, &data, &run.config.teacher()?)?;
    for (epoch, loss) in losses.iter().enumerate() {
        run.record("teacher", epoch, "", "loss", *loss);
    }
    let entry = run.zoo()?.add_net(id, &net, Role::Source)?;
    println!("registered source {} ({})", entry.net_id, entry.path.display());
    if let Some(test) = test {
        report_accuracy(run, "teacher", &net, test, &tasks)?;
    }
    Ok(())
}

fn user_tasks(run: &Run) -> Result<TaskSet> {
    Ok(run.config.tasks()?.into_iter().collect())
}

fn zoo_sources(zoo: &ZooRegistry) -> Result<Vec<Source>> {
    zoo.entries()?
        .into_iter()
        .filter(|e| e.role == Role::Source)
        .map(|e| Ok(Source::new(e.net_id.clone(), load_net(&zoo.root().join(&e.path))?)))
        .collect()
}

fn stage1(run: &mut Run, data: &Path) -> Result<()> {
    let zoo = run.zoo()?;
    let user = user_tasks(run)?;
    let unlabeled = load_dataset(data)?;
    let config = run.config.amalgam()?;
    let pool = zoo_sources(&zoo)?;
    let index: Vec<(String, TaskSet)> = pool.iter().map(|s| (s.id.clone(), s.tasks())).collect();
    let groups = cluster_sources(&index, &user)?;
    for (task, ids) in &groups {
        println!("task {task}: sources {}", ids.join(","));
        let nets: Vec<&BlockNet> = pool.iter().filter(|s| ids.contains(&s.id)).map(|s| &s.net).collect();
        let result = amalgamate_component(&nets, task, &unlabeled, &config)?;
        run.record_history(&format!("stage1:{task}"), task, &result.history);
        let entry = zoo.add_net(&format!("{}.{task}", run.id), &result.student, Role::Component)?;
        println!("registered component {}", entry.net_id);
    }
    Ok(())
}

fn stage2(run: &mut Run, data: &Path, components: Option<&str>) -> Result<()> {
    let zoo = run.zoo()?;
    let user = user_tasks(run)?;
    let unlabeled = load_dataset(data)?;
    let config = run.config.amalgam()?;
    let ids: Vec<String> = match components {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => {
            let all: Vec<_> = zoo.entries()?.into_iter().filter(|e| e.role == Role::Component).collect();
            user.iter()
                .map(|task| {
                    let hits: Vec<&str> = all
                        .iter()
                        .filter(|e| e.tasks.contains(task))
                        .map(|e| e.net_id.as_str())
                        .collect();
                    match hits[..] {
                        [one] => Ok(one.to_string()),
                        [] => Err(Error::Coverage(format!("no component covers task {task:?}"))),
                        _ => Err(Error::Config(format!(
                            "several components cover {task:?} ({}); pick with --components",
                            hits.join(",")
                        ))),
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let nets = ids.iter().map(|id| zoo.load(id)).collect::<Result<Vec<_>>>()?;
    let covered: TaskSet = nets.iter().flat_map(BlockNet::task_set).collect();
    if let Some(missing) = user.iter().find(|t| !covered.contains(*t)) {
        return Err(Error::Coverage(format!("the chosen components do not cover task {missing:?}")));
    }
    let refs: Vec<&BlockNet> = nets.iter().collect();
    let result = amalgamate_target(&refs, &unlabeled, &config)?;
    run.record_history("stage2", "", &result.history);
    let entry = zoo.add_net(&format!("{}.target", run.id), &result.student, Role::Target)?;
    println!("registered target {} from components {}", entry.net_id, ids.join(","));
    Ok(())
}

fn run_dual_stage(run: &mut Run, data: &Path, test: Option<&Path>) -> Result<()> {
    let zoo = run.zoo()?;
    let user = user_tasks(run)?;
    let unlabeled = load_dataset(data)?;
    let config = run.config.amalgam()?;
    let pool = zoo_sources(&zoo)?;
    let result = dual_stage(&pool, &user, &unlabeled, &config)?;
    for (task, ids) in &result.groups {
        println!("task {task}: sources {}", ids.join(","));
    }
    for (task, history) in &result.stage1 {
        run.record_history(&format!("stage1:{task}"), task, history);
    }
    run.record_history("stage2", "", &result.stage2);
    for (task, net) in &result.components {
        zoo.add_net(&format!("{}.{task}", run.id), net, Role::Component)?;
    }
    let entry = zoo.add_net(&format!("{}.target", run.id), &result.target, Role::Target)?;
    println!("registered target {}", entry.net_id);
    if let Some(test) = test {
        let tasks: Vec<String> = user.into_iter().collect();
        report_accuracy(run, "target", &result.target, test, &tasks)?;
    }
    Ok(())
}

fn run_one_shot(run: &mut Run, data: &Path, test: Option<&Path>) -> Result<()> {
    let zoo = run.zoo()?;
    let user = user_tasks(run)?;
    let unlabeled = load_dataset(data)?;
    let config = run.config.amalgam()?;
    let pool = zoo_sources(&zoo)?;
    let result = one_shot_amalgamate(&pool, &user, &unlabeled, &config)?;
    run.record_history("one-shot", "", &result.history);
    let entry = zoo.add_net(&format!("{}.target", run.id), &result.student, Role::Target)?;
    println!("registered target {}", entry.net_id);
    if let Some(test) = test {
        let tasks: Vec<String> = user.into_iter().collect();
        report_accuracy(run, "target", &result.student, test, &tasks)?;
    }
    Ok(())
}

fn eval(run: &mut Run, net: Option<&Path>, id: Option<&str>, data: &Path) -> Result<()> {
    let net = match (net, id) {
        (Some(path), _) => load_net(path)?,
        (None, Some(id)) => run.zoo()?.load(id)?,
        (None, None) => return Err(Error::Config("eval needs --net or --id".into())),
    };
    let tasks: Vec<String> = net.task_set().into_iter().collect();
    report_accuracy(run, "eval", &net, data, &tasks)
}

fn ablate(run: &mut Run) -> Result<()> {
    let setup = run.config.desk()?;
    let task = run.config.tasks()?.remove(0);
    let teachers = run.config.usize("teachers")?;
    let base = run.config.seed()?;
    for r in 0..run.config.u64("repeats")? {
        let seed = base + r;
        let pool = teacher_pool(&setup, &task, teachers, seed)?;
        for (i, acc) in pool.accuracies.iter().enumerate() {
            run.record(&format!("teacher:{i}"), r as usize, &task, "accuracy", *acc);
        }
        let config = AmalgamConfig {
            seed: derive_seed(seed, "amalgam"),
            ..setup.amalgam.clone()
        };
        let outcomes = ablation(&pool, teachers, &config, &Variant::ALL)?;
        let mut line = format!("seed {seed} teachers {:?}", pool.accuracies);
        for (v, o) in &outcomes {
            run.record(&format!("ablate:{}", v.name()), r as usize, &task, "accuracy", o.accuracy);
            let _ = write!(line, " {}={:.4}", v.name(), o.accuracy);
        }
        println!("{line}");
    }
    Ok(())
}

fn sweep(run: &mut Run, counts: &str) -> Result<()> {
    let counts = parse_usizes("counts", counts)?;
    let max = counts.iter().copied().max().unwrap_or(0);
    let setup = run.config.desk()?;
    let task = run.config.tasks()?.remove(0);
    let base = run.config.seed()?;
    for r in 0..run.config.u64("repeats")? {
        let seed = base + r;
        let pool = teacher_pool(&setup, &task, max, seed)?;
        let config = AmalgamConfig {
            seed: derive_seed(seed, "amalgam"),
            ..setup.amalgam.clone()
        };
        for (k, o) in teacher_sweep(&pool, &counts, &config)? {
            println!("seed {seed} teachers {k} accuracy {:.4}", o.accuracy);
            run.record(&format!("sweep:{k}"), r as usize, &task, "accuracy", o.accuracy);
        }
    }
    Ok(())
}

fn resources(run: &mut Run) -> Result<()> {
    let zoo = run.zoo()?;
    let user = user_tasks(run)?;
    let widen = run.config.f64("widen_factor")?;
    let mut sources: Vec<(String, BlockNetSpec)> = zoo_sources(&zoo)?
        .into_iter()
        .filter(|s| s.tasks().iter().any(|t| user.contains(t)))
        .map(|s| (s.id, s.net.spec().clone()))
        .collect();
    if sources.is_empty() {
        // a nominal pool: `teachers` single-task sources dealt over the tasks
        let backbone = run.config.backbone()?;
        let tasks: Vec<&String> = user.iter().collect();
        for i in 0..run.config.usize("teachers")?.max(tasks.len()) {
            let task = tasks[i % tasks.len()];
            sources.push((format!("source{i}.{task}"), backbone.clone().with_heads(vec![task_head(task)?])));
        }
    }
    let table = resource_table(&sources, &user, widen)?;
    for (id, r) in &table.sources {
        println!("{id:<32} params {:>9} flops {:>11}", r.params, r.flops_per_image);
        run.record("resources", 0, id, "params", r.params as f64);
        run.record("resources", 0, id, "flops", r.flops_per_image as f64);
    }
    println!("{:<32} params {:>9} flops {:>11}", "sources total", table.source_params(), table.source_flops());
    println!("{:<32} params {:>9} flops {:>11}", "target", table.target.params, table.target.flops_per_image);
    run.record("resources", 0, "sources_total", "params", table.source_params() as f64);
    run.record("resources", 0, "sources_total", "flops", table.source_flops() as f64);
    run.record("resources", 0, "target", "params", table.target.params as f64);
    run.record("resources", 0, "target", "flops", table.target.flops_per_image as f64);
    Ok(())
}

/// Largest tolerated relative error of the analytic gradients.
const GRADCHECK_TOLERANCE: f64 = 1e-6;

fn gradcheck(run: &mut Run, cases: usize) -> Result<()> {
    let checks = crate::experiment::gradient_suite(cases, 1e-5)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.max_rel_error <= GRADCHECK_TOLERANCE;
        println!("{} {:<24} max rel error {:.3e}", if ok { "PASS" } else { "FAIL" }, c.op, c.max_rel_error);
        run.record("gradcheck", 0, c.op, "max_rel_error", c.max_rel_error);
        if !ok {
            failed.push(c.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_resolves_and_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nepochs = 3  # trailing\n\nlr=0.5\n", "t").unwrap();
        assert_eq!(c.get("epochs"), "3");
        assert_eq!(c.amalgam().unwrap().lr, 0.5);
        assert!(matches!(c.apply_text("nope = 1", "t"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs = x", "t"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs", "t"), Err(Error::Config(_))));
        assert!(matches!(c.set("tasks", "is_red,what"), Err(Error::Config(_))));
    }

    #[test]
    fn rendering_round_trips() {
        let mut c = RunConfig::default();
        c.set("kd_only", "yes").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), "r").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file_and_route_to_the_teacher_keys() {
        let common = Common {
            epochs: Some(7),
            seed: Some(9),
            ..Common::default()
        };
        let teach = Command::TrainTeacher {
            data: "d".into(),
            id: "x".into(),
            test: None,
        };
        let c = resolve(&common, &teach).unwrap();
        assert_eq!((c.get("teacher_epochs"), c.get("epochs")), ("7", "10"));
        assert_eq!(c.get("run_id"), "train-teacher-9");
        let c = resolve(&common, &Command::Resources).unwrap();
        assert_eq!(c.get("epochs"), "7");
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["amalgam", "no-such-command"]), 1);
        assert_eq!(run(["amalgam", "eval"]), 1);
        assert_eq!(run(["amalgam", "--help"]), 0);
    }
}
