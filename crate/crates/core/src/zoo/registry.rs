use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::checkpoint::Checkpoint;
use super::{load_net, save_net};
use crate::blocknet::BlockNet;
use crate::engine::TaskSet;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
const LOCK_FILE: &str = "index.lock";
const TEMP_FILE: &str = "index.tsv.tmp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Source,
    Component,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Component => "component",
            Role::Target => "target",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "component" => Ok(Role::Component),
            "target" => Ok(Role::Target),
            other => Err(Error::Format(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZooEntry {
    pub net_id: String,
    /// Relative to the registry root.
    pub path: PathBuf,
    pub role: Role,
    pub tasks: TaskSet,
}

impl ZooEntry {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\n",
            self.net_id,
            self.path.display(),
            self.role,
            self.tasks.iter().cloned().collect::<Vec<_>>().join(",")
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, path, role, tasks] = fields[..] else {
            return Err(Error::Format(format!("index line {line:?} does not have 4 fields")));
        };
        Ok(Self {
            net_id: id.to_string(),
            path: PathBuf::from(path),
            role: role.parse()?,
            tasks: tasks.split(',').filter(|t| !t.is_empty()).map(str::to_string).collect(),
        })
    }
}

/// A directory of checkpoints plus a line-oriented index. Mutations hold an
/// exclusive lock on a side file and replace the index by renaming a fully
/// written temporary, so readers only ever see a complete index.
#[derive(Debug, Clone)]
pub struct ZooRegistry {
    root: PathBuf,
}

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!("{what} {value:?} must be non-empty and free of tabs and newlines")));
    }
    Ok(())
}

impl ZooRegistry {
    /// Opens (creating if needed) the registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> Result<Vec<ZooEntry>> {
        match fs::read_to_string(self.root.join(INDEX_FILE)) {
            Ok(text) => text.lines().filter(|l| !l.is_empty()).map(ZooEntry::parse).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Adds an entry for a checkpoint already inside the registry
    /// directory. The checkpoint must load and verify.
    pub fn register(&self, net_id: &str, path: &Path, tasks: &TaskSet, role: Role) -> Result<ZooEntry> {
        check_field("net id", net_id)?;
        if path.is_absolute() {
            return Err(Error::Config(format!("registry paths are relative to the root, got {}", path.display())));
        }
        check_field("path", &path.display().to_string())?;
        for t in tasks {
            check_field("task id", t)?;
            if t.contains(',') {
                return Err(Error::Config(format!("task id {t:?} contains a comma")));
            }
        }
        Checkpoint::load(&self.root.join(path))?;
        let entry = ZooEntry {
            net_id: net_id.to_string(),
            path: path.to_path_buf(),
            role,
            tasks: tasks.clone(),
        };

        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join(LOCK_FILE))?;
        lock.lock()?;
        let result = self.append_locked(&entry);
        lock.unlock()?;
        result.map(|()| entry)
    }

    fn append_locked(&self, entry: &ZooEntry) -> Result<()> {
        let mut entries = self.entries()?;
        if entries.iter().any(|e| e.net_id == entry.net_id) {
            return Err(Error::Conflict(format!("net id {:?} is already registered", entry.net_id)));
        }
        entries.push(entry.clone());
        let temp = self.root.join(TEMP_FILE);
        {
            let mut f = File::create(&temp)?;
            for e in &entries {
                f.write_all(e.to_line().as_bytes())?;
            }
            f.sync_all()?;
        }
        fs::rename(&temp, self.root.join(INDEX_FILE))?;
        Ok(())
    }

    pub fn lookup(&self, net_id: &str) -> Result<ZooEntry> {
        self.entries()?
            .into_iter()
            .find(|e| e.net_id == net_id)
            .ok_or_else(|| Error::NotFound(format!("no net {net_id:?} in the zoo at {}", self.root.display())))
    }

    pub fn list_by_task(&self, task: &str) -> Result<Vec<ZooEntry>> {
        Ok(self.entries()?.into_iter().filter(|e| e.tasks.contains(task)).collect())
    }

    /// Saves `net` under `nets/<id>.amlg` and registers it.
    pub fn add_net(&self, net_id: &str, net: &BlockNet, role: Role) -> Result<ZooEntry> {
        check_field("net id", net_id)?;
        if net_id.contains(['/', '\\']) || net_id.starts_with('.') {
            return Err(Error::Config(format!("net id {net_id:?} is not usable as a file name")));
        }
        if self.entries()?.iter().any(|e| e.net_id == net_id) {
            return Err(Error::Conflict(format!("net id {net_id:?} is already registered")));
        }
        let rel = PathBuf::from("nets").join(format!("{net_id}.amlg"));
        save_net(net, &self.root.join(&rel))?;
        self.register(net_id, &rel, &net.task_set(), role)
    }

    pub fn load(&self, net_id: &str) -> Result<BlockNet> {
        load_net(&self.root.join(self.lookup(net_id)?.path))
    }
}
