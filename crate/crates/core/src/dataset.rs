//! On-disk task streams: a PLY tree plus a JSON manifest.
//!
//! Layout: `<root>/task_<t>/{train,test}/<category>/<id>.ply` and
//! `<root>/manifest.json`. Each test cloud is stored once, under the task that
//! introduced its category; loading rebuilds the cumulative test sets.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::continual::{Sample, Task, TaskStream};
use crate::error::{Error, Result};
use crate::pointcloud::{read_cloud, write_cloud, CloudFormat, Label};
use crate::synthgen::DefectSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: usize,
    pub categories: Vec<String>,
    pub train: Vec<SampleEntry>,
    /// Only the test clouds this task introduces.
    pub test: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub category: String,
    pub label: Label,
    pub seed: u64,
    pub defect: Option<DefectSpec>,
    pub points: usize,
    /// Relative to the dataset root, `/`-separated.
    pub file: String,
}

impl Manifest {
    pub fn files(&self) -> impl Iterator<Item = &SampleEntry> {
        self.tasks.iter().flat_map(|t| t.train.iter().chain(&t.test))
    }
}

fn entry(sample: &Sample, task: usize, split: &str) -> SampleEntry {
    SampleEntry {
        id: sample.id.clone(),
        category: sample.category.clone(),
        label: sample.label(),
        seed: sample.seed,
        defect: sample.defect,
        points: sample.cloud.len(),
        file: format!("task_{task}/{split}/{}/{}.ply", sample.category, sample.id),
    }
}

/// `true` when `dir` exists and holds at least one entry.
pub fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Write every cloud of `stream` and its manifest under `root`. A non-empty
/// `root` is refused unless `force` is set, in which case it is cleared.
pub fn write_dataset(stream: &TaskStream, seed: u64, root: &Path, force: bool) -> Result<Manifest> {
    stream.validate()?;
    if is_nonempty_dir(root) {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut tasks = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        let train: Vec<_> = task.train.iter().map(|s| (entry(s, task.id, "train"), s)).collect();
        let test: Vec<_> = task
            .test
            .iter()
            .filter(|s| s.task == task.id)
            .map(|s| (entry(s, task.id, "test"), s))
            .collect();
        for (e, s) in train.iter().chain(&test) {
            write_cloud(&s.cloud, &root.join(&e.file), CloudFormat::Ply)?;
        }
        tasks.push(TaskEntry {
            id: task.id,
            categories: task.categories.clone(),
            train: train.into_iter().map(|(e, _)| e).collect(),
            test: test.into_iter().map(|(e, _)| e).collect(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        tasks,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "manifest version {} (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

fn resolve(root: &Path, file: &str) -> Result<PathBuf> {
    let rel = Path::new(file);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Dataset(format!("manifest path {file:?} escapes the dataset root")));
    }
    Ok(root.join(rel))
}

/// Load a dataset written by [`write_dataset`], checking every file against
/// its manifest entry.
pub fn load_dataset(root: &Path) -> Result<(Manifest, TaskStream)> {
    let manifest = read_manifest(root)?;
    let mut ids = HashSet::new();
    for e in manifest.files() {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Dataset(format!("sample id {} listed twice", e.id)));
        }
    }
    let load = |e: &SampleEntry, task: usize| -> Result<Arc<Sample>> {
        let path = resolve(root, &e.file)?;
        let cloud = read_cloud(&path, CloudFormat::Ply)?;
        if cloud.label != e.label {
            return Err(Error::Dataset(format!(
                "{}: file label {:?} but manifest says {:?}",
                e.file, cloud.label, e.label
            )));
        }
        if cloud.len() != e.points {
            return Err(Error::Dataset(format!(
                "{}: {} points but manifest says {}",
                e.file,
                cloud.len(),
                e.points
            )));
        }
        if e.label.is_anomalous() != e.defect.is_some() {
            return Err(Error::Dataset(format!("{}: label and defect disagree", e.id)));
        }
        Ok(Arc::new(Sample {
            id: e.id.clone(),
            category: e.category.clone(),
            task,
            seed: e.seed,
            defect: e.defect,
            cloud,
        }))
    };

    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut cumulative = Vec::new();
    for t in &manifest.tasks {
        let train = t.train.iter().map(|e| load(e, t.id)).collect::<Result<Vec<_>>>()?;
        for e in &t.test {
            cumulative.push(load(e, t.id)?);
        }
        tasks.push(Task {
            id: t.id,
            categories: t.categories.clone(),
            train,
            test: cumulative.clone(),
        });
    }
    let stream = TaskStream::new(tasks);
    stream.validate()?;
    Ok((manifest, stream))
}
