//! Class-incremental protocol: task streams, training, scoring and metrics.

mod metrics;
mod protocol;
mod train;

pub use metrics::{auroc, auroc_bruteforce, forgetting};
pub use protocol::{
    ablation_table_csv, evaluate, run_protocol, score_sample, top_k, Ablation, AnomalyReport, CategoryResult, Evaluation,
    ProtocolOutput, SampleRecord, sample_grouping_seed,
};
pub use train::{prepare_inputs, train_task, EpochRecord, Precision, Prepared, TrainConfig, TrainSummary};

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::pointcloud::{Label, PointCloud};
use crate::synthgen::DefectSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: String,
    /// Task that introduced this sample's category.
    pub task: usize,
    pub seed: u64,
    pub defect: Option<DefectSpec>,
    pub cloud: PointCloud,
}

impl Sample {
    pub fn label(&self) -> Label {
        self.cloud.label
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub categories: Vec<String>,
    pub train: Vec<Arc<Sample>>,
    /// Cumulative: every test sample of tasks `0..=id`.
    pub test: Vec<Arc<Sample>>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Self {
        Self { tasks }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Check the structural guarantees of a class-incremental stream.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.tasks.is_empty() {
            return bad("stream has no tasks".into());
        }
        let mut train_ids = HashSet::new();
        let mut categories = HashSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.id != t {
                return bad(format!("task at position {t} has id {}", task.id));
            }
            for c in &task.categories {
                if !categories.insert(c.clone()) {
                    return bad(format!("category {c} belongs to more than one task"));
                }
            }
            for s in &task.train {
                if s.label() != Label::Normal {
                    return bad(format!("anomalous sample {} in the train set of task {t}", s.id));
                }
                if s.task != t || !task.categories.contains(&s.category) {
                    return bad(format!("train sample {} does not belong to task {t}", s.id));
                }
                if !train_ids.insert(s.id.clone()) {
                    return bad(format!("train sample {} appears in more than one train set", s.id));
                }
            }
            let ids: HashSet<&str> = task.test.iter().map(|s| s.id.as_str()).collect();
            if ids.len() != task.test.len() {
                return bad(format!("duplicate test sample in task {t}"));
            }
            if t > 0 {
                let prev = &self.tasks[t - 1].test;
                if let Some(s) = prev.iter().find(|s| !ids.contains(s.id.as_str())) {
                    return bad(format!("test sample {} of task {} missing from task {t}", s.id, t - 1));
                }
            }
            for s in &task.test {
                if s.task > t {
                    return bad(format!("test sample {} of task {} appears at task {t}", s.id, s.task));
                }
            }
            let has = |l: Label| task.test.iter().any(|s| s.label() == l);
            if !task.test.is_empty() && !(has(Label::Normal) && has(Label::Anomalous)) {
                return bad(format!("test set of task {t} lacks a normal or an anomalous sample"));
            }
        }
        Ok(())
    }
}

/// Records every read of training data and the task active at the time.
#[derive(Debug, Default)]
pub struct AccessAuditor {
    active: Mutex<Option<usize>>,
    reads: AtomicU64,
    foreign: Mutex<Vec<String>>,
}

impl AccessAuditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self, task: usize) {
        *self.active.lock().unwrap() = Some(task);
    }

    pub fn exit(&self) {
        *self.active.lock().unwrap() = None;
    }

    pub fn active(&self) -> Option<usize> {
        *self.active.lock().unwrap()
    }

    fn record(&self, what: &str, task: usize, id: &str) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        if let Some(active) = self.active() {
            if active != task || what == "test" {
                self.foreign.lock().unwrap().push(format!("{what}:{task}:{id}"));
            }
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Reads made while a task was active of data it does not own (other
    /// tasks' train sets, or any test set).
    pub fn foreign_reads(&self) -> Vec<String> {
        self.foreign.lock().unwrap().clone()
    }
}

/// A task stream whose every sample access goes through an auditor.
#[derive(Clone, Copy)]
pub struct AuditedStream<'a> {
    stream: &'a TaskStream,
    auditor: &'a AccessAuditor,
}

impl<'a> AuditedStream<'a> {
    pub fn new(stream: &'a TaskStream, auditor: &'a AccessAuditor) -> Self {
        Self { stream, auditor }
    }

    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }

    pub fn categories(&self, task: usize) -> &'a [String] {
        &self.stream.tasks[task].categories
    }

    pub fn train_len(&self, task: usize) -> usize {
        self.stream.tasks[task].train.len()
    }

    pub fn train(&self, task: usize, i: usize) -> &'a Sample {
        let s = &self.stream.tasks[task].train[i];
        self.auditor.record("train", task, &s.id);
        s
    }

    pub fn test_len(&self, task: usize) -> usize {
        self.stream.tasks[task].test.len()
    }

    pub fn test(&self, task: usize, i: usize) -> &'a Sample {
        let s = &self.stream.tasks[task].test[i];
        self.auditor.record("test", task, &s.id);
        s
    }

    pub fn auditor(&self) -> &'a AccessAuditor {
        self.auditor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_task_stream, even_partition, CategorySpec, DefectKind, Shape, SplitSizes};

    fn small_stream() -> TaskStream {
        let cats: Vec<_> = Shape::ALL[..4]
            .iter()
            .map(|&s| CategorySpec {
                points_per_cloud: 128,
                ..CategorySpec::new(s)
            })
            .collect();
        let defects = [DefectSpec {
            kind: DefectKind::Bump,
            amplitude: 0.3,
            extent: 0.2,
        }];
        let sizes = SplitSizes {
            train: 2,
            normal_test: 1,
            anomalous_test: 1,
        };
        build_task_stream(&cats, &even_partition(4, 2).unwrap(), sizes, &defects, 3).unwrap()
    }

    #[test]
    fn auditor_flags_foreign_and_test_reads() {
        let stream = small_stream();
        let auditor = AccessAuditor::new();
        let h = AuditedStream::new(&stream, &auditor);
        auditor.enter(1);
        h.train(1, 0);
        assert!(auditor.foreign_reads().is_empty());
        h.train(0, 0);
        h.test(1, 0);
        auditor.exit();
        h.test(1, 1);
        assert_eq!(auditor.foreign_reads().len(), 2);
        assert_eq!(auditor.reads(), 4);
    }

    #[test]
    fn validation_catches_broken_streams() {
        let stream = small_stream();
        stream.validate().unwrap();

        let mut leaked = stream.clone();
        let anomalous = leaked.tasks[0].test.iter().find(|s| s.label() == Label::Anomalous).unwrap().clone();
        leaked.tasks[0].train.push(anomalous);
        assert!(leaked.validate().is_err());

        let mut shared = stream.clone();
        let s = shared.tasks[0].train[0].clone();
        shared.tasks[1].train.push(s);
        assert!(shared.validate().is_err());

        let mut unnested = stream.clone();
        unnested.tasks[1].test.remove(0);
        assert!(unnested.validate().is_err());
    }
}
