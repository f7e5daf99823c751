use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, forgetting};
use super::train::{grouping_seed, prepare_inputs, train_task, EpochRecord, Prepared, TrainConfig};
use super::{AccessAuditor, AuditedStream, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{token_scores, BlockAttention, Mode, Model, ModelConfig, TokenBatch, TrainScope};
use crate::pointcloud::{prepare_groups, Label, PointCloud};

/// Number of highest token scores averaged into the object score.
pub fn top_k(tokens: usize) -> usize {
    (tokens / 100).max(1)
}

fn object_score(tokens: &[f64]) -> f64 {
    let mut s = tokens.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = top_k(s.len()).min(s.len());
    s[..k].iter().sum::<f64>() / k as f64
}

fn score_tokens(model: &Model, tokens: &TokenBatch) -> Result<(f64, Vec<f64>)> {
    let out = model.forward(tokens, Mode::Eval)?;
    let per = token_scores(tokens, &out.recon);
    Ok((object_score(&per), per))
}

/// Object score and per-token scores of one cloud under a trained model.
pub fn score_sample(model: &Model, cloud: &PointCloud, seed: u64) -> Result<(f64, Vec<f64>)> {
    let g = prepare_groups(cloud, &model.config.grouping(), seed)?;
    let tokens = model.embed_groups(&g)?;
    score_tokens(model, &tokens)
}

/// Component switches of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub kal: bool,
    pub kaa: bool,
    pub rpp: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        kal: true,
        kaa: true,
        rpp: true,
    };

    /// Full model and each component removed in turn.
    pub fn grid() -> [Ablation; 4] {
        [
            Self::FULL,
            Ablation { rpp: false, ..Self::FULL },
            Ablation { kaa: false, ..Self::FULL },
            Ablation { kal: false, ..Self::FULL },
        ]
    }

    /// Parse a comma-separated list of components to switch off.
    pub fn without(list: &str) -> std::result::Result<Ablation, String> {
        let mut a = Self::FULL;
        for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "kal" => a.kal = false,
                "kaa" => a.kaa = false,
                "rpp" => a.rpp = false,
                other => return Err(format!("unknown component '{other}' (expected kal, kaa or rpp)")),
            }
        }
        Ok(a)
    }

    pub fn name(&self) -> String {
        let off: Vec<&str> = [("kal", self.kal), ("kaa", self.kaa), ("rpp", self.rpp)]
            .iter()
            .filter(|(_, on)| !on)
            .map(|(n, _)| *n)
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("no_{}", off.join("_"))
        }
    }

    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        m.kal &= self.kal;
        if !self.kaa {
            m.attention = BlockAttention::Linear;
        }
        if !self.rpp {
            t.perturbation.lambda_rpp = 0.0;
        }
        (m, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub category: String,
    pub task_origin: usize,
    pub label: Label,
    pub score: f64,
    pub token_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub task_origin: usize,
    pub auroc: f64,
    /// Largest drop from an earlier evaluation; absent on first evaluation.
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub after_task: usize,
    pub categories: Vec<CategoryResult>,
    /// Mean of the per-category AUROCs.
    pub mean_auroc: f64,
    /// AUROC over all samples pooled.
    pub sample_auroc: f64,
    pub records: Vec<SampleRecord>,
}

impl Evaluation {
    pub fn category(&self, name: &str) -> Option<&CategoryResult> {
        self.categories.iter().find(|c| c.category == name)
    }

    /// Mean AUROC over the categories introduced by `task`.
    pub fn task_auroc(&self, task: usize) -> Option<f64> {
        let v: Vec<f64> = self.categories.iter().filter(|c| c.task_origin == task).map(|c| c.auroc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub variant: String,
    pub evaluations: Vec<Evaluation>,
    pub epochs: Vec<EpochRecord>,
    /// Per task, mean `||phi(k)||` per block in the last training epoch.
    pub feature_norms: Vec<Vec<f64>>,
    pub audited_reads: u64,
    pub foreign_reads: Vec<String>,
}

impl AnomalyReport {
    pub fn final_mean_auroc(&self) -> f64 {
        self.evaluations.last().map_or(f64::NAN, |e| e.mean_auroc)
    }

    pub fn mean_aurocs(&self) -> Vec<f64> {
        self.evaluations.iter().map(|e| e.mean_auroc).collect()
    }

    /// Mean forgetting over the categories of `task` at the last evaluation.
    pub fn forgetting_of_task(&self, task: usize) -> Option<f64> {
        let last = self.evaluations.last()?;
        let v: Vec<f64> = last
            .categories
            .iter()
            .filter(|c| c.task_origin == task)
            .filter_map(|c| c.forgetting)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("task,epoch,recon_loss,rpp_loss,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{:.8e},{:.8e},{:e}\n", e.task, e.epoch, e.recon, e.rpp, e.lr));
        }
        s
    }
}

/// One row per report, one column per task: mean AUROC after that task.
pub fn ablation_table_csv(reports: &[AnomalyReport]) -> String {
    let tasks = reports.iter().map(|r| r.evaluations.len()).max().unwrap_or(0);
    let mut s = String::from("variant");
    for t in 0..tasks {
        s.push_str(&format!(",task_{t}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&r.variant);
        for t in 0..tasks {
            match r.evaluations.get(t) {
                Some(e) => s.push_str(&format!(",{:.4}", e.mean_auroc)),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub struct ProtocolOutput {
    pub report: AnomalyReport,
    pub model: Model,
}

/// Train task after task on one persistent model, scoring the cumulative test
/// set after each. `on_task` sees the model after every task.
pub fn run_protocol(
    stream: &TaskStream,
    model_config: &ModelConfig,
    train: &TrainConfig,
    variant: &str,
    on_task: &mut dyn FnMut(usize, &Model, &Evaluation) -> Result<()>,
) -> Result<ProtocolOutput> {
    stream.validate()?;
    let mut model = Model::new(model_config.clone())?;
    let auditor = AccessAuditor::new();
    let data = AuditedStream::new(stream, &auditor);
    let mut cache: HashMap<String, Prepared> = HashMap::new();
    let mut history: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut report = AnomalyReport {
        variant: variant.to_string(),
        evaluations: Vec::new(),
        epochs: Vec::new(),
        feature_norms: Vec::new(),
        audited_reads: 0,
        foreign_reads: Vec::new(),
    };

    for t in 0..data.len() {
        auditor.enter(t);
        let summary = train_task(&mut model, data, t, train);
        auditor.exit();
        let summary = summary?;
        report.epochs.extend(summary.epochs);
        report.feature_norms.push(summary.feature_norms);

        let samples: Vec<_> = (0..data.test_len(t)).map(|i| data.test(t, i)).collect();
        // grouping never depends on the model; tokens do unless the embedder is frozen
        let missing: Vec<_> = samples
            .iter()
            .filter(|s| train.scope == TrainScope::All || !cache.contains_key(&s.id))
            .map(|s| (&s.cloud, s.seed))
            .collect();
        let ids: Vec<_> = samples
            .iter()
            .filter(|s| train.scope == TrainScope::All || !cache.contains_key(&s.id))
            .map(|s| s.id.clone())
            .collect();
        let fresh = prepare_inputs(&model, &missing, TrainScope::EncoderDecoder, train.exec)?;
        cache.extend(ids.into_iter().zip(fresh));

        let scored = train.exec.map(&samples, |s| -> Result<(f64, Vec<f64>)> {
            match &cache[&s.id] {
                Prepared::Tokens(tok) => score_tokens(&model, tok),
                Prepared::Groups(g) => score_tokens(&model, &model.embed_groups(g)?),
            }
        });
        let evaluation = assemble(t, &samples, scored, &mut history)?;
        log::info!("variant={variant} task={t} mean_auroc={:.4}", evaluation.mean_auroc);
        on_task(t, &model, &evaluation)?;
        report.evaluations.push(evaluation);
    }
    report.audited_reads = auditor.reads();
    report.foreign_reads = auditor.foreign_reads();
    Ok(ProtocolOutput { report, model })
}

fn assemble(
    after_task: usize,
    samples: &[&Sample],
    scored: Vec<Result<(f64, Vec<f64>)>>,
    history: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(scored) {
        let (score, token_scores) = r?;
        records.push(SampleRecord {
            id: s.id.clone(),
            category: s.category.clone(),
            task_origin: s.task,
            label: s.label(),
            score,
            token_scores,
        });
    }

    let mut seen: Vec<(String, usize)> = Vec::new();
    for r in &records {
        if !seen.iter().any(|(c, _)| c == &r.category) {
            seen.push((r.category.clone(), r.task_origin));
        }
    }
    let mut categories = Vec::with_capacity(seen.len());
    for (cat, origin) in seen {
        let pairs: Vec<_> = records.iter().filter(|r| r.category == cat).map(|r| (r.score, r.label)).collect();
        let a = auroc(&pairs)?;
        let h = history.entry(cat.clone()).or_default();
        categories.push(CategoryResult {
            category: cat,
            task_origin: origin,
            auroc: a,
            forgetting: forgetting(h, a),
        });
        h.push(a);
    }
    if categories.is_empty() {
        return Err(Error::UndefinedMetric("nothing to evaluate".into()));
    }
    let mean_auroc = categories.iter().map(|c| c.auroc).sum::<f64>() / categories.len() as f64;
    let pooled: Vec<_> = records.iter().map(|r| (r.score, r.label)).collect();
    Ok(Evaluation {
        after_task,
        categories,
        mean_auroc,
        sample_auroc: auroc(&pooled)?,
        records,
    })
}

/// Score `samples` with a trained model and compute the per-category and
/// mean AUROC. No forgetting history is available here.
pub fn evaluate(model: &Model, samples: &[&Sample], after_task: usize, exec: Execution) -> Result<Evaluation> {
    let scored = exec.map(samples, |s| score_sample(model, &s.cloud, grouping_seed(s.seed)));
    assemble(after_task, samples, scored, &mut BTreeMap::new())
}

/// The grouping seed used for a sample with this seed, for callers that score
/// clouds outside the protocol.
pub fn sample_grouping_seed(sample_seed: u64) -> u64 {
    grouping_seed(sample_seed)
}
