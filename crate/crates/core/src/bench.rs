//! Scaling harness: eval-forward time against token count.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel_attention::{kernel_oracle, AttentionInputs, RandomFeatureMap, DEFAULT_STABILIZER};
use crate::model::{BlockAttention, Mode, Model, ModelConfig, TokenBatch};
use crate::seed;

pub const CSV_HEADER: &str = "n,seconds,bytes,variant";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Token counts for the linear-attention model forward.
    pub sizes: Vec<usize>,
    /// Token counts for the quadratic oracle.
    pub quadratic_sizes: Vec<usize>,
    pub dim: usize,
    pub features: usize,
    pub blocks: usize,
    /// Best of this many runs is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1024, 2048, 4096, 8192],
            quadratic_sizes: vec![256, 512, 1024, 2048],
            dim: 64,
            features: 10,
            blocks: 4,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub seconds: f64,
    /// Peak resident set size during the measurement, when the OS reports it.
    pub bytes: Option<u64>,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// R^2 of a least-squares line through the linear variant's (n, seconds).
    pub linear_r2: f64,
    pub linear_ratios: Vec<(usize, f64)>,
    pub quadratic_ratios: Vec<(usize, f64)>,
}

pub fn random_tokens(n: usize, d: usize, seed: u64) -> TokenBatch {
    let mut rng = seed::rng(seed);
    let tokens = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let centers = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    TokenBatch { tokens, centers }
}

pub fn random_attention_inputs(n: usize, d: usize, seed: u64) -> AttentionInputs {
    let mut rng = seed::rng(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let mut m = || Array2::from_shape_simple_fn((n, d), || scale * rng.random_range(-1.0..1.0));
    AttentionInputs::new(m(), m(), m()).expect("finite inputs of matching shape")
}

/// The model timed by the `linear` variant.
pub fn bench_model_config(cfg: &BenchConfig) -> ModelConfig {
    ModelConfig {
        dim: cfg.dim,
        features: cfg.features,
        blocks: cfg.blocks,
        attention: BlockAttention::Linear,
        seed: cfg.seed,
        ..ModelConfig::default()
    }
}

/// Linux only: reset the peak-RSS counter of this process.
fn reset_peak_rss() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

/// `VmHWM` of this process in bytes, where available.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn measure(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, Option<u64>)> {
    let resettable = reset_peak_rss();
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok((best, if resettable { peak_rss_bytes() } else { None }))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    let model = Model::new(bench_model_config(cfg))?;
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let tokens = random_tokens(n, cfg.dim, seed::derive(cfg.seed, &[n as u64]));
        let (seconds, bytes) = measure(cfg.repeats, || model.forward(&tokens, Mode::Eval).map(|_| ()))?;
        log::info!("bench variant=linear n={n} seconds={seconds:.4}");
        rows.push(BenchRow {
            n,
            seconds,
            bytes,
            variant: "linear".into(),
        });
    }
    let map = RandomFeatureMap::new(cfg.dim, cfg.features, cfg.seed)?;
    for &n in &cfg.quadratic_sizes {
        let inputs = random_attention_inputs(n, cfg.dim, seed::derive(cfg.seed, &[n as u64]));
        let (seconds, bytes) = measure(cfg.repeats, || {
            std::hint::black_box(kernel_oracle(&inputs, &map, DEFAULT_STABILIZER));
            Ok(())
        })?;
        log::info!("bench variant=quadratic n={n} seconds={seconds:.4}");
        rows.push(BenchRow {
            n,
            seconds,
            bytes,
            variant: "quadratic".into(),
        });
    }
    let points = |v: &str| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r.variant == v).map(|r| (r.n as f64, r.seconds)).collect()
    };
    Ok(BenchResult {
        linear_r2: linear_fit_r2(&points("linear")),
        linear_ratios: doubling_ratios(&rows, "linear"),
        quadratic_ratios: doubling_ratios(&rows, "quadratic"),
        rows,
    })
}

/// Coefficient of determination of the least-squares line through `points`.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let sse: f64 = points.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    1.0 - sse / syy
}

/// `(n, t(n) / t(n/2))` for every `n` whose half was also measured.
pub fn doubling_ratios(rows: &[BenchRow], variant: &str) -> Vec<(usize, f64)> {
    let of = |n: usize| rows.iter().find(|r| r.variant == variant && r.n == n).map(|r| r.seconds);
    rows.iter()
        .filter(|r| r.variant == variant && r.n % 2 == 0)
        .filter_map(|r| of(r.n / 2).map(|half| (r.n, r.seconds / half)))
        .collect()
}

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let bytes = r.bytes.map(|b| b.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{:.6},{},{}\n", r.n, r.seconds, bytes, r.variant));
    }
    out
}
