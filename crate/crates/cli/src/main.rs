use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use incr3d_core::bench::{rows_csv, run_bench, BenchConfig};
use incr3d_core::config::{RunConfig, VERSION};
use incr3d_core::continual::{
    ablation_table_csv, evaluate, run_protocol, train_task, Ablation, AccessAuditor, AnomalyReport, AuditedStream,
    Evaluation, Precision,
};
use incr3d_core::dataset::{is_nonempty_dir, load_dataset, write_dataset};
use incr3d_core::exec::init_threads;
use incr3d_core::gradcheck::{run_gradcheck, GradcheckConfig};
use incr3d_core::model::{load_checkpoint, save_checkpoint, Model};
use incr3d_core::synthgen::build_task_stream;
use incr3d_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "incr3d", version, about = "Class-incremental 3D point-cloud anomaly detection")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, in-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream as PLY files plus a manifest.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        force: bool,
    },
    /// Train one task of a dataset, optionally starting from a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        task: usize,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the full class-incremental protocol on a dataset.
    Continual {
        #[command(flatten)]
        run: RunArgs,
        /// Components to switch off, one extra run each (`kal,kaa,rpp`, or `all`).
        #[arg(long)]
        ablate: Option<String>,
        /// Comma-separated perturbation radii, one extra run each.
        #[arg(long, value_delimiter = ',')]
        eps_sweep: Vec<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Score the cumulative test set of a task with a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Last task whose test clouds are included (default: all).
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Time the eval forward against token count.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        quadratic_sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the model gradient on a tiny network.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Inject an error into one analytic gradient entry.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

/// Run configuration file plus flag overrides.
#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    train_per_category: Option<usize>,
    #[arg(long)]
    test_per_category: Option<usize>,
    #[arg(long)]
    defect_amplitude: Option<f64>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_dropped: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda_rpp: Option<f64>,
    #[arg(long)]
    ascent_steps: Option<usize>,
    /// Keep weights in full double precision between steps.
    #[arg(long)]
    double: bool,
}

impl RunArgs {
    fn resolve(&self, cli: &Cli) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            data => data_dir, out => out_dir, seed => seed, tasks => tasks, points => points_per_cloud,
            train_per_category => train_per_category, defect_amplitude => defect_amplitude,
            centers => centers, group_size => group_size, dim => dim, features => features, blocks => blocks,
            epochs => epochs, batch_size => batch_size, lr => lr, lr_dropped => lr_dropped,
            epsilon => epsilon, lambda_rpp => lambda_rpp, ascent_steps => ascent_steps,
        );
        if let Some(n) = self.test_per_category {
            c.normal_test_per_category = n;
            c.anomalous_test_per_category = n;
        }
        if self.double {
            c.precision = Precision::Double;
        }
        if let Some(t) = cli.threads {
            c.threads = t;
        }
        if cli.deterministic {
            c.deterministic = true;
            c.threads = 1;
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        None => 1,
    }
}

/// Create `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> anyhow::Result<()> {
    if is_nonempty_dir(dir) && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

fn scores_csv(e: &Evaluation) -> String {
    let mut s = String::from("id,category,task_origin,label,score\n");
    for r in &e.records {
        let label = if r.label.is_anomalous() { "anomalous" } else { "normal" };
        s.push_str(&format!("{},{},{},{label},{:.8e}\n", r.id, r.category, r.task_origin, r.score));
    }
    s
}

fn cmd_gen_data(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let stream = build_task_stream(
        &cfg.category_specs(),
        &cfg.task_partition()?,
        cfg.split_sizes(),
        &cfg.defects(),
        cfg.seed,
    )?;
    let manifest = write_dataset(&stream, cfg.seed, &cfg.data_dir, force)?;
    cfg.echo_to(&cfg.data_dir)?;
    println!(
        "wrote {} clouds in {} tasks to {}",
        manifest.files().count(),
        manifest.tasks.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, task: usize, init: Option<&Path>, force: bool) -> anyhow::Result<()> {
    let (_, stream) = load_dataset(&cfg.data_dir)?;
    if task >= stream.len() {
        return Err(Error::Config(format!("task {task} out of range (dataset has {})", stream.len())).into());
    }
    let mut model = match init {
        Some(p) => load_checkpoint(p)?,
        None => Model::new(cfg.model_config())?,
    };
    prepare_out(&cfg.out_dir, force)?;
    cfg.echo_to(&cfg.out_dir)?;
    let auditor = AccessAuditor::new();
    auditor.enter(task);
    let summary = train_task(&mut model, AuditedStream::new(&stream, &auditor), task, &cfg.train_config());
    auditor.exit();
    // keep whatever was reached, even on a numeric failure
    save_checkpoint(&model, &cfg.out_dir.join(format!("task_{task}.ckpt")))?;
    let summary = summary?;
    let report = AnomalyReport {
        variant: "train".into(),
        evaluations: Vec::new(),
        epochs: summary.epochs,
        feature_norms: vec![summary.feature_norms],
        audited_reads: auditor.reads(),
        foreign_reads: auditor.foreign_reads(),
    };
    write(&cfg.out_dir.join("epochs.csv"), report.epochs_csv())?;
    let test: Vec<_> = stream.tasks()[task].test.iter().map(|s| s.as_ref()).collect();
    let eval = evaluate(&model, &test, task, cfg.execution())?;
    write(&cfg.out_dir.join("scores.csv"), scores_csv(&eval))?;
    write_json(&cfg.out_dir.join("evaluation.json"), &eval)?;
    println!("task {task}: mean AUROC {:.4} over {} test clouds", eval.mean_auroc, test.len());
    Ok(())
}

fn variants(ablate: Option<&str>) -> anyhow::Result<Vec<Ablation>> {
    let Some(list) = ablate else {
        return Ok(vec![Ablation::FULL]);
    };
    if list.trim() == "all" {
        return Ok(Ablation::grid().to_vec());
    }
    let mut out = vec![Ablation::FULL];
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let a = Ablation::without(part).map_err(Error::Config)?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(out)
}

fn run_variant(
    cfg: &RunConfig,
    stream: &incr3d_core::continual::TaskStream,
    ablation: Ablation,
    name: &str,
) -> anyhow::Result<AnomalyReport> {
    let (mc, tc) = ablation.apply(&cfg.model_config(), &cfg.train_config());
    let ckpt_dir = cfg.out_dir.join("checkpoints").join(name);
    let out = run_protocol(stream, &mc, &tc, name, &mut |t, model, e| {
        println!("{name}: after task {t} mean AUROC {:.4}", e.mean_auroc);
        save_checkpoint(model, &ckpt_dir.join(format!("task_{t}.ckpt")))
    })?;
    let report = out.report;
    write_json(&cfg.out_dir.join(format!("report_{name}.json")), &report)?;
    write(&cfg.out_dir.join(format!("epochs_{name}.csv")), report.epochs_csv())?;
    if !report.foreign_reads.is_empty() {
        return Err(anyhow!("protocol isolation violated: {:?}", report.foreign_reads));
    }
    Ok(report)
}

fn cmd_continual(cfg: &RunConfig, ablate: Option<&str>, eps_sweep: &[f64], force: bool) -> anyhow::Result<()> {
    let grid = variants(ablate)?;
    let (_, stream) = load_dataset(&cfg.data_dir)?;
    prepare_out(&cfg.out_dir, force)?;
    cfg.echo_to(&cfg.out_dir)?;
    let mut reports = Vec::new();
    for a in grid {
        reports.push(run_variant(cfg, &stream, a, &a.name())?);
    }
    write(&cfg.out_dir.join("auroc.csv"), ablation_table_csv(&reports))?;

    if !eps_sweep.is_empty() {
        let mut header = String::from("metric");
        let mut row = String::from("final_mean_auroc");
        for &eps in eps_sweep {
            let mut c = cfg.clone();
            c.epsilon = eps;
            c.validate()?;
            let r = run_variant(&c, &stream, Ablation::FULL, &format!("eps_{eps}"))?;
            header.push_str(&format!(",eps={eps}"));
            row.push_str(&format!(",{:.4}", r.final_mean_auroc()));
        }
        write(&cfg.out_dir.join("eps_sweep.csv"), format!("{header}\n{row}\n"))?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, task: Option<usize>, force: bool) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (_, stream) = load_dataset(&cfg.data_dir)?;
    let t = task.unwrap_or(stream.len() - 1);
    if t >= stream.len() {
        return Err(Error::Config(format!("task {t} out of range (dataset has {})", stream.len())).into());
    }
    prepare_out(&cfg.out_dir, force)?;
    cfg.echo_to(&cfg.out_dir)?;
    let test: Vec<_> = stream.tasks()[t].test.iter().map(|s| s.as_ref()).collect();
    let eval = evaluate(&model, &test, t, cfg.execution())?;
    write_json(&cfg.out_dir.join("evaluation.json"), &eval)?;
    write(&cfg.out_dir.join("scores.csv"), scores_csv(&eval))?;
    let mut s = String::from("category,task_origin,auroc\n");
    for c in &eval.categories {
        s.push_str(&format!("{},{},{:.4}\n", c.category, c.task_origin, c.auroc));
    }
    write(&cfg.out_dir.join("categories.csv"), s)?;
    println!("mean AUROC {:.4} (sample AUROC {:.4})", eval.mean_auroc, eval.sample_auroc);
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, sizes: &[usize], quadratic: &[usize], repeats: usize, force: bool) -> anyhow::Result<()> {
    let mut b = BenchConfig {
        dim: cfg.dim,
        features: cfg.features,
        blocks: cfg.blocks,
        repeats,
        seed: cfg.seed,
        ..BenchConfig::default()
    };
    if !sizes.is_empty() {
        b.sizes = sizes.to_vec();
    }
    if !quadratic.is_empty() {
        b.quadratic_sizes = quadratic.to_vec();
    }
    prepare_out(&cfg.out_dir, force)?;
    cfg.echo_to(&cfg.out_dir)?;
    let result = run_bench(&b)?;
    write(&cfg.out_dir.join("scaling.csv"), rows_csv(&result.rows))?;
    write_json(&cfg.out_dir.join("scaling.json"), &result)?;
    println!("linear R^2 {:.4}", result.linear_r2);
    for (n, r) in &result.linear_ratios {
        println!("linear t({n})/t({}) = {r:.2}", n / 2);
    }
    for (n, r) in &result.quadratic_ratios {
        println!("quadratic t({n})/t({}) = {r:.2}", n / 2);
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> anyhow::Result<bool> {
    let g = GradcheckConfig {
        double: cfg.precision == Precision::Double,
        corrupt,
        seed: cfg.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&g)?;
    for (class, n) in &report.per_class {
        println!("{class:?}: {n} entries");
    }
    for f in report.failures.iter().take(20) {
        println!(
            "FAIL {} {}[{}]: analytic {:e} numeric {:e}",
            f.variant, f.name, f.index, f.analytic, f.numeric
        );
    }
    println!(
        "{} entries checked, max relative error {:.3e}: {}",
        report.checked,
        report.max_rel_error,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let run_args = match &cli.command {
        Command::GenData { run, .. }
        | Command::Train { run, .. }
        | Command::Continual { run, .. }
        | Command::Eval { run, .. }
        | Command::Bench { run, .. }
        | Command::Gradcheck { run, .. } => run,
    };
    let cfg = run_args.resolve(cli)?;
    init_threads((cfg.threads > 0).then_some(cfg.threads));
    log::info!("incr3d {VERSION}");
    match &cli.command {
        Command::GenData { force, .. } => cmd_gen_data(&cfg, *force)?,
        Command::Train { task, init, force, .. } => cmd_train(&cfg, *task, init.as_deref(), *force)?,
        Command::Continual {
            ablate, eps_sweep, force, ..
        } => cmd_continual(&cfg, ablate.as_deref(), eps_sweep, *force)?,
        Command::Eval {
            checkpoint, task, force, ..
        } => cmd_eval(&cfg, checkpoint, *task, *force)?,
        Command::Bench {
            sizes,
            quadratic_sizes,
            repeats,
            force,
            ..
        } => cmd_bench(&cfg, sizes, quadratic_sizes, *repeats, *force)?,
        Command::Gradcheck { corrupt, .. } => return cmd_gradcheck(&cfg, *corrupt),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
