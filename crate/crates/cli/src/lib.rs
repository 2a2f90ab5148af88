//! Command-line driver: data generation, specialist training, greedy
//! combination, distillation, evaluation and analysis.
//!
//! Exit codes: 0 on success, 1 when a pipeline step fails, 2 on usage or
//! configuration errors.

pub mod config;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng as _;
use uniembed::analysis::projection_csv;
use uniembed::retrieval::{top_k_accuracy_threaded, RetrievalReport};
use uniembed::rng::{derive_seed, Rng};
use uniembed::unify::default_vertical_order;
use uniembed::*;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Domain(uniembed::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Domain(e) => write!(f, "{e}"),
        }
    }
}

impl From<uniembed::Error> for CliError {
    fn from(e: uniembed::Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "uniembed",
    version,
    about = "Train vertical specialists and distill them into one embedding model"
)]
pub struct Cli {
    /// `key = value` run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the run
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train a specialist on a vertical scope
    Train(TrainArgs),
    /// Greedily partition verticals into compatible groups
    Combine(CombineArgs),
    /// Embed training items with their group's specialist
    Targets(TargetsArgs),
    /// Regress a unified model onto specialist targets
    Distill(DistillArgs),
    /// Top-k retrieval accuracy of a model or a set of specialists
    Eval(EvalArgs),
    /// Difference of two retrieval reports
    Compare(CompareArgs),
    /// Occupancy statistics and a 2-D projection of embeddings
    Analyze(AnalyzeArgs),
    /// Finite-difference check of both losses on a seeded net
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Reassign this fraction of product labels within each vertical
    #[arg(long)]
    noise_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated scope; all verticals when omitted
    #[arg(long)]
    verticals: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Continue on this clean-label dataset for `finetune_steps` steps
    #[arg(long)]
    finetune: Option<PathBuf>,
    /// Checkpoint CSV of the first phase
    #[arg(long)]
    history: Option<PathBuf>,
    /// Checkpoint CSV of the fine-tuning phase
    #[arg(long)]
    finetune_history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CombineArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Partition JSON
    #[arg(long)]
    out: PathBuf,
    /// Step-by-step decisions JSON
    #[arg(long)]
    report: Option<PathBuf>,
    /// Tolerance in top-1 points (`inf` allowed)
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated candidate order; largest verticals first when omitted
    #[arg(long)]
    order: Option<String>,
}

#[derive(Args, Debug)]
struct TargetsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// `v0,v1=model.json`, once per group
    #[arg(long = "group", required = true)]
    groups: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// One model evaluated on the pool of `--verticals` (default: all)
    #[arg(long, conflicts_with = "groups")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    verticals: Option<String>,
    /// `v0,v1=model.json`; each specialist is evaluated on its own group
    #[arg(long = "group")]
    groups: Vec<String>,
    /// Comma-separated ks, overriding the config
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Embeddings from a targets CSV
    #[arg(long, conflicts_with = "model")]
    targets: Option<PathBuf>,
    /// Embeddings of the training items under one model
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `item_id,vertical,x,y` CSV
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossChoice {
    Triplet,
    Distill,
    Both,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, value_enum, default_value = "both")]
    loss: LossChoice,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs one command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Combine(a) => combine(&cfg, a),
        Command::Targets(a) => targets(&cfg, a),
        Command::Distill(a) => distill(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Compare(a) => compare(a),
        Command::Analyze(a) => analyze(&cfg, a),
        Command::CheckGrad(a) => check_grad(&cfg, a),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Domain(uniembed::Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::Domain(uniembed::Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn load_data(cfg: &RunConfig, flag: Option<PathBuf>) -> CliResult<Dataset> {
    let path = flag
        .or_else(|| cfg.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no dataset given: pass --data or set `data` in the config".into()))?;
    Ok(load_dataset(path)?)
}

fn vertical_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

fn scope_of(dataset: &Dataset, text: Option<&str>) -> CliResult<VerticalSet> {
    let known = dataset.vertical_set();
    let Some(text) = text else { return Ok(known) };
    let scope: VerticalSet = vertical_list(text).into_iter().collect();
    if scope.is_empty() {
        return Err(CliError::Usage("empty vertical list".into()));
    }
    if let Some(v) = scope.iter().find(|v| !known.contains(*v)) {
        return Err(CliError::Usage(format!("dataset has no vertical `{v}`")));
    }
    Ok(scope)
}

/// Parses `v0,v1=path` and loads the model.
fn parse_group(dataset: &Dataset, spec: &str) -> CliResult<(VerticalSet, EmbeddingNet)> {
    let (verticals, path) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("group `{spec}` is not of the form `v0,v1=model.json`")))?;
    let scope = scope_of(dataset, Some(verticals))?;
    Ok((scope, load_model(path.trim())?))
}

fn parse_ks(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|k| k.trim().parse().map_err(|_| CliError::Usage(format!("bad k `{k}`"))))
        .collect()
}

fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> CliResult<()> {
    let mut dataset = generate(&cfg.gen)?;
    if let Some(rate) = a.noise_rate {
        dataset = add_label_noise(&dataset, rate, &mut Rng::seed_from_u64(cfg.noise_seed))?;
    }
    save_dataset(&dataset, &a.out)?;
    println!(
        "wrote {} items over {} verticals to {}",
        dataset.len(),
        dataset.verticals().len(),
        a.out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, a: TrainArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let scope = scope_of(&dataset, a.verticals.as_deref())?;
    let split = EvalSplit::from_dataset(&dataset)?;
    let net = EmbeddingNet::new(cfg.net_for(dataset.input_dim()))?;
    let (mut model, history) = train_triplet(net, &dataset, &scope, &cfg.triplet, Some(&split))?;
    if let Some(path) = &a.history {
        write_text(path, &history.to_csv())?;
    }
    if let Some(clean_path) = &a.finetune {
        let clean = load_dataset(clean_path)?;
        let phase = TripletConfig {
            steps: cfg.finetune_steps,
            seed: derive_seed(cfg.triplet.seed, 1),
            ..cfg.triplet.clone()
        };
        let clean_split = EvalSplit::from_dataset(&clean)?;
        let (tuned, tuned_history) = train_triplet(model, &clean, &scope, &phase, Some(&clean_split))?;
        model = tuned;
        if let Some(path) = &a.finetune_history {
            write_text(path, &tuned_history.to_csv())?;
        }
    }
    save_model(&model, &a.out)?;
    println!(
        "wrote specialist for [{}] to {}",
        scope.iter().cloned().collect::<Vec<_>>().join(","),
        a.out.display()
    );
    Ok(())
}

fn combine(cfg: &RunConfig, a: CombineArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let order = match &a.order {
        Some(text) => vertical_list(text),
        None => default_vertical_order(&dataset),
    };
    let split = EvalSplit::from_dataset(&dataset)?;
    let epsilon = a.epsilon.unwrap_or(cfg.epsilon);
    let net = cfg.net_for(dataset.input_dim());
    let (partition, report) = greedy_combine(&dataset, &order, epsilon, &net, &cfg.triplet, &split)?;
    write_text(&a.out, &partition.to_json())?;
    if let Some(path) = &a.report {
        write_text(path, &report.to_json())?;
    }
    for g in partition.groups() {
        println!("group: {}", g.join(","));
    }
    Ok(())
}

fn targets(cfg: &RunConfig, a: TargetsArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let entries = a
        .groups
        .iter()
        .map(|g| parse_group(&dataset, g))
        .collect::<CliResult<Vec<_>>>()?;
    let registry = SpecialistRegistry::new(entries)?;
    let targets = compute_targets(&registry, &dataset, &dataset.training_ids())?;
    targets.save(&a.out)?;
    println!("wrote {} targets to {}", targets.len(), a.out.display());
    Ok(())
}

fn distill(cfg: &RunConfig, a: DistillArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let targets = TargetEmbeddingSet::load(&a.targets)?;
    let net = NetConfig {
        embedding_dim: targets.dim(),
        ..cfg.net_for(dataset.input_dim())
    };
    let (model, history) = train_unified(&dataset, &targets, &net, &cfg.distill)?;
    if let Some(path) = &a.history {
        write_text(path, &history.to_csv())?;
    }
    save_model(&model, &a.out)?;
    let gap = uniembed::unify::mean_target_distance(&model, &dataset, &targets)?;
    println!(
        "wrote unified model to {}; mean squared distance to targets {gap:.6}",
        a.out.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let ks = match &a.ks {
        Some(text) => parse_ks(text)?,
        None => cfg.ks.clone(),
    };
    let split = EvalSplit::from_dataset(&dataset)?;
    let threads = cfg.threads.max(1);
    let report = match (&a.model, a.groups.is_empty()) {
        (Some(path), true) => {
            let model = load_model(path)?;
            let scope = scope_of(&dataset, a.verticals.as_deref())?;
            let pool = if scope == dataset.vertical_set() {
                split
            } else {
                split.restricted_to(&dataset, &scope)?
            };
            top_k_accuracy_threaded(&model, &dataset, &pool, &ks, threads)?
        }
        (None, false) => {
            let mut merged: Option<RetrievalReport> = None;
            for g in &a.groups {
                let (scope, model) = parse_group(&dataset, g)?;
                let part =
                    top_k_accuracy_threaded(&model, &dataset, &split.restricted_to(&dataset, &scope)?, &ks, threads)?;
                match &mut merged {
                    None => merged = Some(part),
                    Some(m) => {
                        for (v, acc) in part.verticals {
                            if m.verticals.insert(v.clone(), acc).is_some() {
                                return Err(CliError::Usage(format!("vertical `{v}` appears in two groups")));
                            }
                        }
                    }
                }
            }
            merged.expect("at least one group")
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs either --model or at least one --group".into(),
            ))
        }
    };
    write_text(&a.out, &report.to_json())?;
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (v, acc) in &report.verticals {
        let cells: Vec<String> = acc
            .accuracy
            .iter()
            .map(|k| format!("top-{} {:.3}", k.k, k.accuracy))
            .collect();
        let _ = writeln!(out, "{v} ({} queries): {}", acc.n_queries, cells.join("  "));
    }
    Ok(())
}

fn compare(a: CompareArgs) -> CliResult<()> {
    let ra = RetrievalReport::from_json(&read_text(&a.a)?)?;
    let rb = RetrievalReport::from_json(&read_text(&a.b)?)?;
    let cmp = compare_reports(&ra, &rb)?;
    let json = serde_json::to_string_pretty(&cmp).expect("comparison serializes");
    write_text(&a.out, &(json + "\n"))?;
    for (k, d) in cmp.ks.iter().zip(&cmp.mean_delta) {
        println!("mean top-{k} delta {d:+.4}");
    }
    Ok(())
}

fn analyze(cfg: &RunConfig, a: AnalyzeArgs) -> CliResult<()> {
    let dataset = load_data(cfg, a.data)?;
    let (ids, embeddings) = match (&a.targets, &a.model) {
        (Some(path), None) => {
            let targets = TargetEmbeddingSet::load(path)?;
            let ids = targets.item_ids();
            if let Some(&bad) = ids.iter().find(|&&i| i >= dataset.len()) {
                return Err(CliError::Usage(format!("target item {bad} is not in the dataset")));
            }
            let rows: Vec<&[f64]> = ids.iter().map(|&i| targets.get(i).expect("listed id")).collect();
            (ids, Matrix::from_rows(&rows)?)
        }
        (None, Some(path)) => {
            let model = load_model(path)?;
            let ids = dataset.training_ids();
            let emb = model.embed_rows(&dataset.feature_matrix(&ids))?;
            (ids, emb)
        }
        _ => {
            return Err(CliError::Usage(
                "analyze needs exactly one of --targets or --model".into(),
            ))
        }
    };
    let groups: Vec<(String, Matrix)> = dataset
        .verticals()
        .into_iter()
        .filter_map(|v| {
            let rows: Vec<usize> = (0..ids.len()).filter(|&r| dataset.item(ids[r]).vertical == v).collect();
            (!rows.is_empty()).then(|| (v, embeddings.select_rows(&rows)))
        })
        .collect();
    let report = occupancy(&groups)?;
    write_text(&a.out, &report.to_json())?;
    if let Some(path) = &a.projection {
        let projection = pca_project(&embeddings, 2)?;
        let verticals: Vec<&str> = ids.iter().map(|&i| dataset.item(i).vertical.as_str()).collect();
        write_text(path, &projection_csv(&ids, &verticals, &projection.coordinates)?)?;
    }
    println!(
        "min inter-centroid {:.4}  mean intra {:.4}  silhouette {:.4}",
        report.min_inter_centroid_distance(),
        report.overall_intra_distance(),
        report.mean_silhouette
    );
    Ok(())
}

fn check_grad(cfg: &RunConfig, a: CheckGradArgs) -> CliResult<()> {
    let net = EmbeddingNet::new(cfg.net_for(cfg.gen.input_dim))?;
    let kinds: &[LossKind] = match a.loss {
        LossChoice::Triplet => &[LossKind::Triplet],
        LossChoice::Distill => &[LossKind::Distill],
        LossChoice::Both => &[LossKind::Triplet, LossKind::Distill],
    };
    let reports: Vec<(String, GradCheckReport)> = kinds
        .iter()
        .map(|&k| (format!("{k:?}").to_lowercase(), grad_check(&net, k, a.tolerance)))
        .collect();
    for (name, r) in &reports {
        println!(
            "{name}: max relative error {:.3e} ({})",
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.out {
        let json = serde_json::json!({
            "format_version": 1,
            "checks": reports.iter().map(|(n, r)| serde_json::json!({ "loss": n, "report": r })).collect::<Vec<_>>(),
        });
        write_text(
            path,
            &(serde_json::to_string_pretty(&json).expect("report serializes") + "\n"),
        )?;
    }
    match reports.iter().find(|(_, r)| !r.passed) {
        Some((name, r)) => Err(CliError::Domain(uniembed::Error::Training {
            step: None,
            layer: r.failed_layers().first().copied(),
            message: format!("{name} gradient check failed"),
        })),
        None => Ok(()),
    }
}
