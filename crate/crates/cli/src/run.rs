//! Subcommand definitions and their pipelines.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use facestress::data_model::{ingest_session, write_session, Modality, SessionPaths, SessionRecording, N_FACIAL};
use facestress::dataset::{build_windows, WindowSet};
use facestress::stats::{session_effects, significance_map, SmoothingOperator};
use facestress::subspace::{
    fit_lda, fit_pca, perturb_along_axis, rank_stress_components, write_lda_axis, write_pca_embedding, write_pca_report,
    write_perturbed, Standardizer,
};
use facestress::synth::{benchmark_preset, generate, session_dir_name, write_sessions, PRESETS};
use facestress::traineval::{evaluate_all, make_folds, train_all, write_predictions, ExperimentKind, FoldPlan, MetricsReport, ModelBundle};
use facestress::{Error, Matrix, Result};
use serde::Serialize;

use crate::config::{ResolvedRun, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "facestress", version, about = "Multimodal driver stress analysis and classification")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Allow writing into an existing, non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for cross-validation folds.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic MD/ND sessions.
    Synth(SynthArgs),
    /// Validate and clean raw session directories.
    Ingest(IoArgs),
    /// Window sessions and write the window table.
    Features(FeatureArgs),
    /// Phase-wise MD-ND tests and significance map.
    Stats(StatsArgs),
    /// PCA and LDA stress axes over window-mean facial coefficients.
    Subspace(FeatureArgs),
    /// Subject-wise cross-validated training of the configured models.
    Train(TrainArgs),
    /// Test-fold predictions and metrics of a training run.
    Eval(EvalArgs),
    /// Comparison table from a metrics file.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Print the available presets and exit.
    #[arg(long)]
    pub list_presets: bool,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IoArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeatureArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long)]
    pub window_s: Option<f64>,
    #[arg(long)]
    pub stress_threshold: Option<f64>,
    #[arg(long)]
    pub no_delta: bool,
    #[arg(long)]
    pub no_baseline: bool,
    /// Use raw gaze coordinates instead of gaze dynamics.
    #[arg(long)]
    pub raw_gaze: bool,
    /// Add ND windows as no-stress samples.
    #[arg(long)]
    pub nd_negatives: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SmoothingKind {
    None,
    Triangular,
    Spline,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_enum)]
    pub smoothing: Option<SmoothingKind>,
    /// Triangular kernel width (odd).
    #[arg(long)]
    pub width: Option<usize>,
    /// Spline penalty; omitted means the per-segment default.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated p-value thresholds.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Comma-separated configurations, e.g. `facial,bio,cross_facial_bio`.
    #[arg(long = "models", value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub knn_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Training run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding `metrics.json`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Defaults to `<in>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx { force: cli.force, jobs: cli.jobs };
    match cli.command {
        Command::Synth(a) => synth(&ctx, &mut cfg, a),
        Command::Ingest(a) => ingest(&ctx, &mut cfg, a),
        Command::Features(a) => features(&ctx, &mut cfg, a),
        Command::Stats(a) => stats(&ctx, &mut cfg, a),
        Command::Subspace(a) => subspace(&ctx, &mut cfg, a),
        Command::Train(a) => train(&ctx, &mut cfg, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

struct Ctx {
    force: bool,
    jobs: usize,
}

impl Ctx {
    /// Creates `dir`, refusing a non-empty one unless forced.
    fn prepare_out(&self, dir: &Path) -> Result<()> {
        if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !self.force {
            return Err(Error::Config(format!("output directory {} is not empty (use --force)", dir.display())));
        }
        std::fs::create_dir_all(dir)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_resolved(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("run_config.json"), &ResolvedRun { command, seed: cfg.master_seed(), config: cfg })
}

fn apply_io(cfg: &mut RunConfig, io: IoArgs) {
    if io.input.is_some() {
        cfg.data_dir = io.input;
    }
    if io.out.is_some() {
        cfg.out_dir = io.out;
    }
}

fn apply_features(cfg: &mut RunConfig, a: FeatureArgs) {
    apply_io(cfg, a.io);
    let f = &mut cfg.features;
    if let Some(v) = a.window_s {
        f.window_s = v;
    }
    if let Some(v) = a.stress_threshold {
        f.stress_threshold = v;
    }
    f.include_delta &= !a.no_delta;
    f.include_baseline &= !a.no_baseline;
    f.gaze_dynamics &= !a.raw_gaze;
    f.include_nd_negatives |= a.nd_negatives;
}

/// Every session directory under `root` (those holding `manifest.json`),
/// in name order.
pub fn load_sessions(root: &Path) -> Result<Vec<SessionRecording>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InsufficientData(format!("no session directories under {}", root.display())));
    }
    dirs.iter().map(|d| ingest_session(&SessionPaths::in_dir(d))).collect()
}

fn load_windows(cfg: &RunConfig) -> Result<WindowSet> {
    let sessions = load_sessions(cfg.data_dir()?)?;
    let set = build_windows(&sessions, &cfg.features)?;
    for w in &set.warnings {
        log::warn!("{w}");
    }
    Ok(set)
}

fn synth(ctx: &Ctx, cfg: &mut RunConfig, a: SynthArgs) -> Result<()> {
    if a.list_presets {
        for p in PRESETS {
            let c = benchmark_preset(p)?;
            println!("{p}\tsubjects={}\tseed={}\teffects={}", c.n_subjects, c.seed, c.effects.len());
        }
        return Ok(());
    }
    if a.preset.is_some() {
        cfg.synth.preset = a.preset;
    }
    if a.n_subjects.is_some() {
        cfg.synth.n_subjects = a.n_subjects;
    }
    if a.seed.is_some() {
        cfg.synth.seed = a.seed;
    }
    if a.out.is_some() {
        cfg.out_dir = a.out;
    }
    let preset = cfg.synth.preset.clone().ok_or_else(|| Error::Config("no preset (use --preset)".into()))?;
    let mut sc = benchmark_preset(&preset)?;
    if let Some(n) = cfg.synth.n_subjects {
        sc.n_subjects = n;
    }
    if let Some(s) = cfg.synth.seed {
        sc.seed = s;
    }
    cfg.synth.seed = Some(sc.seed);
    let out = cfg.out_dir("synth");
    ctx.prepare_out(&out)?;
    let pairs = generate(&sc)?;
    write_sessions(&out, &pairs)?;
    write_json(&out.join("synth_config.json"), &sc)?;
    write_resolved(&out, "synth", cfg)?;
    println!("wrote {} sessions to {}", 2 * pairs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct IngestRow {
    session: String,
    modality: String,
    rows_read: usize,
    rows_kept: usize,
    dropped_duplicate: usize,
    dropped_decreasing: usize,
    dropped_non_finite: usize,
}

fn ingest(ctx: &Ctx, cfg: &mut RunConfig, a: IoArgs) -> Result<()> {
    apply_io(cfg, a);
    let sessions = load_sessions(cfg.data_dir()?)?;
    let out = cfg.out_dir("ingest");
    ctx.prepare_out(&out)?;
    let mut wtr = csv::Writer::from_writer(create(&out.join("ingest_report.csv"))?);
    for s in &sessions {
        let name = session_dir_name(&s.subject_id, s.condition);
        write_session(&out.join(&name), s)?;
        for (m, c) in &s.cleaning {
            wtr.serialize(IngestRow {
                session: name.clone(),
                modality: m.to_string(),
                rows_read: c.rows_read,
                rows_kept: c.rows_kept,
                dropped_duplicate: c.dropped_duplicate,
                dropped_decreasing: c.dropped_decreasing,
                dropped_non_finite: c.dropped_non_finite,
            })
            .map_err(Error::from)?;
        }
    }
    wtr.flush()?;
    write_resolved(&out, "ingest", cfg)?;
    println!("ingested {} sessions into {}", sessions.len(), out.display());
    Ok(())
}

fn features(ctx: &Ctx, cfg: &mut RunConfig, a: FeatureArgs) -> Result<()> {
    apply_features(cfg, a);
    let set = load_windows(cfg)?;
    let out = cfg.out_dir("features");
    ctx.prepare_out(&out)?;
    set.write_table(create(&out.join("windows.csv"))?)?;
    std::fs::write(out.join("warnings.txt"), set.warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    write_resolved(&out, "features", cfg)?;
    let n_stress = set.labels().iter().filter(|&&l| l == 1.0).count();
    println!("{} windows ({n_stress} stress) of {} frames from {} subjects", set.windows.len(), set.frames_per_window, set.subjects().len());
    Ok(())
}

fn stats(ctx: &Ctx, cfg: &mut RunConfig, a: StatsArgs) -> Result<()> {
    apply_io(cfg, a.io);
    let s = &mut cfg.stats;
    match a.smoothing {
        Some(SmoothingKind::None) => s.smoothing = SmoothingOperator::None,
        Some(SmoothingKind::Triangular) => s.smoothing = SmoothingOperator::Triangular { width: a.width.unwrap_or(5) },
        Some(SmoothingKind::Spline) => s.smoothing = SmoothingOperator::Spline { lambda: a.lambda },
        None => {}
    }
    if let Some(t) = a.thresholds {
        s.thresholds = t;
    }
    if s.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::Config("thresholds must lie in (0, 1)".into()));
    }
    let sessions = load_sessions(cfg.data_dir()?)?;
    let effects = session_effects(&sessions, &Modality::ALL, &cfg.stats.smoothing)?;
    let map = significance_map(&effects, &cfg.stats.thresholds);
    let out = cfg.out_dir("stats");
    ctx.prepare_out(&out)?;
    map.write_csv(create(&out.join("stats_report.csv"))?)?;
    write_json(&out.join("significance_counts.json"), &map.both_stressor_counts)?;
    let lines = map.summary_lines();
    std::fs::write(out.join("significance_counts.txt"), lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    write_resolved(&out, "stats", cfg)?;
    for l in &lines {
        println!("{l}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SubspaceSummary {
    n_windows: usize,
    n_stress: usize,
    lda_sigma_proj: f64,
    lda_class_means: [f64; 2],
    top_component: usize,
    top_component_correlation: f64,
}

fn subspace(ctx: &Ctx, cfg: &mut RunConfig, a: FeatureArgs) -> Result<()> {
    apply_features(cfg, a);
    let set = load_windows(cfg)?;
    let rows: Vec<Vec<f64>> = set
        .windows
        .iter()
        .map(|w| {
            let f = &w.window.frames;
            (0..N_FACIAL).map(|c| (0..f.rows()).map(|t| f.get(t, c)).sum::<f64>() / f.rows() as f64).collect()
        })
        .collect();
    let x = Matrix::from_rows(&rows)?;
    let labels = set.labels();
    let channels = Modality::Facial.channel_names();
    let standardizer = Standardizer::fit(&x)?;
    let z = standardizer.apply(&x)?;
    let pca = fit_pca(&z)?;
    let ranked = rank_stress_components(&pca, &z, &labels)?;
    let lda = fit_lda(&z, &labels)?;
    let (minus, plus) = perturb_along_axis(&vec![0.0; N_FACIAL], &lda.axis(), 3.0)?;
    let out = cfg.out_dir("subspace");
    ctx.prepare_out(&out)?;
    write_lda_axis(create(&out.join("lda_axis.csv"))?, &channels, &lda)?;
    write_perturbed(
        create(&out.join("lda_perturbed.csv"))?,
        &channels,
        &standardizer.inverse_row(&minus),
        &standardizer.mean,
        &standardizer.inverse_row(&plus),
    )?;
    write_pca_report(create(&out.join("pca_report.csv"))?, &pca, &ranked, &channels, 5)?;
    write_pca_embedding(create(&out.join("pca_embedding.csv"))?, &pca.scores(&z)?, &labels)?;
    let summary = SubspaceSummary {
        n_windows: labels.len(),
        n_stress: labels.iter().filter(|&&l| l == 1.0).count(),
        lda_sigma_proj: lda.sigma_proj,
        lda_class_means: [lda.project(&lda.class_means[0]), lda.project(&lda.class_means[1])],
        top_component: ranked[0].component,
        top_component_correlation: ranked[0].correlation,
    };
    write_json(&out.join("subspace_summary.json"), &summary)?;
    write_resolved(&out, "subspace", cfg)?;
    println!("top stress component: PC{} (r = {:.3})", summary.top_component + 1, summary.top_component_correlation);
    Ok(())
}

fn train(ctx: &Ctx, cfg: &mut RunConfig, a: TrainArgs) -> Result<()> {
    apply_features(cfg, a.features);
    let e = &mut cfg.experiment;
    if let Some(m) = a.models {
        e.configurations = m.iter().map(|s| ExperimentKind::parse(s.trim())).collect::<Result<_>>()?;
    }
    macro_rules! set {
        ($field:expr, $v:expr) => {
            if let Some(v) = $v {
                $field = v;
            }
        };
    }
    set!(e.seed, a.seed);
    set!(e.n_folds, a.folds);
    set!(e.val_fraction, a.val_fraction);
    set!(e.train.max_epochs, a.epochs);
    set!(e.train.patience, a.patience);
    set!(e.train.batch_size, a.batch_size);
    set!(e.train.lr, a.lr);
    set!(e.model.embed_dim, a.embed_dim);
    set!(e.model.n_layers, a.layers);
    set!(e.model.n_heads, a.heads);
    set!(e.model.ffn_dim, a.ffn_dim);
    set!(e.model.dropout, a.dropout);
    set!(e.knn_k, a.knn_k);
    if e.configurations.is_empty() {
        return Err(Error::Config("no model configurations selected".into()));
    }
    let set = load_windows(cfg)?;
    let folds = make_folds(&set.subjects(), cfg.experiment.n_folds, cfg.experiment.val_fraction, cfg.experiment.seed)?;
    let out = cfg.out_dir("train");
    ctx.prepare_out(&out)?;
    let bundles = train_all(&set, &folds, &cfg.experiment, ctx.jobs)?;
    write_json(&out.join("folds.json"), &folds)?;
    for b in &bundles {
        b.save(&bundle_dir(&out, b.kind, b.fold_id))?;
    }
    write_resolved(&out, "train", cfg)?;
    println!("trained {} models on {} folds into {}", bundles.len(), folds.len(), out.display());
    Ok(())
}

fn bundle_dir(run: &Path, kind: ExperimentKind, fold: usize) -> PathBuf {
    run.join("models").join(kind.as_str()).join(format!("fold_{fold}"))
}

#[derive(serde::Deserialize)]
struct StoredRun {
    config: RunConfig,
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let stored: StoredRun = serde_json::from_str(&std::fs::read_to_string(a.run.join("run_config.json"))?)?;
    let cfg = stored.config;
    let folds: Vec<FoldPlan> = serde_json::from_str(&std::fs::read_to_string(a.run.join("folds.json"))?)?;
    let mut bundles = Vec::new();
    for &kind in &cfg.experiment.configurations {
        for f in &folds {
            bundles.push(ModelBundle::load(&bundle_dir(&a.run, kind, f.fold_id))?);
        }
    }
    let set = load_windows(&cfg)?;
    let (predictions, report) = evaluate_all(&set, &folds, &bundles, &cfg.experiment)?;
    let out = a.out.unwrap_or_else(|| a.run.join("eval"));
    ctx.prepare_out(&out)?;
    let pred_dir = out.join("predictions");
    std::fs::create_dir_all(&pred_dir)?;
    for ((kind, fold), preds) in &predictions {
        write_predictions(create(&pred_dir.join(format!("{}_fold_{fold}.csv", kind.as_str())))?, preds)?;
    }
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    report.write_comparison(create(&out.join("comparison.csv"))?)?;
    write_resolved(&out, "eval", &cfg)?;
    print_table(&report);
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(a.input.join("metrics.json"))?)?;
    let out = a.out.unwrap_or_else(|| a.input.join("report"));
    ctx.prepare_out(&out)?;
    report.write_comparison(create(&out.join("comparison.csv"))?)?;
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    print_table(&report);
    Ok(())
}

fn print_table(report: &MetricsReport) {
    let fmt = |c: &facestress::traineval::ConfigurationReport, m: &str| match c.aggregate.get(m) {
        Some(a) => match (a.mean, a.std) {
            (Some(mu), Some(sd)) => format!("{mu:.3} ± {sd:.3}"),
            (Some(mu), None) => format!("{mu:.3}"),
            _ => "invalid".into(),
        },
        None => "invalid".into(),
    };
    println!("{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}", "Modality", "AUROC", "AUPRC", "F1", "Accuracy", "Balanced Acc.");
    for c in &report.configurations {
        println!(
            "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}",
            c.display_name,
            fmt(c, "auroc"),
            fmt(c, "auprc"),
            fmt(c, "f1"),
            fmt(c, "accuracy"),
            fmt(c, "balanced_accuracy")
        );
    }
}
