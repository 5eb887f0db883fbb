//! Command-line surface: dataset generation, training, the condition
//! matrix, swap generation, evaluation, comparison, plot emission, and a
//! single convenience command that reproduces the full pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (the argument
//! parser exits with 2 on its own).

use crate::dataset::{self, DatasetSpec, GazeSamplerSpec, PairSpec};
use crate::gaze::EstimatorKind;
use crate::losses::ConditionId;
use crate::model::ModelConfig;
use crate::plot::{self, GazeRow, PlotKind, PlotSpec};
use crate::stats::{self, ExperimentRecord, GroundTruth};
use crate::synth::SyntheticIdentity;
use crate::trainer::{self, CellStatus, MatrixConfig, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "gazeswap", version, about = "Desk-scale face-swap training lab with gaze-aware losses")]
pub struct Cli {
    /// Suppress timestamps in emitted files so reruns are byte-identical.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic face dataset with exact gaze ground truth.
    GenData(GenDataArgs),
    /// Train one condition from a TOML config.
    Train(TrainArgs),
    /// Train every (condition × pair × seed) cell of a matrix config.
    Matrix(MatrixArgs),
    /// Swap every frame of one identity through a trained checkpoint.
    Swap(SwapArgs),
    /// Evaluate swapped frames: per-frame angular gaze error records.
    Eval(EvalArgs),
    /// Merge record sets and emit the comparison report.
    Compare(CompareArgs),
    /// Render a figure from records (SVG).
    Plot(PlotArgs),
    /// Run the whole pipeline with desk defaults:
    /// gen-data → matrix → swap → eval → compare → plot.
    #[command(name = "reproduce-paper-pipeline")]
    ReproducePaperPipeline(ReproduceArgs),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(format!("expected lo:hi, got {s:?}"));
    }
    let lo: f64 = parts[0].parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = parts[1].parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of identities to synthesize.
    #[arg(long)]
    pub identities: usize,
    /// Frames per identity.
    #[arg(long)]
    pub frames: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Pitch sampler range in radians, as lo:hi.
    #[arg(long, value_parser = parse_range)]
    pub pitch_range: Option<(f64, f64)>,
    /// Yaw sampler range in radians, as lo:hi.
    #[arg(long, value_parser = parse_range)]
    pub yaw_range: Option<(f64, f64)>,
    /// Head offsets are drawn from [-max, max]² pixels
    /// (default: 3 px scaled by resolution/64).
    #[arg(long)]
    pub head_offset_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (TOML, see the book for the schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's condition.
    #[arg(long)]
    pub condition: Option<ConditionId>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Matrix config (TOML): base train config plus conditions/pairs/seeds.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the matrix output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SwapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root holding the identity to swap.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub identity: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of swapped frames (filenames aligned to frame indices).
    #[arg(long)]
    pub swaps: PathBuf,
    /// Dataset root holding the source identity.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub identity: String,
    #[arg(long, value_enum, default_value_t = EstimatorKind::Centroid)]
    pub estimator: EstimatorKind,
    #[arg(long, value_enum, default_value_t = GroundTruth::EstimatorOnSource)]
    pub ground_truth: GroundTruth,
    /// Condition label recorded in the output.
    #[arg(long)]
    pub method: ConditionId,
    /// Individual (video/pair) label recorded in the output.
    #[arg(long)]
    pub individual: String,
    /// Output records CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-frame gaze CSV (for scatter plots).
    #[arg(long)]
    pub gaze_out: Option<PathBuf>,
    /// Also write the source frames' gaze rows (method "source").
    #[arg(long)]
    pub include_source_gazes: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Baseline records CSV.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Comma-separated list of method record CSVs.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<PathBuf>,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Exit nonzero when the mixed-model fit is degenerate or skipped.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Input records CSV (or gaze CSV for gaze_scatter).
    #[arg(long)]
    pub records: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "condition")]
    pub x_label: String,
    #[arg(long, default_value = "gaze error (degrees)")]
    pub y_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 64×64, full desk iteration counts.
    Desk,
    /// 32×32 miniature for smoke runs.
    Tiny,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Override phase-1 iterations.
    #[arg(long)]
    pub pretrain_iters: Option<u64>,
    /// Override phase-2 iterations.
    #[arg(long)]
    pub pair_iters: Option<u64>,
    /// Override frames per identity.
    #[arg(long)]
    pub frames: Option<u32>,
    /// Cap on the number of identity pairs trained.
    #[arg(long)]
    pub max_pairs: Option<usize>,
    /// Estimator used inside the training loss.
    #[arg(long, value_enum, default_value_t = EstimatorKind::Centroid)]
    pub train_estimator: EstimatorKind,
    /// Estimator used for evaluation (kept distinct from training by
    /// default, so the training signal cannot be graded by itself).
    #[arg(long, value_enum, default_value_t = EstimatorKind::Template)]
    pub eval_estimator: EstimatorKind,
    #[arg(long, value_enum, default_value_t = GroundTruth::EstimatorOnSource)]
    pub ground_truth: GroundTruth,
    /// Seeds for the matrix (one cell set per seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Matrix(args) => cmd_matrix(&args),
        Command::Swap(args) => cmd_swap(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Plot(args) => cmd_plot(&args),
        Command::ReproducePaperPipeline(args) => cmd_reproduce(&args, cli.reproducible),
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut gaze = GazeSamplerSpec::default();
    if let Some((lo, hi)) = args.pitch_range {
        gaze.pitch_min = lo;
        gaze.pitch_max = hi;
    }
    if let Some((lo, hi)) = args.yaw_range {
        gaze.yaw_min = lo;
        gaze.yaw_max = hi;
    }
    let spec = DatasetSpec {
        resolution: args.resolution,
        frames_per_identity: args.frames,
        gaze,
        head_offset_max: args
            .head_offset_max
            .unwrap_or(3.0 * args.resolution as f64 / 64.0),
        seed: args.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(dataset::derive_seed(args.seed, 0xD47A));
    let identities: Vec<SyntheticIdentity> =
        (0..args.identities).map(|_| SyntheticIdentity::sample(&mut rng, args.resolution)).collect();
    let summary = dataset::generate_dataset(&args.out, &identities, &spec)
        .context("dataset generation failed")?;
    println!(
        "dataset: {} identities x {} frames at {}x{} under {}",
        summary.identities.len(),
        summary.frames_per_identity,
        args.resolution,
        args.resolution,
        summary.root.display()
    );
    println!("content hash: {}", summary.content_hash);
    Ok(())
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    TrainConfig::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(&args.config)?;
    if let Some(c) = args.condition {
        cfg.condition = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let outcome = trainer::train(&cfg)?;
    println!("condition: {}", cfg.condition);
    println!("config hash: {}", cfg.config_hash());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("trainlog: {}", cfg.out_dir.join("trainlog.csv").display());
    println!("estimator failures: {}", outcome.log.estimator_failures);
    Ok(())
}

/// On-disk matrix config: the base train config plus the cell axes.
#[derive(serde::Serialize, serde::Deserialize)]
struct MatrixFile {
    base: TrainConfig,
    conditions: Vec<ConditionId>,
    pairs: Vec<PairSpec>,
    seeds: Vec<u64>,
    #[serde(default)]
    parallel: bool,
}

fn cmd_matrix(args: &MatrixArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let file: MatrixFile = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", args.config.display()))?;
    let out_dir = args.out.clone().unwrap_or_else(|| file.base.out_dir.join("matrix"));
    let cfg = MatrixConfig {
        base: file.base,
        conditions: file.conditions,
        pairs: file.pairs,
        seeds: file.seeds,
        out_dir,
        parallel: file.parallel,
    };
    let manifest = trainer::run_condition_matrix(&cfg)?;
    let ok = manifest.cells.iter().filter(|c| c.status == CellStatus::Ok).count();
    println!("matrix: {}/{} cells ok", ok, manifest.cells.len());
    println!("manifest: {}", cfg.out_dir.join("manifest.toml").display());
    for cell in manifest.cells.iter().filter(|c| c.status != CellStatus::Ok) {
        if let CellStatus::Failed { error } = &cell.status {
            eprintln!(
                "failed: {} {}-{} seed {}: {error}",
                cell.condition, cell.character, cell.original, cell.seed
            );
        }
    }
    Ok(())
}

fn cmd_swap(args: &SwapArgs) -> Result<()> {
    let n = trainer::generate_swaps(&args.checkpoint, &args.dataset, &args.identity, &args.out)?;
    println!("swapped {n} frames into {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let estimator = args.estimator.build();
    let out = stats::frame_errors(
        &args.swaps,
        &args.dataset,
        &args.identity,
        estimator.as_ref(),
        args.ground_truth,
        args.method,
        &args.individual,
    )?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    stats::write_records_csv(&args.out, &out.records)?;
    if let Some(gaze_out) = &args.gaze_out {
        let mut rows: Vec<GazeRow> = out
            .swap_gazes
            .iter()
            .map(|(f, g)| GazeRow {
                individual: args.individual.clone(),
                method: args.method.to_string(),
                frame_index: *f,
                gaze: *g,
            })
            .collect();
        if args.include_source_gazes {
            rows.extend(out.source_gazes.iter().map(|(f, g)| GazeRow {
                individual: args.individual.clone(),
                method: "source".into(),
                frame_index: *f,
                gaze: *g,
            }));
        }
        plot::write_gazes_csv(gaze_out, &rows)?;
    }
    println!(
        "evaluated {} frames ({} dropped) -> {}",
        out.records.len(),
        out.dropped,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut records = stats::read_records_csv(&args.baseline)?;
    for path in &args.methods {
        records.extend(stats::read_records_csv(path)?);
    }
    let report = stats::summarize(&records)?;
    std::fs::create_dir_all(&args.out)?;
    let text = report.to_text();
    std::fs::write(args.out.join("report.txt"), &text)?;
    report.write_csv(&args.out.join("report.csv"))?;
    print!("{text}");
    if args.strict && report.has_degenerate_fit() {
        bail!("degenerate mixed-model fit under --strict");
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let spec = PlotSpec {
        kind: args.kind,
        input: args.records.clone(),
        output: args.out.clone(),
        x_label: args.x_label.clone(),
        y_label: args.y_label.clone(),
    };
    plot::render(&spec)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Resolved settings for the one-command pipeline.
struct PipelinePlan {
    resolution: usize,
    frames: u32,
    pretrain_identities: usize,
    pair_identities: usize,
    max_pairs: usize,
    pretrain_iters: u64,
    pair_iters: u64,
    batch_size: usize,
    model: ModelConfig,
}

impl PipelinePlan {
    fn from_args(args: &ReproduceArgs) -> Self {
        let mut plan = match args.preset {
            Preset::Desk => Self {
                resolution: 64,
                frames: 120,
                pretrain_identities: 4,
                pair_identities: 4,
                max_pairs: 2,
                pretrain_iters: 2000,
                pair_iters: 1000,
                batch_size: 4,
                model: ModelConfig::default(),
            },
            Preset::Tiny => Self {
                resolution: 32,
                frames: 10,
                pretrain_identities: 3,
                pair_identities: 4,
                max_pairs: 2,
                pretrain_iters: 60,
                pair_iters: 40,
                batch_size: 2,
                model: ModelConfig { resolution: 32, latent_dim: 16, channels: [4, 6, 8, 10] },
            },
        };
        if let Some(v) = args.pretrain_iters {
            plan.pretrain_iters = v;
        }
        if let Some(v) = args.pair_iters {
            plan.pair_iters = v;
        }
        if let Some(v) = args.frames {
            plan.frames = v;
        }
        if let Some(v) = args.max_pairs {
            plan.max_pairs = v;
        }
        plan
    }
}

fn cmd_reproduce(args: &ReproduceArgs, reproducible: bool) -> Result<()> {
    let plan = PipelinePlan::from_args(args);
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let seeds = if args.seeds.is_empty() { vec![args.seed] } else { args.seeds.clone() };

    // 1. Datasets: a pooled pretrain set and a grouped pair set.
    eprintln!("[pipeline] generating datasets");
    let pretrain_root = out.join("data/pretrain");
    let pair_root = out.join("data/pairs");
    let base_spec = DatasetSpec {
        resolution: plan.resolution,
        frames_per_identity: plan.frames,
        gaze: GazeSamplerSpec::default(),
        head_offset_max: 3.0 * plan.resolution as f64 / 64.0,
        seed: dataset::derive_seed(args.seed, 21),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(dataset::derive_seed(args.seed, 20));
    let pool_ids: Vec<SyntheticIdentity> = (0..plan.pretrain_identities)
        .map(|_| SyntheticIdentity::sample(&mut rng, plan.resolution))
        .collect();
    dataset::generate_dataset(&pretrain_root, &pool_ids, &base_spec)?;
    let pair_ids: Vec<SyntheticIdentity> = (0..plan.pair_identities)
        .map(|_| SyntheticIdentity::sample(&mut rng, plan.resolution))
        .collect();
    let pair_spec =
        DatasetSpec { seed: dataset::derive_seed(args.seed, 22), ..base_spec.clone() };
    let pair_summary = dataset::generate_dataset(&pair_root, &pair_ids, &pair_spec)?;

    // Pairs: ordered pairings within two halves of the pair identities.
    let half = pair_summary.identities.len() / 2;
    let groups =
        vec![pair_summary.identities[..half].to_vec(), pair_summary.identities[half..].to_vec()];
    let mut pairs = dataset::enumerate_pairs(&groups);
    pairs.truncate(plan.max_pairs);

    // 2. Condition matrix.
    eprintln!("[pipeline] training the condition matrix ({} pairs, {} seeds)", pairs.len(), seeds.len());
    let base = TrainConfig {
        condition: ConditionId::Dfl,
        pretrain_iters: plan.pretrain_iters,
        pair_iters: plan.pair_iters,
        batch_size: plan.batch_size,
        pretrain_data: pretrain_root.clone(),
        pair_data: pair_root.clone(),
        out_dir: out.join("matrix"),
        model: plan.model,
        estimator: args.train_estimator,
        deterministic: false,
        ..Default::default()
    };
    std::fs::write(out.join("config.toml"), base.to_toml())?;
    let matrix_cfg = MatrixConfig {
        base,
        conditions: ConditionId::ALL.to_vec(),
        pairs: pairs.clone(),
        seeds,
        out_dir: out.join("matrix"),
        parallel: true,
    };
    let mut manifest = trainer::run_condition_matrix(&matrix_cfg)?;
    if !reproducible {
        manifest.generated_at = Some(format!(
            "{}",
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        ));
        manifest.write(&out.join("matrix/manifest.toml"))?;
    }

    // 3–4. Swaps and evaluation per cell.
    eprintln!("[pipeline] swapping and evaluating");
    let eval_estimator = args.eval_estimator.build();
    let records_dir = out.join("records");
    std::fs::create_dir_all(&records_dir)?;
    let mut per_condition: std::collections::BTreeMap<ConditionId, Vec<ExperimentRecord>> =
        Default::default();
    let mut gaze_rows: Vec<GazeRow> = Vec::new();
    let mut sources_done: std::collections::BTreeSet<String> = Default::default();
    let mut dropped_total = 0u64;
    for cell in manifest.cells.iter().filter(|c| c.status == CellStatus::Ok) {
        let swaps = cell.cell_dir.join("swaps");
        trainer::generate_swaps(&cell.final_checkpoint, &pair_root, &cell.original, &swaps)?;
        let label = format!("{}-{}", cell.character, cell.original);
        let fe = stats::frame_errors(
            &swaps,
            &pair_root,
            &cell.original,
            eval_estimator.as_ref(),
            args.ground_truth,
            cell.condition,
            &label,
        )?;
        dropped_total += fe.dropped;
        gaze_rows.extend(fe.swap_gazes.iter().map(|(f, g)| GazeRow {
            individual: label.clone(),
            method: cell.condition.to_string(),
            frame_index: *f,
            gaze: *g,
        }));
        if sources_done.insert(label.clone()) {
            gaze_rows.extend(fe.source_gazes.iter().map(|(f, g)| GazeRow {
                individual: label.clone(),
                method: "source".into(),
                frame_index: *f,
                gaze: *g,
            }));
        }
        per_condition.entry(cell.condition).or_default().extend(fe.records);
    }
    let mut all_records = Vec::new();
    for (condition, records) in &per_condition {
        stats::write_records_csv(&records_dir.join(format!("{condition}.csv")), records)?;
        all_records.extend(records.iter().cloned());
    }
    stats::write_records_csv(&records_dir.join("all.csv"), &all_records)?;
    plot::write_gazes_csv(&records_dir.join("gazes.csv"), &gaze_rows)?;

    // 5. Comparison report.
    eprintln!("[pipeline] comparing conditions");
    let report = stats::summarize(&all_records)?;
    let report_dir = out.join("report");
    std::fs::create_dir_all(&report_dir)?;
    std::fs::write(report_dir.join("report.txt"), report.to_text())?;
    report.write_csv(&report_dir.join("report.csv"))?;

    // 6. Figures.
    eprintln!("[pipeline] rendering plots");
    let plots = out.join("plots");
    for (kind, input, name) in [
        (PlotKind::BoxWhisker, records_dir.join("all.csv"), "box_whisker.svg"),
        (PlotKind::PerVideoBars, records_dir.join("all.csv"), "per_video_bars.svg"),
        (PlotKind::GazeScatter, records_dir.join("gazes.csv"), "gaze_scatter.svg"),
    ] {
        plot::render(&PlotSpec {
            kind,
            input,
            output: plots.join(name),
            x_label: if kind == PlotKind::GazeScatter { "pitch (rad)".into() } else { "condition".into() },
            y_label: if kind == PlotKind::GazeScatter { "yaw (rad)".into() } else { "gaze error (degrees)".into() },
        })?;
    }

    println!("pipeline complete under {}", out.display());
    println!("records: {}", records_dir.display());
    println!("report: {}", report_dir.join("report.txt").display());
    println!("plots: {}", plots.display());
    println!("dropped frames during eval: {dropped_total}");
    Ok(())
}
