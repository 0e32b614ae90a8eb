//! `cmha`: synthesize scene pairs, register them, score predictions and run gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cmha_core::attention::StackWeights;
use cmha_core::geometry::metrics::{evaluate_pair, GroundTruth};
use cmha_core::io::{self, SceneFiles};
use cmha_core::losses::gradcheck::{run_all, GradcheckConfig};
use cmha_core::pipeline::{register_with_features, FeatureProvider, PairReport, Registration, StageTimings};
use cmha_core::synth::{generate_scene, SceneConfig, SynthFeatureProvider};
use cmha_core::{CorrespondenceSet, Error, Level, MetricsReport, PipelineConfig, RigidTransform, RunReport};

const TRANSFORM_JSON: &str = "transform.json";
const CORRESPONDENCES_CSV: &str = "correspondences.csv";
const REPORT_JSON: &str = "report.json";

#[derive(Parser)]
#[command(name = "cmha", version, about = "Coarse-to-fine point cloud registration with hybrid attention")]
struct Cli {
    /// Worker threads for the rayon pool (defaults to all cores).
    #[arg(long, env = "CMHA_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene directories.
    Synth(SynthArgs),
    /// Register one scene, a directory of scenes, or a pair of PLY files.
    Register(RegisterArgs),
    /// Score a predictions directory against a scenes directory.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene configuration JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; scene `k` uses `seed + k`. Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Requested overlap fraction, overriding the config.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    /// A scene directory (src.ply, tgt.ply, meta.json and optionally gt.json).
    #[arg(long, conflicts_with_all = ["scenes", "src", "tgt"])]
    scene: Option<PathBuf>,
    /// A directory whose subdirectories are scenes; each gets its own output subdirectory.
    #[arg(long, conflicts_with_all = ["src", "tgt"])]
    scenes: Option<PathBuf>,
    #[arg(long, requires = "tgt")]
    src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    tgt: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the stand-in attention weights, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_coarse: Option<usize>,
    #[arg(long)]
    k_dense: Option<usize>,
    /// Match raw superpoint features without the attention stack.
    #[arg(long)]
    no_stack: bool,
    /// Zero the image-patch features fed to aggregation attention.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// RMSE bound (meters) below which a pair counts as registered.
    #[arg(long, default_value_t = 0.2)]
    rr_threshold: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    n_p: usize,
    #[arg(long, default_value_t = 16)]
    n_q: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Scales analytic gradients by `1 + f` to confirm the check can fail.
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt_gradient: f64,
}

/// Input problems exit with 2, failures while running with 1.
enum Failure {
    Input(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Read { .. } | Error::Parse { .. } | Error::Json(_) | Error::InvalidArgument(_) => {
                Failure::Input(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Register(a) => register(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> CliResult<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => io::read_json::<SceneConfig>(p)?,
        None => SceneConfig::default(),
    };
    if let Some(o) = a.overlap {
        cfg.overlap_fraction = o;
    }
    let first = a.seed.unwrap_or(cfg.seed);
    for k in 0..a.count as u64 {
        let scene_cfg = SceneConfig {
            seed: first + k,
            ..cfg
        };
        let scene = generate_scene(&scene_cfg)?;
        let dir = a.out.join(format!("scene_{:06}", scene_cfg.seed));
        io::export_scene(&dir, &scene)?;
        log::info!("{}: measured overlap {:.3}", dir.display(), scene.measured_overlap);
    }
    Ok(ExitCode::SUCCESS)
}

impl PipelineArgs {
    fn load(&self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| Error::Read {
                    path: p.clone(),
                    source,
                })?;
                PipelineConfig::from_json(&text)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k_coarse {
            cfg.matching.k_coarse = k;
        }
        if let Some(k) = self.k_dense {
            cfg.matching.k_dense = k;
        }
        cfg.use_hybrid_stack &= !self.no_stack;
        cfg.use_image_features &= !self.no_images;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Written next to the transform for every registered pair.
#[derive(Serialize)]
struct RegisterReport {
    name: String,
    inlier_count: usize,
    correspondences: usize,
    sinkhorn_residual: f64,
    timings: StageTimings,
    /// Present when the input had a ground-truth transform.
    metrics: Option<MetricsReport>,
}

fn write_outputs(out: &Path, reg: &Registration<f64>, report: &RegisterReport) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|source| Error::Write {
        path: out.to_path_buf(),
        source,
    })?;
    io::write_transform(&out.join(TRANSFORM_JSON), &reg.transform)?;
    io::write_correspondences(&out.join(CORRESPONDENCES_CSV), &reg.dense.correspondences)?;
    io::write_json(&out.join(REPORT_JSON), report)?;
    Ok(())
}

fn register_scene(dir: &Path, out: &Path, cfg: &PipelineConfig, weights: &StackWeights<f64>) -> CliResult<PairReport> {
    let files = io::import_scene(dir)?;
    let mut cfg = *cfg;
    cfg.features = files.meta.features();
    cfg.validate()?;
    let (sf, tf) = files.cloud_features().map_err(|e| Failure::from(e.in_stage("feature extraction")))?;
    let reg = register_with_features(files.src.points(), files.tgt.points(), &sf, &tf, &cfg, weights)?;
    let metrics = score(&files, &reg.transform, &reg.dense.correspondences, &cfg)?;
    let name = scene_name(dir);
    let report = RegisterReport {
        name: name.clone(),
        inlier_count: reg.selection.inlier_count,
        correspondences: reg.dense.correspondences.len(),
        sinkhorn_residual: reg.sinkhorn_residual,
        timings: reg.timings,
        metrics: Some(metrics),
    };
    write_outputs(out, &reg, &report)?;
    Ok(PairReport {
        name,
        metrics,
        timings: reg.timings,
    })
}

fn scene_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Metrics against the scene's ground truth; gt correspondences and the
/// overlap table come from regenerating the scene from its metadata.
fn score(
    files: &SceneFiles,
    estimate: &RigidTransform<f64>,
    dense: &CorrespondenceSet<f64>,
    cfg: &PipelineConfig,
) -> CliResult<MetricsReport> {
    let scene = generate_scene(&files.meta)?;
    if scene.src.points() != files.src.points() || scene.tgt.points() != files.tgt.points() {
        return Err(Failure::Input(
            "scene files do not match the scene regenerated from meta.json".to_owned(),
        ));
    }
    let gt_pairs = scene.gt_correspondences.index_pairs();
    let gt = GroundTruth {
        transform: &files.gt,
        correspondences: &gt_pairs,
        overlap: None,
    };
    Ok(evaluate_pair(
        estimate,
        dense,
        None,
        files.src.points(),
        files.tgt.points(),
        &gt,
        &cfg.thresholds,
    )?)
}

fn register(a: RegisterArgs) -> CliResult<ExitCode> {
    let cfg = a.pipeline.load()?;
    let weights = StackWeights::init(&cfg.stack, cfg.seed)?;
    if let Some(dir) = &a.scene {
        register_scene(dir, &a.out, &cfg, &weights)?;
    } else if let Some(root) = &a.scenes {
        let mut pairs = Vec::new();
        for dir in io::list_subdirs(root)? {
            let out = a.out.join(scene_name(&dir));
            pairs.push(register_scene(&dir, &out, &cfg, &weights)?);
        }
        io::write_json(&a.out.join(REPORT_JSON), &RunReport::new(cfg, pairs))?;
    } else if let (Some(src), Some(tgt)) = (&a.src, &a.tgt) {
        let src = io::read_cloud::<f64>(src)?;
        let tgt = io::read_cloud::<f64>(tgt)?;
        let provider = SynthFeatureProvider { cfg: cfg.features };
        let sf = provider.extract(src.points(), 0).map_err(|e| e.in_stage("feature extraction"))?;
        let tf = provider.extract(tgt.points(), 1).map_err(|e| e.in_stage("feature extraction"))?;
        let reg = register_with_features(src.points(), tgt.points(), &sf, &tf, &cfg, &weights)?;
        let report = RegisterReport {
            name: "pair".to_owned(),
            inlier_count: reg.selection.inlier_count,
            correspondences: reg.dense.correspondences.len(),
            sinkhorn_residual: reg.sinkhorn_residual,
            timings: reg.timings,
            metrics: None,
        };
        write_outputs(&a.out, &reg, &report)?;
    } else {
        return Err(Failure::Input("give --scene, --scenes, or both --src and --tgt".to_owned()));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> CliResult<ExitCode> {
    let scenes = io::list_subdirs(&a.scenes)?;
    let preds = io::list_subdirs(&a.predictions)?;
    if scenes.len() != preds.len() {
        return Err(Failure::Input(format!(
            "{} scenes but {} predictions",
            scenes.len(),
            preds.len()
        )));
    }
    let mut cfg = PipelineConfig::default();
    cfg.thresholds.rr_rmse = a.rr_threshold;
    let mut pairs = Vec::new();
    for (scene_dir, pred_dir) in scenes.iter().zip(&preds) {
        let name = scene_name(scene_dir);
        if name != scene_name(pred_dir) {
            return Err(Failure::Input(format!(
                "prediction {} does not match scene {name}",
                pred_dir.display()
            )));
        }
        let files = io::import_scene(scene_dir)?;
        let estimate = io::read_transform::<f64>(&pred_dir.join(TRANSFORM_JSON))?;
        let corr_path = pred_dir.join(CORRESPONDENCES_CSV);
        let dense = if corr_path.exists() {
            io::read_correspondences(&corr_path, Level::Dense)?
        } else {
            CorrespondenceSet::empty(Level::Dense)
        };
        let metrics = score(&files, &estimate, &dense, &cfg)?;
        let timings = read_timings(&pred_dir.join(REPORT_JSON));
        pairs.push(PairReport { name, metrics, timings });
    }
    let report = RunReport::new(cfg, pairs);
    match &a.out {
        Some(p) => io::write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.to_string()))?),
    }
    Ok(ExitCode::SUCCESS)
}

/// Timings recorded by `register`, or zeros when the prediction carries none.
fn read_timings(path: &Path) -> StageTimings {
    io::read_json::<serde_json::Value>(path)
        .ok()
        .and_then(|v| serde_json::from_value(v.get("timings")?.clone()).ok())
        .unwrap_or_default()
}

fn gradcheck(a: GradcheckArgs) -> CliResult<ExitCode> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        n_p: a.n_p,
        n_q: a.n_q,
        d: a.d,
        corrupt: a.corrupt_gradient,
        ..GradcheckConfig::default()
    };
    let results = run_all(&cfg)?;
    println!("{:<24} {:>8} {:>14} {:>6}", "loss", "entries", "max_rel_err", "pass");
    for r in &results {
        println!(
            "{:<24} {:>8} {:>14.3e} {:>6}",
            r.loss,
            r.entries,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        let (p, i, j) = r.worst;
        eprintln!(
            "{}: worst entry (patch {p}, row {i}, col {j}) analytic {:.6e} numeric {:.6e}",
            r.loss, r.analytic, r.numeric
        );
    }
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
