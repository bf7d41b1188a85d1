use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mctrack::geo::CameraId;
use mctrack::losses::{excitation_schedule, gradient_check};
use mctrack::metrics::{evaluate, read_camera_csv, read_mot_csv, TrajectorySet, DEFAULT_IOU_THRESHOLD};
use mctrack::pipeline::{evaluate_against, load_sources, run_streams, write_outputs, PipelineConfig, PipelineError, PrecomputedProvider, ProviderKind, SourceConfig};
use mctrack::reid::{eval_track_reid, euclidean_distance_matrix, io as reid_io, k_reciprocal_rerank, LabeledTrack, RerankParams};
use mctrack::simkit::{gen_scenario, render_detections, write_scenario_files, EmbeddingOracle, Layout, NoiseProfile, ScenarioConfig};
use serde_json::json;

const GRADIENT_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "mctrack", version, about = "Multi-camera vehicle tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tracking pipeline described by a config file.
    Run(RunArgs),
    /// Generate a synthetic scenario directory.
    GenScenario(GenArgs),
    /// Score single-camera tracks against per-camera ground truth.
    EvalSct(EvalSctArgs),
    /// Score global tracks against global ground truth.
    EvalMct(EvalMctArgs),
    /// Track-level re-identification mAP and CMC.
    EvalReid(EvalReidArgs),
    /// Check loss gradients against finite differences.
    LossesCheck(LossesArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the simulated scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Pace frames at the camera rate and drop late ones.
    #[arg(long)]
    real_time: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Corridor,
    Grid,
}

#[derive(Args)]
struct GenArgs {
    /// Pipeline config with a simulated source; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cams: Option<usize>,
    #[arg(long)]
    vehicles: Option<usize>,
    /// Seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    /// Box jitter, pixels.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    miss_rate: Option<f64>,
    /// Expected false positives per frame.
    #[arg(long)]
    fp_rate: Option<f64>,
    /// Embedding noise.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct EvalSctArgs {
    /// A MOTChallenge gt file named `<camera>.csv`, or a directory of them.
    #[arg(long)]
    gt: PathBuf,
    /// Track CSV `camera,frame,track_id,x,y,w,h,conf`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
}

#[derive(Args)]
struct EvalMctArgs {
    /// Global CSV `camera,frame,id,x,y,w,h`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
}

#[derive(Args)]
struct EvalReidArgs {
    /// Embedding file, one row per query track.
    #[arg(long)]
    query: PathBuf,
    /// CSV `id,camera` per query row.
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    gallery_labels: PathBuf,
    #[arg(long)]
    rerank: bool,
    #[arg(long, default_value_t = 20)]
    k1: usize,
    #[arg(long, default_value_t = 6)]
    k2: usize,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
}

#[derive(Args)]
struct LossesArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Config errors exit with 2, everything else with 1.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::SourceMissing(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::GenScenario(a) => cmd_gen(a),
        Command::EvalSct(a) => cmd_eval_sct(a),
        Command::EvalMct(a) => cmd_eval_mct(a),
        Command::EvalReid(a) => cmd_eval_reid(a),
        Command::LossesCheck(a) => cmd_losses(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        match &mut cfg.source {
            SourceConfig::Simkit { scenario, .. } => scenario.seed = seed,
            SourceConfig::Files { .. } => return Err(config("--seed only applies to a simulated source")),
        }
    }
    if a.output.is_some() {
        cfg.output_dir = a.output;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.real_time |= a.real_time;
    cfg.validate()?;
    if cfg.provider == ProviderKind::External {
        return Err(config("the external provider is only available through the library API"));
    }

    let src = load_sources(&cfg)?;
    let report = run_streams(&src.topology, src.streams, &cfg, Arc::new(PrecomputedProvider))?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &report)?;
        info!("outputs written to {}", dir.display());
    }
    let s = report.summary();
    println!(
        "frames {} processed, {} dropped; {} tracks, {} identities; p99 tick latency {:.2} ms; {:.2} s wall, {} workers",
        report.frames_processed.values().sum::<u64>(),
        report.total_dropped(),
        s.concluded_tracks,
        report.identities.len(),
        s.latency_p99_ms,
        s.wall_time_s,
        s.workers
    );
    if let Some(gt) = &src.ground_truth {
        print_summary(&evaluate_against(gt, &report)?)?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let (mut scenario, mut noise, render_seed) = match &a.config {
        Some(p) => match PipelineConfig::load(p)?.source {
            SourceConfig::Simkit { scenario, noise, render_seed } => (scenario, noise, render_seed),
            SourceConfig::Files { .. } => return Err(config(format!("{} does not describe a simulated source", p.display()))),
        },
        None => (ScenarioConfig::default(), NoiseProfile::zero(), None),
    };
    if let Some(v) = a.seed {
        scenario.seed = v;
    }
    if let Some(v) = a.cams {
        scenario.n_cams = v;
    }
    if let Some(v) = a.vehicles {
        scenario.n_vehicles = v;
    }
    if let Some(v) = a.duration {
        scenario.duration_s = v;
    }
    if let Some(v) = a.fps {
        scenario.fps = v;
    }
    if let Some(l) = a.layout {
        scenario.layout = match l {
            LayoutArg::Corridor => Layout::Corridor,
            LayoutArg::Grid => Layout::Grid,
        };
    }
    if let Some(v) = a.jitter {
        noise.box_jitter_std = v;
    }
    if let Some(v) = a.miss_rate {
        noise.miss_rate = v;
    }
    if let Some(v) = a.fp_rate {
        noise.false_positive_rate = v;
    }
    if let Some(v) = a.sigma {
        noise.embedding_noise_std = v;
    }
    noise.validate().map_err(config)?;
    let (s, gt) = gen_scenario(&scenario).map_err(config)?;
    let oracle = EmbeddingOracle::for_scenario(&s);
    let rendered = render_detections(&gt, &oracle, &noise, render_seed.unwrap_or(scenario.seed)).map_err(runtime)?;
    write_scenario_files(&a.out, &s, &gt, &rendered).map_err(runtime)?;
    println!(
        "wrote {} cameras, {} vehicles, {} ground-truth boxes to {}",
        s.topology.len(),
        s.vehicles.len(),
        gt.num_boxes(),
        a.out.display()
    );
    Ok(())
}

fn open(p: &Path) -> Result<BufReader<File>, Failure> {
    File::open(p).map(BufReader::new).map_err(|e| config(format!("cannot open {}: {e}", p.display())))
}

fn read_mot_gt(path: &Path) -> Result<TrajectorySet, Failure> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| config(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut rows = Vec::new();
    for f in &files {
        let cam = CameraId::new(f.file_stem().and_then(|s| s.to_str()).ok_or_else(|| config(format!("bad file name {}", f.display())))?);
        let set = read_mot_csv(open(f)?, &cam).map_err(|e| config(format!("{}: {e}", f.display())))?;
        for id in set.ids() {
            for ((c, frame), b) in set.boxes(id).into_iter().flatten() {
                rows.push((id, c.clone(), *frame, *b));
            }
        }
    }
    // per-camera files reuse ids, so key them by camera before merging
    let mut out = TrajectorySet::new();
    let mut keys = std::collections::BTreeMap::new();
    for (id, cam, frame, b) in rows {
        let next = keys.len() as u64 + 1;
        let key = *keys.entry((cam.clone(), id)).or_insert(next);
        out.insert(key, cam, frame, b).map_err(runtime)?;
    }
    Ok(out)
}

fn print_summary(m: &mctrack::metrics::MotSummary) -> Result<(), Failure> {
    print!("{}", m.table());
    println!("{}", serde_json::to_string(m).map_err(runtime)?);
    Ok(())
}

fn cmd_eval_sct(a: EvalSctArgs) -> Result<(), Failure> {
    let gt = read_mot_gt(&a.gt)?;
    let pred = read_camera_csv(open(&a.pred)?).map_err(|e| config(format!("{}: {e}", a.pred.display())))?;
    print_summary(&evaluate(&gt, &pred.split_by_camera(), a.iou))
}

fn cmd_eval_mct(a: EvalMctArgs) -> Result<(), Failure> {
    let gt = read_camera_csv(open(&a.gt)?).map_err(|e| config(format!("{}: {e}", a.gt.display())))?;
    let pred = read_camera_csv(open(&a.pred)?).map_err(|e| config(format!("{}: {e}", a.pred.display())))?;
    print_summary(&evaluate(&gt, &pred, a.iou))
}

fn read_labels(p: &Path) -> Result<Vec<LabeledTrack>, Failure> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(open(p)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| config(format!("{}: {e}", p.display())))?;
        let bad = || config(format!("{} line {}: expected `id,camera`", p.display(), i + 1));
        if rec.len() < 2 {
            return Err(bad());
        }
        let id = rec[0].parse().map_err(|_| bad())?;
        out.push(LabeledTrack { id, camera: CameraId::new(&rec[1]) });
    }
    Ok(out)
}

fn cmd_eval_reid(a: EvalReidArgs) -> Result<(), Failure> {
    let load = |p: &Path| reid_io::load_embeddings(p).map_err(|e| config(format!("{}: {e}", p.display())));
    let (_, q) = load(&a.query)?;
    let (_, g) = load(&a.gallery)?;
    let (ql, gl) = (read_labels(&a.query_labels)?, read_labels(&a.gallery_labels)?);
    if ql.len() != q.len() || gl.len() != g.len() {
        return Err(config("label rows must match embedding rows"));
    }
    let dist = if a.rerank {
        k_reciprocal_rerank(&q, &g, RerankParams { k1: a.k1, k2: a.k2, lambda: a.lambda }).map_err(config)?
    } else {
        euclidean_distance_matrix(&q, &g)
    };
    let s = eval_track_reid(&ql, &gl, &dist).map_err(runtime)?;
    println!("{:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4}", "mAP", "CMC-1", "CMC-5", s.map, s.cmc1, s.cmc5);
    println!("{}", json!({ "map": s.map, "cmc1": s.cmc1, "cmc5": s.cmc5 }));
    Ok(())
}

fn cmd_losses(a: LossesArgs) -> Result<(), Failure> {
    if a.instances == 0 {
        return Err(config("--instances must be positive"));
    }
    let r = gradient_check(a.instances, a.seed);
    let sched: Vec<f64> = [0, 50, 100].iter().map(|&m| excitation_schedule(m, 100)).collect::<Result<_, _>>().map_err(runtime)?;
    println!("instances {}", r.instances);
    println!("triplet max relative error {:.3e}", r.triplet_max_rel_err);
    println!("cross entropy max relative error {:.3e}", r.ce_max_rel_err);
    println!("excitation schedule at 0, M/2, M: {} {} {}", sched[0], sched[1], sched[2]);
    if r.triplet_max_rel_err > GRADIENT_TOLERANCE || r.ce_max_rel_err > GRADIENT_TOLERANCE || sched != [1.0, 0.5, 0.0] {
        return Err(runtime(format!("gradient check above {GRADIENT_TOLERANCE:e}")));
    }
    Ok(())
}
