//! Orchestration: a source role releasing frames tick by tick into per-camera
//! queues, one batcher role that filters detections and calls the embedding
//! provider, camera workers owning the single-camera trackers, and the
//! supervisor draining concluded tracks into multi-camera association.
//!
//! Supervisor ticks follow stream time, not wall time. The tick at time T runs
//! once every camera has processed its frames up to T and sees exactly the
//! tracks concluded at or before T, so offline output does not depend on the
//! number of workers or on scheduling.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{CameraId, CameraTopology, GeoError};
use crate::ingest::{
    batch_frames, frames_from_rows, preprocess_frame, read_detection_csv, FrameRecord, IngestError, TickBatch,
    DEFAULT_ALPHA_MIN, DEFAULT_NMS_IOU,
};
use crate::metrics::{evaluate, MetricsError, MotSummary, TrajectorySet, DEFAULT_IOU_THRESHOLD};
use crate::mct::{identity_summaries, write_global_csv, write_summary_json, IdentitySummary, MctError, MctParams, MultiCameraTrack, Supervisor};
use crate::reid::{io as reid_io, Embedding, ReidError, TemporalScorer};
use crate::sct::{write_track_csv, ConcludedTrack, TrackError, Tracker, TrackerParams};
use crate::simkit::{gen_scenario, render_detections, EmbeddingOracle, GroundTruth, NoiseProfile, ScenarioConfig, SimError};

pub const DEFAULT_TICK_PERIOD_S: f64 = 2.0;
pub const DEFAULT_STALL_TIMEOUT_S: f64 = 5.0;
/// Frame queues hold this many seconds of frames per camera.
pub const QUEUE_SECONDS: f64 = 2.0;
pub const THREADS_ENV: &str = "MCT_THREADS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("source missing: {}", .0.display())]
    SourceMissing(PathBuf),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("{0} role panicked")]
    RolePanicked(&'static str),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Mct(#[from] MctError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Reid(#[from] ReidError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceConfig {
    /// `dir/det/<camera>.csv` detection rows and, for the file provider,
    /// row-aligned `dir/emb/<camera>.bin` embeddings.
    Files {
        dir: PathBuf,
        #[serde(default)]
        num_frames: Option<u64>,
    },
    /// A scenario generated and rendered in memory.
    Simkit {
        #[serde(default)]
        scenario: ScenarioConfig,
        #[serde(default)]
        noise: NoiseProfile,
        /// Defaults to the scenario seed.
        #[serde(default)]
        render_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Oracle,
    File,
    /// Supplied by the caller through [`run_with_provider`].
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Required for file sources; simulated scenarios bring their own.
    pub topology: Option<PathBuf>,
    pub source: SourceConfig,
    pub provider: ProviderKind,
    pub tick_period_s: f64,
    pub alpha_min: f64,
    pub nms_iou: f64,
    pub tracker: TrackerParams,
    pub mct: MctParams,
    pub real_time: bool,
    /// Worker threads; defaults to the available parallelism. Capped by `MCT_THREADS`.
    pub workers: Option<usize>,
    /// A source silent for this long is treated as ended.
    pub stall_timeout_s: f64,
    /// Learned temporal scorer weights; uniform aggregation when absent.
    pub scorer: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            topology: None,
            source: SourceConfig::Simkit { scenario: ScenarioConfig::default(), noise: NoiseProfile::zero(), render_seed: None },
            provider: ProviderKind::Oracle,
            tick_period_s: DEFAULT_TICK_PERIOD_S,
            alpha_min: DEFAULT_ALPHA_MIN,
            nms_iou: DEFAULT_NMS_IOU,
            tracker: TrackerParams::default(),
            mct: MctParams::default(),
            real_time: false,
            workers: None,
            stall_timeout_s: DEFAULT_STALL_TIMEOUT_S,
            scorer: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config. Relative input paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.topology.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.scorer.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        if let SourceConfig::Files { dir, .. } = &mut cfg.source {
            resolve(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let unit = 0.0..=1.0;
        if !(self.tick_period_s > 0.0 && self.tick_period_s.is_finite()) {
            return bad(format!("tick_period_s {} must be positive", self.tick_period_s));
        }
        if !unit.contains(&self.alpha_min) {
            return bad(format!("alpha_min {} outside [0, 1]", self.alpha_min));
        }
        if !unit.contains(&self.nms_iou) {
            return bad(format!("nms_iou {} outside [0, 1]", self.nms_iou));
        }
        if !(self.stall_timeout_s > 0.0) {
            return bad(format!("stall_timeout_s {} must be positive", self.stall_timeout_s));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        let t = &self.tracker;
        if t.n_init == 0 || t.max_age == 0 || t.gallery_budget == 0 {
            return bad("tracker n_init, max_age and gallery_budget must be positive".into());
        }
        if !(0.0..=2.0).contains(&t.matching_threshold) || !unit.contains(&t.max_iou_distance) || !(t.gating_threshold > 0.0) {
            return bad(format!("tracker thresholds out of range: {t:?}"));
        }
        self.mct.validate().map_err(PipelineError::Config)?;
        match (&self.source, self.provider) {
            (SourceConfig::Files { .. }, ProviderKind::Oracle) => bad("the oracle provider needs a simkit source".into()),
            (SourceConfig::Simkit { .. }, ProviderKind::File) => bad("the file provider needs a files source".into()),
            (SourceConfig::Files { .. }, _) if self.topology.is_none() => bad("a files source needs a topology path".into()),
            _ => Ok(()),
        }
    }
}

/// The batching service's inference step: one embedding per detection of
/// every frame in the batch, in request order.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, batch: &TickBatch) -> Result<Vec<Vec<Embedding>>>;
}

/// Returns embeddings already attached to the frames, as produced by the
/// simulator's oracle or read from embedding files.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrecomputedProvider;

impl EmbeddingProvider for PrecomputedProvider {
    fn embed(&self, batch: &TickBatch) -> Result<Vec<Vec<Embedding>>> {
        batch
            .frames
            .iter()
            .map(|f| match &f.embeddings {
                Some(e) => Ok(e.clone()),
                None if f.detections.is_empty() => Ok(Vec::new()),
                None => Err(PipelineError::Provider(format!("{} frame {} has no embeddings", f.camera, f.frame_index))),
            })
            .collect()
    }
}

/// Wraps a provider and sleeps before every call.
#[derive(Debug, Clone)]
pub struct SlowProvider<P> {
    pub inner: P,
    pub delay: Duration,
}

impl<P: EmbeddingProvider> EmbeddingProvider for SlowProvider<P> {
    fn embed(&self, batch: &TickBatch) -> Result<Vec<Vec<Embedding>>> {
        thread::sleep(self.delay);
        self.inner.embed(batch)
    }
}

/// Camera network, per-camera frame streams and, for simulated sources, the
/// ground truth behind them.
#[derive(Debug, Clone)]
pub struct LoadedSources {
    pub topology: CameraTopology,
    pub streams: BTreeMap<CameraId, Vec<FrameRecord>>,
    pub ground_truth: Option<GroundTruth>,
}

pub fn load_sources(cfg: &PipelineConfig) -> Result<LoadedSources> {
    match &cfg.source {
        SourceConfig::Simkit { scenario, noise, render_seed } => {
            if cfg.topology.is_some() {
                warn!("simulated source: ignoring the configured topology path");
            }
            let (s, gt) = gen_scenario(scenario)?;
            let oracle = EmbeddingOracle::for_scenario(&s);
            let rendered = render_detections(&gt, &oracle, noise, render_seed.unwrap_or(scenario.seed))?;
            let streams = rendered.into_iter().map(|(c, r)| (c, r.frames)).collect();
            Ok(LoadedSources { topology: s.topology, streams, ground_truth: Some(gt) })
        }
        SourceConfig::Files { dir, num_frames } => {
            let topo_path = cfg.topology.as_ref().ok_or_else(|| PipelineError::Config("a files source needs a topology path".into()))?;
            if !topo_path.exists() {
                return Err(PipelineError::SourceMissing(topo_path.clone()));
            }
            let topology = CameraTopology::load(topo_path)?;
            let mut rows = BTreeMap::new();
            for cam in topology.cameras() {
                let p = dir.join("det").join(format!("{}.csv", cam.id));
                let f = File::open(&p).map_err(|_| PipelineError::SourceMissing(p.clone()))?;
                rows.insert(cam.id.clone(), read_detection_csv(std::io::BufReader::new(f))?);
            }
            let n = num_frames.unwrap_or_else(|| rows.values().flatten().map(|r| r.frame + 1).max().unwrap_or(0));
            let mut streams = BTreeMap::new();
            for cam in topology.cameras() {
                let embs = if cfg.provider == ProviderKind::File {
                    let p = dir.join("emb").join(format!("{}.bin", cam.id));
                    if !p.exists() {
                        return Err(PipelineError::SourceMissing(p));
                    }
                    Some(reid_io::load_embeddings(&p)?.1)
                } else {
                    None
                };
                let frames = frames_from_rows(&cam.id, cam.fps, &rows[&cam.id], embs.as_deref(), n)?;
                streams.insert(cam.id.clone(), frames);
            }
            Ok(LoadedSources { topology, streams, ground_truth: None })
        }
    }
}

/// Everything a run produced, plus timing and queue statistics.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub workers: usize,
    pub frames_emitted: BTreeMap<CameraId, u64>,
    pub frames_processed: BTreeMap<CameraId, u64>,
    pub dropped_frames: BTreeMap<CameraId, u64>,
    /// Per frame tick: time from release by the source until every frame of
    /// the tick went through its tracker.
    pub tick_latencies_ms: Vec<f64>,
    pub supervisor_latencies_ms: Vec<f64>,
    /// Sorted by camera and track id.
    pub concluded: Vec<ConcludedTrack>,
    /// Sorted by global id.
    pub identities: Vec<MultiCameraTrack>,
    pub wall_time_s: f64,
}

/// Upper bucket edges of [`RunReport::latency_histogram`], in ms.
pub const LATENCY_BUCKETS_MS: [f64; 10] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];

fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl RunReport {
    /// Nearest-rank percentile of the tick latencies.
    pub fn latency_percentile_ms(&self, q: f64) -> f64 {
        percentile(&self.tick_latencies_ms, q)
    }

    pub fn p99_latency_ms(&self) -> f64 {
        self.latency_percentile_ms(99.0)
    }

    /// Counts per bucket of [`LATENCY_BUCKETS_MS`], plus a final overflow bucket.
    pub fn latency_histogram(&self) -> Vec<u64> {
        let mut counts = vec![0; LATENCY_BUCKETS_MS.len() + 1];
        for &x in &self.tick_latencies_ms {
            let i = LATENCY_BUCKETS_MS.iter().position(|&b| x <= b).unwrap_or(LATENCY_BUCKETS_MS.len());
            counts[i] += 1;
        }
        counts
    }

    pub fn total_dropped(&self) -> u64 {
        self.dropped_frames.values().sum()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            workers: self.workers,
            wall_time_s: self.wall_time_s,
            frames_emitted: self.frames_emitted.iter().map(|(c, n)| (c.to_string(), *n)).collect(),
            frames_processed: self.frames_processed.iter().map(|(c, n)| (c.to_string(), *n)).collect(),
            dropped_frames: self.dropped_frames.iter().map(|(c, n)| (c.to_string(), *n)).collect(),
            ticks: self.tick_latencies_ms.len(),
            latency_p50_ms: self.latency_percentile_ms(50.0),
            latency_p99_ms: self.p99_latency_ms(),
            latency_max_ms: self.tick_latencies_ms.iter().copied().fold(0.0, f64::max),
            latency_bucket_edges_ms: LATENCY_BUCKETS_MS.to_vec(),
            latency_histogram: self.latency_histogram(),
            supervisor_ticks: self.supervisor_latencies_ms.len(),
            supervisor_p99_ms: percentile(&self.supervisor_latencies_ms, 99.0),
            concluded_tracks: self.concluded.len(),
            identities: identity_summaries(&self.identities),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub workers: usize,
    pub wall_time_s: f64,
    pub frames_emitted: BTreeMap<String, u64>,
    pub frames_processed: BTreeMap<String, u64>,
    pub dropped_frames: BTreeMap<String, u64>,
    pub ticks: usize,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_max_ms: f64,
    pub latency_bucket_edges_ms: Vec<f64>,
    pub latency_histogram: Vec<u64>,
    pub supervisor_ticks: usize,
    pub supervisor_p99_ms: f64,
    pub concluded_tracks: usize,
    pub identities: Vec<IdentitySummary>,
}

/// Writes `sct_tracks.csv`, `global_tracks.csv`, `identities.json` and `report.json`.
/// Only `report.json` carries timings; the other files are deterministic.
pub fn write_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("sct_tracks.csv"))?);
    write_track_csv(&mut w, &report.concluded)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("global_tracks.csv"))?);
    write_global_csv(&mut w, &report.identities)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("identities.json"))?);
    write_summary_json(&mut w, &report.identities)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &report.summary())?;
    w.flush()?;
    Ok(())
}

/// Runs with the provider named in the config. External providers need
/// [`run_with_provider`].
pub fn run(cfg: &PipelineConfig) -> Result<RunReport> {
    match cfg.provider {
        ProviderKind::Oracle | ProviderKind::File => run_with_provider(cfg, Arc::new(PrecomputedProvider)),
        ProviderKind::External => {
            Err(PipelineError::Config("the external provider must be supplied by the embedding application".into()))
        }
    }
}

pub fn run_with_provider(cfg: &PipelineConfig, provider: Arc<dyn EmbeddingProvider>) -> Result<RunReport> {
    cfg.validate()?;
    let src = load_sources(cfg)?;
    let report = run_streams(&src.topology, src.streams, cfg, provider)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &report)?;
    }
    Ok(report)
}

/// Predicted trajectories keyed by global id, over all cameras.
pub fn identity_trajectories(identities: &[MultiCameraTrack]) -> Result<TrajectorySet> {
    let mut out = TrajectorySet::new();
    for ident in identities {
        for m in &ident.members {
            for (f, d) in &m.boxes {
                out.insert(ident.global_id, m.camera.clone(), *f, d.tlwh())?;
            }
        }
    }
    Ok(out)
}

/// Single-camera tracks keyed by track id; ids are camera-local, so score
/// them after [`TrajectorySet::split_by_camera`].
pub fn track_trajectories(tracks: &[ConcludedTrack]) -> Result<TrajectorySet> {
    let mut out = TrajectorySet::new();
    for t in tracks {
        for (f, d) in &t.boxes {
            out.insert(t.track_id, t.camera.clone(), *f, d.tlwh())?;
        }
    }
    Ok(out)
}

/// Multi-camera MOTA and IDF1 of a run against simulator ground truth.
pub fn evaluate_against(gt: &GroundTruth, report: &RunReport) -> Result<MotSummary> {
    Ok(evaluate(&gt.trajectories()?, &identity_trajectories(&report.identities)?, DEFAULT_IOU_THRESHOLD))
}

/// Worker count: the configured or available parallelism, capped by
/// `MCT_THREADS` and by the number of cameras.
pub fn effective_workers(requested: Option<usize>, n_cameras: usize) -> usize {
    let mut n = requested.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    if let Some(cap) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&c| c > 0) {
        n = n.min(cap);
    }
    n.clamp(1, n_cameras.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Overflow {
    Block,
    DropOldest,
}

struct Envelope {
    tick: u64,
    frame: FrameRecord,
    released: Instant,
}

struct QueueState {
    queues: Vec<VecDeque<Envelope>>,
    dropped: Vec<u64>,
    closed: bool,
    aborted: bool,
}

/// Bounded per-camera frame queues behind one lock. A tick's frames are
/// pushed atomically, so any tick visible to the batcher is complete.
struct FrameQueues {
    state: Mutex<QueueState>,
    cv: Condvar,
    capacity: usize,
    overflow: Overflow,
}

impl FrameQueues {
    fn new(n: usize, capacity: usize, overflow: Overflow) -> Self {
        FrameQueues {
            state: Mutex::new(QueueState {
                queues: (0..n).map(|_| VecDeque::with_capacity(capacity)).collect(),
                dropped: vec![0; n],
                closed: false,
                aborted: false,
            }),
            cv: Condvar::new(),
            capacity: capacity.max(1),
            overflow,
        }
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// False once the run is aborted.
    fn push_tick(&self, items: Vec<(usize, Envelope)>) -> bool {
        let mut s = self.lock();
        if self.overflow == Overflow::Block {
            while !s.aborted && items.iter().any(|(c, _)| s.queues[*c].len() >= self.capacity) {
                s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
            }
        }
        if s.aborted {
            return false;
        }
        for (c, e) in items {
            if s.queues[c].len() >= self.capacity {
                s.queues[c].pop_front();
                s.dropped[c] += 1;
            }
            s.queues[c].push_back(e);
        }
        self.cv.notify_all();
        true
    }

    fn close(&self) {
        self.lock().closed = true;
        self.cv.notify_all();
    }

    fn abort(&self) {
        let mut s = self.lock();
        s.aborted = true;
        s.queues.iter_mut().for_each(VecDeque::clear);
        self.cv.notify_all();
    }

    /// Pops the frames of the oldest queued tick; `None` at end of stream.
    fn next_tick(&self, stall: Duration) -> Option<Vec<(usize, Envelope)>> {
        let mut s = self.lock();
        let mut deadline = Instant::now() + stall;
        loop {
            if s.aborted {
                return None;
            }
            if let Some(t) = s.queues.iter().filter_map(|q| q.front().map(|e| e.tick)).min() {
                let mut out = Vec::new();
                for (c, q) in s.queues.iter_mut().enumerate() {
                    if let Some(e) = q.pop_front_if(|e| e.tick == t) {
                        out.push((c, e));
                    }
                }
                self.cv.notify_all();
                return Some(out);
            }
            if s.closed {
                return None;
            }
            let now = Instant::now();
            if now >= deadline {
                warn!("no frames for {:.1} s; treating the source as ended", stall.as_secs_f64());
                return None;
            }
            let (g, timeout) = self.cv.wait_timeout(s, deadline - now).unwrap_or_else(|e| e.into_inner());
            s = g;
            if !timeout.timed_out() {
                deadline = deadline.max(Instant::now());
            }
        }
    }

    fn dropped(&self) -> Vec<u64> {
        self.lock().dropped.clone()
    }
}

struct WorkItem {
    camera: usize,
    tick: u64,
    frame: FrameRecord,
    released: Instant,
}

enum Event {
    Dispatched { tick: u64, frames: usize },
    Stepped { camera: usize, tick: u64, time: f64, latency: Duration },
    /// Tracks concluded by a frame at stream time `time`; infinite for end of stream.
    Concluded { time: f64, tracks: Vec<ConcludedTrack> },
    CameraDone { camera: usize },
    Failed(PipelineError),
}

fn source_role(
    per_tick: Vec<(u64, Vec<(usize, FrameRecord)>)>,
    queues: &FrameQueues,
    base_period: f64,
    real_time: bool,
    start: Instant,
    n_cams: usize,
) -> Vec<u64> {
    let mut emitted = vec![0; n_cams];
    for (tick, frames) in per_tick {
        let release = if real_time {
            let at = start + Duration::from_secs_f64(tick as f64 * base_period);
            let now = Instant::now();
            if at > now {
                thread::sleep(at - now);
            }
            at
        } else {
            Instant::now()
        };
        for (c, _) in &frames {
            emitted[*c] += 1;
        }
        let items = frames.into_iter().map(|(c, frame)| (c, Envelope { tick, frame, released: release })).collect();
        if !queues.push_tick(items) {
            break;
        }
    }
    queues.close();
    emitted
}

struct BatcherCtx<'a> {
    queues: &'a FrameQueues,
    provider: &'a dyn EmbeddingProvider,
    owners: &'a [usize],
    camera_index: &'a BTreeMap<CameraId, usize>,
    work: Vec<Sender<WorkItem>>,
    events: Sender<Event>,
    alpha_min: f64,
    nms_iou: f64,
    stall: Duration,
}

fn batcher_role(ctx: BatcherCtx<'_>) {
    while let Some(items) = ctx.queues.next_tick(ctx.stall) {
        let tick = items[0].1.tick;
        let released = items.iter().map(|(_, e)| e.released).min().expect("non-empty tick");
        let frames: Vec<FrameRecord> = items
            .into_iter()
            .map(|(_, e)| {
                let mut f = e.frame;
                preprocess_frame(&mut f, ctx.alpha_min, ctx.nms_iou);
                f
            })
            .collect();
        let result = batch_frames(frames, tick).map_err(PipelineError::from).and_then(|mut batch| {
            let embs = ctx.provider.embed(&batch)?;
            if embs.len() != batch.frames.len() {
                return Err(PipelineError::Provider(format!("{} results for {} frames", embs.len(), batch.frames.len())));
            }
            for (f, e) in batch.frames.iter_mut().zip(embs) {
                if e.len() != f.detections.len() {
                    return Err(PipelineError::Provider(format!(
                        "{} embeddings for {} detections ({} frame {})",
                        e.len(),
                        f.detections.len(),
                        f.camera,
                        f.frame_index
                    )));
                }
                f.embeddings = Some(e);
            }
            Ok(batch)
        });
        let batch = match result {
            Ok(b) => b,
            Err(e) => {
                let _ = ctx.events.send(Event::Failed(e));
                ctx.queues.abort();
                break;
            }
        };
        let _ = ctx.events.send(Event::Dispatched { tick, frames: batch.frames.len() });
        for frame in batch.frames {
            let camera = ctx.camera_index[&frame.camera];
            let item = WorkItem { camera, tick, frame, released };
            if ctx.work[ctx.owners[camera]].send(item).is_err() {
                ctx.queues.abort();
                return;
            }
        }
    }
}

fn worker_role(mut trackers: Vec<(usize, Tracker)>, rx: Receiver<WorkItem>, events: Sender<Event>) {
    let mut failed = false;
    for item in rx {
        if failed {
            continue;
        }
        let Some((_, tracker)) = trackers.iter_mut().find(|(c, _)| *c == item.camera) else {
            continue;
        };
        match tracker.step(&item.frame) {
            Ok(tracks) => {
                if !tracks.is_empty() {
                    let _ = events.send(Event::Concluded { time: item.frame.timestamp, tracks });
                }
                let _ = events.send(Event::Stepped {
                    camera: item.camera,
                    tick: item.tick,
                    time: item.frame.timestamp,
                    latency: item.released.elapsed(),
                });
            }
            Err(e) => {
                failed = true;
                let _ = events.send(Event::Failed(e.into()));
            }
        }
    }
    for (camera, mut tracker) in trackers {
        match tracker.finish() {
            Ok(tracks) if !tracks.is_empty() => {
                let _ = events.send(Event::Concluded { time: f64::INFINITY, tracks });
            }
            Ok(_) => {}
            Err(e) => {
                let _ = events.send(Event::Failed(e.into()));
            }
        }
        let _ = events.send(Event::CameraDone { camera });
    }
}

/// The supervisor role's state between events.
struct SupervisorState<'a> {
    supervisor: Supervisor,
    topology: &'a CameraTopology,
    tick_period: f64,
    next_tick: u64,
    watermark: Vec<f64>,
    end_time: f64,
    pending: Vec<(f64, ConcludedTrack)>,
    concluded: Vec<ConcludedTrack>,
    finalized: Vec<MultiCameraTrack>,
    latencies_ms: Vec<f64>,
}

impl SupervisorState<'_> {
    fn run_tick(&mut self, now: f64, take_all: bool) -> Result<()> {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending).into_iter().partition(|(t, _)| take_all || *t <= now);
        self.pending = rest;
        let tracks: Vec<ConcludedTrack> = due.into_iter().map(|(_, t)| t).collect();
        self.concluded.extend(tracks.iter().cloned());
        let started = Instant::now();
        let n = tracks.len();
        let report = self.supervisor.tick(tracks, now, self.topology)?;
        self.latencies_ms.push(started.elapsed().as_secs_f64() * 1e3);
        debug!("supervisor tick at {now:.1} s: {n} new tracks, {} merges, {} flushed", report.merges, report.finalized.len());
        self.finalized.extend(report.finalized);
        Ok(())
    }

    /// Runs every tick whose time all cameras have passed.
    fn advance(&mut self) -> Result<()> {
        let low = self.watermark.iter().copied().fold(f64::INFINITY, f64::min);
        loop {
            let t = self.next_tick as f64 * self.tick_period;
            if t > low || t > self.end_time {
                return Ok(());
            }
            self.run_tick(t, false)?;
            self.next_tick += 1;
        }
    }
}

/// Runs the four roles over in-memory frame streams.
pub fn run_streams(
    topology: &CameraTopology,
    streams: BTreeMap<CameraId, Vec<FrameRecord>>,
    cfg: &PipelineConfig,
    provider: Arc<dyn EmbeddingProvider>,
) -> Result<RunReport> {
    cfg.validate()?;
    let cameras = topology.camera_ids();
    for id in streams.keys() {
        if topology.camera(id).is_err() {
            return Err(PipelineError::Config(format!("stream for camera {id} which is not in the topology")));
        }
    }
    let n = cameras.len();
    let camera_index: BTreeMap<CameraId, usize> = cameras.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
    let max_fps = topology.cameras().map(|c| c.fps).fold(0.0, f64::max);
    let base_period = if max_fps > 0.0 { 1.0 / max_fps } else { 1.0 };
    let scorer = Arc::new(match &cfg.scorer {
        Some(p) => TemporalScorer::LearnedConv(reid_io::load_scorer(p)?),
        None => TemporalScorer::Uniform,
    });

    // frames grouped by tick, cameras in index order
    let mut by_tick: BTreeMap<u64, Vec<(usize, FrameRecord)>> = BTreeMap::new();
    let mut end_time: f64 = 0.0;
    for (cam, frames) in streams {
        let c = camera_index[&cam];
        let mut last = None;
        for f in frames {
            if f.camera != cam {
                return Err(TrackError::WrongCamera { expected: cam.clone(), got: f.camera }.into());
            }
            if last.is_some_and(|l| f.frame_index <= l) {
                return Err(TrackError::OutOfOrderFrame { last: last.unwrap_or(0), got: f.frame_index }.into());
            }
            last = Some(f.frame_index);
            end_time = end_time.max(f.timestamp);
            by_tick.entry((f.timestamp / base_period).round() as u64).or_default().push((c, f));
        }
    }
    let per_tick: Vec<(u64, Vec<(usize, FrameRecord)>)> = by_tick.into_iter().collect();

    let workers = effective_workers(cfg.workers, n);
    let owners: Vec<usize> = (0..n).map(|c| c % workers).collect();
    let mut owned: Vec<Vec<(usize, Tracker)>> = (0..workers).map(|_| Vec::new()).collect();
    for (c, cam) in topology.cameras().enumerate() {
        let tracker = Tracker::new(cam.id.clone(), cam.fps, cam.homography.clone(), cfg.tracker.clone(), Arc::clone(&scorer));
        owned[owners[c]].push((c, tracker));
    }
    let capacity = (QUEUE_SECONDS * max_fps).ceil().max(1.0) as usize;
    let overflow = if cfg.real_time { Overflow::DropOldest } else { Overflow::Block };
    let queues = FrameQueues::new(n, capacity, overflow);
    let stall = Duration::from_secs_f64(cfg.stall_timeout_s);
    info!("running {n} cameras on {workers} workers ({} mode)", if cfg.real_time { "real-time" } else { "offline" });

    let mut state = SupervisorState {
        supervisor: Supervisor::new(cfg.mct),
        topology,
        tick_period: cfg.tick_period_s,
        next_tick: 1,
        watermark: vec![f64::NEG_INFINITY; n],
        end_time,
        pending: Vec::new(),
        concluded: Vec::new(),
        finalized: Vec::new(),
        latencies_ms: Vec::new(),
    };
    let mut processed = vec![0u64; n];
    let mut done = vec![false; n];
    let mut tick_pending: BTreeMap<u64, (usize, Duration)> = BTreeMap::new();
    let mut tick_latency: BTreeMap<u64, f64> = BTreeMap::new();
    let mut error: Option<PipelineError> = None;

    let start = Instant::now();
    let emitted = thread::scope(|scope| -> Result<Vec<u64>> {
        let (ev_tx, ev_rx) = unbounded::<Event>();
        let mut work_tx = Vec::with_capacity(workers);
        let mut worker_handles = Vec::with_capacity(workers);
        for trackers in owned {
            let (tx, rx) = bounded::<WorkItem>(capacity * n);
            work_tx.push(tx);
            let events = ev_tx.clone();
            worker_handles.push(scope.spawn(move || worker_role(trackers, rx, events)));
        }
        let queues = &queues;
        let source = scope.spawn(move || source_role(per_tick, queues, base_period, cfg.real_time, start, n));
        let ctx = BatcherCtx {
            queues,
            provider: provider.as_ref(),
            owners: &owners,
            camera_index: &camera_index,
            work: work_tx,
            events: ev_tx,
            alpha_min: cfg.alpha_min,
            nms_iou: cfg.nms_iou,
            stall,
        };
        let batcher = scope.spawn(move || batcher_role(ctx));

        for ev in ev_rx {
            let step = match ev {
                Event::Dispatched { tick, frames } => {
                    tick_pending.insert(tick, (frames, Duration::ZERO));
                    Ok(())
                }
                Event::Stepped { camera, tick, time, latency } => {
                    processed[camera] += 1;
                    state.watermark[camera] = state.watermark[camera].max(time);
                    if let Some(entry) = tick_pending.get_mut(&tick) {
                        entry.0 -= 1;
                        entry.1 = entry.1.max(latency);
                        if entry.0 == 0 {
                            tick_latency.insert(tick, entry.1.as_secs_f64() * 1e3);
                            tick_pending.remove(&tick);
                        }
                    }
                    if error.is_none() {
                        state.advance()
                    } else {
                        Ok(())
                    }
                }
                Event::Concluded { time, tracks } => {
                    state.pending.extend(tracks.into_iter().map(|t| (time, t)));
                    Ok(())
                }
                Event::CameraDone { camera } => {
                    done[camera] = true;
                    state.watermark[camera] = f64::INFINITY;
                    if error.is_none() {
                        state.advance()
                    } else {
                        Ok(())
                    }
                }
                Event::Failed(e) => Err(e),
            };
            if let Err(e) = step {
                if error.is_none() {
                    warn!("aborting run: {e}");
                    error = Some(e);
                }
                queues.abort();
            }
        }
        batcher.join().map_err(|_| PipelineError::RolePanicked("batcher"))?;
        for h in worker_handles {
            h.join().map_err(|_| PipelineError::RolePanicked("worker"))?;
        }
        source.join().map_err(|_| PipelineError::RolePanicked("source"))
    })?;
    if let Some(e) = error {
        return Err(e);
    }
    if !done.iter().all(|&d| d) {
        return Err(PipelineError::RolePanicked("worker"));
    }
    state.run_tick(end_time, true)?;
    let mut identities = state.finalized;
    identities.extend(state.supervisor.finish());
    identities.sort_by_key(|t| t.global_id);
    let mut concluded = state.concluded;
    concluded.sort_by(|a, b| (&a.camera, a.track_id).cmp(&(&b.camera, b.track_id)));
    let dropped = queues.dropped();
    let per_camera = |v: &[u64]| -> BTreeMap<CameraId, u64> { cameras.iter().cloned().zip(v.iter().copied()).collect() };
    let report = RunReport {
        workers,
        frames_emitted: per_camera(&emitted),
        frames_processed: per_camera(&processed),
        dropped_frames: per_camera(&dropped),
        tick_latencies_ms: tick_latency.into_values().collect(),
        supervisor_latencies_ms: state.latencies_ms,
        concluded,
        identities,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    info!(
        "processed {} frames, dropped {}, {} tracks, {} identities in {:.2} s",
        report.frames_processed.values().sum::<u64>(),
        report.total_dropped(),
        report.concluded.len(),
        report.identities.len(),
        report.wall_time_s
    );
    Ok(report)
}
