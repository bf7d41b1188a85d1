//! Deterministic synthetic traffic: straight-road vehicle paths through a
//! camera network, ground-truth boxes, noisy detection rendering and an
//! embedding oracle with one prototype direction per vehicle.
//!
//! Geometry is laid out in a local east/north metre frame around a fixed
//! origin and converted to degrees with an equirectangular mapping. Each
//! camera sees a rectangle of road through a trapezoid perspective view.
//!
//! Randomness comes from ChaCha8. Vehicle generation uses stream 0 of the
//! scenario seed; rendering uses one stream per (camera, frame), so any
//! subset of frames can be rendered independently with identical results.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    estimate_homography, geo_to_pixel, CameraId, CameraInfo, CameraTopology, GeoError, GeoPoint, Homography, PixelPoint,
    EARTH_RADIUS_M,
};
use crate::ingest::{write_detection_csv, Detection, DetectionRow, FrameRecord, IngestError, VehicleClass};
use crate::metrics::{MetricsError, TrajectorySet};
use crate::reid::{io as reid_io, l2_normalize, Embedding, ReidError};

pub const IMAGE_WIDTH: f64 = 1280.0;
pub const IMAGE_HEIGHT: f64 = 960.0;
/// Row of the far edge of the viewed road rectangle.
const FAR_EDGE_ROW: f64 = 240.0;
/// Horizontal inset of the far corners, giving the trapezoid.
const FAR_EDGE_INSET: f64 = 240.0;
const ORIGIN_LAT: f64 = 38.9;
const ORIGIN_LON: f64 = -77.03;
const LANE_OFFSETS: [f64; 2] = [3.5, 7.0];
/// Distance driven before the first and after the last camera of a through route.
const ROUTE_LEAD_M: f64 = 80.0;
const SPEED_RANGE: (f64, f64) = (8.0, 16.0);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no prototype for identity {0}")]
    UnknownIdentity(u64),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Reid(#[from] ReidError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Cameras in a row along one east-west road.
    Corridor,
    /// Cameras at the crossings of an r x c street grid.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_cams: usize,
    pub n_vehicles: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub layout: Layout,
    pub embedding_dim: usize,
    /// Distance between neighbouring cameras, metres.
    pub camera_spacing_m: f64,
    /// Share of vehicles that drive the whole road; the rest join and leave
    /// between cameras.
    pub through_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            n_cams: 2,
            n_vehicles: 10,
            duration_s: 60.0,
            fps: 10.0,
            layout: Layout::Corridor,
            embedding_dim: 128,
            camera_spacing_m: 300.0,
            through_fraction: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn new(seed: u64, n_cams: usize, n_vehicles: usize, duration_s: f64, fps: f64, layout: Layout) -> Self {
        ScenarioConfig { seed, n_cams, n_vehicles, duration_s, fps, layout, ..Default::default() }
    }

    pub fn num_frames(&self) -> u64 {
        (self.duration_s * self.fps).round() as u64
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration {} s", self.duration_s));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {}", self.fps));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.through_fraction) {
            return bad(format!("through_fraction {}", self.through_fraction));
        }
        let (hx, hy) = half_extent(self.layout);
        if !(self.camera_spacing_m >= 2.0 * hx.max(hy) + 10.0) {
            return bad(format!("camera spacing {} m makes views overlap", self.camera_spacing_m));
        }
        Ok(())
    }
}

/// Half width (east) and half depth (north) of a camera's ground rectangle.
fn half_extent(layout: Layout) -> (f64, f64) {
    match layout {
        Layout::Corridor => (25.0, 15.0),
        Layout::Grid => (25.0, 25.0),
    }
}

const M_PER_DEG_LAT: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

fn m_per_deg_lon() -> f64 {
    M_PER_DEG_LAT * ORIGIN_LAT.to_radians().cos()
}

fn to_geo(x: f64, y: f64) -> Result<GeoPoint, GeoError> {
    GeoPoint::new(ORIGIN_LAT + y / M_PER_DEG_LAT, ORIGIN_LON + x / m_per_deg_lon())
}

fn to_local(g: GeoPoint) -> (f64, f64) {
    ((g.lon - ORIGIN_LON) * m_per_deg_lon(), (g.lat - ORIGIN_LAT) * M_PER_DEG_LAT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub camera: CameraId,
    pub center: GeoPoint,
    /// Ground rectangle: south-west, south-east, north-east, north-west.
    pub corners: [GeoPoint; 4],
    pub image_width: f64,
    pub image_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePath {
    pub global_id: u64,
    pub class: VehicleClass,
    /// m/s, constant along the path.
    pub speed: f64,
    /// Strictly increasing in time; the vehicle moves linearly between them.
    pub waypoints: Vec<Waypoint>,
}

impl VehiclePath {
    pub fn position(&self, t: f64) -> Option<GeoPoint> {
        let w = &self.waypoints;
        if w.is_empty() || t < w[0].t || t > w[w.len() - 1].t {
            return None;
        }
        let i = w.windows(2).position(|p| t <= p[1].t).unwrap_or(0);
        if w.len() == 1 {
            return Some(w[0].position);
        }
        let (a, b) = (w[i], w[i + 1]);
        let f = (t - a.t) / (b.t - a.t);
        Some(GeoPoint { lat: a.position.lat + f * (b.position.lat - a.position.lat), lon: a.position.lon + f * (b.position.lon - a.position.lon) })
    }

    /// Unit heading in the local east/north frame at time `t`.
    fn heading(&self, t: f64) -> (f64, f64) {
        let w = &self.waypoints;
        let i = w.windows(2).position(|p| t <= p[1].t).unwrap_or(0).min(w.len().saturating_sub(2));
        let (a, b) = (to_local(w[i].position), to_local(w[i + 1].position));
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let n = dx.hypot(dy);
        (dx / n, dy / n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    #[serde(skip)]
    pub topology: CameraTopology,
    pub viewports: Vec<Viewport>,
    pub vehicles: Vec<VehiclePath>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub global_id: u64,
    pub detection: Detection,
}

/// Per camera, one entry per frame `0..num_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub fps: f64,
    pub num_frames: u64,
    pub cameras: BTreeMap<CameraId, Vec<Vec<GtBox>>>,
}

impl GroundTruth {
    /// Boxes keyed by vehicle id across all cameras.
    pub fn trajectories(&self) -> Result<TrajectorySet, MetricsError> {
        let mut out = TrajectorySet::new();
        for (cam, frames) in &self.cameras {
            for (f, boxes) in frames.iter().enumerate() {
                for b in boxes {
                    out.insert(b.global_id, cam.clone(), f as u64, b.detection.tlwh())?;
                }
            }
        }
        Ok(out)
    }

    pub fn num_boxes(&self) -> usize {
        self.cameras.values().flatten().map(Vec::len).sum()
    }
}

/// (length, width, height) in metres.
fn class_shape(c: VehicleClass) -> (f64, f64, f64) {
    match c {
        VehicleClass::Car => (4.5, 1.8, 1.5),
        VehicleClass::Suv => (4.8, 1.9, 1.8),
        VehicleClass::Van => (5.2, 2.0, 2.2),
        VehicleClass::Truck => (8.0, 2.5, 3.5),
        VehicleClass::Bus => (12.0, 2.5, 3.2),
        VehicleClass::Other => (3.0, 1.6, 1.6),
    }
}

fn sample_class(rng: &mut impl Rng) -> VehicleClass {
    let r: f64 = rng.random();
    match r {
        r if r < 0.6 => VehicleClass::Car,
        r if r < 0.75 => VehicleClass::Suv,
        r if r < 0.85 => VehicleClass::Van,
        r if r < 0.93 => VehicleClass::Truck,
        _ => VehicleClass::Bus,
    }
}

/// A straight road: cameras sit at `origin + s_k * axis`.
struct Road {
    origin: (f64, f64),
    axis: (f64, f64),
    stations: Vec<f64>,
    half_view: f64,
}

impl Road {
    fn point(&self, s: f64, lateral: f64) -> (f64, f64) {
        // lateral offset to the right of the axis
        let right = (self.axis.1, -self.axis.0);
        (self.origin.0 + s * self.axis.0 + lateral * right.0, self.origin.1 + s * self.axis.1 + lateral * right.1)
    }
}

fn camera_id(i: usize) -> CameraId {
    CameraId::new(format!("c{:03}", i + 1))
}

fn grid_shape(n: usize) -> Result<(usize, usize), SimError> {
    let rows = (2..=n).take_while(|r| r * r <= n).filter(|&r| n.is_multiple_of(r)).last();
    match rows {
        Some(r) => Ok((r, n / r)),
        None => Err(SimError::InvalidLayout(format!("{n} cameras do not form an r x c grid with r, c >= 2"))),
    }
}

type LayoutGeometry = (Vec<(f64, f64)>, Vec<(usize, usize)>, Vec<Road>);

/// Camera centres in local metres plus the adjacency and roads of the layout.
fn layout_geometry(cfg: &ScenarioConfig) -> Result<LayoutGeometry, SimError> {
    let d = cfg.camera_spacing_m;
    let (hx, hy) = half_extent(cfg.layout);
    match cfg.layout {
        Layout::Corridor => {
            let centres = (0..cfg.n_cams).map(|i| (i as f64 * d, 0.0)).collect();
            let adj = (1..cfg.n_cams).map(|i| (i - 1, i)).collect();
            let road = Road { origin: (0.0, 0.0), axis: (1.0, 0.0), stations: (0..cfg.n_cams).map(|i| i as f64 * d).collect(), half_view: hx };
            Ok((centres, adj, vec![road]))
        }
        Layout::Grid => {
            let (rows, cols) = grid_shape(cfg.n_cams)?;
            let idx = |r: usize, c: usize| r * cols + c;
            let centres = (0..rows).flat_map(|r| (0..cols).map(move |c| (c as f64 * d, r as f64 * d))).collect();
            let mut adj = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        adj.push((idx(r, c), idx(r, c + 1)));
                    }
                    if r + 1 < rows {
                        adj.push((idx(r, c), idx(r + 1, c)));
                    }
                }
            }
            let mut roads: Vec<Road> = (0..rows)
                .map(|r| Road { origin: (0.0, r as f64 * d), axis: (1.0, 0.0), stations: (0..cols).map(|c| c as f64 * d).collect(), half_view: hx })
                .collect();
            roads.extend((0..cols).map(|c| Road {
                origin: (c as f64 * d, 0.0),
                axis: (0.0, 1.0),
                stations: (0..rows).map(|r| r as f64 * d).collect(),
                half_view: hy,
            }));
            Ok((centres, adj, roads))
        }
    }
}

fn camera_homography(centre: (f64, f64), layout: Layout) -> Result<(Homography, [GeoPoint; 4]), SimError> {
    let (hx, hy) = half_extent(layout);
    let (cx, cy) = centre;
    let corners = [
        to_geo(cx - hx, cy - hy)?,
        to_geo(cx + hx, cy - hy)?,
        to_geo(cx + hx, cy + hy)?,
        to_geo(cx - hx, cy + hy)?,
    ];
    let pixels = [
        PixelPoint::new(0.0, IMAGE_HEIGHT),
        PixelPoint::new(IMAGE_WIDTH, IMAGE_HEIGHT),
        PixelPoint::new(IMAGE_WIDTH - FAR_EDGE_INSET, FAR_EDGE_ROW),
        PixelPoint::new(FAR_EDGE_INSET, FAR_EDGE_ROW),
    ];
    let pairs: Vec<(PixelPoint, GeoPoint)> = pixels.into_iter().zip(corners).collect();
    Ok((estimate_homography(&pairs)?, corners))
}

/// Builds the network and vehicle paths, then projects every vehicle into
/// every camera to obtain the ground truth.
pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<(Scenario, GroundTruth), SimError> {
    if cfg.n_cams == 0 {
        return Err(SimError::InvalidLayout("at least one camera is required".into()));
    }
    cfg.validate()?;
    let (centres, adj, roads) = layout_geometry(cfg)?;
    let mut cams = Vec::with_capacity(centres.len());
    let mut viewports = Vec::with_capacity(centres.len());
    for (i, &c) in centres.iter().enumerate() {
        let (homography, corners) = camera_homography(c, cfg.layout)?;
        let id = camera_id(i);
        let center = to_geo(c.0, c.1)?;
        cams.push(CameraInfo { id: id.clone(), position: center, homography, fps: cfg.fps });
        viewports.push(Viewport { camera: id, center, corners, image_width: IMAGE_WIDTH, image_height: IMAGE_HEIGHT });
    }
    let adj: Vec<(CameraId, CameraId)> = adj.into_iter().map(|(a, b)| (camera_id(a), camera_id(b))).collect();
    let topology = CameraTopology::new(cams, &adj, &[])?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lanes = Lanes::new(roads.len(), &mut rng);
    let mut vehicles = Vec::with_capacity(cfg.n_vehicles);
    for k in 0..cfg.n_vehicles {
        vehicles.push(sample_vehicle(k as u64 + 1, &roads, &mut lanes, cfg, &mut rng)?);
    }
    let scenario = Scenario { config: cfg.clone(), topology, viewports, vehicles };
    let gt = ground_truth(&scenario)?;
    Ok((scenario, gt))
}

/// Lane occupancy: one speed per lane, so vehicles never overtake within a
/// lane, and the times at which each vehicle passes the lane's origin.
struct Lanes {
    speed: BTreeMap<(usize, bool, usize), f64>,
    passes: BTreeMap<(usize, bool, usize), Vec<(f64, f64)>>,
}

impl Lanes {
    fn new(n_roads: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut speed = BTreeMap::new();
        for road in 0..n_roads {
            for forward in [true, false] {
                for lane in 0..LANE_OFFSETS.len() {
                    speed.insert((road, forward, lane), rng.random_range(SPEED_RANGE.0..SPEED_RANGE.1));
                }
            }
        }
        Lanes { speed, passes: BTreeMap::new() }
    }

    /// Whether a vehicle of `length` passing the origin at `tau` keeps a
    /// gap of at least `MIN_GAP_M` to every vehicle already in the lane.
    fn fits(&self, key: (usize, bool, usize), tau: f64, length: f64) -> bool {
        let v = self.speed[&key];
        self.passes
            .get(&key)
            .is_none_or(|p| p.iter().all(|&(t, l)| (t - tau).abs() * v >= 0.5 * (l + length) + MIN_GAP_M))
    }
}

const MIN_GAP_M: f64 = 10.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

fn sample_vehicle(
    global_id: u64,
    roads: &[Road],
    lanes: &mut Lanes,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VehiclePath, SimError> {
    let class = sample_class(rng);
    let (length, _, _) = class_shape(class);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.random_range(0..roads.len());
        let road = &roads[r];
        let forward = rng.random_bool(0.5);
        let lane = rng.random_range(0..LANE_OFFSETS.len());
        let key = (r, forward, lane);
        let speed = lanes.speed[&key];

        // stations in travel order, as signed positions along the direction of travel
        let sign = if forward { 1.0 } else { -1.0 };
        let mut st: Vec<f64> = road.stations.iter().map(|s| s * sign).collect();
        st.sort_by(f64::total_cmp);
        let m = st.len();
        let (a, b) = if rng.random_bool(cfg.through_fraction) {
            (0, m - 1)
        } else {
            let a = rng.random_range(0..m);
            (a, rng.random_range(a..m))
        };
        let entry = if a == 0 { st[0] - road.half_view - ROUTE_LEAD_M } else { 0.5 * (st[a - 1] + st[a]) };
        let exit = if b == m - 1 { st[m - 1] + road.half_view + ROUTE_LEAD_M } else { 0.5 * (st[b] + st[b + 1]) };
        let travel = (exit - entry) / speed;

        // time spent in the first camera's view along the route
        let first_in = (st[a] - road.half_view - entry) / speed;
        let first_out = (st[a] + road.half_view - entry) / speed;
        // start times whose route is still under way, or already started, while the clip runs
        let (lo, hi) = (-first_out + 1.0, cfg.duration_s - first_in - 1.0);
        let t0 = if hi > lo { rng.random_range(lo..hi) } else { lo.min(0.0) };
        let tau = t0 - entry / speed;
        if !lanes.fits(key, tau, length) {
            continue;
        }
        lanes.passes.entry(key).or_default().push((tau, length));

        let lat_off = if forward { LANE_OFFSETS[lane] } else { -LANE_OFFSETS[lane] };
        let waypoints = [(t0, entry * sign), (t0 + travel, exit * sign)]
            .into_iter()
            .map(|(t, s)| {
                let (x, y) = road.point(s, lat_off);
                Ok(Waypoint { t, position: to_geo(x, y)? })
            })
            .collect::<Result<Vec<_>, GeoError>>()?;
        return Ok(VehiclePath { global_id, class, speed, waypoints });
    }
    Err(SimError::InvalidConfig(format!("no free lane slot for vehicle {global_id}; too many vehicles for the duration")))
}

fn render_box(h: &Homography, v: &VehiclePath, t: f64, pos: GeoPoint) -> Result<Option<Detection>, GeoError> {
    let (x, y) = to_local(pos);
    let bottom = geo_to_pixel(h, pos)?;
    let right = geo_to_pixel(h, to_geo(x + 0.5, y)?)?;
    let left = geo_to_pixel(h, to_geo(x - 0.5, y)?)?;
    let px_per_m = (right.x - left.x).abs();
    let (len, width, height) = class_shape(v.class);
    let (hx, hy) = v.heading(t);
    // footprint extent across the image, and along the viewing direction,
    // where the camera sits high enough to see the whole roof
    let w = px_per_m * (hx.abs() * len + hy.abs() * width);
    let hgt = px_per_m * (height + hx.abs() * width + hy.abs() * len);
    let (x1, x2, y2) = (bottom.x - w / 2.0, bottom.x + w / 2.0, bottom.y);
    let y1 = y2 - hgt;
    if x1 < 0.0 || y1 < 0.0 || x2 > IMAGE_WIDTH || y2 > IMAGE_HEIGHT {
        return Ok(None);
    }
    Ok(Detection::new(x1, y1, x2, y2, 1.0, v.class).ok())
}

fn ground_truth(s: &Scenario) -> Result<GroundTruth, SimError> {
    let n = s.config.num_frames();
    let fps = s.config.fps;
    let (hx, hy) = half_extent(s.config.layout);
    let mut cameras = BTreeMap::new();
    for cam in s.topology.cameras() {
        let (cx, cy) = to_local(cam.position);
        let mut frames = vec![Vec::new(); n as usize];
        for v in &s.vehicles {
            let (t_lo, t_hi) = (v.waypoints[0].t, v.waypoints[v.waypoints.len() - 1].t);
            let f_lo = (t_lo * fps).ceil().max(0.0) as u64;
            let f_hi = ((t_hi * fps).floor() as i64).min(n as i64 - 1);
            for f in f_lo as i64..=f_hi {
                let t = f as f64 / fps;
                let Some(pos) = v.position(t) else { continue };
                let (x, y) = to_local(pos);
                if (x - cx).abs() > hx || (y - cy).abs() > hy {
                    continue;
                }
                if let Some(d) = render_box(&cam.homography, v, t, pos)? {
                    frames[f as usize].push(GtBox { global_id: v.global_id, detection: d });
                }
            }
        }
        cameras.insert(cam.id.clone(), frames);
    }
    Ok(GroundTruth { fps, num_frames: n, cameras })
}

/// One prototype direction per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOracle {
    seed: u64,
    dim: usize,
    prototypes: BTreeMap<u64, Embedding>,
}

fn gaussian_vector(dim: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Embedding {
    loop {
        if let Ok(e) = l2_normalize(&gaussian_vector(dim, 1.0, rng)) {
            return e;
        }
    }
}

impl EmbeddingOracle {
    /// Orthonormal prototypes (Gram-Schmidt) when there are at most `dim`
    /// identities, independent uniform directions otherwise.
    pub fn new(ids: &[u64], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let orthogonal = ids.len() <= dim;
        let mut basis: Vec<Embedding> = Vec::with_capacity(ids.len());
        let mut prototypes = BTreeMap::new();
        for &id in ids {
            let e = loop {
                let mut v = gaussian_vector(dim, 1.0, &mut rng);
                if orthogonal {
                    for b in &basis {
                        let p: f64 = v.iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
                        for (x, y) in v.iter_mut().zip(b.as_slice()) {
                            *x -= p * y;
                        }
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break l2_normalize(&v).expect("non-zero vector");
                }
            };
            basis.push(e.clone());
            prototypes.insert(id, e);
        }
        EmbeddingOracle { seed, dim, prototypes }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        let ids: Vec<u64> = s.vehicles.iter().map(|v| v.global_id).collect();
        Self::new(&ids, s.config.embedding_dim, s.config.seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, id: u64) -> Result<&Embedding, SimError> {
        self.prototypes.get(&id).ok_or(SimError::UnknownIdentity(id))
    }

    pub fn prototype_dot(&self, a: u64, b: u64) -> Result<f64, SimError> {
        Ok(self.prototype(a)?.dot(self.prototype(b)?))
    }

    /// `normalize(prototype + noise)`, where `sigma` is the expected norm of
    /// the noise vector (each component has std `sigma / sqrt(dim)`).
    pub fn embedding(&self, id: u64, sigma: f64, draw_seed: u64) -> Result<Embedding, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ draw_seed.rotate_left(17));
        self.embedding_with(id, sigma, &mut rng)
    }

    pub fn embedding_with(&self, id: u64, sigma: f64, rng: &mut impl Rng) -> Result<Embedding, SimError> {
        let p = self.prototype(id)?;
        if sigma == 0.0 {
            return Ok(p.clone());
        }
        let noise = gaussian_vector(self.dim, sigma / (self.dim as f64).sqrt(), rng);
        let v: Vec<f64> = p.as_slice().iter().zip(&noise).map(|(a, b)| a + b).collect();
        Ok(l2_normalize(&v)?)
    }
}

pub fn oracle_embedding(oracle: &EmbeddingOracle, id: u64, sigma: f64, draw_seed: u64) -> Result<Embedding, SimError> {
    oracle.embedding(id, sigma, draw_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    /// Pixels, applied independently to each box coordinate.
    pub box_jitter_std: f64,
    pub miss_rate: f64,
    /// Expected false positives per frame.
    pub false_positive_rate: f64,
    pub embedding_noise_std: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile::zero()
    }
}

impl NoiseProfile {
    pub fn zero() -> Self {
        NoiseProfile { box_jitter_std: 0.0, miss_rate: 0.0, false_positive_rate: 0.0, embedding_noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.box_jitter_std >= 0.0
            && (0.0..=1.0).contains(&self.miss_rate)
            && self.false_positive_rate >= 0.0
            && self.embedding_noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!("invalid noise profile {self:?}")))
        }
    }
}

/// Rendered detector output for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedCamera {
    /// One record per frame, embeddings attached.
    pub frames: Vec<FrameRecord>,
    /// Ground-truth id behind each detection, `None` for false positives.
    pub sources: Vec<Vec<Option<u64>>>,
}

fn frame_rng(seed: u64, camera_index: usize, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((camera_index as u64) << 40) | frame);
    rng
}

/// Drops, jitters and pads the ground truth into detector-like streams.
pub fn render_detections(
    gt: &GroundTruth,
    oracle: &EmbeddingOracle,
    np: &NoiseProfile,
    seed: u64,
) -> Result<BTreeMap<CameraId, RenderedCamera>, SimError> {
    np.validate()?;
    let jitter = Normal::new(0.0, np.box_jitter_std).expect("validated std");
    let fp_count = (np.false_positive_rate > 0.0).then(|| Poisson::new(np.false_positive_rate).expect("positive rate"));
    let mut out = BTreeMap::new();
    for (ci, (cam, frames)) in gt.cameras.iter().enumerate() {
        let mut rendered = RenderedCamera { frames: Vec::with_capacity(frames.len()), sources: Vec::with_capacity(frames.len()) };
        for (f, boxes) in frames.iter().enumerate() {
            let mut rng = frame_rng(seed, ci, f as u64);
            let mut dets = Vec::new();
            let mut embs = Vec::new();
            let mut srcs = Vec::new();
            for b in boxes {
                if np.miss_rate > 0.0 && rng.random::<f64>() < np.miss_rate {
                    continue;
                }
                let d = b.detection;
                let d = if np.box_jitter_std > 0.0 {
                    let mut c = [d.x1, d.y1, d.x2, d.y2].map(|v| v + jitter.sample(&mut rng));
                    c[2] = c[2].max(c[0] + 1.0);
                    c[3] = c[3].max(c[1] + 1.0);
                    Detection::new(c[0], c[1], c[2], c[3], d.alpha, d.beta)?
                } else {
                    d
                };
                let draw = rng.next_u64();
                dets.push(d);
                embs.push(oracle.embedding(b.global_id, np.embedding_noise_std, draw)?);
                srcs.push(Some(b.global_id));
            }
            if let Some(p) = &fp_count {
                let k = p.sample(&mut rng) as usize;
                for _ in 0..k {
                    let w = rng.random_range(30.0..120.0);
                    let h = w * rng.random_range(0.3..0.8);
                    let x = rng.random_range(0.0..IMAGE_WIDTH - w);
                    let y = rng.random_range(FAR_EDGE_ROW..IMAGE_HEIGHT - h);
                    let class = VehicleClass::from_index(rng.random_range(0..5)).expect("valid class index");
                    dets.push(Detection::from_tlwh(x, y, w, h, rng.random_range(0.3..0.9), class)?);
                    embs.push(random_unit(oracle.dim(), &mut rng));
                    srcs.push(None);
                }
            }
            rendered.frames.push(FrameRecord::new(cam.clone(), f as u64, gt.fps, dets).with_embeddings(embs)?);
            rendered.sources.push(srcs);
        }
        out.insert(cam.clone(), rendered);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Ground truth as `camera,frame,id,x,y,w,h` rows over all cameras.
pub fn write_global_gt_csv(mut w: impl Write, gt: &GroundTruth) -> Result<(), SimError> {
    for (cam, frames) in &gt.cameras {
        for (f, boxes) in frames.iter().enumerate() {
            for b in boxes {
                let [x, y, bw, bh] = b.detection.tlwh();
                writeln!(w, "{cam},{f},{},{x},{y},{bw},{bh}", b.global_id)?;
            }
        }
    }
    Ok(())
}

/// Writes the scenario directory:
///
/// * `scenario.json`, `topology.json`
/// * `gt/<camera>.csv` as `frame,id,x,y,w,h,1,class,1`, and `gt_global.csv`
/// * `det/<camera>.csv` detection rows and `emb/<camera>.bin` row-aligned embeddings
pub fn write_scenario_files(
    dir: &Path,
    scenario: &Scenario,
    gt: &GroundTruth,
    rendered: &BTreeMap<CameraId, RenderedCamera>,
) -> Result<(), SimError> {
    for sub in ["gt", "det", "emb"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut w = create(&dir.join("scenario.json"))?;
    serde_json::to_writer_pretty(&mut w, scenario)?;
    w.flush()?;
    fs::write(dir.join("topology.json"), scenario.topology.to_json())?;

    for (cam, frames) in &gt.cameras {
        let mut w = create(&dir.join("gt").join(format!("{cam}.csv")))?;
        for (f, boxes) in frames.iter().enumerate() {
            for b in boxes {
                let [x, y, bw, bh] = b.detection.tlwh();
                writeln!(w, "{f},{},{x},{y},{bw},{bh},1,{},1", b.global_id, b.detection.beta.index())?;
            }
        }
        w.flush()?;
    }
    let mut w = create(&dir.join("gt_global.csv"))?;
    write_global_gt_csv(&mut w, gt)?;
    w.flush()?;

    let dim = scenario.config.embedding_dim;
    for (cam, r) in rendered {
        let rows: Vec<DetectionRow> = r
            .frames
            .iter()
            .flat_map(|fr| fr.detections.iter().map(move |d| DetectionRow { frame: fr.frame_index, id: -1, detection: *d }))
            .collect();
        let embs: Vec<Embedding> = r.frames.iter().flat_map(|fr| fr.embeddings.iter().flatten().cloned()).collect();
        let mut w = create(&dir.join("det").join(format!("{cam}.csv")))?;
        write_detection_csv(&mut w, &rows)?;
        w.flush()?;
        let mut w = create(&dir.join("emb").join(format!("{cam}.bin")))?;
        reid_io::write_embeddings(&mut w, dim, &embs)?;
        w.flush()?;
    }
    Ok(())
}
