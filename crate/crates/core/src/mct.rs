//! Multi-camera association: traffic-rule gated similarity between concluded
//! single-camera tracks, camera-exclusive greedy clustering, and the
//! supervisor that keeps the store of active global identities.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{are_adjacent, haversine_distance, CameraId, CameraTopology, GeoError, GeoPoint};
use crate::reid::{l2_normalize, CameraEmbeddingStats, Embedding, ReidError, DEFAULT_BIAS_LAMBDA};
use crate::sct::ConcludedTrack;

#[derive(Debug, Error)]
pub enum MctError {
    #[error("non-positive time gap {0} s between tracks")]
    NonPositiveDt(f64),
    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Reid(#[from] ReidError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Switches for the topology and direction rules; the other three always apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleToggles {
    pub adjacency: bool,
    pub direction: bool,
}

impl Default for RuleToggles {
    fn default() -> Self {
        RuleToggles { adjacency: true, direction: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctParams {
    pub tau_min: f64,
    /// m/s
    pub v_max: f64,
    /// seconds
    pub flush_horizon: f64,
    pub bias_lambda: f64,
    pub rules: RuleToggles,
}

impl Default for MctParams {
    fn default() -> Self {
        MctParams {
            tau_min: 0.15,
            v_max: 40.0,
            flush_horizon: 120.0,
            bias_lambda: DEFAULT_BIAS_LAMBDA,
            rules: RuleToggles::default(),
        }
    }
}

impl MctParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tau_min) {
            return Err(format!("tau_min {} outside [0, 1]", self.tau_min));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(format!("v_max {} must be positive", self.v_max));
        }
        if !(self.flush_horizon >= 0.0) {
            return Err(format!("flush_horizon {} must be non-negative", self.flush_horizon));
        }
        if !(0.0..=1.0).contains(&self.bias_lambda) {
            return Err(format!("bias_lambda {} outside [0, 1]", self.bias_lambda));
        }
        Ok(())
    }
}

/// What the similarity rules need to know about a track or a group of
/// already merged tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSummary {
    /// Sorted, unique.
    pub cameras: Vec<CameraId>,
    pub start_camera: CameraId,
    pub end_camera: CameraId,
    pub embedding: Embedding,
    pub t_s: f64,
    pub t_e: f64,
    pub l_s: GeoPoint,
    pub l_e: GeoPoint,
    /// Smallest `(camera, track id)` among the members; orders ties.
    pub key: (CameraId, u64),
}

impl From<&ConcludedTrack> for TrackSummary {
    fn from(t: &ConcludedTrack) -> Self {
        TrackSummary {
            cameras: vec![t.camera.clone()],
            start_camera: t.camera.clone(),
            end_camera: t.camera.clone(),
            embedding: t.embedding.clone(),
            t_s: t.t_s,
            t_e: t.t_e,
            l_s: t.l_s,
            l_e: t.l_e,
            key: (t.camera.clone(), t.track_id),
        }
    }
}

impl TrackSummary {
    fn shares_camera(&self, other: &TrackSummary) -> bool {
        self.cameras.iter().any(|c| other.cameras.binary_search(c).is_ok())
    }
}

/// A pair ordered in time: `earlier.t_e <= later.t_e`.
#[derive(Debug, Clone, Copy)]
pub struct TrackPairContext<'a> {
    pub earlier: &'a TrackSummary,
    pub later: &'a TrackSummary,
    /// `later.t_s - earlier.t_e`, seconds.
    pub dt: f64,
    /// Metres from the end of the earlier track to the start of the later one.
    pub gap_distance: f64,
}

impl<'a> TrackPairContext<'a> {
    pub fn new(a: &'a TrackSummary, b: &'a TrackSummary) -> Self {
        let a_first = (a.t_e, &a.key) <= (b.t_e, &b.key);
        let (earlier, later) = if a_first { (a, b) } else { (b, a) };
        TrackPairContext {
            earlier,
            later,
            dt: later.t_s - earlier.t_e,
            gap_distance: haversine_distance(later.l_s, earlier.l_e),
        }
    }
}

/// The quadratic speed prior `4 v (v_max - v) / v_max^2`, clamped at zero.
pub fn speed_prior(mean_speed: f64, v_max: f64) -> f64 {
    (4.0 * mean_speed * (v_max - mean_speed) / (v_max * v_max)).max(0.0)
}

pub fn speed_similarity(ctx: &TrackPairContext<'_>, v_max: f64) -> Result<f64, MctError> {
    if !(ctx.dt > 0.0) {
        return Err(MctError::NonPositiveDt(ctx.dt));
    }
    Ok(speed_prior(ctx.gap_distance / ctx.dt, v_max))
}

/// Whether a vehicle leaving `tr1` and entering `tr2` keeps travelling the
/// same way. `tr1` must be the earlier track.
pub fn direction_consistent(tr1: &TrackSummary, tr2: &TrackSummary) -> bool {
    let d = haversine_distance;
    d(tr1.l_s, tr2.l_s) >= d(tr1.l_e, tr2.l_s) && d(tr2.l_e, tr1.l_e) >= d(tr2.l_s, tr1.l_e)
}

fn check_cameras(s: &TrackSummary, topo: &CameraTopology) -> Result<(), MctError> {
    for c in &s.cameras {
        topo.camera(c)?;
    }
    Ok(())
}

fn similarity_unchecked(a: &TrackSummary, b: &TrackSummary, topo: &CameraTopology, params: &MctParams) -> Result<f64, MctError> {
    if a.shares_camera(b) {
        return Ok(0.0);
    }
    let ctx = TrackPairContext::new(a, b);
    let overlapping = topo.are_overlapping(&ctx.earlier.end_camera, &ctx.later.start_camera)?;
    if ctx.dt <= 0.0 && !overlapping {
        return Ok(0.0);
    }
    if params.rules.adjacency && !are_adjacent(topo, &ctx.earlier.end_camera, &ctx.later.start_camera)? {
        return Ok(0.0);
    }
    if params.rules.direction && !direction_consistent(ctx.earlier, ctx.later) {
        return Ok(0.0);
    }
    // Co-visible cameras may see the vehicle simultaneously; no speed evidence then.
    let sim_v = if ctx.dt > 0.0 { speed_similarity(&ctx, params.v_max)? } else { 1.0 };
    let appearance = (1.0 - a.embedding.distance(&b.embedding) / 2.0).clamp(0.0, 1.0);
    Ok(appearance * sim_v)
}

/// Similarity of two summaries under all enabled rules, in `[0, 1]`.
pub fn summary_similarity(a: &TrackSummary, b: &TrackSummary, topo: &CameraTopology, params: &MctParams) -> Result<f64, MctError> {
    check_cameras(a, topo)?;
    check_cameras(b, topo)?;
    similarity_unchecked(a, b, topo, params)
}

pub fn pairwise_similarity(
    tr_i: &ConcludedTrack,
    tr_j: &ConcludedTrack,
    topo: &CameraTopology,
    params: &MctParams,
) -> Result<f64, MctError> {
    summary_similarity(&tr_i.into(), &tr_j.into(), topo, params)
}

/// Symmetric, zero-diagonal matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn zeros(n: usize) -> Self {
        SimilarityMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MctError> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MctError::InvalidMatrix(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &x) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&x) {
                    return Err(MctError::InvalidMatrix(format!("entry ({i}, {j}) = {x}")));
                }
                if i == j && x != 0.0 {
                    return Err(MctError::InvalidMatrix(format!("non-zero diagonal at {i}")));
                }
                if rows[j][i] != x {
                    return Err(MctError::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
                m.data[i * n + j] = x;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        assert!(i != j && (0.0..=1.0).contains(&x), "invalid entry ({i}, {j}) = {x}");
        self.data[i * self.n + j] = x;
        self.data[j * self.n + i] = x;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).take(self.n).map(<[f64]>::to_vec).collect()
    }
}

pub fn build_similarity_matrix(
    tracks: &[TrackSummary],
    topo: &CameraTopology,
    params: &MctParams,
) -> Result<SimilarityMatrix, MctError> {
    for t in tracks {
        check_cameras(t, topo)?;
    }
    let mut m = SimilarityMatrix::zeros(tracks.len());
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            let s = similarity_unchecked(&tracks[i], &tracks[j], topo, params)?;
            if s > 0.0 {
                m.set(i, j, s);
            }
        }
    }
    Ok(m)
}

pub fn apply_min_threshold(m: &SimilarityMatrix, tau_min: f64) -> SimilarityMatrix {
    let data = m.data.iter().map(|&x| if x < tau_min { 0.0 } else { x }).collect();
    SimilarityMatrix { n: m.n, data }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Greedy camera-exclusive agglomeration. Returns clusters of indices into
/// `tracks`, each sorted, ordered by their smallest member.
pub fn hierarchical_cluster(tracks: &[TrackSummary], m: &SimilarityMatrix) -> Vec<Vec<usize>> {
    cluster_with_merges(tracks, m).0
}

/// [`hierarchical_cluster`] plus the track pairs that triggered each merge, in merge order.
pub fn cluster_with_merges(tracks: &[TrackSummary], m: &SimilarityMatrix) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let n = tracks.len();
    assert_eq!(m.len(), n, "matrix size does not match track count");
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = m.get(i, j);
            if s > 0.0 {
                pairs.push((s, i, j));
            }
        }
    }
    let order_key = |i: usize, j: usize| {
        let (a, b) = (&tracks[i].key, &tracks[j].key);
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    };
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| order_key(x.1, x.2).cmp(&order_key(y.1, y.2))));

    // Eligibility only ever shrinks as clusters grow, so one pass over the
    // sorted pairs is the same as repeatedly picking the best eligible pair.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut cams: Vec<BTreeSet<CameraId>> = tracks.iter().map(|t| t.cameras.iter().cloned().collect()).collect();
    let mut merges = Vec::new();
    for (_, i, j) in pairs {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj || !cams[ri].is_disjoint(&cams[rj]) {
            continue;
        }
        let (keep, gone) = if ri < rj { (ri, rj) } else { (rj, ri) };
        parent[gone] = keep;
        let moved = std::mem::take(&mut cams[gone]);
        let before = cams[keep].len() + moved.len();
        cams[keep].extend(moved);
        assert_eq!(cams[keep].len(), before, "cluster holds two tracks of one camera");
        merges.push((i, j));
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    (out, merges)
}

/// A global identity and the single-camera tracks assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCameraTrack {
    pub global_id: u64,
    /// Ordered by start time.
    pub members: Vec<ConcludedTrack>,
    pub cameras: BTreeSet<CameraId>,
    pub last_seen: f64,
}

impl MultiCameraTrack {
    fn new(global_id: u64, members: Vec<ConcludedTrack>) -> Self {
        let mut t = MultiCameraTrack { global_id, members: Vec::new(), cameras: BTreeSet::new(), last_seen: f64::NEG_INFINITY };
        t.absorb(members);
        t
    }

    fn absorb(&mut self, members: Vec<ConcludedTrack>) {
        for m in members {
            assert!(self.cameras.insert(m.camera.clone()), "identity {} already has camera {}", self.global_id, m.camera);
            self.last_seen = self.last_seen.max(m.t_e);
            self.members.push(m);
        }
        self.members.sort_by(|a, b| a.t_s.total_cmp(&b.t_s).then_with(|| (&a.camera, a.track_id).cmp(&(&b.camera, b.track_id))));
    }

    /// Representative: normalized mean embedding, earliest start, latest end.
    pub fn summary(&self) -> Result<TrackSummary, MctError> {
        let first = self.members.first().expect("identity has members");
        let last = self.members.iter().max_by(|a, b| a.t_e.total_cmp(&b.t_e)).expect("identity has members");
        let dim = first.embedding.dim();
        let mut mean = vec![0.0; dim];
        for m in &self.members {
            if m.embedding.dim() != dim {
                return Err(ReidError::DimensionMismatch { expected: dim, got: m.embedding.dim() }.into());
            }
            for (s, x) in mean.iter_mut().zip(m.embedding.as_slice()) {
                *s += x;
            }
        }
        let key = self.members.iter().map(|m| (m.camera.clone(), m.track_id)).min().expect("identity has members");
        Ok(TrackSummary {
            cameras: self.cameras.iter().cloned().collect(),
            start_camera: first.camera.clone(),
            end_camera: last.camera.clone(),
            embedding: l2_normalize(&mean)?,
            t_s: first.t_s,
            t_e: last.t_e,
            l_s: first.l_s,
            l_e: last.l_e,
            key,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    /// `(camera, track id, global id)` for every track handed in this tick.
    pub assigned: Vec<(CameraId, u64, u64)>,
    /// Identities flushed out of the active store, by global id.
    pub finalized: Vec<MultiCameraTrack>,
    /// Number of merges performed by the clustering step.
    pub merges: usize,
}

/// Owner of the active multi-camera store.
#[derive(Debug, Clone)]
pub struct Supervisor {
    params: MctParams,
    stats: CameraEmbeddingStats,
    active: BTreeMap<u64, MultiCameraTrack>,
    next_id: u64,
}

impl Supervisor {
    pub fn new(params: MctParams) -> Self {
        Supervisor { params, stats: CameraEmbeddingStats::default(), active: BTreeMap::new(), next_id: 1 }
    }

    pub fn params(&self) -> &MctParams {
        &self.params
    }

    pub fn active(&self) -> impl Iterator<Item = &MultiCameraTrack> {
        self.active.values()
    }

    /// Folds the tracks concluded since the previous tick into the store and
    /// flushes identities unseen for longer than the flush horizon.
    pub fn tick(&mut self, mut new_tracks: Vec<ConcludedTrack>, now: f64, topo: &CameraTopology) -> Result<TickReport, MctError> {
        new_tracks.sort_by(|a, b| (&a.camera, a.track_id).cmp(&(&b.camera, b.track_id)));
        for t in &mut new_tracks {
            self.stats.observe(&t.camera, &t.embedding)?;
            t.embedding = self.stats.mitigate(&t.camera, &t.embedding, self.params.bias_lambda)?;
        }

        let mut report = TickReport::default();
        if !new_tracks.is_empty() {
            let ids: Vec<u64> = self.active.keys().copied().collect();
            let mut candidates = Vec::with_capacity(ids.len() + new_tracks.len());
            for id in &ids {
                candidates.push(self.active[id].summary()?);
            }
            candidates.extend(new_tracks.iter().map(TrackSummary::from));
            let m = apply_min_threshold(&build_similarity_matrix(&candidates, topo, &self.params)?, self.params.tau_min);
            let clusters = hierarchical_cluster(&candidates, &m);
            report.merges = candidates.len() - clusters.len();

            let mut slots: Vec<Option<ConcludedTrack>> = new_tracks.into_iter().map(Some).collect();
            for cluster in clusters {
                let (old, fresh): (Vec<usize>, Vec<usize>) = cluster.into_iter().partition(|&i| i < ids.len());
                let members: Vec<ConcludedTrack> =
                    fresh.iter().map(|&i| slots[i - ids.len()].take().expect("each track in one cluster")).collect();
                let gid = match old.first() {
                    Some(&first) => {
                        let winner = ids[first];
                        for &i in &old[1..] {
                            let absorbed = self.active.remove(&ids[i]).expect("active identity");
                            self.active.get_mut(&winner).expect("active identity").absorb(absorbed.members);
                        }
                        winner
                    }
                    None => {
                        let gid = self.next_id;
                        self.next_id += 1;
                        self.active.insert(gid, MultiCameraTrack::new(gid, Vec::new()));
                        gid
                    }
                };
                report.assigned.extend(members.iter().map(|m| (m.camera.clone(), m.track_id, gid)));
                self.active.get_mut(&gid).expect("active identity").absorb(members);
            }
            report.assigned.sort();
        }

        let stale: Vec<u64> =
            self.active.values().filter(|t| now - t.last_seen > self.params.flush_horizon).map(|t| t.global_id).collect();
        report.finalized = stale.iter().map(|id| self.active.remove(id).expect("active identity")).collect();
        Ok(report)
    }

    /// Flushes every active identity, in global id order.
    pub fn finish(&mut self) -> Vec<MultiCameraTrack> {
        std::mem::take(&mut self.active).into_values().collect()
    }
}

/// Writes `camera,frame,global_id,x,y,w,h` rows ordered by camera, frame and global id.
pub fn write_global_csv(mut w: impl Write, identities: &[MultiCameraTrack]) -> Result<(), MctError> {
    let mut rows = Vec::new();
    for ident in identities {
        for m in &ident.members {
            for (frame, d) in &m.boxes {
                rows.push((&m.camera, *frame, ident.global_id, d.tlwh()));
            }
        }
    }
    rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (cam, frame, gid, [x, y, bw, bh]) in rows {
        writeln!(w, "{cam},{frame},{gid},{x},{y},{bw},{bh}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub camera: CameraId,
    pub track_id: u64,
    pub t_s: f64,
    pub t_e: f64,
    pub l_s: GeoPoint,
    pub l_e: GeoPoint,
    pub class_label: String,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub global_id: u64,
    pub t_s: f64,
    pub t_e: f64,
    pub cameras: Vec<CameraId>,
    pub members: Vec<MemberSummary>,
}

pub fn identity_summaries(identities: &[MultiCameraTrack]) -> Vec<IdentitySummary> {
    identities
        .iter()
        .map(|ident| IdentitySummary {
            global_id: ident.global_id,
            t_s: ident.members.iter().map(|m| m.t_s).fold(f64::INFINITY, f64::min),
            t_e: ident.last_seen,
            cameras: ident.cameras.iter().cloned().collect(),
            members: ident
                .members
                .iter()
                .map(|m| MemberSummary {
                    camera: m.camera.clone(),
                    track_id: m.track_id,
                    t_s: m.t_s,
                    t_e: m.t_e,
                    l_s: m.l_s,
                    l_e: m.l_e,
                    class_label: format!("{:?}", m.class_label).to_lowercase(),
                    boxes: m.boxes.len(),
                })
                .collect(),
        })
        .collect()
}

pub fn write_summary_json(w: impl Write, identities: &[MultiCameraTrack]) -> Result<(), MctError> {
    serde_json::to_writer_pretty(w, &identity_summaries(identities))?;
    Ok(())
}
