use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::geo::{pixel_to_geo, CameraId, GeoPoint, Homography, PixelPoint};
use crate::ingest::{iou, Detection, FrameRecord, VehicleClass};
use crate::reid::{temporal_aggregate, Embedding, TemporalScorer};

use super::kalman::{gating_distance, kf_initiate, kf_predict, kf_update, to_observation, KalmanState, Observation, GATING_THRESHOLD};
use super::TrackError;

/// Association cost assigned to gated-out pairs.
const INFEASIBLE_COST: f64 = 1e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    /// Consecutive hits before a tentative track is confirmed.
    pub n_init: u32,
    /// Missed frames after which a track is concluded.
    pub max_age: u32,
    pub gallery_budget: usize,
    /// Maximum appearance cost `1 - <g, e>` for a cascade match.
    pub matching_threshold: f64,
    /// Maximum `1 - IoU` for the IoU stage.
    pub max_iou_distance: f64,
    pub gating_threshold: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            n_init: 3,
            max_age: 30,
            gallery_budget: 100,
            matching_threshold: 0.3,
            max_iou_distance: 0.7,
            gating_threshold: GATING_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

/// A live single-camera track.
#[derive(Debug, Clone, PartialEq)]
pub struct SCTrack {
    pub track_id: u64,
    pub camera: CameraId,
    pub status: TrackStatus,
    pub state: KalmanState,
    pub hits: u32,
    pub time_since_update: u32,
    pub boxes: Vec<(u64, Detection)>,
    pub features: Vec<(u64, Embedding)>,
    pub gallery: VecDeque<Embedding>,
}

impl SCTrack {
    fn new(track_id: u64, camera: CameraId, frame: u64, det: Detection, feature: Embedding, n_init: u32) -> Self {
        let mut gallery = VecDeque::new();
        gallery.push_back(feature.clone());
        SCTrack {
            track_id,
            camera,
            status: if n_init <= 1 { TrackStatus::Confirmed } else { TrackStatus::Tentative },
            state: kf_initiate(&to_observation(&det)),
            hits: 1,
            time_since_update: 0,
            boxes: vec![(frame, det)],
            features: vec![(frame, feature)],
            gallery,
        }
    }

    pub fn is_confirmed(&self) -> bool {
        self.status == TrackStatus::Confirmed
    }

    /// Predicted box in corner form.
    pub fn predicted_box(&self) -> [f64; 4] {
        self.state.observation().to_corners()
    }

    fn predict(&mut self) {
        self.state = kf_predict(&self.state);
        self.time_since_update += 1;
    }

    fn update(&mut self, frame: u64, det: Detection, feature: Embedding, params: &TrackerParams) -> Result<(), TrackError> {
        self.state = kf_update(&self.state, &to_observation(&det))?;
        self.boxes.push((frame, det));
        self.features.push((frame, feature.clone()));
        self.gallery.push_back(feature);
        while self.gallery.len() > params.gallery_budget {
            self.gallery.pop_front();
        }
        self.hits += 1;
        self.time_since_update = 0;
        if self.status == TrackStatus::Tentative && self.hits >= params.n_init {
            self.status = TrackStatus::Confirmed;
        }
        Ok(())
    }

    fn mark_missed(&mut self, params: &TrackerParams) {
        if self.status == TrackStatus::Tentative || self.time_since_update > params.max_age {
            self.status = TrackStatus::Deleted;
        }
    }
}

/// A finished single-camera track, summarized for cross-camera association.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcludedTrack {
    pub camera: CameraId,
    pub track_id: u64,
    pub embedding: Embedding,
    pub t_s: f64,
    pub t_e: f64,
    pub l_s: GeoPoint,
    pub l_e: GeoPoint,
    pub class_label: VehicleClass,
    pub boxes: Vec<(u64, Detection)>,
}

/// Most frequent class; ties go to the label seen first.
pub fn majority_class(labels: impl IntoIterator<Item = VehicleClass>) -> Option<VehicleClass> {
    let mut counts: Vec<(VehicleClass, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(c, _)| *c == l) {
            Some(entry) => entry.1 += 1,
            None => counts.push((l, 1)),
        }
    }
    let best = counts.iter().map(|c| c.1).max()?;
    counts.into_iter().find(|c| c.1 == best).map(|c| c.0)
}

fn bottom_center(d: &Detection) -> PixelPoint {
    PixelPoint::new((d.x1 + d.x2) / 2.0, d.y2)
}

impl ConcludedTrack {
    fn from_track(t: SCTrack, fps: f64, homography: &Homography, scorer: &TemporalScorer) -> Result<Self, TrackError> {
        let rows: Vec<&Embedding> = t.features.iter().map(|(_, e)| e).collect();
        let embedding = temporal_aggregate(&rows, scorer)?;
        let (first_frame, first) = *t.boxes.first().expect("tracks start with a box");
        let (last_frame, last) = *t.boxes.last().expect("tracks start with a box");
        Ok(ConcludedTrack {
            camera: t.camera,
            track_id: t.track_id,
            embedding,
            t_s: first_frame as f64 / fps,
            t_e: last_frame as f64 / fps,
            l_s: pixel_to_geo(homography, bottom_center(&first))?,
            l_e: pixel_to_geo(homography, bottom_center(&last))?,
            class_label: majority_class(t.boxes.iter().map(|(_, d)| d.beta)).expect("non-empty"),
            boxes: t.boxes,
        })
    }
}

/// Result of matching predicted tracks against one frame's detections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Association {
    /// `(track index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Smallest cosine cost `1 - <g, e>` over the gallery.
pub fn appearance_cost<'a>(gallery: impl IntoIterator<Item = &'a Embedding>, e: &Embedding) -> Result<f64, TrackError> {
    gallery.into_iter().map(|g| 1.0 - g.dot(e)).reduce(f64::min).ok_or(TrackError::EmptyGallery)
}

/// Hungarian assignment keeping only pairs with cost at or below `max_cost`.
fn min_cost_matching(cost: &[Vec<f64>], max_cost: f64) -> Vec<(usize, usize)> {
    let clipped: Vec<Vec<f64>> =
        cost.iter().map(|r| r.iter().map(|&c| if c > max_cost { max_cost + 1e-5 } else { c }).collect()).collect();
    assignment::solve(&clipped).into_iter().filter(|&(r, c)| cost[r][c] <= max_cost).collect()
}

/// Matching cascade over confirmed tracks followed by an IoU stage.
///
/// Tracks must already be predicted to the frame. Confirmed tracks are
/// matched by gated appearance cost, most recently updated first. Tentative
/// tracks and confirmed tracks missed for only this frame then compete for
/// the leftover detections by IoU.
pub fn associate(tracks: &[SCTrack], frame: &FrameRecord, params: &TrackerParams) -> Result<Association, TrackError> {
    let embeddings = frame.embeddings.as_ref().ok_or(TrackError::MissingEmbeddings)?;
    let observations: Vec<Observation> = frame.detections.iter().map(to_observation).collect();

    let mut unmatched_dets: Vec<usize> = (0..frame.detections.len()).collect();
    let mut matches = Vec::new();

    let mut ages: Vec<u32> = tracks.iter().filter(|t| t.is_confirmed()).map(|t| t.time_since_update).collect();
    ages.sort_unstable();
    ages.dedup();
    for age in ages {
        if unmatched_dets.is_empty() {
            break;
        }
        let level: Vec<usize> =
            (0..tracks.len()).filter(|&i| tracks[i].is_confirmed() && tracks[i].time_since_update == age).collect();
        let mut cost = Vec::with_capacity(level.len());
        for &ti in &level {
            let t = &tracks[ti];
            let mut row = Vec::with_capacity(unmatched_dets.len());
            for &di in &unmatched_dets {
                let gated = gating_distance(&t.state, &observations[di])? > params.gating_threshold;
                row.push(if gated { INFEASIBLE_COST } else { appearance_cost(&t.gallery, &embeddings[di])? });
            }
            cost.push(row);
        }
        let found = min_cost_matching(&cost, params.matching_threshold);
        let taken: Vec<usize> = found.iter().map(|&(_, c)| unmatched_dets[c]).collect();
        matches.extend(found.iter().map(|&(r, c)| (level[r], unmatched_dets[c])));
        unmatched_dets.retain(|d| !taken.contains(d));
    }

    let matched_tracks: Vec<usize> = matches.iter().map(|m| m.0).collect();
    let iou_candidates: Vec<usize> = (0..tracks.len())
        .filter(|&i| !matched_tracks.contains(&i))
        .filter(|&i| !tracks[i].is_confirmed() || tracks[i].time_since_update == 1)
        .collect();
    if !iou_candidates.is_empty() && !unmatched_dets.is_empty() {
        let cost: Vec<Vec<f64>> = iou_candidates
            .iter()
            .map(|&ti| {
                let [x1, y1, x2, y2] = tracks[ti].predicted_box();
                let pred = Detection { x1, y1, x2, y2, alpha: 1.0, beta: VehicleClass::Other };
                unmatched_dets.iter().map(|&di| 1.0 - iou(&pred, &frame.detections[di])).collect()
            })
            .collect();
        let found = min_cost_matching(&cost, params.max_iou_distance);
        let taken: Vec<usize> = found.iter().map(|&(_, c)| unmatched_dets[c]).collect();
        matches.extend(found.iter().map(|&(r, c)| (iou_candidates[r], unmatched_dets[c])));
        unmatched_dets.retain(|d| !taken.contains(d));
    }

    matches.sort_unstable();
    let unmatched_tracks = (0..tracks.len()).filter(|i| !matches.iter().any(|m| m.0 == *i)).collect();
    Ok(Association { matches, unmatched_tracks, unmatched_detections: unmatched_dets })
}

/// The per-camera tracker: owns its tracks and allocates never-reused ids.
#[derive(Debug, Clone)]
pub struct Tracker {
    camera: CameraId,
    fps: f64,
    homography: Homography,
    params: TrackerParams,
    scorer: Arc<TemporalScorer>,
    tracks: Vec<SCTrack>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(camera: CameraId, fps: f64, homography: Homography, params: TrackerParams, scorer: Arc<TemporalScorer>) -> Self {
        Tracker { camera, fps, homography, params, scorer, tracks: Vec::new(), next_id: 1, last_frame: None }
    }

    pub fn camera(&self) -> &CameraId {
        &self.camera
    }

    pub fn tracks(&self) -> &[SCTrack] {
        &self.tracks
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    /// Processes one frame; returns the tracks concluded by it.
    pub fn step(&mut self, frame: &FrameRecord) -> Result<Vec<ConcludedTrack>, TrackError> {
        if frame.camera != self.camera {
            return Err(TrackError::WrongCamera { expected: self.camera.clone(), got: frame.camera.clone() });
        }
        let gap = match self.last_frame {
            Some(last) if frame.frame_index <= last => {
                return Err(TrackError::OutOfOrderFrame { last, got: frame.frame_index })
            }
            Some(last) => frame.frame_index - last,
            None => 1,
        };
        if !frame.detections.is_empty() && frame.embeddings.is_none() {
            return Err(TrackError::MissingEmbeddings);
        }
        self.last_frame = Some(frame.frame_index);

        for t in &mut self.tracks {
            for _ in 0..gap {
                t.predict();
            }
        }

        let assoc = if frame.detections.is_empty() {
            Association { unmatched_tracks: (0..self.tracks.len()).collect(), ..Default::default() }
        } else {
            associate(&self.tracks, frame, &self.params)?
        };
        let empty = Vec::new();
        let embeddings = frame.embeddings.as_ref().unwrap_or(&empty);
        for &(ti, di) in &assoc.matches {
            self.tracks[ti].update(frame.frame_index, frame.detections[di], embeddings[di].clone(), &self.params)?;
        }
        for &ti in &assoc.unmatched_tracks {
            self.tracks[ti].mark_missed(&self.params);
        }
        for &di in &assoc.unmatched_detections {
            let id = self.next_id;
            self.next_id += 1;
            let track = SCTrack::new(
                id,
                self.camera.clone(),
                frame.frame_index,
                frame.detections[di],
                embeddings[di].clone(),
                self.params.n_init,
            );
            self.tracks.push(track);
        }
        self.collect_deleted()
    }

    fn collect_deleted(&mut self) -> Result<Vec<ConcludedTrack>, TrackError> {
        let mut concluded = Vec::new();
        let mut kept = Vec::with_capacity(self.tracks.len());
        for t in self.tracks.drain(..) {
            if t.status != TrackStatus::Deleted {
                kept.push(t);
            } else if t.hits >= self.params.n_init {
                // was confirmed at some point
                concluded.push(t);
            }
        }
        self.tracks = kept;
        concluded
            .into_iter()
            .map(|t| ConcludedTrack::from_track(t, self.fps, &self.homography, &self.scorer))
            .collect()
    }

    /// Ends the stream: concludes every confirmed track and drops tentative ones.
    pub fn finish(&mut self) -> Result<Vec<ConcludedTrack>, TrackError> {
        for t in &mut self.tracks {
            t.status = if t.is_confirmed() { TrackStatus::Deleted } else { TrackStatus::Tentative };
        }
        let done = self.collect_deleted();
        self.tracks.clear();
        done
    }
}

/// Free-function form of [`Tracker::step`].
pub fn tracker_step(tracker: &mut Tracker, frame: &FrameRecord) -> Result<(Vec<SCTrack>, Vec<ConcludedTrack>), TrackError> {
    let concluded = tracker.step(frame)?;
    Ok((tracker.tracks().to_vec(), concluded))
}
