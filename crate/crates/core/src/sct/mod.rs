//! Single-camera tracking: a DeepSORT variant whose state is anchored at the
//! bottom-centre of the box and whose position is replaced by the matched
//! detection after every update.

mod kalman;
mod tracker;

use std::io::Write;

use thiserror::Error;

use crate::geo::{CameraId, GeoError};
use crate::reid::ReidError;

pub use kalman::{
    gating_distance, kf_initiate, kf_predict, kf_update, to_observation, Covariance, KalmanState, Mean, Observation,
    SingularInnovation, GATING_THRESHOLD,
};
pub use tracker::{
    appearance_cost, associate, majority_class, tracker_step, Association, ConcludedTrack, SCTrack, TrackStatus, Tracker,
    TrackerParams,
};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("frame {got} arrived after frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("frame for camera {got} sent to tracker of camera {expected}")]
    WrongCamera { expected: CameraId, got: CameraId },
    #[error("detections carry no embeddings")]
    MissingEmbeddings,
    #[error("empty appearance gallery")]
    EmptyGallery,
    #[error(transparent)]
    SingularInnovation(#[from] SingularInnovation),
    #[error(transparent)]
    Reid(#[from] ReidError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes `camera,frame,track_id,x,y,w,h,conf` rows for every box of `tracks`,
/// ordered by camera, frame and track id.
pub fn write_track_csv(mut w: impl Write, tracks: &[ConcludedTrack]) -> Result<(), TrackError> {
    let mut rows: Vec<(&CameraId, u64, u64, &crate::ingest::Detection)> = tracks
        .iter()
        .flat_map(|t| t.boxes.iter().map(move |(f, d)| (&t.camera, *f, t.track_id, d)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (cam, frame, id, d) in rows {
        let [x, y, bw, bh] = d.tlwh();
        writeln!(w, "{cam},{frame},{id},{x},{y},{bw},{bh},{}", d.alpha)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geo::Homography;
    use crate::ingest::{Detection, FrameRecord, VehicleClass};
    use crate::reid::{l2_normalize, Embedding, TemporalScorer};

    fn emb(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    fn det(x: f64, y: f64) -> Detection {
        Detection::new(x, y, x + 40.0, y + 30.0, 0.9, VehicleClass::Car).unwrap()
    }

    /// lon = u / 10, lat = v / 10
    fn scale() -> Homography {
        Homography::from_row_slice(&[0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn tracker() -> Tracker {
        Tracker::new("c1".into(), 10.0, scale(), TrackerParams::default(), Arc::new(TemporalScorer::Uniform))
    }

    fn frame(i: u64, dets: Vec<(Detection, Embedding)>) -> FrameRecord {
        let (d, e): (Vec<_>, Vec<_>) = dets.into_iter().unzip();
        FrameRecord::new("c1".into(), i, 10.0, d).with_embeddings(e).unwrap()
    }

    #[test]
    fn appearance_costs() {
        let g = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        assert_eq!(appearance_cost(&g, &g[0]).unwrap(), 0.0);
        assert_eq!(appearance_cost(&[emb(&[1.0, 0.0, 0.0])], &emb(&[0.0, 0.0, 1.0])).unwrap(), 1.0);
        let diag = emb(&[1.0, 1.0]);
        assert!((appearance_cost(&g, &diag).unwrap() - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!(matches!(appearance_cost(&[], &diag), Err(TrackError::EmptyGallery)));
    }

    fn confirmed_track_at(x: f64, e: &Embedding) -> Tracker {
        let mut t = tracker();
        for i in 0..3 {
            t.step(&frame(i, vec![(det(x, 100.0), e.clone())])).unwrap();
        }
        assert!(t.tracks()[0].is_confirmed());
        t
    }

    #[test]
    fn associate_matches_identical_detection() {
        let e = emb(&[1.0, 0.0, 0.0]);
        let mut t = confirmed_track_at(100.0, &e);
        let mut tracks = t.tracks().to_vec();
        for tr in &mut tracks {
            tr.state = kf_predict(&tr.state);
            tr.time_since_update += 1;
        }
        let [x1, y1, ..] = tracks[0].predicted_box();
        let f = frame(3, vec![(det(x1, y1), e.clone())]);
        let a = associate(&tracks, &f, &TrackerParams::default()).unwrap();
        assert_eq!(a.matches, vec![(0, 0)]);
        assert!(t.step(&f).unwrap().is_empty());
    }

    #[test]
    fn associate_rejects_far_dissimilar_detection() {
        let e = emb(&[1.0, 0.0, 0.0]);
        let t = confirmed_track_at(100.0, &e);
        let mut tracks = t.tracks().to_vec();
        tracks[0].state = kf_predict(&tracks[0].state);
        tracks[0].time_since_update += 1;
        // cost 1 - 0.1 = 0.9 and far outside the gate
        let other = emb(&[0.1, (1.0f64 - 0.01).sqrt(), 0.0]);
        let f = frame(3, vec![(det(900.0, 700.0), other)]);
        let a = associate(&tracks, &f, &TrackerParams::default()).unwrap();
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn empty_stream() {
        let mut t = tracker();
        for i in 0..5 {
            assert!(t.step(&FrameRecord::new("c1".into(), i, 10.0, vec![])).unwrap().is_empty());
        }
        assert!(t.tracks().is_empty());
        assert!(t.finish().unwrap().is_empty());
    }

    #[test]
    fn lifecycle_single_vehicle() {
        let mut t = tracker();
        let e = emb(&[0.0, 1.0]);
        let mut concluded = Vec::new();
        for i in 0..20u64 {
            concluded.extend(t.step(&frame(i, vec![(det(100.0 + 3.0 * i as f64, 200.0), e.clone())])).unwrap());
        }
        for i in 20..20 + 30u64 {
            concluded.extend(t.step(&frame(i, vec![])).unwrap());
            assert!(concluded.is_empty(), "concluded early at frame {i}");
        }
        concluded.extend(t.step(&frame(50, vec![])).unwrap());
        assert_eq!(concluded.len(), 1);
        let c = &concluded[0];
        assert_eq!(c.boxes.len(), 20);
        assert_eq!((c.t_s, c.t_e), (0.0, 1.9));
        assert_eq!(c.embedding, e);
        assert!((c.l_s.lon - 12.0).abs() < 1e-12 && (c.l_s.lat - 23.0).abs() < 1e-12);
        assert!(t.tracks().is_empty());
    }

    #[test]
    fn tentative_miss_deletes() {
        let mut t = tracker();
        let e = emb(&[1.0]);
        t.step(&frame(0, vec![(det(0.0, 0.0), e.clone())])).unwrap();
        t.step(&frame(1, vec![(det(0.0, 0.0), e)])).unwrap();
        assert_eq!(t.tracks()[0].status, TrackStatus::Tentative);
        assert!(t.step(&frame(2, vec![])).unwrap().is_empty());
        assert!(t.tracks().is_empty());
    }

    #[test]
    fn errors() {
        let mut t = tracker();
        t.step(&frame(3, vec![])).unwrap();
        assert!(matches!(t.step(&frame(3, vec![])), Err(TrackError::OutOfOrderFrame { .. })));
        let bare = FrameRecord::new("c1".into(), 4, 10.0, vec![det(0.0, 0.0)]);
        assert!(matches!(t.step(&bare), Err(TrackError::MissingEmbeddings)));
        let other = FrameRecord::new("c2".into(), 5, 10.0, vec![]);
        assert!(matches!(t.step(&other), Err(TrackError::WrongCamera { .. })));
    }

    #[test]
    fn ids_unique_and_features_ordered() {
        let mut t = tracker();
        let a = emb(&[1.0, 0.0]);
        let b = emb(&[0.0, 1.0]);
        let mut all = Vec::new();
        // two vehicles, the second appearing in bursts so its tracks restart
        for i in 0..120u64 {
            let mut dets = vec![(det(50.0 + 2.0 * i as f64, 100.0), a.clone())];
            if (i / 40) % 2 == 0 {
                dets.push((det(600.0, 500.0), b.clone()));
            }
            all.extend(t.step(&frame(i, dets)).unwrap());
            let mut ids: Vec<u64> = t.tracks().iter().map(|x| x.track_id).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), t.tracks().len());
        }
        all.extend(t.finish().unwrap());
        let mut ids: Vec<u64> = all.iter().map(|c| c.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), all.len());
        assert_eq!(all.len(), 3);
        for c in &all {
            assert!(c.boxes.windows(2).all(|w| w[0].0 < w[1].0));
            let (first, last) = (c.boxes[0].0, c.boxes.last().unwrap().0);
            assert!((c.t_e - c.t_s - (last - first) as f64 / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_vote() {
        use VehicleClass::*;
        assert_eq!(majority_class([Car, Suv, Suv, Car]), Some(Car));
        assert_eq!(majority_class([Car, Suv, Suv]), Some(Suv));
        assert_eq!(majority_class([]), None);
    }

    #[test]
    fn csv_rows_sorted() {
        let mut t = tracker();
        let e = emb(&[1.0]);
        for i in 0..4 {
            t.step(&frame(i, vec![(det(10.0, 10.0), e.clone())])).unwrap();
        }
        let done = t.finish().unwrap();
        let mut buf = Vec::new();
        write_track_csv(&mut buf, &done).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "c1,0,1,10,10,40,30,0.9");
        assert_eq!(text.lines().count(), 4);
    }
}
