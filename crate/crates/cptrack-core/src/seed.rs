//! Directed combinatorial search for track candidates.
//!
//! Candidates start at the target, pick up one hit per consecutive station,
//! and grow station by station. Two admissibility tests gate each
//! extension:
//!
//! - YoZ interval: the candidate's last two points are extrapolated
//!   linearly to the next plane and only hits within `dy` of the predicted
//!   y survive; a per-station index sorted by y turns this into a binary
//!   search.
//! - XoZ rotation: once the candidate has two real segments (length >= 3),
//!   the direction angle of the new segment may differ from the previous
//!   segment's by at most `dtheta_max`.
//!
//! Full-length candidates are labelled true tracks or ghosts from hit
//! truth.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{Event, Hit};
use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    TrueTrack,
    Ghost,
    Unlabelled,
}

/// A partial or full track hypothesis.
///
/// `points` holds `(x, y, z)` with the target first; `hit_refs` indexes the
/// event's hit list, one entry per station starting at station 0 (the
/// target has no ref), so `points.len() == hit_refs.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackCandidate {
    pub points: Vec<[f64; 3]>,
    pub hit_refs: Vec<usize>,
    pub label: Label,
}

impl TrackCandidate {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchWindow {
    /// Half-width of the y confidence interval, cm.
    pub dy: f64,
    /// Maximum XoZ segment rotation between consecutive segments, radians.
    pub dtheta_max: f64,
}

impl Default for SearchWindow {
    fn default() -> Self {
        SearchWindow {
            dy: 1.0,
            dtheta_max: 0.3,
        }
    }
}

impl SearchWindow {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.dy > 0.0) {
            return Err(SearchError::BadWindow);
        }
        if !(self.dtheta_max > 0.0 && self.dtheta_max < core::f64::consts::PI) {
            return Err(SearchError::BadWindow);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchError {
    /// Window parameters outside their valid ranges.
    BadWindow,
    /// `extend_candidates` fed hits that are not on the expected station.
    StationMismatch { expected: usize, found: usize },
}

impl core::fmt::Display for SearchError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SearchError::BadWindow => write!(f, "search window out of range"),
            SearchError::StationMismatch { expected, found } => write!(
                f,
                "station mismatch: extending onto station {expected} but got a hit on {found}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SearchError {}

/// Hit indices of one station sorted by y, supporting closed-interval range
/// queries by binary search.
#[derive(Debug, Clone)]
pub struct StationIndex {
    station: usize,
    /// `(y, hit index)` in nondecreasing y; ties broken by index so the
    /// order is deterministic.
    order: Vec<(f64, usize)>,
}

impl StationIndex {
    /// Indexes the hits of `station` from an event hit list.
    pub fn build(hits: &[Hit], station: usize) -> Self {
        let mut order: Vec<(f64, usize)> = hits
            .iter()
            .enumerate()
            .filter(|(_, h)| h.station == station)
            .map(|(i, h)| (h.y, i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        StationIndex { station, order }
    }

    pub fn station(&self) -> usize {
        self.station
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Hit indices in storage order of the index (ascending y).
    pub fn sorted_hit_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().map(|&(_, i)| i)
    }

    /// All hit indices with `y` in the closed interval `[lo, hi]`.
    pub fn range(&self, lo: f64, hi: f64) -> &[(f64, usize)] {
        let start = self.order.partition_point(|&(y, _)| y < lo);
        let end = self.order.partition_point(|&(y, _)| y <= hi);
        &self.order[start..end]
    }
}

/// Direction angle of the XoZ segment from `a` to `b`, measured from the
/// z axis.
fn segment_theta(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    fmath::atan2(b[0] - a[0], b[2] - a[2])
}

/// Linear extrapolation of y through the candidate's last two points to
/// plane `z`.
fn predict_y(cand: &TrackCandidate, z: f64) -> f64 {
    let n = cand.points.len();
    let (a, b) = (&cand.points[n - 2], &cand.points[n - 1]);
    b[1] + (b[1] - a[1]) / (b[2] - a[2]) * (z - b[2])
}

/// Whether `hit` is an admissible continuation of `cand`.
///
/// This is the single predicate shared by the directed search and any
/// exhaustive re-check: the y interval test always applies; the rotation
/// test only once the candidate has two real segments.
pub fn admissible(cand: &TrackCandidate, hit: &Hit, window: &SearchWindow) -> bool {
    if fmath::abs(hit.y - predict_y(cand, hit.z)) > window.dy {
        return false;
    }
    if cand.len() >= 3 {
        let n = cand.points.len();
        let theta_last = segment_theta(&cand.points[n - 2], &cand.points[n - 1]);
        let theta_new = segment_theta(&cand.points[n - 1], &[hit.x, hit.y, hit.z]);
        if fmath::abs(theta_new - theta_last) > window.dtheta_max {
            return false;
        }
    }
    true
}

/// Result of one extension step.
#[derive(Debug, Clone, Default)]
pub struct ExtendOutcome {
    /// Candidates grown by exactly one admissible hit.
    pub extended: Vec<TrackCandidate>,
    /// Input candidates that had no admissible continuation.
    pub terminated: Vec<TrackCandidate>,
}

/// Extends every candidate onto the next station.
///
/// All candidates must share the same length `L >= 2`; `index` must cover
/// station `L - 1` of the same hit list `hits`. One extended candidate is
/// emitted per admissible hit, in (candidate, ascending-y hit) order.
pub fn extend_candidates(
    cands: &[TrackCandidate],
    hits: &[Hit],
    index: &StationIndex,
    window: &SearchWindow,
) -> Result<ExtendOutcome, SearchError> {
    window.validate()?;
    let mut out = ExtendOutcome::default();
    for cand in cands {
        let next_station = cand.hit_refs.len();
        if index.station() != next_station {
            return Err(SearchError::StationMismatch {
                expected: next_station,
                found: index.station(),
            });
        }
        let mut grew = false;
        if let Some(&(_, first)) = index.order.first() {
            let z = hits[first].z;
            let y_pred = predict_y(cand, z);
            for &(_, hit_idx) in index.range(y_pred - window.dy, y_pred + window.dy) {
                let hit = &hits[hit_idx];
                if !admissible(cand, hit, window) {
                    continue;
                }
                let mut grown = cand.clone();
                grown.points.push([hit.x, hit.y, hit.z]);
                grown.hit_refs.push(hit_idx);
                out.extended.push(grown);
                grew = true;
            }
        }
        if !grew {
            out.terminated.push(cand.clone());
        }
    }
    Ok(out)
}

/// Labels a candidate from hit truth: a true track iff every referenced hit
/// is non-fake and they all share one track id.
pub fn label_candidate(hits: &[Hit], hit_refs: &[usize]) -> Label {
    let mut id = None;
    for &r in hit_refs {
        let h = &hits[r];
        if h.is_fake() {
            return Label::Ghost;
        }
        match id {
            None => id = Some(h.track_id),
            Some(t) if t != h.track_id => return Label::Ghost,
            _ => {}
        }
    }
    Label::TrueTrack
}

/// Runs the full directed search over an event: seeds one candidate per
/// station-0 hit (preceded by the target) and folds extensions over the
/// remaining stations. Returns all full-length candidates, labelled.
/// Candidates that stall before the last station are dropped.
pub fn run_seed_search(
    event: &Event,
    n_stations: usize,
    window: &SearchWindow,
) -> Result<Vec<TrackCandidate>, SearchError> {
    window.validate()?;
    let mut cands: Vec<TrackCandidate> = event
        .hits
        .iter()
        .enumerate()
        .filter(|(_, h)| h.station == 0)
        .map(|(i, h)| TrackCandidate {
            points: alloc::vec![[0.0, 0.0, 0.0], [h.x, h.y, h.z]],
            hit_refs: alloc::vec![i],
            label: Label::Unlabelled,
        })
        .collect();

    for station in 1..n_stations {
        if cands.is_empty() {
            break;
        }
        let index = StationIndex::build(&event.hits, station);
        cands = extend_candidates(&cands, &event.hits, &index, window)?.extended;
    }

    for c in &mut cands {
        c.label = label_candidate(&event.hits, &c.hit_refs);
    }
    Ok(cands)
}
