//! Inference: growing track candidates station by station.
//!
//! Candidates seed from every station-0 hit (preceded by the target point),
//! then each station runs the model over the live candidates, prunes by
//! probability where one is exposed, and extends every survivor by every
//! hit inside its predicted (optionally inflated) ellipse. Full-length
//! survivors are classified, and hit-sharing conflicts are resolved
//! greedily by probability so the output tracks are pairwise hit-disjoint.
//!
//! Branching is breadth-first and exhaustive inside the ellipses; the
//! predicted areas are small in practice, and `max_branches` caps the
//! fan-out as a safety valve (keeping the hits closest to the ellipse
//! center in its own scaled metric).

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::Event;
use crate::model::{Ellipse, Model, ModelError, ModelOutput};
use crate::seed::StationIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowConfig {
    /// Candidates with an exposed probability below this are dropped.
    pub prune_threshold: f64,
    /// Full-length candidates need at least this probability to be kept.
    pub accept_threshold: f64,
    /// Cap on extensions per candidate per station; `None` is unlimited.
    pub max_branches: Option<usize>,
    /// Multiplies both semiaxes of every gating ellipse; at least 1.
    pub ellipse_inflate: f64,
    /// Accept a candidate of 4+ points whose ellipse is empty of hits, if
    /// its probability already clears `accept_threshold` (short tracks).
    pub allow_early_stop: bool,
}

impl Default for FollowConfig {
    fn default() -> Self {
        FollowConfig {
            prune_threshold: 0.2,
            accept_threshold: 0.5,
            max_branches: None,
            ellipse_inflate: 1.0,
            allow_early_stop: false,
        }
    }
}

impl FollowConfig {
    pub fn validate(&self) -> Result<(), FollowError> {
        let ok = self.prune_threshold > 0.0
            && self.prune_threshold < 1.0
            && self.accept_threshold > 0.0
            && self.accept_threshold < 1.0
            && self.ellipse_inflate >= 1.0
            && self.max_branches.map_or(true, |m| m >= 1);
        if ok {
            Ok(())
        } else {
            Err(FollowError::BadConfig)
        }
    }
}

/// A reconstructed track: hit references on consecutive stations from 0,
/// plus the model's final probability for the candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTrack {
    pub hit_refs: Vec<usize>,
    pub prob: f64,
}

impl ReconTrack {
    /// Candidate length in points (target plus one per hit).
    pub fn n_points(&self) -> usize {
        self.hit_refs.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FollowError {
    BadConfig,
    /// The event has a hit on a station the model does not cover.
    StationOutOfRange { station: usize, n_stations: usize },
    Model(ModelError),
}

impl From<ModelError> for FollowError {
    fn from(e: ModelError) -> Self {
        FollowError::Model(e)
    }
}

impl core::fmt::Display for FollowError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FollowError::BadConfig => write!(f, "follow configuration out of range"),
            FollowError::StationOutOfRange {
                station,
                n_stations,
            } => write!(
                f,
                "hit on station {station} but the model covers {n_stations} stations"
            ),
            FollowError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FollowError {}

/// Closed-region ellipse membership: true iff
/// `((x-cx)/r1)^2 + ((y-cy)/r2)^2 <= 1`.
pub fn point_in_ellipse(point: [f64; 2], ellipse: &Ellipse) -> bool {
    ellipse.contains(point[0], point[1])
}

/// A candidate under construction.
#[derive(Debug, Clone)]
struct Growth {
    points: Vec<[f64; 3]>,
    hit_refs: Vec<usize>,
}

/// Runs the model over same-length candidates in bounded chunks.
fn forward_all(model: &Model, cands: &[Growth]) -> Result<Vec<ModelOutput>, ModelError> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(cands.len());
    for chunk in cands.chunks(CHUNK) {
        let refs: Vec<&[[f64; 3]]> = chunk.iter().map(|c| c.points.as_slice()).collect();
        out.extend(model.forward_batch(&refs)?);
    }
    Ok(out)
}

/// Grows and classifies candidates without conflict resolution; the result
/// may share hits. Output order is deterministic: candidates accepted by
/// early stopping first (in station, then candidate order), then
/// full-length survivors in candidate order.
pub fn grow_candidates(
    event: &Event,
    model: &Model,
    cfg: &FollowConfig,
) -> Result<Vec<ReconTrack>, FollowError> {
    cfg.validate()?;
    let n_stations = model.n_stations();
    for h in &event.hits {
        if h.station >= n_stations {
            return Err(FollowError::StationOutOfRange {
                station: h.station,
                n_stations,
            });
        }
    }

    let mut active: Vec<Growth> = event
        .hits
        .iter()
        .enumerate()
        .filter(|(_, h)| h.station == 0)
        .map(|(i, h)| Growth {
            points: alloc::vec![[0.0, 0.0, 0.0], [h.x, h.y, h.z]],
            hit_refs: alloc::vec![i],
        })
        .collect();
    let mut finished: Vec<ReconTrack> = Vec::new();

    // Every live candidate has station + 1 points when station is next, so
    // each pass is a single same-length batch.
    for station in 1..n_stations {
        if active.is_empty() {
            break;
        }
        let index = StationIndex::build(&event.hits, station);
        let outputs = forward_all(model, &active)?;
        let mut next: Vec<Growth> = Vec::new();
        for (cand, out) in active.iter().zip(&outputs) {
            if let Some(p) = out.prob {
                if p < cfg.prune_threshold {
                    continue;
                }
            }
            let e = out.ellipse.expect("ellipse exposed below full length");
            let gate = Ellipse {
                cx: e.cx,
                cy: e.cy,
                r1: e.r1 * cfg.ellipse_inflate,
                r2: e.r2 * cfg.ellipse_inflate,
            };
            let mut admitted: Vec<usize> = index
                .range(gate.cy - gate.r2, gate.cy + gate.r2)
                .iter()
                .map(|&(_, i)| i)
                .filter(|&i| point_in_ellipse([event.hits[i].x, event.hits[i].y], &gate))
                .collect();
            admitted.sort_unstable();
            if admitted.is_empty() {
                if cfg.allow_early_stop && cand.points.len() >= 4 {
                    if let Some(p) = out.prob {
                        if p >= cfg.accept_threshold {
                            finished.push(ReconTrack {
                                hit_refs: cand.hit_refs.clone(),
                                prob: p,
                            });
                        }
                    }
                }
                continue;
            }
            if let Some(cap) = cfg.max_branches {
                if admitted.len() > cap {
                    // Keep the hits closest to the gate center in the
                    // gate's own scaled metric; ties go to the lower index.
                    let dist2 = |i: usize| {
                        let dx = (event.hits[i].x - gate.cx) / gate.r1;
                        let dy = (event.hits[i].y - gate.cy) / gate.r2;
                        dx * dx + dy * dy
                    };
                    admitted.sort_by(|&a, &b| dist2(a).total_cmp(&dist2(b)).then(a.cmp(&b)));
                    admitted.truncate(cap);
                    admitted.sort_unstable();
                }
            }
            for i in admitted {
                let h = &event.hits[i];
                let mut g = cand.clone();
                g.points.push([h.x, h.y, h.z]);
                g.hit_refs.push(i);
                next.push(g);
            }
        }
        active = next;
    }

    if !active.is_empty() {
        let outputs = forward_all(model, &active)?;
        for (cand, out) in active.iter().zip(&outputs) {
            let p = out.prob.expect("probability exposed at full length");
            if p >= cfg.accept_threshold {
                finished.push(ReconTrack {
                    hit_refs: cand.hit_refs.clone(),
                    prob: p,
                });
            }
        }
    }
    Ok(finished)
}

/// Greedy conflict resolution: candidates are taken in descending
/// probability (ties broken by lower index) and kept only when they share
/// no hit with an already-kept track. Output follows acceptance order.
pub fn resolve_conflicts(cands: &[ReconTrack]) -> Vec<ReconTrack> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].prob.total_cmp(&cands[a].prob).then(a.cmp(&b)));
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut kept = Vec::new();
    for i in order {
        if cands[i].hit_refs.iter().any(|h| used.contains(h)) {
            continue;
        }
        used.extend(cands[i].hit_refs.iter().copied());
        kept.push(cands[i].clone());
    }
    kept
}

/// Reconstructs an event end to end: grows candidates, classifies them,
/// and resolves hit-sharing so the returned tracks are pairwise disjoint.
pub fn follow_event(
    event: &Event,
    model: &Model,
    cfg: &FollowConfig,
) -> Result<Vec<ReconTrack>, FollowError> {
    let accepted = grow_candidates(event, model, cfg)?;
    Ok(resolve_conflicts(&accepted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{generate_event, DetectorConfig, FakeMode, GenConfig, Hit, TrackParams};
    use crate::model::ModelConfig;
    use crate::seeding;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(det: &DetectorConfig, seed: u64) -> Model {
        let cfg = ModelConfig {
            conv_filters: 4,
            conv_kernel: 3,
            gru1_hidden: 5,
            gru2_hidden: 5,
            // Unit gains: these tests exercise gating mechanics with a
            // random model, and amplified random heads collapse the gates.
            conv_init_gain: 1.0,
            gru_init_gain: 1.0,
            ..ModelConfig::default()
        };
        Model::init(&cfg, det, seed).unwrap()
    }

    fn open_cfg() -> FollowConfig {
        // Thresholds low enough that nothing is pruned or rejected.
        FollowConfig {
            prune_threshold: 1e-9,
            accept_threshold: 1e-9,
            ..FollowConfig::default()
        }
    }

    #[test]
    fn point_in_ellipse_matches_the_inequality() {
        let e = Ellipse {
            cx: 1.0,
            cy: -2.0,
            r1: 3.0,
            r2: 0.5,
        };
        assert!(point_in_ellipse([1.0, -2.0], &e));
        assert!(point_in_ellipse([4.0, -2.0], &e), "boundary is included");
        assert!(point_in_ellipse([1.0, -1.5], &e));
        assert!(!point_in_ellipse([4.0001, -2.0], &e));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let x: f64 = rng.gen_range(-5.0..7.0);
            let y: f64 = rng.gen_range(-4.0..0.0);
            let u = (x - e.cx) / e.r1;
            let v = (y - e.cy) / e.r2;
            assert_eq!(point_in_ellipse([x, y], &e), u * u + v * v <= 1.0);
        }
    }

    #[test]
    fn empty_event_yields_no_tracks() {
        let det = DetectorConfig::default();
        let model = tiny_model(&det, 1);
        let ev = Event {
            event_id: 0,
            tracks: alloc::vec![],
            hits: alloc::vec![],
        };
        let tracks = follow_event(&ev, &model, &FollowConfig::default()).unwrap();
        assert!(tracks.is_empty());
    }

    #[test]
    fn out_of_range_station_is_rejected() {
        let det = DetectorConfig::default();
        let model = tiny_model(&det, 1);
        let ev = Event {
            event_id: 0,
            tracks: alloc::vec![],
            hits: alloc::vec![Hit {
                station: 7,
                x: 0.0,
                y: 0.0,
                z: 150.0,
                track_id: -1,
            }],
        };
        let err = follow_event(&ev, &model, &FollowConfig::default()).unwrap_err();
        assert_eq!(
            err,
            FollowError::StationOutOfRange {
                station: 7,
                n_stations: 5
            }
        );
    }

    #[test]
    fn bad_configs_are_rejected() {
        for cfg in [
            FollowConfig {
                prune_threshold: 0.0,
                ..FollowConfig::default()
            },
            FollowConfig {
                accept_threshold: 1.0,
                ..FollowConfig::default()
            },
            FollowConfig {
                ellipse_inflate: 0.9,
                ..FollowConfig::default()
            },
            FollowConfig {
                max_branches: Some(0),
                ..FollowConfig::default()
            },
        ] {
            assert_eq!(cfg.validate(), Err(FollowError::BadConfig));
        }
    }

    #[test]
    fn conflict_free_candidates_all_survive() {
        let cands = alloc::vec![
            ReconTrack {
                hit_refs: alloc::vec![0, 2, 4],
                prob: 0.7
            },
            ReconTrack {
                hit_refs: alloc::vec![1, 3, 5],
                prob: 0.9
            },
        ];
        let kept = resolve_conflicts(&cands);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].prob, 0.9);
        assert_eq!(kept[1].prob, 0.7);
    }

    #[test]
    fn shared_hit_goes_to_the_higher_probability() {
        let cands = alloc::vec![
            ReconTrack {
                hit_refs: alloc::vec![0, 1, 2],
                prob: 0.8
            },
            ReconTrack {
                hit_refs: alloc::vec![2, 3, 4],
                prob: 0.9
            },
        ];
        let kept = resolve_conflicts(&cands);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].prob, 0.9);
    }

    #[test]
    fn equal_probabilities_break_toward_the_lower_index() {
        let cands = alloc::vec![
            ReconTrack {
                hit_refs: alloc::vec![0, 1],
                prob: 0.8
            },
            ReconTrack {
                hit_refs: alloc::vec![1, 2],
                prob: 0.8
            },
        ];
        let kept = resolve_conflicts(&cands);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].hit_refs, [0, 1]);
    }

    #[test]
    fn resolution_matches_a_reference_greedy_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..20usize);
            let cands: Vec<ReconTrack> = (0..n)
                .map(|_| {
                    let k = rng.gen_range(1..6usize);
                    let mut hit_refs: Vec<usize> =
                        (0..k).map(|_| rng.gen_range(0..15usize)).collect();
                    hit_refs.sort_unstable();
                    hit_refs.dedup();
                    ReconTrack {
                        hit_refs,
                        prob: rng.gen_range(0.0..1.0),
                    }
                })
                .collect();
            let kept = resolve_conflicts(&cands);
            // Disjointness.
            let mut seen = BTreeSet::new();
            for t in &kept {
                for &h in &t.hit_refs {
                    assert!(seen.insert(h), "hit {h} appears twice");
                }
            }
            // Greedy reference: walk priorities with a per-hit claim map.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                cands[b].prob.total_cmp(&cands[a].prob).then(a.cmp(&b))
            });
            let mut claimed = [false; 15];
            let mut expect: Vec<&ReconTrack> = Vec::new();
            for i in order {
                if cands[i].hit_refs.iter().all(|&h| !claimed[h]) {
                    for &h in &cands[i].hit_refs {
                        claimed[h] = true;
                    }
                    expect.push(&cands[i]);
                }
            }
            assert_eq!(kept.len(), expect.len());
            for (a, b) in kept.iter().zip(expect) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn every_extension_lies_in_the_gate_that_admitted_it() {
        let det = DetectorConfig::default();
        let gen = GenConfig {
            tracks_min: 3,
            tracks_max: 3,
            fake_fraction: 0.3,
            ..GenConfig::default()
        };
        let ev = generate_event(&det, &gen, 0, seeding::event_seed(11, 0)).unwrap();
        let model = tiny_model(&det, 2);
        let cfg = FollowConfig {
            max_branches: Some(2),
            ellipse_inflate: 1.25,
            ..open_cfg()
        };
        let grown = grow_candidates(&ev, &model, &cfg).unwrap();
        assert!(!grown.is_empty(), "random-init gates should admit hits");
        for t in &grown {
            // Station-consecutive structure from 0.
            for (s, &r) in t.hit_refs.iter().enumerate() {
                assert_eq!(ev.hits[r].station, s);
            }
            // Recompute each prefix's gate and re-test the admitted hit.
            let mut points = alloc::vec![[0.0, 0.0, 0.0]];
            for &r in &t.hit_refs {
                points.push([ev.hits[r].x, ev.hits[r].y, ev.hits[r].z]);
            }
            for k in 2..points.len() {
                let out = model.forward(&points[..k]).unwrap();
                let e = out.ellipse.unwrap();
                let gate = Ellipse {
                    cx: e.cx,
                    cy: e.cy,
                    r1: e.r1 * cfg.ellipse_inflate,
                    r2: e.r2 * cfg.ellipse_inflate,
                };
                assert!(
                    point_in_ellipse([points[k][0], points[k][1]], &gate),
                    "extension at point {k} escaped its gate"
                );
            }
        }
    }

    #[test]
    fn inflating_the_gates_never_shrinks_the_candidate_set() {
        let det = DetectorConfig {
            fake_mode: FakeMode::None,
            ..DetectorConfig::default()
        };
        let gen = GenConfig {
            tracks_min: 2,
            tracks_max: 2,
            ..GenConfig::default()
        };
        let ev = generate_event(&det, &gen, 3, seeding::event_seed(13, 3)).unwrap();
        let model = tiny_model(&det, 4);
        let narrow = grow_candidates(&ev, &model, &open_cfg()).unwrap();
        let wide = grow_candidates(
            &ev,
            &model,
            &FollowConfig {
                ellipse_inflate: 1.6,
                ..open_cfg()
            },
        )
        .unwrap();
        let wide_set: BTreeSet<Vec<usize>> =
            wide.iter().map(|t| t.hit_refs.clone()).collect();
        assert!(wide.len() >= narrow.len());
        for t in &narrow {
            assert!(
                wide_set.contains(&t.hit_refs),
                "candidate lost under inflation: {:?}",
                t.hit_refs
            );
        }
    }

    #[test]
    fn early_stop_is_gated_by_the_flag() {
        // One gently sloped track with hits on stations 0..=2 only; the
        // follower reaches station 3, finds nothing, and either accepts the
        // short candidate (flag on) or drops it (flag off).
        let det = DetectorConfig::default();
        let hits: Vec<Hit> = (0..3)
            .map(|s| {
                let z = det.station_z[s];
                Hit {
                    station: s,
                    x: 0.03 * z,
                    y: 0.02 * z,
                    z,
                    track_id: 0,
                }
            })
            .collect();
        let ev = Event {
            event_id: 0,
            tracks: alloc::vec![TrackParams {
                track_id: 0,
                kappa: 0.0,
                phi0: 0.03,
                ty: 0.02
            }],
            hits,
        };
        let model = tiny_model(&det, 6);
        let base = FollowConfig {
            ellipse_inflate: 2.0,
            ..open_cfg()
        };
        let without = follow_event(&ev, &model, &base).unwrap();
        assert!(without.is_empty());
        let with = follow_event(
            &ev,
            &model,
            &FollowConfig {
                allow_early_stop: true,
                ..base
            },
        )
        .unwrap();
        assert_eq!(with.len(), 1);
        assert_eq!(with[0].hit_refs, [0, 1, 2]);
        assert_eq!(with[0].n_points(), 4);
    }

    #[test]
    fn following_is_deterministic() {
        let det = DetectorConfig::default();
        let gen = GenConfig {
            tracks_min: 4,
            tracks_max: 4,
            ..GenConfig::default()
        };
        let ev = generate_event(&det, &gen, 9, seeding::event_seed(21, 9)).unwrap();
        let model = tiny_model(&det, 8);
        let cfg = FollowConfig {
            max_branches: Some(3),
            ..open_cfg()
        };
        let a = follow_event(&ev, &model, &cfg).unwrap();
        let b = follow_event(&ev, &model, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
