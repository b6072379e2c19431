//! Toy multi-station planar detector: parametric tracks, Gaussian hit
//! smearing, and combinatorial fake hits.
//!
//! Tracks originate at the target (the origin). In the XoZ plane a track is
//! a circle of signed curvature `kappa` through the origin with tangent
//! direction `phi0` there; in the YoZ plane it is the straight line
//! `y = ty * z`. Stations are planes at fixed, strictly increasing z > 0.
//!
//! Fake hits model the strip-readout pathology: two particles firing
//! crossed strips on the same station produce spurious intersection points,
//! so each ordered pair of true hits `(i, j)` can spawn a fake at
//! `(x_i, y_j)`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fmath;

/// `track_id` value marking a fake hit.
pub const FAKE_ID: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeMode {
    /// Fakes at coordinate crossings of true-hit pairs on each station.
    StripCrossing,
    /// Fakes uniform over each station, count matched to strip-crossing.
    Uniform,
    /// No fakes.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Station plane positions in cm, strictly increasing, all positive.
    pub station_z: Vec<f64>,
    /// Per-station half-size along x, cm.
    pub half_extent_x: Vec<f64>,
    /// Per-station half-size along y, cm.
    pub half_extent_y: Vec<f64>,
    /// Gaussian measurement smear, cm, applied to x and y independently.
    pub smear_sigma: f64,
    pub fake_mode: FakeMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        // Five stations, 20 cm apart; extents scale linearly with z from a
        // 64 x 41 cm station 0 so straight lines through the origin stay in
        // acceptance at every plane.
        let station_z = alloc::vec![30.0, 50.0, 70.0, 90.0, 110.0];
        let half_extent_x = station_z.iter().map(|z| 32.0 * z / 30.0).collect();
        let half_extent_y = station_z.iter().map(|z| 20.5 * z / 30.0).collect();
        DetectorConfig {
            station_z,
            half_extent_x,
            half_extent_y,
            smear_sigma: 0.05,
            fake_mode: FakeMode::StripCrossing,
        }
    }
}

impl DetectorConfig {
    pub fn n_stations(&self) -> usize {
        self.station_z.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.station_z.len();
        if n < 2 {
            return Err(ConfigError::new("at least two stations required"));
        }
        if self.half_extent_x.len() != n || self.half_extent_y.len() != n {
            return Err(ConfigError::new(
                "half_extent_x and half_extent_y must have one entry per station",
            ));
        }
        if self.station_z[0] <= 0.0 {
            return Err(ConfigError::new("station_z must be positive"));
        }
        if self.station_z.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("station_z must be strictly increasing"));
        }
        if self
            .half_extent_x
            .iter()
            .chain(self.half_extent_y.iter())
            .any(|&e| !(e > 0.0))
        {
            return Err(ConfigError::new("station half-extents must be positive"));
        }
        if !(self.smear_sigma >= 0.0) || !self.smear_sigma.is_finite() {
            return Err(ConfigError::new("smear_sigma must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub tracks_min: usize,
    pub tracks_max: usize,
    /// Curvature magnitude range, cm^-1; the sign is sampled per track.
    pub kappa_abs_min: f64,
    pub kappa_abs_max: f64,
    /// Initial XoZ direction angle range, radians.
    pub phi0_min: f64,
    pub phi0_max: f64,
    /// YoZ slope range.
    pub ty_min: f64,
    pub ty_max: f64,
    /// Strip-crossing mode: per-pair keep probability. Uniform mode: fake
    /// count per station is round(fake_fraction * k * (k - 1)) for k true
    /// hits, matching the strip-crossing expectation.
    pub fake_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            tracks_min: 7,
            tracks_max: 10,
            kappa_abs_min: 2e-4,
            kappa_abs_max: 3.5e-3,
            phi0_min: -0.4,
            phi0_max: 0.4,
            ty_min: -0.5,
            ty_max: 0.5,
            fake_fraction: 0.75,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tracks_min > self.tracks_max {
            return Err(ConfigError::new("tracks_min must not exceed tracks_max"));
        }
        if !(0.0 <= self.kappa_abs_min && self.kappa_abs_min <= self.kappa_abs_max) {
            return Err(ConfigError::new("kappa magnitude range invalid"));
        }
        if !(self.phi0_min <= self.phi0_max)
            || self.phi0_min <= -core::f64::consts::FRAC_PI_2
            || self.phi0_max >= core::f64::consts::FRAC_PI_2
        {
            return Err(ConfigError::new(
                "phi0 range must lie inside (-pi/2, pi/2)",
            ));
        }
        if !(self.ty_min <= self.ty_max) {
            return Err(ConfigError::new("ty range invalid"));
        }
        if !(0.0..=1.0).contains(&self.fake_fraction) {
            return Err(ConfigError::new("fake_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackParams {
    pub track_id: i64,
    /// Signed curvature in the XoZ plane, cm^-1.
    pub kappa: f64,
    /// Direction angle at the origin, measured from the z axis, radians.
    pub phi0: f64,
    /// Slope dy/dz.
    pub ty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub station: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Owning track, or [`FAKE_ID`] for a fake.
    pub track_id: i64,
}

impl Hit {
    pub fn is_fake(&self) -> bool {
        self.track_id == FAKE_ID
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: u64,
    pub tracks: Vec<TrackParams>,
    pub hits: Vec<Hit>,
}

impl Event {
    /// Indices into `hits` for one station, in storage order.
    pub fn hits_on(&self, station: usize) -> impl Iterator<Item = usize> + '_ {
        self.hits
            .iter()
            .enumerate()
            .filter(move |(_, h)| h.station == station)
            .map(|(i, _)| i)
    }

    /// Structural checks used when ingesting event files: station indices
    /// and z values consistent with the detector, hits inside extents, true
    /// hits referencing listed tracks with at most one hit per station.
    pub fn validate(&self, det: &DetectorConfig) -> Result<(), ConfigError> {
        let n = det.n_stations();
        let mut seen: Vec<(i64, usize)> = Vec::new();
        for (i, h) in self.hits.iter().enumerate() {
            if h.station >= n {
                return Err(ConfigError::new_owned(alloc::format!(
                    "hit {i}: station {} out of range",
                    h.station
                )));
            }
            if h.z != det.station_z[h.station] {
                return Err(ConfigError::new_owned(alloc::format!(
                    "hit {i}: z does not match station plane"
                )));
            }
            if fmath::abs(h.x) > det.half_extent_x[h.station]
                || fmath::abs(h.y) > det.half_extent_y[h.station]
            {
                return Err(ConfigError::new_owned(alloc::format!(
                    "hit {i}: outside station extent"
                )));
            }
            if !h.is_fake() {
                if !self.tracks.iter().any(|t| t.track_id == h.track_id) {
                    return Err(ConfigError::new_owned(alloc::format!(
                        "hit {i}: track_id {} not in event track list",
                        h.track_id
                    )));
                }
                if seen.contains(&(h.track_id, h.station)) {
                    return Err(ConfigError::new_owned(alloc::format!(
                        "hit {i}: duplicate hit for track {} on station {}",
                        h.track_id, h.station
                    )));
                }
                seen.push((h.track_id, h.station));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectError {
    /// The circle turns back before reaching the requested plane.
    PlaneUnreachable { z: f64 },
    /// Projection is defined only downstream of the target.
    NonPositiveZ { z: f64 },
}

impl core::fmt::Display for ProjectError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ProjectError::PlaneUnreachable { z } => {
                write!(f, "plane unreachable: track turns back before z = {z}")
            }
            ProjectError::NonPositiveZ { z } => {
                write!(f, "plane z = {z} is not downstream of the target")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ProjectError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    detail: String,
}

impl ConfigError {
    fn new(detail: &str) -> Self {
        ConfigError {
            detail: String::from(detail),
        }
    }

    fn new_owned(detail: String) -> Self {
        ConfigError { detail }
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }
}

impl core::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "invalid configuration: {}", self.detail)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

/// Intersects the track with the plane at `z`.
///
/// The XoZ circle satisfies `sin(phi(z)) = kappa * z + sin(phi0)` along the
/// arc; writing `u` for that quantity, the plane is reachable iff |u| <= 1,
/// and the crossing point is
///
/// ```text
/// x = z * (u + sin(phi0)) / (cos(phi0) + cos(phi1)),   phi1 = asin(u)
/// ```
///
/// which is algebraically equal to `(cos(phi0) - cos(phi1)) / kappa` but
/// free of cancellation, and reduces exactly to `z * tan(phi0)` as
/// `kappa -> 0`. The YoZ projection is the line `y = ty * z`.
pub fn project_track(params: &TrackParams, z: f64) -> Result<(f64, f64), ProjectError> {
    if !(z > 0.0) {
        return Err(ProjectError::NonPositiveZ { z });
    }
    let s0 = fmath::sin(params.phi0);
    let u = params.kappa * z + s0;
    if fmath::abs(u) > 1.0 {
        return Err(ProjectError::PlaneUnreachable { z });
    }
    let phi1 = fmath::asin(u);
    let denom = fmath::cos(params.phi0) + fmath::cos(phi1);
    if denom <= 0.0 {
        return Err(ProjectError::PlaneUnreachable { z });
    }
    Ok((z * (u + s0) / denom, params.ty * z))
}

/// One standard normal draw (Box-Muller; two uniforms consumed per call).
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    fmath::sqrt(-2.0 * fmath::ln_1p(-u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

fn clamp(v: f64, half: f64) -> f64 {
    v.max(-half).min(half)
}

/// Generates one event deterministically from `(det, gen, seed)`.
///
/// Track parameters are sampled first, then per-station smeared hits (true
/// hits falling outside the station extent are dropped), then fakes. In
/// strip-crossing mode every ordered pair `(i, j)` of distinct true hits on
/// a station yields, with probability `fake_fraction`, a fake at
/// `(x_i, y_j)` plus independent smear, clamped into the extent so the
/// pair count is exact.
pub fn generate_event(
    det: &DetectorConfig,
    gen: &GenConfig,
    event_id: u64,
    seed: u64,
) -> Result<Event, ConfigError> {
    det.validate()?;
    gen.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_tracks = rng.gen_range(gen.tracks_min..=gen.tracks_max);
    let mut tracks = Vec::with_capacity(n_tracks);
    for track_id in 0..n_tracks as i64 {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let kappa = sign * rng.gen_range(gen.kappa_abs_min..=gen.kappa_abs_max);
        let phi0 = rng.gen_range(gen.phi0_min..=gen.phi0_max);
        let ty = rng.gen_range(gen.ty_min..=gen.ty_max);
        tracks.push(TrackParams {
            track_id,
            kappa,
            phi0,
            ty,
        });
    }

    let mut hits = Vec::new();
    for t in &tracks {
        for (station, &z) in det.station_z.iter().enumerate() {
            let Ok((x0, y0)) = project_track(t, z) else {
                continue;
            };
            let x = x0 + det.smear_sigma * gauss(&mut rng);
            let y = y0 + det.smear_sigma * gauss(&mut rng);
            if fmath::abs(x) > det.half_extent_x[station]
                || fmath::abs(y) > det.half_extent_y[station]
            {
                continue;
            }
            hits.push(Hit {
                station,
                x,
                y,
                z,
                track_id: t.track_id,
            });
        }
    }

    let n_true = hits.len();
    match det.fake_mode {
        FakeMode::None => {}
        FakeMode::StripCrossing => {
            for station in 0..det.n_stations() {
                let st: Vec<usize> = (0..n_true).filter(|&i| hits[i].station == station).collect();
                let (hx, hy) = (det.half_extent_x[station], det.half_extent_y[station]);
                let z = det.station_z[station];
                for &i in &st {
                    for &j in &st {
                        if i == j {
                            continue;
                        }
                        if rng.gen::<f64>() >= gen.fake_fraction {
                            continue;
                        }
                        let x = clamp(hits[i].x + det.smear_sigma * gauss(&mut rng), hx);
                        let y = clamp(hits[j].y + det.smear_sigma * gauss(&mut rng), hy);
                        hits.push(Hit {
                            station,
                            x,
                            y,
                            z,
                            track_id: FAKE_ID,
                        });
                    }
                }
            }
        }
        FakeMode::Uniform => {
            for station in 0..det.n_stations() {
                let k = (0..n_true).filter(|&i| hits[i].station == station).count();
                let count = fmath::round(gen.fake_fraction * (k * k.saturating_sub(1)) as f64)
                    as usize;
                let (hx, hy) = (det.half_extent_x[station], det.half_extent_y[station]);
                let z = det.station_z[station];
                for _ in 0..count {
                    hits.push(Hit {
                        station,
                        x: rng.gen_range(-hx..=hx),
                        y: rng.gen_range(-hy..=hy),
                        z,
                        track_id: FAKE_ID,
                    });
                }
            }
        }
    }

    Ok(Event {
        event_id,
        tracks,
        hits,
    })
}
