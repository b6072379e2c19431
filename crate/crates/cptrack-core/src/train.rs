//! Training-set construction, the optimization loop, and evaluation.
//!
//! Full-length labelled candidates are expanded into prefixes of every
//! length from 2 up. Each prefix is relabelled from its own hits (a ghost
//! whose first hits all belong to one real track is a true segment), true
//! prefixes with a next station carry that track's true next hit as the
//! regression target, and ghost prefixes of length 2 are excluded (with no
//! probability head there is nothing to supervise on them).
//!
//! Samples are stored grouped by length in flat buffers; training shuffles
//! within each group per epoch and walks same-length batches round-robin
//! across groups so the gradient mixture stays stationary. Everything is
//! deterministic given the seeds.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::detector::{generate_event, ConfigError, DetectorConfig, Event, GenConfig};
use crate::loss::{joint_loss_value_grad, LossConfig, LossError, RawHeads, Reduction};
use crate::model::{Model, ModelError};
use crate::nn::{clip_global_norm, sigmoid, AdamConfig, AdamState, Tensor};
use crate::seed::{label_candidate, run_seed_search, Label, SearchError, SearchWindow, TrackCandidate};
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of candidates assigned to the training split.
    pub split_fraction: f64,
    /// Classification threshold used for evaluation metrics.
    pub threshold: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig::default(),
            split_fraction: 0.7,
            threshold: 0.5,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && self.split_fraction > 0.0
            && self.split_fraction < 1.0
            && self.threshold > 0.0
            && self.threshold < 1.0
            && self.clip_norm.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::BadConfig)
        }
    }
}

/// All samples of one prefix length, flat and sample-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LengthGroup {
    pub len: usize,
    /// `n * len * 3` coordinates in cm.
    pub points: Vec<f64>,
    pub labels: Vec<bool>,
    /// True next point on station `len - 1`, present for true samples with
    /// a next station whose track has a hit there.
    pub targets: Vec<Option<[f64; 2]>>,
    /// Source event per sample (index into the event list).
    pub event_idx: Vec<usize>,
}

impl LengthGroup {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }
}

/// Training or evaluation samples grouped by prefix length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub groups: BTreeMap<usize, LengthGroup>,
}

impl SampleSet {
    pub fn n_samples(&self) -> usize {
        self.groups.values().map(LengthGroup::n_samples).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    EmptySet,
    /// Lengths with a probability head need both a true and a ghost sample.
    NeedBothClasses,
    /// Non-finite loss; reports the epoch and batch that produced it.
    Diverged { epoch: usize, batch: usize },
    BadConfig,
    Model(ModelError),
    Loss(LossError),
    Config(ConfigError),
    Search(SearchError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<SearchError> for TrainError {
    fn from(e: SearchError) -> Self {
        TrainError::Search(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptySet => write!(f, "no training samples"),
            TrainError::NeedBothClasses => {
                write!(f, "training needs both true and ghost samples at classified lengths")
            }
            TrainError::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            TrainError::BadConfig => write!(f, "training configuration out of range"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Search(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

/// Expands full-length labelled candidates into per-length samples.
///
/// Every candidate contributes one prefix per length `2..=n_stations + 1`,
/// each labelled from its own hits, except ghost prefixes of length 2 and
/// true prefixes whose regression target cannot be resolved at length 2.
/// `cands` pairs each candidate with the index of its event in `events`.
pub fn expand_candidates(
    events: &[Event],
    cands: &[(usize, TrackCandidate)],
    n_stations: usize,
) -> SampleSet {
    let mut set = SampleSet::default();
    for &(ev_idx, ref cand) in cands {
        expand_one(&mut set, &events[ev_idx], ev_idx, cand, n_stations);
    }
    set
}

/// Appends every admissible prefix of one full-length candidate to `set`.
fn expand_one(
    set: &mut SampleSet,
    ev: &Event,
    ev_idx: usize,
    cand: &TrackCandidate,
    n_stations: usize,
) {
    let full = n_stations + 1;
    assert_eq!(
        cand.len(),
        full,
        "expand_candidates requires full-length candidates"
    );
    for len in 2..=full {
        let truth = label_candidate(&ev.hits, &cand.hit_refs[..len - 1]);
        let label = truth == Label::TrueTrack;
        if len == 2 && !label {
            continue;
        }
        let target = if label && len <= n_stations {
            let tid = ev.hits[cand.hit_refs[0]].track_id;
            ev.hits
                .iter()
                .find(|h| !h.is_fake() && h.track_id == tid && h.station == len - 1)
                .map(|h| [h.x, h.y])
        } else {
            None
        };
        if len == 2 && target.is_none() {
            continue;
        }
        let group = set.groups.entry(len).or_insert_with(|| LengthGroup {
            len,
            ..LengthGroup::default()
        });
        for p in &cand.points[..len] {
            group.points.extend_from_slice(p);
        }
        group.labels.push(label);
        group.targets.push(target);
        group.event_idx.push(ev_idx);
    }
}

/// Deterministically splits candidate indices into train/test before prefix
/// expansion, so no candidate's prefixes straddle the two sets.
pub fn split_candidates(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, stream::SPLIT));
    order.shuffle(&mut rng);
    let cut = ((n as f64) * fraction).round() as usize;
    let cut = cut.min(n);
    let test = order.split_off(cut);
    (order, test)
}

/// Subsamples candidate indices into a `1:ratio` true:ghost mix, keeping as
/// many true candidates as the ghost pool allows.
pub fn make_eval_mix(
    cands: &[(usize, TrackCandidate)],
    ratio: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, stream::EVAL_MIX));
    let mut trues: Vec<usize> = (0..cands.len())
        .filter(|&i| cands[i].1.label == Label::TrueTrack)
        .collect();
    let mut ghosts: Vec<usize> = (0..cands.len())
        .filter(|&i| cands[i].1.label == Label::Ghost)
        .collect();
    trues.shuffle(&mut rng);
    ghosts.shuffle(&mut rng);
    let n_true = trues.len().min(ghosts.len() / ratio);
    let mut mix: Vec<usize> = trues[..n_true]
        .iter()
        .chain(ghosts[..n_true * ratio].iter())
        .copied()
        .collect();
    mix.sort_unstable();
    mix
}

/// Controls streamed dataset assembly for large runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssemblyConfig {
    /// Number of simulated events.
    pub n_events: usize,
    /// Per-event cap on ghost candidates kept for training. The search
    /// returns hundreds of ghosts per true track; training needs a stable
    /// class mixture more than it needs every ghost, and the cap keeps the
    /// epoch cost proportional to the event count.
    pub train_ghost_cap: Option<usize>,
    /// Per-event cap on ghost candidates entering the held-out pool before
    /// the evaluation mix is drawn.
    pub eval_ghost_cap: Option<usize>,
    /// ghost:true ratio of the held-out evaluation mix.
    pub eval_ghost_ratio: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            n_events: 2000,
            train_ghost_cap: Some(60),
            eval_ghost_cap: Some(100),
            eval_ghost_ratio: 10,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.n_events > 0
            && self.eval_ghost_ratio > 0
            && self.train_ghost_cap != Some(0)
            && self.eval_ghost_cap != Some(0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::BadConfig)
        }
    }
}

/// Assembled training samples plus the held-out evaluation mix.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledData {
    pub events: Vec<Event>,
    pub train: SampleSet,
    pub eval: SampleSet,
    /// Candidates found by the search across all events.
    pub n_candidates: usize,
    /// Candidates kept for training after the split and the ghost cap.
    pub n_train_candidates: usize,
    /// Candidates in the evaluation mix.
    pub n_eval_candidates: usize,
}

/// Incremental dataset builder: feed it one event's candidates at a time,
/// then [`DatasetAssembler::finish`]. Candidates are assigned to
/// train/held-out at the candidate level (so no candidate's prefixes
/// straddle the two sets), ghosts are capped per event, the training split
/// is expanded into per-length samples immediately, and a
/// `1:eval_ghost_ratio` true:ghost evaluation mix is drawn from the
/// held-out pool at the end. The uncapped candidate pool — about two
/// orders of magnitude larger than what training keeps — is never
/// materialized across events.
pub struct DatasetAssembler {
    cfg: AssemblyConfig,
    split_fraction: f64,
    n_stations: usize,
    seed: u64,
    split_base: u64,
    cap_base: u64,
    events: Vec<Event>,
    train: SampleSet,
    eval_pool: Vec<(usize, TrackCandidate)>,
    n_candidates: usize,
    n_train_candidates: usize,
}

impl DatasetAssembler {
    pub fn new(
        cfg: &AssemblyConfig,
        n_stations: usize,
        split_fraction: f64,
        seed: u64,
    ) -> Result<DatasetAssembler, TrainError> {
        cfg.validate()?;
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(TrainError::BadConfig);
        }
        Ok(DatasetAssembler {
            cfg: *cfg,
            split_fraction,
            n_stations,
            seed,
            split_base: seeding::derive(seed, stream::SPLIT),
            cap_base: seeding::derive(seed, stream::GHOST_CAP),
            events: Vec::new(),
            train: SampleSet::default(),
            eval_pool: Vec::new(),
            n_candidates: 0,
            n_train_candidates: 0,
        })
    }

    /// Consumes one event and its full-length candidates. The split and
    /// cap draws are keyed by `event.event_id`, so the result does not
    /// depend on the order events are pushed in.
    pub fn push_event(&mut self, event: Event, cands: Vec<TrackCandidate>) {
        let ev_id = event.event_id;
        self.n_candidates += cands.len();

        let mut split_rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(self.split_base, ev_id));
        let mut cap_rng = ChaCha8Rng::seed_from_u64(seeding::derive(self.cap_base, ev_id));

        let mut tr_true = Vec::new();
        let mut tr_ghost = Vec::new();
        let mut ho_true = Vec::new();
        let mut ho_ghost = Vec::new();
        for cand in cands {
            let to_train = split_rng.gen_bool(self.split_fraction);
            match (to_train, cand.label == Label::TrueTrack) {
                (true, true) => tr_true.push(cand),
                (true, false) => tr_ghost.push(cand),
                (false, true) => ho_true.push(cand),
                (false, false) => ho_ghost.push(cand),
            }
        }
        let mut cap = |v: &mut Vec<TrackCandidate>, cap: Option<usize>| {
            if let Some(c) = cap {
                if v.len() > c {
                    v.shuffle(&mut cap_rng);
                    v.truncate(c);
                }
            }
        };
        cap(&mut tr_ghost, self.cfg.train_ghost_cap);
        cap(&mut ho_ghost, self.cfg.eval_ghost_cap);

        let ev_idx = self.events.len();
        self.n_train_candidates += tr_true.len() + tr_ghost.len();
        for cand in tr_true.iter().chain(tr_ghost.iter()) {
            expand_one(&mut self.train, &event, ev_idx, cand, self.n_stations);
        }
        self.eval_pool
            .extend(ho_true.into_iter().chain(ho_ghost).map(|c| (ev_idx, c)));
        self.events.push(event);
    }

    /// Draws the evaluation mix and returns the assembled data.
    pub fn finish(self) -> AssembledData {
        let mix = make_eval_mix(&self.eval_pool, self.cfg.eval_ghost_ratio, self.seed);
        let mix_cands: Vec<(usize, TrackCandidate)> =
            mix.iter().map(|&i| self.eval_pool[i].clone()).collect();
        let eval = expand_candidates(&self.events, &mix_cands, self.n_stations);
        AssembledData {
            events: self.events,
            train: self.train,
            eval,
            n_candidates: self.n_candidates,
            n_train_candidates: self.n_train_candidates,
            n_eval_candidates: mix_cands.len(),
        }
    }
}

/// Simulates `cfg.n_events` events, runs the seed search on each, and
/// feeds them through a [`DatasetAssembler`], one event at a time.
pub fn assemble_dataset(
    det: &DetectorConfig,
    gen: &GenConfig,
    window: &SearchWindow,
    cfg: &AssemblyConfig,
    split_fraction: f64,
    seed: u64,
) -> Result<AssembledData, TrainError> {
    let n_stations = det.n_stations();
    let mut asm = DatasetAssembler::new(cfg, n_stations, split_fraction, seed)?;
    for ev_id in 0..cfg.n_events {
        let ev = generate_event(det, gen, ev_id as u64, seeding::event_seed(seed, ev_id as u64))?;
        let cands = run_seed_search(&ev, n_stations, window)?;
        asm.push_event(ev, cands);
    }
    Ok(asm.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// Thresholded confusion counts; a sample is predicted positive when its
/// probability is at least `threshold`.
pub fn confusion(labels: &[bool], probs: &[f64], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&label, &p) in labels.iter().zip(probs.iter()) {
        let positive = p >= threshold;
        match (label, positive) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_neg += 1,
            (false, true) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    c
}

impl Confusion {
    pub fn recall(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_neg;
        (denom > 0).then(|| self.true_pos as f64 / denom as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_pos;
        (denom > 0).then(|| self.true_pos as f64 / denom as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.true_pos + self.false_pos + self.true_neg + self.false_neg;
        (total > 0).then(|| (self.true_pos + self.true_neg) as f64 / total as f64)
    }
}

/// One row of the per-length metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMetrics {
    pub len: usize,
    pub n_true: usize,
    pub n_ghost: usize,
    pub confusion: Confusion,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    /// Mean predicted ellipse area over true samples, cm^2; absent at full
    /// length where no ellipse is produced.
    pub mean_ellipse_area: Option<f64>,
}

/// Per-length classification/regression quality, one row per populated
/// length with a probability head (3 and up).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<LengthMetrics>,
}

impl MetricsTable {
    pub fn row(&self, len: usize) -> Option<&LengthMetrics> {
        self.rows.iter().find(|r| r.len == len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample joint loss across the epoch's training batches.
    pub train_loss: f64,
    /// Mean per-sample joint loss over the held-out set.
    pub test_loss: f64,
    pub metrics: MetricsTable,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Scratch buffers for one same-length batch.
struct BatchScratch {
    pts: Vec<f64>,
    d_logits: Vec<f64>,
    d_reg: Vec<f64>,
}

/// Evaluates raw heads for every sample of a group, in batches, invoking
/// `sink(sample_index, logit, reg)` per sample.
fn for_each_raw<F: FnMut(usize, f64, &[f64; 4])>(
    model: &Model,
    group: &LengthGroup,
    batch_size: usize,
    mut sink: F,
) -> Result<(), ModelError> {
    let n = group.n_samples();
    let stride = group.len * 3;
    let mut start = 0;
    while start < n {
        let bn = batch_size.min(n - start);
        let pts = &group.points[start * stride..(start + bn) * stride];
        let (raw, _) = model.forward_raw(pts, bn, group.len)?;
        for b in 0..bn {
            let reg: [f64; 4] = raw.reg[b * 4..b * 4 + 4].try_into().expect("4 per sample");
            sink(start + b, raw.logits[b], &reg);
        }
        start += bn;
    }
    Ok(())
}

/// Builds the per-sample loss inputs, honoring head presence and target
/// availability (a true sample without a resolvable target skips the
/// regression head; expansion guarantees it then has a probability head).
fn raw_heads_for(
    model: &Model,
    len: usize,
    label: bool,
    target: Option<[f64; 2]>,
    logit: f64,
    reg: &[f64; 4],
) -> RawHeads {
    let use_reg = model.has_ellipse(len) && (!label || target.is_some());
    RawHeads {
        logit: model.has_prob(len).then_some(logit),
        reg: use_reg.then_some(*reg),
    }
}

/// Mean per-sample joint loss and the metrics table for a sample set.
pub fn evaluate_with_loss(
    model: &Model,
    set: &SampleSet,
    loss_cfg: &LossConfig,
    threshold: f64,
    batch_size: usize,
) -> Result<(f64, MetricsTable), TrainError> {
    let scales = model.head_scales();
    let mut loss_sum = 0.0;
    let mut n_total = 0usize;
    let mut rows = Vec::new();
    for group in set.groups.values() {
        let n = group.n_samples();
        if n == 0 {
            continue;
        }
        let mut probs = vec![0.0; n];
        let mut area_sum = 0.0;
        let mut area_n = 0usize;
        let mut err: Option<TrainError> = None;
        for_each_raw(model, group, batch_size, |i, logit, reg| {
            if err.is_some() {
                return;
            }
            let label = group.labels[i];
            let target = group.targets[i];
            let heads = raw_heads_for(model, group.len, label, target, logit, reg);
            match joint_loss_value_grad(label, target, &heads, &scales, loss_cfg) {
                Ok((j, _)) => loss_sum += j,
                Err(e) => err = Some(TrainError::Loss(e)),
            }
            probs[i] = sigmoid(logit);
            if label && model.has_ellipse(group.len) {
                let e = crate::loss::ellipse_from_raw(reg, &scales);
                area_sum += e.area();
                area_n += 1;
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        n_total += n;
        if model.has_prob(group.len) {
            let c = confusion(&group.labels, &probs, threshold);
            let n_true = group.labels.iter().filter(|&&l| l).count();
            rows.push(LengthMetrics {
                len: group.len,
                n_true,
                n_ghost: n - n_true,
                confusion: c,
                recall: c.recall(),
                precision: c.precision(),
                accuracy: c.accuracy(),
                mean_ellipse_area: (model.has_ellipse(group.len) && area_n > 0)
                    .then(|| area_sum / area_n as f64),
            });
        }
    }
    if n_total == 0 {
        return Err(TrainError::EmptySet);
    }
    Ok((loss_sum / n_total as f64, MetricsTable { rows }))
}

/// Metrics table alone (classification threshold applied per length).
pub fn evaluate(
    model: &Model,
    set: &SampleSet,
    threshold: f64,
) -> Result<MetricsTable, TrainError> {
    evaluate_with_loss(model, set, &LossConfig::default(), threshold, 256).map(|(_, t)| t)
}

fn check_classes(set: &SampleSet, model: &Model) -> Result<(), TrainError> {
    let mut any_true = false;
    let mut any_ghost = false;
    for g in set.groups.values() {
        if model.has_prob(g.len) {
            any_true |= g.labels.iter().any(|&l| l);
            any_ghost |= g.labels.iter().any(|&l| !l);
        }
    }
    if any_true && any_ghost {
        Ok(())
    } else {
        Err(TrainError::NeedBothClasses)
    }
}

/// Runs the optimization loop.
///
/// Per epoch: every length group is reshuffled with a seed derived from
/// `(seed, epoch, length)`, then same-length batches are taken round-robin
/// across groups (ascending length) and Adam is applied to the reduced
/// joint loss of each batch. The per-epoch record carries train/test loss
/// and the held-out metrics table. Bitwise deterministic given seeds.
pub fn train(
    mut model: Model,
    train_set: &SampleSet,
    test_set: &SampleSet,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    check_classes(train_set, &model)?;

    let scales = model.head_scales();
    let slot_sizes: Vec<usize> = model.params.visit().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &slot_sizes);
    let mut grads = model.params.zeros_like();
    let shuffle_base = seeding::derive(seed, stream::SHUFFLE);

    let lens: Vec<usize> = train_set.groups.keys().copied().collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fresh sample order per (epoch, length).
        let mut perms: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&len, g) in &train_set.groups {
            let mut perm: Vec<usize> = (0..g.n_samples()).collect();
            let s = seeding::derive(shuffle_base, (epoch as u64) * 1009 + len as u64);
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            perms.insert(len, perm);
        }

        let mut offsets: BTreeMap<usize, usize> = lens.iter().map(|&l| (l, 0)).collect();
        let mut scratch = BatchScratch {
            pts: Vec::new(),
            d_logits: Vec::new(),
            d_reg: Vec::new(),
        };
        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        let mut batch_no = 0usize;
        let mut exhausted = false;
        while !exhausted {
            exhausted = true;
            for &len in &lens {
                let group = &train_set.groups[&len];
                let offset = offsets.get_mut(&len).expect("offset per group");
                if *offset >= group.n_samples() {
                    continue;
                }
                let bn = cfg.batch_size.min(group.n_samples() - *offset);
                let idx = &perms[&len][*offset..*offset + bn];
                *offset += bn;
                exhausted = false;
                batch_no += 1;

                let stride = len * 3;
                scratch.pts.clear();
                for &i in idx {
                    scratch
                        .pts
                        .extend_from_slice(&group.points[i * stride..(i + 1) * stride]);
                }
                let (raw, cache) = model.forward_raw(&scratch.pts, bn, len)?;

                let factor = match loss_cfg.reduction {
                    Reduction::Mean => 1.0 / bn as f64,
                    Reduction::Sum => 1.0,
                };
                scratch.d_logits.clear();
                scratch.d_logits.resize(bn, 0.0);
                scratch.d_reg.clear();
                scratch.d_reg.resize(bn * 4, 0.0);
                let mut batch_loss = 0.0;
                for (b, &i) in idx.iter().enumerate() {
                    let reg: [f64; 4] =
                        raw.reg[b * 4..b * 4 + 4].try_into().expect("4 per sample");
                    let heads = raw_heads_for(
                        &model,
                        len,
                        group.labels[i],
                        group.targets[i],
                        raw.logits[b],
                        &reg,
                    );
                    let (j, g) = joint_loss_value_grad(
                        group.labels[i],
                        group.targets[i],
                        &heads,
                        &scales,
                        loss_cfg,
                    )?;
                    batch_loss += j;
                    scratch.d_logits[b] = g.d_logit * factor;
                    for k in 0..4 {
                        scratch.d_reg[b * 4 + k] = g.d_reg[k] * factor;
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch: epoch + 1,
                        batch: batch_no,
                    });
                }
                loss_sum += batch_loss;
                n_seen += bn;

                for (_, t) in grads.visit_mut() {
                    t.clear();
                }
                model.backward(&cache, &scratch.d_logits, &scratch.d_reg, &mut grads)?;
                {
                    let mut tensors: Vec<&mut Tensor> =
                        grads.visit_mut().into_iter().map(|(_, t)| t).collect();
                    clip_global_norm(&mut tensors, cfg.clip_norm);
                }
                adam.begin_step();
                for (slot, ((_, p), (_, g))) in model
                    .params
                    .visit_mut()
                    .into_iter()
                    .zip(grads.visit())
                    .enumerate()
                {
                    adam.update(slot, p.data_mut(), g.data());
                }
            }
        }

        let train_loss = loss_sum / n_seen as f64;
        let (test_loss, metrics) = evaluate_with_loss(
            &model,
            test_set,
            loss_cfg,
            cfg.threshold,
            cfg.batch_size.max(256),
        )?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            test_loss,
            metrics,
        });
    }

    Ok(TrainResult { model, history })
}

/// Busiest station by total hit count, if any hits exist.
pub fn busiest_station(events: &[Event]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for ev in events {
        for h in &ev.hits {
            *counts.entry(h.station).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(s, _)| s)
}

/// Predicted-ellipse quality over the true samples of a set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EllipseStats {
    /// Fraction of true next hits inside the predicted ellipse.
    pub containment: Option<f64>,
    /// Mean ellipse area, cm^2.
    pub mean_area: Option<f64>,
    /// Mean count of event hits inside predicted ellipses on the probed
    /// station.
    pub hits_per_ellipse: Option<f64>,
}

/// Measures containment and area over all true samples with ellipse and
/// target, plus hit density inside ellipses predicted for `station`.
pub fn ellipse_stats(
    model: &Model,
    events: &[Event],
    set: &SampleSet,
    station: usize,
) -> Result<EllipseStats, TrainError> {
    let scales = model.head_scales();
    let mut contained = 0usize;
    let mut n = 0usize;
    let mut area_sum = 0.0;
    let mut hits_sum = 0usize;
    let mut n_density = 0usize;
    for group in set.groups.values() {
        if !model.has_ellipse(group.len) {
            continue;
        }
        let next_station = group.len - 1;
        for_each_raw(model, group, 256, |i, _, reg| {
            if !group.labels[i] {
                return;
            }
            let Some([tx, ty]) = group.targets[i] else {
                return;
            };
            let e = crate::loss::ellipse_from_raw(reg, &scales);
            n += 1;
            area_sum += e.area();
            if e.contains(tx, ty) {
                contained += 1;
            }
            if next_station == station {
                let ev = &events[group.event_idx[i]];
                hits_sum += ev
                    .hits
                    .iter()
                    .filter(|h| h.station == station && e.contains(h.x, h.y))
                    .count();
                n_density += 1;
            }
        })?;
    }
    Ok(EllipseStats {
        containment: (n > 0).then(|| contained as f64 / n as f64),
        mean_area: (n > 0).then(|| area_sum / n as f64),
        hits_per_ellipse: (n_density > 0).then(|| hits_sum as f64 / n_density as f64),
    })
}

/// Ellipse quality broken down by prefix length: containment, geometry,
/// and center-residual statistics over true samples with targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseRow {
    pub len: usize,
    /// True samples with a target at this length.
    pub n: usize,
    /// Fraction of targets inside the predicted ellipse.
    pub containment: f64,
    pub mean_area: f64,
    pub mean_r1: f64,
    pub mean_r2: f64,
    /// Center residual spread per axis, cm.
    pub rms_dx: f64,
    pub rms_dy: f64,
    /// Signed mean residuals, cm; large values indicate a systematic bias.
    pub mean_dx: f64,
    pub mean_dy: f64,
}

/// Per-length ellipse diagnostics over the true samples of a set.
pub fn ellipse_table(model: &Model, set: &SampleSet) -> Result<Vec<EllipseRow>, TrainError> {
    let scales = model.head_scales();
    let mut rows = Vec::new();
    for group in set.groups.values() {
        if !model.has_ellipse(group.len) {
            continue;
        }
        let mut n = 0usize;
        let mut contained = 0usize;
        let mut area = 0.0;
        let mut r1 = 0.0;
        let mut r2 = 0.0;
        let mut dx2 = 0.0;
        let mut dy2 = 0.0;
        let mut dx1 = 0.0;
        let mut dy1 = 0.0;
        for_each_raw(model, group, 256, |i, _, reg| {
            if !group.labels[i] {
                return;
            }
            let Some([tx, ty]) = group.targets[i] else {
                return;
            };
            let e = crate::loss::ellipse_from_raw(reg, &scales);
            n += 1;
            if e.contains(tx, ty) {
                contained += 1;
            }
            area += e.area();
            r1 += e.r1;
            r2 += e.r2;
            let dx = tx - e.cx;
            let dy = ty - e.cy;
            dx2 += dx * dx;
            dy2 += dy * dy;
            dx1 += dx;
            dy1 += dy;
        })?;
        if n > 0 {
            let nf = n as f64;
            rows.push(EllipseRow {
                len: group.len,
                n,
                containment: contained as f64 / nf,
                mean_area: area / nf,
                mean_r1: r1 / nf,
                mean_r2: r2 / nf,
                rms_dx: crate::fmath::sqrt(dx2 / nf),
                rms_dy: crate::fmath::sqrt(dy2 / nf),
                mean_dx: dx1 / nf,
                mean_dy: dy1 / nf,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{generate_event, DetectorConfig, FakeMode, GenConfig, Hit};
    use crate::model::ModelConfig;
    use crate::seed::{run_seed_search, SearchWindow};

    fn tiny_model(det: &DetectorConfig, seed: u64) -> Model {
        let cfg = ModelConfig {
            conv_filters: 4,
            conv_kernel: 3,
            gru1_hidden: 5,
            gru2_hidden: 5,
            ..ModelConfig::default()
        };
        Model::init(&cfg, det, seed).unwrap()
    }

    fn toy_data(
        n_events: usize,
        det: &DetectorConfig,
        gen: &GenConfig,
    ) -> (Vec<Event>, Vec<(usize, TrackCandidate)>) {
        let window = SearchWindow::default();
        let mut events = Vec::new();
        let mut cands = Vec::new();
        for e in 0..n_events {
            let ev = generate_event(det, gen, e as u64, seeding::event_seed(5, e as u64)).unwrap();
            for c in run_seed_search(&ev, det.n_stations(), &window).unwrap() {
                cands.push((e, c));
            }
            events.push(ev);
        }
        (events, cands)
    }

    #[test]
    fn true_candidate_expands_to_one_sample_per_length() {
        let det = DetectorConfig {
            fake_mode: FakeMode::None,
            ..DetectorConfig::default()
        };
        let gen = GenConfig {
            tracks_min: 1,
            tracks_max: 1,
            ..GenConfig::default()
        };
        let (events, cands) = toy_data(1, &det, &gen);
        assert_eq!(cands.len(), 1);
        let set = expand_candidates(&events, &cands, det.n_stations());
        assert_eq!(set.n_samples(), 5);
        for len in 2..=6usize {
            let g = &set.groups[&len];
            assert_eq!(g.n_samples(), 1);
            assert_eq!(g.labels, [true]);
            assert_eq!(g.targets[0].is_some(), len <= 5, "len {len}");
            if let Some([_, _]) = g.targets[0] {
                // The target must sit on the next station's plane: compare
                // against the true hit there.
                let ev = &events[0];
                let h = ev
                    .hits
                    .iter()
                    .find(|h| h.station == len - 1 && !h.is_fake())
                    .unwrap();
                assert_eq!(g.targets[0].unwrap(), [h.x, h.y]);
            }
        }
    }

    #[test]
    fn ghost_with_clean_prefix_is_relabelled_true_at_that_length() {
        // Hand-built event: a real 5-hit track plus one fake on station 3;
        // the candidate takes the track's first three hits then the fake.
        let det = DetectorConfig::default();
        let mk = |station: usize, track_id: i64| Hit {
            station,
            x: 1.0 + station as f64,
            y: 0.5,
            z: det.station_z[station],
            track_id,
        };
        let mut hits: Vec<Hit> = (0..5).map(|s| mk(s, 0)).collect();
        hits.push(Hit {
            station: 3,
            x: -5.0,
            y: 3.0,
            z: det.station_z[3],
            track_id: -1,
        });
        let ev = Event {
            event_id: 0,
            tracks: alloc::vec![crate::detector::TrackParams {
                track_id: 0,
                kappa: 1e-3,
                phi0: 0.0,
                ty: 0.0
            }],
            hits,
        };
        let ghost = TrackCandidate {
            points: alloc::vec![
                [0.0, 0.0, 0.0],
                [ev.hits[0].x, ev.hits[0].y, ev.hits[0].z],
                [ev.hits[1].x, ev.hits[1].y, ev.hits[1].z],
                [ev.hits[2].x, ev.hits[2].y, ev.hits[2].z],
                [ev.hits[5].x, ev.hits[5].y, ev.hits[5].z],
                [ev.hits[4].x, ev.hits[4].y, ev.hits[4].z],
            ],
            hit_refs: alloc::vec![0, 1, 2, 5, 4],
            label: Label::Ghost,
        };
        let events = alloc::vec![ev];
        let set = expand_candidates(&events, &[(0, ghost)], det.n_stations());
        // Lengths 2..4 are clean prefixes of track 0, lengths 5..6 contain
        // the fake.
        assert_eq!(set.groups[&2].labels, [true]);
        assert_eq!(set.groups[&3].labels, [true]);
        assert_eq!(set.groups[&4].labels, [true]);
        assert_eq!(set.groups[&5].labels, [false]);
        assert_eq!(set.groups[&6].labels, [false]);
        // The relabelled length-4 prefix regresses toward the track's true
        // station-3 hit, not the candidate's fake.
        assert_eq!(
            set.groups[&4].targets[0].unwrap(),
            [events[0].hits[3].x, events[0].hits[3].y]
        );
        assert_eq!(set.groups[&5].targets[0], None);
    }

    #[test]
    fn sample_counts_match_a_direct_recount() {
        let det = DetectorConfig::default();
        let gen = GenConfig {
            fake_fraction: 0.3,
            ..GenConfig::default()
        };
        let (events, cands) = toy_data(3, &det, &gen);
        assert!(cands.len() > 20, "need a busy event; got {}", cands.len());
        let set = expand_candidates(&events, &cands, det.n_stations());
        // Independent recount straight from the definition.
        for len in 2..=6usize {
            let mut expect = 0usize;
            for &(e, ref c) in &cands {
                let truth = label_candidate(&events[e].hits, &c.hit_refs[..len - 1]);
                let label = truth == Label::TrueTrack;
                if len == 2 && !label {
                    continue;
                }
                if len == 2 {
                    let tid = events[e].hits[c.hit_refs[0]].track_id;
                    let has_target = events[e]
                        .hits
                        .iter()
                        .any(|h| !h.is_fake() && h.track_id == tid && h.station == 1);
                    if !has_target {
                        continue;
                    }
                }
                expect += 1;
            }
            let got = set.groups.get(&len).map_or(0, LengthGroup::n_samples);
            assert_eq!(got, expect, "length {len}");
        }
        // Lengths above 2 keep every candidate.
        for len in 3..=6usize {
            assert_eq!(set.groups[&len].n_samples(), cands.len());
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (a1, b1) = split_candidates(100, 0.7, 9);
        let (a2, b2) = split_candidates(100, 0.7, 9);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.len(), 70);
        assert_eq!(b1.len(), 30);
        let mut all: Vec<usize> = a1.iter().chain(b1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (a3, _) = split_candidates(100, 0.7, 10);
        assert_ne!(a1, a3);
    }

    #[test]
    fn confusion_identities_hold() {
        let labels = [true, true, false, false, true, false];
        let probs = [0.9, 0.2, 0.8, 0.1, 0.6, 0.4];
        let c = confusion(&labels, &probs, 0.5);
        assert_eq!(
            c,
            Confusion {
                true_pos: 2,
                false_neg: 1,
                false_pos: 1,
                true_neg: 2
            }
        );
        assert_eq!(c.recall(), Some(2.0 / 3.0));
        assert_eq!(c.precision(), Some(2.0 / 3.0));
        assert_eq!(c.accuracy(), Some(4.0 / 6.0));
    }

    #[test]
    fn always_positive_classifier_on_one_to_ten_mix() {
        let mut labels = alloc::vec![true; 10];
        labels.extend(alloc::vec![false; 100]);
        let probs = alloc::vec![1.0; 110];
        let c = confusion(&labels, &probs, 0.5);
        assert_eq!(c.recall(), Some(1.0));
        assert!((c.precision().unwrap() - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn eval_mix_hits_the_requested_ratio() {
        let det = DetectorConfig::default();
        let (_, cands) = toy_data(4, &det, &GenConfig::default());
        let n_true = cands
            .iter()
            .filter(|(_, c)| c.label == Label::TrueTrack)
            .count();
        let n_ghost = cands.len() - n_true;
        assert!(n_true > 10 && n_ghost > 40, "{n_true} true, {n_ghost} ghost");
        let ratio = 4;
        let mix = make_eval_mix(&cands, ratio, 1);
        let mix_true = mix
            .iter()
            .filter(|&&i| cands[i].1.label == Label::TrueTrack)
            .count();
        assert_eq!(mix.len(), mix_true * (1 + ratio));
        assert_eq!(mix_true, n_true.min(n_ghost / ratio));
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let det = DetectorConfig::default();
        let gen = GenConfig {
            tracks_min: 6,
            tracks_max: 9,
            fake_fraction: 0.4,
            ..GenConfig::default()
        };
        let (events, cands) = toy_data(6, &det, &gen);
        let (tr, te) = split_candidates(cands.len(), 0.7, 3);
        let tr_c: Vec<_> = tr.iter().map(|&i| cands[i].clone()).collect();
        let te_c: Vec<_> = te.iter().map(|&i| cands[i].clone()).collect();
        let train_set = expand_candidates(&events, &tr_c, det.n_stations());
        let test_set = expand_candidates(&events, &te_c, det.n_stations());
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                tiny_model(&det, 1),
                &train_set,
                &test_set,
                &LossConfig::default(),
                &cfg,
                77,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 4);
        assert!(
            a.history.last().unwrap().train_loss < a.history.first().unwrap().train_loss,
            "loss should drop: {:?}",
            a.history.iter().map(|h| h.train_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn training_rejects_single_class_sets() {
        let det = DetectorConfig {
            fake_mode: FakeMode::None,
            ..DetectorConfig::default()
        };
        let gen = GenConfig {
            tracks_min: 2,
            tracks_max: 3,
            ..GenConfig::default()
        };
        let (events, cands) = toy_data(2, &det, &gen);
        let set = expand_candidates(&events, &cands, det.n_stations());
        let err = train(
            tiny_model(&det, 1),
            &set,
            &set,
            &LossConfig::default(),
            &TrainConfig::default(),
            1,
        )
        .unwrap_err();
        assert_eq!(err, TrainError::NeedBothClasses);
    }

    #[test]
    fn busiest_station_counts_hits() {
        let det = DetectorConfig::default();
        let mk = |station: usize| Hit {
            station,
            x: 0.0,
            y: 0.0,
            z: det.station_z[station],
            track_id: -1,
        };
        let ev = Event {
            event_id: 0,
            tracks: alloc::vec![],
            hits: alloc::vec![mk(0), mk(2), mk(2), mk(4)],
        };
        assert_eq!(busiest_station(&[ev]), Some(2));
        assert_eq!(busiest_station(&[]), None);
    }
}
