//! On-disk formats for the pipeline stage files.
//!
//! Three line-oriented JSON formats share a common layout: the first line is
//! a header carrying a format tag, a format version, and the fully resolved
//! [`RunConfig`] that produced the file; every following line is one record.
//! Floating-point values survive a write/read round trip bit-exactly (the
//! serializer emits the shortest decimal that parses back to the same
//! `f64`, never more than 17 significant digits).
//!
//! * `cp-events`: one generated event per line (truth tracks plus hits).
//! * `cp-candidates`: one seed-search candidate per line as
//!   `{event_id, hit_refs, label}`; point coordinates are reconstructed by
//!   joining against the event file, with the target point prepended.
//! * `cp-recon`: one line per event with its reconstructed tracks.
//!
//! Training history goes to CSV (`epoch,train_loss,test_loss`), evaluation
//! tables to CSV with one row per sequence length.
//!
//! Checkpoints are binary: magic `CPCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model
//! config, normalization scales, tensor manifest, training and loss
//! hyperparameters, seed), then every tensor's values as little-endian
//! `f64` in manifest order. Loading validates the magic, version, manifest,
//! and exact byte length, so truncated or trailing-garbage files are
//! reported as corruption rather than silently misread.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cptrack_core::detector::Event;
use cptrack_core::follow::ReconTrack;
use cptrack_core::loss::LossConfig;
use cptrack_core::model::{Model, ModelConfig, ModelParams, Scales, INPUT_FEATURES};
use cptrack_core::nn::{Conv1d, Dense, GruLayer};
use cptrack_core::seed::{Label, TrackCandidate};
use cptrack_core::train::{EpochRecord, LengthMetrics, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::runconfig::RunConfig;

/// Version shared by all line-oriented formats.
pub const JSONL_VERSION: u32 = 1;
pub const EVENTS_FORMAT: &str = "cp-events";
pub const CANDIDATES_FORMAT: &str = "cp-candidates";
pub const RECON_FORMAT: &str = "cp-recon";

/// First line of every JSONL stage file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    format: String,
    version: u32,
    config: RunConfig,
}

/// One seed-search candidate, stored by reference into the event file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub event_id: u64,
    pub hit_refs: Vec<usize>,
    pub label: Label,
}

/// Reconstruction output for one event.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconRecord {
    pub event_id: u64,
    pub tracks: Vec<ReconTrack>,
}

// ---------------------------------------------------------------------------
// JSONL writing/reading
// ---------------------------------------------------------------------------

/// Writes the header line and then one record per `write` call.
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: String,
}

impl JsonlWriter {
    pub fn create(path: &Path, format: &str, config: &RunConfig) -> Result<JsonlWriter> {
        let file = File::create(path)
            .with_context(|| format!("creating output file {}", path.display()))?;
        let mut out = BufWriter::new(file);
        let header = FileHeader {
            format: format.to_string(),
            version: JSONL_VERSION,
            config: config.clone(),
        };
        serde_json::to_writer(&mut out, &header).context("writing file header")?;
        out.write_all(b"\n")?;
        Ok(JsonlWriter {
            out,
            path: path.display().to_string(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)
            .with_context(|| format!("writing record to {}", self.path))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out
            .flush()
            .with_context(|| format!("flushing {}", self.path))
    }
}

/// Streams records out of a JSONL stage file, reporting errors with the
/// file name and line number.
pub struct JsonlReader {
    lines: std::io::Lines<BufReader<File>>,
    path: String,
    line_no: usize,
    config: RunConfig,
}

impl JsonlReader {
    /// Opens a stage file and checks that it carries the expected format tag
    /// and a supported version.
    pub fn open(path: &Path, expect_format: &str) -> Result<JsonlReader> {
        let file =
            File::open(path).with_context(|| format!("opening input file {}", path.display()))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .with_context(|| format!("{}: file is empty (missing header)", path.display()))?
            .with_context(|| format!("{}: reading header", path.display()))?;
        let header: FileHeader = serde_json::from_str(&first)
            .with_context(|| format!("{} line 1: invalid header", path.display()))?;
        if header.format != expect_format {
            bail!(
                "{}: format is {:?}, expected {:?} (wrong stage file?)",
                path.display(),
                header.format,
                expect_format
            );
        }
        if header.version != JSONL_VERSION {
            bail!(
                "{}: unsupported {} version {} (this build reads version {})",
                path.display(),
                header.format,
                header.version,
                JSONL_VERSION
            );
        }
        Ok(JsonlReader {
            lines,
            path: path.display().to_string(),
            line_no: 1,
            config: header.config,
        })
    }

    /// The resolved configuration recorded when the file was written.
    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Next record, or `None` at end of file. Blank trailing lines are
    /// tolerated; anything else that fails to parse is an error.
    pub fn next_record<T: DeserializeOwned>(&mut self) -> Result<Option<T>> {
        loop {
            let Some(line) = self.lines.next() else {
                return Ok(None);
            };
            self.line_no += 1;
            let line = line.with_context(|| format!("{} line {}", self.path, self.line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).with_context(|| {
                format!("{} line {}: malformed record", self.path, self.line_no)
            })?;
            return Ok(Some(record));
        }
    }

    /// Reads all remaining records.
    pub fn collect_records<T: DeserializeOwned>(mut self) -> Result<Vec<T>> {
        let mut out = Vec::new();
        while let Some(r) = self.next_record()? {
            out.push(r);
        }
        Ok(out)
    }
}

/// Reads a whole events file.
pub fn read_events(path: &Path) -> Result<(Vec<Event>, RunConfig)> {
    let reader = JsonlReader::open(path, EVENTS_FORMAT)?;
    let config = reader.config().clone();
    let events: Vec<Event> = reader.collect_records()?;
    Ok((events, config))
}

/// Rebuilds a full candidate (points included) from its stored record and
/// the owning event. The target point is prepended, then one point per hit.
pub fn resolve_candidate(record: &CandidateRecord, event: &Event) -> Result<TrackCandidate> {
    let mut points = Vec::with_capacity(record.hit_refs.len() + 1);
    points.push([0.0, 0.0, 0.0]);
    for &r in &record.hit_refs {
        let hit = event.hits.get(r).with_context(|| {
            format!(
                "candidate in event {} references hit {} but the event has {} hits \
                 (candidates file does not match the events file)",
                record.event_id,
                r,
                event.hits.len()
            )
        })?;
        points.push([hit.x, hit.y, hit.z]);
    }
    Ok(TrackCandidate {
        points,
        hit_refs: record.hit_refs.clone(),
        label: record.label,
    })
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

/// Writes the per-epoch loss curve as CSV.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating history file {}", path.display()))?;
    w.write_record(["epoch", "train_loss", "test_loss"])?;
    for rec in history {
        w.write_record([
            rec.epoch.to_string(),
            format!("{:.17e}", rec.train_loss),
            format!("{:.17e}", rec.test_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a per-length metrics table as CSV; absent values become empty
/// cells.
pub fn write_metrics_csv(path: &Path, rows: &[LengthMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating metrics file {}", path.display()))?;
    w.write_record([
        "len",
        "n_true",
        "n_ghost",
        "true_pos",
        "false_pos",
        "true_neg",
        "false_neg",
        "recall",
        "precision",
        "accuracy",
        "mean_ellipse_area_cm2",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.len.to_string(),
            r.n_true.to_string(),
            r.n_ghost.to_string(),
            r.confusion.true_pos.to_string(),
            r.confusion.false_pos.to_string(),
            r.confusion.true_neg.to_string(),
            r.confusion.false_neg.to_string(),
            opt(r.recall),
            opt(r.precision),
            opt(r.accuracy),
            opt(r.mean_ellipse_area),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary checkpoint
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Upper bound on the JSON header; a corrupt length field fails fast
/// instead of attempting a huge allocation.
const MAX_HEADER_BYTES: u64 = 16 * 1024 * 1024;

/// JSON header stored inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Architecture of the stored model.
    pub model: ModelConfig,
    /// Normalization divisors baked into the model.
    pub scales: Scales,
    /// Longest sequence the model accepts.
    pub max_seq_len: usize,
    /// Name and shape of every tensor, in storage order.
    pub tensors: Vec<TensorInfo>,
    /// Optimizer settings the model was trained with.
    pub train: TrainConfig,
    /// Loss weights the model was trained with.
    pub loss: LossConfig,
    /// Base seed of the producing run.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Serializes a model with its training provenance.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    train: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<()> {
    let tensors: Vec<TensorInfo> = model
        .params
        .visit()
        .iter()
        .map(|(name, t)| TensorInfo {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        model: *model.config(),
        scales: *model.scales(),
        max_seq_len: model.max_seq_len(),
        tensors,
        train: train.clone(),
        loss: *loss,
        seed,
    };
    let header_json = serde_json::to_vec(&header).context("encoding checkpoint header")?;

    let file = File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    let mut out = BufWriter::new(file);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, tensor) in model.params.visit() {
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
        .with_context(|| format!("flushing checkpoint {}", path.display()))?;
    Ok(())
}

/// Loads a checkpoint, validating magic, version, manifest, shapes, and
/// exact length. Returns the reassembled model and the stored header.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let file = File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut input = BufReader::new(file);
    let corrupt = |what: &str| format!("{}: corrupt checkpoint: {what}", path.display());

    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .with_context(|| corrupt("file truncated before magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        bail!("{}: not a checkpoint file (bad magic)", path.display());
    }
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .with_context(|| corrupt("file truncated before version"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        bail!(
            "{}: unsupported checkpoint version {} (this build reads version {})",
            path.display(),
            version,
            CHECKPOINT_VERSION
        );
    }
    let mut long = [0u8; 8];
    input
        .read_exact(&mut long)
        .with_context(|| corrupt("file truncated before header length"))?;
    let header_len = u64::from_le_bytes(long);
    if header_len > MAX_HEADER_BYTES {
        bail!("{}", corrupt("implausible header length"));
    }
    let mut header_json = vec![0u8; header_len as usize];
    input
        .read_exact(&mut header_json)
        .with_context(|| corrupt("file truncated inside header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).with_context(|| corrupt("invalid header JSON"))?;

    let cfg = &header.model;
    let mut params = ModelParams {
        conv: Conv1d::zeros(cfg.conv_kernel, INPUT_FEATURES, cfg.conv_filters),
        gru1: GruLayer::zeros(cfg.conv_filters, cfg.gru1_hidden),
        gru2: GruLayer::zeros(cfg.gru1_hidden, cfg.gru2_hidden),
        prob_head: Dense::zeros(cfg.gru2_hidden, 1),
        reg_head: Dense::zeros(cfg.gru2_hidden, 4),
    };
    let mut slots = params.visit_mut();
    if slots.len() != header.tensors.len() {
        bail!("{}", corrupt("tensor manifest does not match the model"));
    }
    for (info, (name, tensor)) in header.tensors.iter().zip(slots.iter_mut()) {
        if info.name != *name || info.shape != tensor.shape() {
            bail!(
                "{}",
                corrupt(&format!(
                    "tensor {} has manifest shape {:?}, expected {} with shape {:?}",
                    info.name,
                    info.shape,
                    name,
                    tensor.shape()
                ))
            );
        }
        let mut buf = vec![0u8; tensor.len() * 8];
        input
            .read_exact(&mut buf)
            .with_context(|| corrupt(&format!("file truncated inside tensor {name}")))?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("chunks_exact yields 8 bytes"));
        }
    }
    drop(slots);
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        bail!("{}", corrupt("trailing bytes after tensor data"));
    }

    let model = Model::from_parts(header.model, header.scales, header.max_seq_len, params)
        .with_context(|| corrupt("stored tensors do not fit the stored config"))?;
    Ok((model, header))
}
