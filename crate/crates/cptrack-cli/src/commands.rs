//! The pipeline subcommands.
//!
//! Each stage reads the previous stage's file, does its work, and writes an
//! artifact that embeds the effective configuration. Stages check that the
//! configuration sections an upstream file was produced with match the ones
//! currently in effect whenever a silent mismatch would corrupt the result
//! (e.g. seeding against events from a different detector).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cptrack_core::detector::{generate_event, Event};
use cptrack_core::follow::follow_event;
use cptrack_core::model::Model;
use cptrack_core::seed::{label_candidate, run_seed_search, Label, TrackCandidate};
use cptrack_core::seeding;
use cptrack_core::train::{
    busiest_station, ellipse_stats, ellipse_table, evaluate, train, DatasetAssembler,
    LengthMetrics, MetricsTable,
};
use serde::Serialize;

use crate::files::{
    load_checkpoint, read_events, resolve_candidate, save_checkpoint, write_history_csv,
    write_metrics_csv, CandidateRecord, JsonlReader, JsonlWriter, ReconRecord, CANDIDATES_FORMAT,
    EVENTS_FORMAT, RECON_FORMAT,
};
use crate::runconfig::RunConfig;

/// Errors out when a config section recorded in an upstream file differs
/// from the section in effect now.
fn ensure_section_matches<T: PartialEq + Serialize>(
    what: &str,
    file: &Path,
    recorded: &T,
    current: &T,
) -> Result<()> {
    if recorded != current {
        bail!(
            "{} was produced with a different [{}] section than the one in effect \
             (recorded: {}); rerun the earlier stage or pass the same config",
            file.display(),
            what,
            serde_json::to_string(recorded).unwrap_or_else(|_| "<unprintable>".into()),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(cfg: &RunConfig, n_events: usize, out: &Path) -> Result<()> {
    let mut writer = JsonlWriter::create(out, EVENTS_FORMAT, cfg)?;
    let mut n_tracks = 0usize;
    let mut n_true_hits = 0usize;
    let mut n_fake_hits = 0usize;
    let mut per_station: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ev_id in 0..n_events {
        let ev = generate_event(
            &cfg.detector,
            &cfg.gen,
            ev_id as u64,
            seeding::event_seed(cfg.seed, ev_id as u64),
        )?;
        n_tracks += ev.tracks.len();
        for h in &ev.hits {
            let slot = per_station.entry(h.station).or_insert((0, 0));
            if h.is_fake() {
                slot.1 += 1;
                n_fake_hits += 1;
            } else {
                slot.0 += 1;
                n_true_hits += 1;
            }
        }
        writer.write(&ev)?;
    }
    writer.finish()?;
    println!(
        "simulated {} events to {}: {} tracks ({:.2}/event), {} true hits, {} fake hits",
        n_events,
        out.display(),
        n_tracks,
        n_tracks as f64 / n_events.max(1) as f64,
        n_true_hits,
        n_fake_hits,
    );
    for (station, (t, f)) in per_station {
        println!("  station {station}: {t} true, {f} fake");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// seed
// ---------------------------------------------------------------------------

pub fn cmd_seed(cfg: &RunConfig, events_path: &Path, out: &Path) -> Result<()> {
    let mut reader = JsonlReader::open(events_path, EVENTS_FORMAT)?;
    ensure_section_matches(
        "detector",
        events_path,
        &reader.config().detector,
        &cfg.detector,
    )?;
    let n_stations = cfg.detector.n_stations();
    let mut writer = JsonlWriter::create(out, CANDIDATES_FORMAT, cfg)?;
    let mut n_events = 0usize;
    let mut n_true = 0usize;
    let mut n_ghost = 0usize;
    while let Some(ev) = reader.next_record::<Event>()? {
        let cands = run_seed_search(&ev, n_stations, &cfg.search)?;
        for cand in &cands {
            match cand.label {
                Label::TrueTrack => n_true += 1,
                _ => n_ghost += 1,
            }
            writer.write(&CandidateRecord {
                event_id: ev.event_id,
                hit_refs: cand.hit_refs.clone(),
                label: cand.label,
            })?;
        }
        n_events += 1;
    }
    writer.finish()?;
    println!(
        "seed search over {} events to {}: {} candidates ({} true, {} ghost, {:.1} ghosts per true)",
        n_events,
        out.display(),
        n_true + n_ghost,
        n_true,
        n_ghost,
        n_ghost as f64 / n_true.max(1) as f64,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared: replay stage files through the dataset assembler
// ---------------------------------------------------------------------------

/// Feeds the events and candidates files through a [`DatasetAssembler`] in
/// file order, reproducing exactly what in-process assembly with the same
/// configuration would build.
///
/// The candidates file must be grouped by event in the same order as the
/// events file (which is how the seed stage writes it). Stored labels are
/// re-derived from the event truth and any disagreement is an error, so a
/// stale events/candidates pairing cannot silently poison training.
fn assemble_from_files(
    cfg: &RunConfig,
    events_path: &Path,
    candidates_path: &Path,
) -> Result<cptrack_core::train::AssembledData> {
    let mut ev_reader = JsonlReader::open(events_path, EVENTS_FORMAT)?;
    ensure_section_matches(
        "detector",
        events_path,
        &ev_reader.config().detector,
        &cfg.detector,
    )?;
    let mut cand_reader = JsonlReader::open(candidates_path, CANDIDATES_FORMAT)?;
    ensure_section_matches(
        "detector",
        candidates_path,
        &cand_reader.config().detector,
        &cfg.detector,
    )?;
    ensure_section_matches(
        "search",
        candidates_path,
        &cand_reader.config().search,
        &cfg.search,
    )?;

    let n_stations = cfg.detector.n_stations();
    let mut asm = DatasetAssembler::new(
        &cfg.assembly,
        n_stations,
        cfg.train.split_fraction,
        cfg.seed,
    )?;
    let mut pending: Option<CandidateRecord> = cand_reader.next_record()?;
    while let Some(ev) = ev_reader.next_record::<Event>()? {
        let mut cands: Vec<TrackCandidate> = Vec::new();
        while let Some(rec) = pending.take() {
            if rec.event_id != ev.event_id {
                pending = Some(rec);
                break;
            }
            let cand = resolve_candidate(&rec, &ev)?;
            let truth = label_candidate(&ev.hits, &cand.hit_refs);
            if truth != rec.label {
                bail!(
                    "candidate in event {} is stored as {:?} but the event truth says {:?}; \
                     the candidates file does not belong to this events file",
                    ev.event_id,
                    rec.label,
                    truth
                );
            }
            cands.push(cand);
            pending = cand_reader.next_record()?;
        }
        asm.push_event(ev, cands);
    }
    if let Some(rec) = pending {
        bail!(
            "candidates file references event {} which is missing from (or out of order in) \
             the events file",
            rec.event_id
        );
    }
    Ok(asm.finish())
}

fn print_metrics_rows(rows: &[LengthMetrics]) {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        println!(
            "  len {}: {} true / {} ghost, recall {}, precision {}, accuracy {}, mean ellipse area {} cm^2",
            r.len,
            r.n_true,
            r.n_ghost,
            opt(r.recall),
            opt(r.precision),
            opt(r.accuracy),
            opt(r.mean_ellipse_area),
        );
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(
    cfg: &RunConfig,
    events_path: &Path,
    candidates_path: &Path,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let data = assemble_from_files(cfg, events_path, candidates_path)?;
    println!(
        "assembled {} events: {} candidates, {} train candidates -> {} train samples, {} eval candidates -> {} eval samples",
        data.events.len(),
        data.n_candidates,
        data.n_train_candidates,
        data.train.n_samples(),
        data.n_eval_candidates,
        data.eval.n_samples(),
    );
    let model = Model::init(&cfg.model, &cfg.detector, cfg.seed)?;
    let result = train(model, &data.train, &data.eval, &cfg.loss, &cfg.train, cfg.seed)?;
    for rec in &result.history {
        println!(
            "epoch {:>3}: train loss {:.6}, test loss {:.6}",
            rec.epoch, rec.train_loss, rec.test_loss
        );
    }
    if let Some(last) = result.history.last() {
        println!("held-out metrics after epoch {}:", last.epoch);
        print_metrics_rows(&last.metrics.rows);
    }
    save_checkpoint(out, &result.model, &cfg.train, &cfg.loss, cfg.seed)?;
    println!("wrote checkpoint {}", out.display());
    if let Some(hp) = history_path {
        write_history_csv(hp, &result.history)?;
        println!("wrote history {}", hp.display());
    }
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

pub fn cmd_track(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    events_path: &Path,
    out: &Path,
) -> Result<()> {
    let (model, _header) = load_checkpoint(checkpoint_path)?;
    let mut reader = JsonlReader::open(events_path, EVENTS_FORMAT)?;
    ensure_section_matches(
        "detector",
        events_path,
        &reader.config().detector,
        &cfg.detector,
    )?;
    let mut writer = JsonlWriter::create(out, RECON_FORMAT, cfg)?;
    let mut n_events = 0usize;
    let mut n_tracks = 0usize;
    while let Some(ev) = reader.next_record::<Event>()? {
        let tracks = follow_event(&ev, &model, &cfg.follow)?;
        n_tracks += tracks.len();
        writer.write(&ReconRecord {
            event_id: ev.event_id,
            tracks,
        })?;
        n_events += 1;
    }
    writer.finish()?;
    println!(
        "reconstructed {} events to {}: {} tracks ({:.2}/event)",
        n_events,
        out.display(),
        n_tracks,
        n_tracks as f64 / n_events.max(1) as f64,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Classification/regression quality of a checkpoint on the held-out mix
/// rebuilt from stage files (identical to the mix used during training with
/// the same configuration).
pub fn cmd_eval_candidates(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    events_path: &Path,
    candidates_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let (model, _header) = load_checkpoint(checkpoint_path)?;
    let data = assemble_from_files(cfg, events_path, candidates_path)?;
    let table: MetricsTable = evaluate(&model, &data.eval, cfg.train.threshold)?;
    println!(
        "held-out mix: {} candidates -> {} samples",
        data.n_eval_candidates,
        data.eval.n_samples()
    );
    print_metrics_rows(&table.rows);
    if let Some(station) = busiest_station(&data.events) {
        let stats = ellipse_stats(&model, &data.events, &data.eval, station)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "ellipses over true held-out samples: containment {}, mean area {} cm^2, \
             hits per ellipse on station {} (busiest): {}",
            opt(stats.containment),
            opt(stats.mean_area),
            station,
            opt(stats.hits_per_ellipse),
        );
    }
    for r in ellipse_table(&model, &data.eval)? {
        println!(
            "  ellipse len {}: n {}, containment {:.4}, mean area {:.3} cm^2, \
             mean semiaxes {:.3} x {:.3}, residual rms ({:.3}, {:.3}) mean ({:+.3}, {:+.3}) cm",
            r.len,
            r.n,
            r.containment,
            r.mean_area,
            r.mean_r1,
            r.mean_r2,
            r.rms_dx,
            r.rms_dy,
            r.mean_dx,
            r.mean_dy,
        );
    }
    if let Some(path) = out {
        write_metrics_csv(path, &table.rows)?;
        println!("wrote metrics {}", path.display());
    }
    Ok(())
}

/// Track-level quality of a reconstruction file against event truth.
pub fn cmd_eval_recon(
    cfg: &RunConfig,
    events_path: &Path,
    recon_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let (events, _) = read_events(events_path)?;
    let mut reader = JsonlReader::open(recon_path, RECON_FORMAT)?;
    ensure_section_matches(
        "detector",
        recon_path,
        &reader.config().detector,
        &cfg.detector,
    )?;
    let by_id: BTreeMap<u64, &Event> = events.iter().map(|e| (e.event_id, e)).collect();
    let n_stations = cfg.detector.n_stations();

    let mut n_true_tracks = 0usize;
    let mut n_found = 0usize;
    let mut n_recon = 0usize;
    let mut n_ghost_recon = 0usize;
    while let Some(rec) = reader.next_record::<ReconRecord>()? {
        let ev = by_id.get(&rec.event_id).with_context(|| {
            format!(
                "reconstruction references event {} which is not in the events file",
                rec.event_id
            )
        })?;
        // Hit indices of each true track, in station order.
        let mut truth: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, h) in ev.hits.iter().enumerate() {
            if !h.is_fake() {
                truth.entry(h.track_id).or_default().push(i);
            }
        }
        truth.retain(|_, refs| refs.len() == n_stations);
        n_true_tracks += truth.len();
        let mut found: Vec<&Vec<usize>> = Vec::new();
        for track in &rec.tracks {
            n_recon += 1;
            match truth.values().find(|refs| **refs == track.hit_refs) {
                Some(refs) => {
                    if !found.iter().any(|f| *f == refs) {
                        n_found += 1;
                        found.push(refs);
                    }
                }
                None => n_ghost_recon += 1,
            }
        }
    }
    let efficiency = n_found as f64 / n_true_tracks.max(1) as f64;
    let ghost_rate = n_ghost_recon as f64 / n_recon.max(1) as f64;
    println!(
        "track-level: {} true tracks, {} reconstructed, efficiency {:.4}, ghost rate {:.4}",
        n_true_tracks, n_recon, efficiency, ghost_rate
    );
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating metrics file {}", path.display()))?;
        w.write_record(["metric", "value"])?;
        w.write_record(["true_tracks", &n_true_tracks.to_string()])?;
        w.write_record(["reconstructed_tracks", &n_recon.to_string()])?;
        w.write_record(["efficiency", &format!("{efficiency:.6}")])?;
        w.write_record(["ghost_rate", &format!("{ghost_rate:.6}")])?;
        w.flush()?;
        println!("wrote metrics {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

/// Caps how many candidates the benchmark loads.
const BENCH_MAX_CANDIDATES: usize = 50_000;

pub fn cmd_bench(
    _cfg: &RunConfig,
    checkpoint_path: &Path,
    events_path: &Path,
    candidates_path: &Path,
    batch: usize,
) -> Result<()> {
    if batch == 0 {
        bail!("batch size must be positive");
    }
    let (model, _header) = load_checkpoint(checkpoint_path)?;
    let (events, _) = read_events(events_path)?;
    let by_id: BTreeMap<u64, &Event> = events.iter().map(|e| (e.event_id, e)).collect();
    let mut reader = JsonlReader::open(candidates_path, CANDIDATES_FORMAT)?;
    let mut prefixes: Vec<Vec<[f64; 3]>> = Vec::new();
    while let Some(rec) = reader.next_record::<CandidateRecord>()? {
        if prefixes.len() >= BENCH_MAX_CANDIDATES {
            break;
        }
        let ev = by_id.get(&rec.event_id).with_context(|| {
            format!(
                "candidates file references event {} which is not in the events file",
                rec.event_id
            )
        })?;
        prefixes.push(resolve_candidate(&rec, ev)?.points);
    }
    let n = prefixes.len();
    println!(
        "benchmarking {} full-length candidates on {} ({}, {} threads available)",
        n,
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map_or(1, |p| p.get()),
    );
    if n == 0 {
        println!("no candidates to score; nothing to time");
        return Ok(());
    }
    let views: Vec<&[[f64; 3]]> = prefixes.iter().map(|p| p.as_slice()).collect();

    // Warm-up pass so timings do not include first-touch effects.
    model.forward_batch(&views[..views.len().min(batch)])?;

    let t = Instant::now();
    for v in &views {
        model.forward(v)?;
    }
    report("batch=1 threads=1", n, t.elapsed().as_secs_f64());

    let t = Instant::now();
    for chunk in views.chunks(batch) {
        model.forward_batch(chunk)?;
    }
    report(
        &format!("batch={batch} threads=1"),
        n,
        t.elapsed().as_secs_f64(),
    );

    let threads = std::thread::available_parallelism().map_or(1, |p| p.get());
    if threads > 1 {
        let t = Instant::now();
        let per = n.div_ceil(threads);
        std::thread::scope(|s| -> Result<()> {
            let mut handles = Vec::new();
            for slice in views.chunks(per) {
                let model = &model;
                handles.push(s.spawn(move || -> Result<()> {
                    for chunk in slice.chunks(batch) {
                        model.forward_batch(chunk)?;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("bench worker panicked")?;
            }
            Ok(())
        })?;
        report(
            &format!("batch={batch} threads={threads}"),
            n,
            t.elapsed().as_secs_f64(),
        );
    }
    println!(
        "note: figures are for this machine's CPU; throughput quoted for \
         accelerator-based setups is not directly comparable"
    );
    Ok(())
}

fn report(label: &str, n: usize, secs: f64) {
    println!(
        "bench {label}: {} candidates in {:.3}s = {:.0} candidates/s",
        n,
        secs,
        n as f64 / secs.max(1e-12)
    );
}
