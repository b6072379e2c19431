//! Scratch harness for sizing training runs: `budget [n_events] [epochs]
//! [radius_raw_init]`.

use std::time::Instant;

use cptrack_core::detector::{DetectorConfig, GenConfig};
use cptrack_core::loss::LossConfig;
use cptrack_core::model::{Model, ModelConfig};
use cptrack_core::seed::SearchWindow;
use cptrack_core::train::{
    assemble_dataset, busiest_station, ellipse_stats, ellipse_table, evaluate, train,
    AssemblyConfig, MetricsTable, SampleSet, TrainConfig,
};

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn row(t: &MetricsTable, len: usize) -> String {
    match t.row(len) {
        Some(r) => format!(
            "len{len} rec {} prec {} acc {} area {}",
            fmt(r.recall),
            fmt(r.precision),
            fmt(r.accuracy),
            fmt(r.mean_ellipse_area),
        ),
        None => format!("len{len} -"),
    }
}

fn print_ellipse_table(model: &Model, set: &SampleSet, tag: &str) {
    for r in ellipse_table(model, set).unwrap() {
        println!(
            "  {tag} len {}: n {} cont {:.3} area {:.2} r ({:.2},{:.2}) rms ({:.3},{:.3}) mean ({:+.3},{:+.3})",
            r.len, r.n, r.containment, r.mean_area, r.mean_r1, r.mean_r2, r.rms_dx, r.rms_dy,
            r.mean_dx, r.mean_dy,
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_events: usize = args.get(1).map_or(250, |s| s.parse().unwrap());
    let epochs: usize = args.get(2).map_or(15, |s| s.parse().unwrap());
    let radius_raw_init: f64 = args.get(3).map_or(0.0, |s| s.parse().unwrap());
    println!("n_events {n_events} epochs {epochs} radius_raw_init {radius_raw_init}");

    let det = DetectorConfig::default();
    let gen = GenConfig::default();
    let window = SearchWindow::default();
    let acfg = AssemblyConfig {
        n_events,
        ..AssemblyConfig::default()
    };
    let tcfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig {
        radius_raw_init,
        ..ModelConfig::default()
    };

    let t0 = Instant::now();
    let data = assemble_dataset(&det, &gen, &window, &acfg, tcfg.split_fraction, 42).unwrap();
    println!(
        "assembled {} events in {:.1}s: {} candidates, train {} cands / {} samples, eval {} cands / {} samples",
        acfg.n_events,
        t0.elapsed().as_secs_f64(),
        data.n_candidates,
        data.n_train_candidates,
        data.train.n_samples(),
        data.n_eval_candidates,
        data.eval.n_samples()
    );

    let model = Model::init(&mcfg, &det, 42).unwrap();
    let t1 = Instant::now();
    let r = train(model, &data.train, &data.eval, &LossConfig::default(), &tcfg, 42).unwrap();
    println!("trained {} epochs in {:.1}s", tcfg.epochs, t1.elapsed().as_secs_f64());
    for er in &r.history {
        if er.epoch == 1 || er.epoch % 5 == 0 {
            println!(
                "  ep {:3}: J_tr {:.4} J_te {:.4} | {} | {} | {}",
                er.epoch,
                er.train_loss,
                er.test_loss,
                row(&er.metrics, 3),
                row(&er.metrics, 4),
                row(&er.metrics, 5),
            );
        }
    }

    let table = evaluate(&r.model, &data.eval, tcfg.threshold).unwrap();
    for len in 3..=6 {
        println!("final {}", row(&table, len));
    }
    let st = busiest_station(&data.events).unwrap();
    let es = ellipse_stats(&r.model, &data.events, &data.eval, st).unwrap();
    println!(
        "ellipses: containment {} mean_area {} hits/ellipse@{} {}",
        fmt(es.containment),
        fmt(es.mean_area),
        st,
        fmt(es.hits_per_ellipse)
    );
    print_ellipse_table(&r.model, &data.eval, "eval ");
    print_ellipse_table(&r.model, &data.train, "train");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
