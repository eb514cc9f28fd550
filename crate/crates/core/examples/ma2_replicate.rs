//! One replicate of the MA(2) design with per-measure ISE and coverage.
//!
//! `cargo run --release --example ma2_replicate -- [N] [n] [iters] [seed]`

use condspec::simstudy::study_model;
use condspec::simstudy::{run_replicate, StudyConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let study = StudyConfig {
        replicates: 1,
        n_subjects: get(0, 25),
        n_time: get(1, 300),
        seed: get(3, 1) as u64,
        ..StudyConfig::default()
    };
    let iters = get(2, 2000);
    let model = study_model(iters, iters / 4);
    let r = run_replicate(0, &study, &model);
    if let Some(e) = &r.error {
        eprintln!("replicate failed: {e}");
        std::process::exit(1);
    }
    println!(
        "mean iteration: {:.4} s, acceptance {:?}",
        r.mean_iteration_seconds, r.acceptance
    );
    for s in &r.scores {
        println!(
            "{:<18} {:<32} ise {:.6e} coverage {:?}",
            s.estimator.name(),
            s.kind.stem(),
            s.ise,
            s.coverage
        );
    }
}
