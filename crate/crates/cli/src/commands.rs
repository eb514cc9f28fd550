use std::path::Path;

use condspec::checkpoint::{self, config_hash, sha256_hex, stored_config_hash};
use condspec::ingest::{load_dataset, DetrendMode, IngestOptions};
use condspec::sampler::{run_chain, ModelConfig, Sampler};
use condspec::simstudy::{
    generate_ma2, run_study, study_model, Estimator, Ma2Config, Stage1, StudyConfig, StudyReport,
};
use condspec::summaries::{
    band_coherence_derivative, coherence_pairs, coherence_surface, default_band_curves,
    log_spectrum_surface, unit_grid, write_band_curve, write_surface, Band, BandKind,
    DEFAULT_U_POINTS, HF_BAND, LF_BAND,
};
use condspec::whittle::dft;
use serde_json::json;

use crate::config::{existing_file, parse_rank, pick, require, FileConfig};
use crate::manifest::{read_manifest, write_text, Manifest};
use crate::{CliError, FitArgs, ModelArgs, SimulateArgs, Stage1Arg, StudyArgs, SummarizeArgs};

fn model_config(
    args: &ModelArgs,
    file: &FileConfig,
    base: ModelConfig,
) -> Result<ModelConfig, CliError> {
    let rank = |flag: &Option<String>, value: &Option<crate::config::RankValue>, default| match (
        flag, value,
    ) {
        (Some(s), _) => parse_rank(s).map_err(CliError::Usage),
        (None, Some(v)) => v.to_rank(),
        (None, None) => Ok(default),
    };
    let config = ModelConfig {
        n_j: rank(&args.n_j, &file.n_j, base.n_j)?,
        n_h: rank(&args.n_h, &file.n_h, base.n_h)?,
        sigma2_alpha: pick(args.sigma2_alpha, &file.sigma2_alpha).unwrap_or(base.sigma2_alpha),
        g_scale: pick(args.g_scale, &file.g_scale).unwrap_or(base.g_scale),
        nu: pick(args.nu, &file.nu).unwrap_or(base.nu),
        proposal_df: pick(args.proposal_df, &file.proposal_df).unwrap_or(base.proposal_df),
        iterations: pick(args.iters, &file.iters).unwrap_or(base.iterations),
        burn_in: pick(args.burnin, &file.burnin).unwrap_or(base.burn_in),
        seed: require(pick(args.seed, &file.seed), "seed")?,
        ..base
    };
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn parse_band(
    flag: Option<String>,
    file: &Option<String>,
    default: Band,
) -> Result<Band, CliError> {
    match pick(flag, file) {
        Some(s) => s
            .parse()
            .map_err(|e: condspec::Error| CliError::Usage(e.to_string())),
        None => Ok(default),
    }
}

pub fn fit(args: FitArgs, file: &FileConfig, threads: usize) -> Result<(), CliError> {
    let series = existing_file(
        require(pick(args.series, &file.series), "series")?,
        "series",
    )?;
    let outcomes = existing_file(
        require(pick(args.outcomes, &file.outcomes), "outcomes")?,
        "outcomes",
    )?;
    let out = require(pick(args.out, &file.out), "out")?;
    let detrend = match args.detrend {
        Some(s) => s
            .parse()
            .map_err(|e: condspec::Error| CliError::Usage(e.to_string()))?,
        None => file.detrend.unwrap_or(DetrendMode::Mean),
    };
    let resume = args
        .resume
        .map(|p| existing_file(p, "checkpoint"))
        .transpose()?;
    let model = model_config(&args.model, file, ModelConfig::application_preset())?;
    let data = load_dataset(&series, &outcomes, IngestOptions { detrend })?;
    create_dir(&out)?;

    let draws = match &resume {
        Some(path) => {
            let previous = checkpoint::read(path)?;
            let same_model = ModelConfig {
                iterations: model.iterations,
                ..previous.config.clone()
            };
            if same_model != model {
                return Err(CliError::Usage(
                    "resumed chain was run with different settings; only --iters may change".into(),
                ));
            }
            let y = dft(&data);
            let basis = previous.basis.clone();
            let mut draws = Sampler::new(&y, &basis, model.clone())?.extend(previous)?;
            draws.outcome_transform = data.outcome_transform();
            draws
        }
        None => run_chain(&data, &model)?,
    };
    let hash = config_hash(&model);
    checkpoint::write(&out.join("chain.ckpt"), &draws)?;

    let diag = &draws.diagnostics;
    let log = json!({
        "iterations": model.iterations,
        "burn_in": model.burn_in,
        "retained": draws.len(),
        "n_j": draws.basis.n_j(),
        "n_h": draws.basis.n_h(),
        "acceptance_rates": diag.acceptance_rates(),
        "newton_iterations": diag.newton_iterations,
        "gaussian_failures": diag.gaussian_failures,
        "config_hash": hash,
    });
    write_text(&out.join("fit_log.json"), &to_json(&log))?;
    let secs = &draws.iteration_seconds;
    let timing = json!({
        "timed_iterations": secs.len(),
        "mean_seconds": draws.mean_iteration_seconds(),
        "max_seconds": secs.iter().cloned().fold(0.0, f64::max),
        "total_seconds": secs.iter().sum::<f64>(),
    });
    write_text(&out.join("timing.json"), &to_json(&timing))?;

    let settings = json!({
        "series": series,
        "outcomes": outcomes,
        "detrend": detrend,
        "resume": resume,
        "threads": threads,
        "model": model,
    });
    let mut manifest = Manifest::new("fit", Some(model.seed), hash, settings);
    manifest.add_input(&series)?;
    manifest.add_input(&outcomes)?;
    if let Some(path) = &resume {
        manifest.add_input(path)?;
    }
    manifest.finish(&out)?;
    let rates: Vec<String> = diag
        .acceptance_rates()
        .iter()
        .map(|r| format!("{r:.3}"))
        .collect();
    eprintln!(
        "fit: S={} S0={} retained={} acceptance=[{}] mean {:.4} s/iter",
        model.iterations,
        model.burn_in,
        draws.len(),
        rates.join(", "),
        draws.mean_iteration_seconds()
    );
    Ok(())
}

pub fn summarize(args: SummarizeArgs, file: &FileConfig, threads: usize) -> Result<(), CliError> {
    let path = existing_file(
        require(pick(args.checkpoint, &file.checkpoint), "checkpoint")?,
        "checkpoint",
    )?;
    let out = require(pick(args.out, &file.out), "out")?;
    let hf = parse_band(args.band, &file.band, HF_BAND)?;
    let lf = parse_band(args.lf_band, &file.lf_band, LF_BAND)?;
    let u_points = pick(args.u_points, &file.u_points).unwrap_or(DEFAULT_U_POINTS);

    let bytes = std::fs::read(&path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let hash = stored_config_hash(&bytes)?;
    let draws = checkpoint::decode(&bytes)?;
    if let Some(want) = &args.expect_config_hash {
        if *want != hash {
            return Err(CliError::Usage(format!(
                "config hash mismatch: checkpoint has {hash}, expected {want}"
            )));
        }
    }
    let sibling = path
        .parent()
        .unwrap_or(Path::new("."))
        .join("manifest.json");
    if sibling.is_file() {
        let fit = read_manifest(&sibling)?;
        if fit.command == "fit" && fit.config_hash != hash {
            return Err(CliError::Usage(format!(
                "config hash mismatch: checkpoint has {hash}, {} records {}",
                sibling.display(),
                fit.config_hash
            )));
        }
        if let Some(digest) = fit.outputs.get("chain.ckpt") {
            if *digest != sha256_hex(&bytes) {
                return Err(CliError::Usage(format!(
                    "checkpoint digest differs from {}",
                    sibling.display()
                )));
            }
        }
    }

    create_dir(&out)?;
    let us = unit_grid(u_points)?;
    let mut written = 0;
    for curve in default_band_curves(&draws, lf, hf, &us)? {
        write_band_curve(&out, &curve, &draws, &hash)?;
        written += 1;
    }
    if args.derivatives {
        for (p, q) in coherence_pairs(draws.dim) {
            write_band_curve(
                &out,
                &band_coherence_derivative(&draws, p, q, hf, &us)?,
                &draws,
                &hash,
            )?;
            written += 1;
        }
    }
    let omegas = draws.basis.frequency_basis().points().to_vec();
    for p in 0..draws.dim {
        let surf = log_spectrum_surface(&draws, p, &omegas, &us)?;
        write_surface(
            &out,
            &format!("log_spectrum_{}", p + 1),
            &surf,
            &draws,
            &hash,
        )?;
        written += 1;
    }
    for (p, q) in coherence_pairs(draws.dim) {
        let surf = coherence_surface(&draws, p, q, &omegas, &us)?;
        write_surface(
            &out,
            &format!("coherence_{}{}", p + 1, q + 1),
            &surf,
            &draws,
            &hash,
        )?;
        written += 1;
    }

    let settings = json!({
        "checkpoint": path,
        "band": hf,
        "lf_band": lf,
        "u_points": u_points,
        "derivatives": args.derivatives,
        "threads": threads,
    });
    let mut manifest = Manifest::new("summarize", Some(draws.config.seed), hash, settings);
    manifest.add_input(&path)?;
    manifest.finish(&out)?;
    eprintln!(
        "summarize: {written} functionals from {} draws",
        draws.len()
    );
    Ok(())
}

pub fn simulate(args: SimulateArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = Ma2Config {
        n_subjects: pick(args.subjects, &file.subjects).unwrap_or(25),
        n_time: pick(args.length, &file.length).unwrap_or(300),
        seed: require(pick(args.seed, &file.seed), "seed")?,
    };
    let out = require(pick(args.out, &file.out), "out")?;
    let data = generate_ma2(&config)?;
    create_dir(&out)?;
    data.write_series_csv(&out.join("series.csv"))?;
    data.write_outcomes_csv(&out.join("outcomes.csv"))?;
    let settings = serde_json::to_value(config).expect("config serializes");
    let hash = sha256_hex(settings.to_string().as_bytes());
    Manifest::new("simulate", Some(config.seed), hash, settings).finish(&out)?;
    eprintln!("simulate: N={} n={} P=3", config.n_subjects, config.n_time);
    Ok(())
}

enum Check {
    Coverage { lo: f64, hi: f64 },
    IseDominance,
}

fn parse_check(s: &str) -> Result<Check, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "unknown assertion `{s}`; use coverage:lo:hi or ise-dominance"
        ))
    };
    if s == "ise-dominance" {
        return Ok(Check::IseDominance);
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["coverage", lo, hi] => {
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(bad());
            }
            Ok(Check::Coverage { lo, hi })
        }
        _ => Err(bad()),
    }
}

/// Returns a description of each violated check.
fn evaluate(check: &Check, report: &StudyReport) -> Vec<String> {
    let mut bad = Vec::new();
    for row in report
        .rows
        .iter()
        .filter(|r| r.estimator == Estimator::Bayes)
    {
        match check {
            Check::Coverage { lo, hi } => match row.coverage_mean {
                Some(c) if (*lo..=*hi).contains(&c) => {}
                c => bad.push(format!(
                    "{} coverage {c:?} outside [{lo}, {hi}]",
                    row.kind.stem()
                )),
            },
            Check::IseDominance => {
                if matches!(row.kind, BandKind::Coherence { .. }) {
                    continue;
                }
                for est in [Estimator::TwoStageSpline, Estimator::TwoStageLocal] {
                    match report.row(est, row.kind) {
                        Some(other) if row.ise_mean < other.ise_mean => {}
                        _ => bad.push(format!(
                            "{} bayes ISE not below {}",
                            row.kind.stem(),
                            est.name()
                        )),
                    }
                }
            }
        }
    }
    bad
}

pub fn study(args: StudyArgs, file: &FileConfig, threads: usize) -> Result<(), CliError> {
    let checks = args
        .asserts
        .iter()
        .map(|s| parse_check(s))
        .collect::<Result<Vec<_>, _>>()?;
    let out = require(pick(args.out, &file.out), "out")?;
    let model = model_config(&args.model, file, study_model(2000, 500))?;
    let replicates = match args.replicates {
        Some(r) => r as usize,
        None => file.replicates.unwrap_or(20),
    };
    let study = StudyConfig {
        replicates,
        n_subjects: pick(args.subjects, &file.subjects).unwrap_or(25),
        n_time: pick(args.length, &file.length).unwrap_or(300),
        seed: model.seed,
        u_points: pick(args.u_points, &file.u_points).unwrap_or(DEFAULT_U_POINTS),
        stage1: match args.stage1 {
            Some(Stage1Arg::Sum) => Stage1::Sum,
            Some(Stage1Arg::Average) | None => Stage1::Average,
        },
        bandwidth_factor: pick(args.bandwidth_factor, &file.bandwidth_factor)
            .unwrap_or(StudyConfig::default().bandwidth_factor),
    };
    if study.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    create_dir(&out)?;
    let report = run_study(&study, &model)?;
    report.write_csv(&out.join("report.csv"))?;
    let replicates: Vec<serde_json::Value> = report
        .replicates
        .iter()
        .map(|r| {
            if let Some(e) = &r.error {
                eprintln!("study: replicate {} failed: {e}", r.index);
            }
            json!({
                "index": r.index,
                "data_seed": r.data_seed,
                "chain_seed": r.chain_seed,
                "acceptance": r.acceptance,
                "error": r.error,
                "scores": r.scores,
            })
        })
        .collect();
    write_text(&out.join("replicates.json"), &to_json(&replicates))?;
    let timing: Vec<f64> = report
        .replicates
        .iter()
        .map(|r| r.mean_iteration_seconds)
        .collect();
    write_text(
        &out.join("timing.json"),
        &to_json(&json!({ "mean_seconds_per_iteration": timing })),
    )?;

    let settings =
        json!({ "study": study, "model": model, "threads": threads, "asserts": args.asserts });
    let hash = sha256_hex(
        json!({ "study": study, "model": model })
            .to_string()
            .as_bytes(),
    );
    Manifest::new("study", Some(study.seed), hash, settings).finish(&out)?;
    eprintln!(
        "study: {} replicates ({} failed), report at {}",
        study.replicates,
        report.failed(),
        out.join("report.csv").display()
    );

    let mut failures = Vec::new();
    for (text, check) in args.asserts.iter().zip(&checks) {
        let bad = evaluate(check, &report);
        eprintln!(
            "assert {text}: {}",
            if bad.is_empty() { "PASS" } else { "FAIL" }
        );
        for b in &bad {
            eprintln!("  {b}");
        }
        if !bad.is_empty() {
            failures.push(text.clone());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(failures.join(", ")))
    }
}
