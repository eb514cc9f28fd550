use condspec::basis::FrequencyGrid;
use condspec::basis::Rank;
use condspec::sampler::{
    build_basis, gradient_eta_d, log_target_eta_d, newton_mode_eta_d, run_chain, Component,
    ModelConfig, Part, Sampler,
};
use condspec::simstudy::{generate_ma2, Ma2Config};
use condspec::summaries::log_spectrum_surface;
use condspec::whittle::{dft, DftData};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

fn small_config(iterations: usize, burn_in: usize) -> ModelConfig {
    ModelConfig {
        n_j: Rank::Fixed(3),
        n_h: Rank::Fixed(2),
        iterations,
        burn_in,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn ma2_two_channel(
    n_subjects: usize,
    n_time: usize,
    seed: u64,
) -> condspec::ingest::MultiSubjectSeries {
    let full = generate_ma2(&Ma2Config {
        n_subjects,
        n_time,
        seed,
    })
    .unwrap();
    let data: Vec<f64> = (0..n_subjects)
        .flat_map(|j| {
            let full = &full;
            (0..n_time).flat_map(move |t| [full.value(j, t, 0), full.value(j, t, 1)])
        })
        .collect();
    condspec::ingest::MultiSubjectSeries::from_unit_outcomes(
        full.subject_ids().to_vec(),
        n_time,
        2,
        data,
        full.outcomes().to_vec(),
    )
    .unwrap()
}

#[test]
fn same_seed_gives_identical_draws() {
    let data = generate_ma2(&Ma2Config {
        n_subjects: 4,
        n_time: 40,
        seed: 3,
    })
    .unwrap();
    let cfg = small_config(120, 20);
    let a = run_chain(&data, &cfg).unwrap();
    let b = run_chain(&data, &cfg).unwrap();
    assert_eq!(a.coefficients, b.coefficients);
    assert_eq!(a.tau2, b.tau2);
    assert_eq!(a.len(), 100);
    let rates = a.diagnostics.acceptance_rates();
    assert_eq!(rates.len(), 3);
    assert!(rates.iter().all(|r| *r > 0.0 && *r <= 1.0));
}

#[test]
fn extending_a_short_chain_matches_the_long_chain() {
    let data = ma2_two_channel(4, 40, 5);
    let y = dft(&data);
    let long_cfg = small_config(150, 30);
    let basis = build_basis(data.outcomes(), 40, &long_cfg).unwrap();
    let long = Sampler::new(&y, &basis, long_cfg.clone())
        .unwrap()
        .run()
        .unwrap();
    let short_cfg = ModelConfig {
        iterations: 70,
        ..long_cfg.clone()
    };
    let short = Sampler::new(&y, &basis, short_cfg).unwrap().run().unwrap();
    let resumed = Sampler::new(&y, &basis, long_cfg)
        .unwrap()
        .extend(short)
        .unwrap();
    assert_eq!(resumed.coefficients, long.coefficients);
    assert_eq!(resumed.tau2, long.tau2);
    assert_eq!(resumed.snapshot, long.snapshot);
}

fn zero_data(n_subjects: usize, n_time: usize, p: usize) -> DftData {
    let grid = FrequencyGrid::new(n_time).unwrap();
    let m = grid.len();
    DftData::from_coefficients(
        grid,
        n_subjects,
        p,
        vec![Complex64::new(0.0, 0.0); n_subjects * m * p],
    )
    .unwrap()
}

#[test]
fn prior_only_gaussian_block_is_standard_normal() {
    let y = zero_data(3, 20, 2);
    let cfg = ModelConfig {
        sigma2_alpha: 1.0,
        fixed_smoothing: Some(1.0),
        ..small_config(10, 1)
    };
    let basis = build_basis(&[0.0, 0.5, 1.0], 20, &cfg).unwrap();
    let sampler = Sampler::new(&y, &basis, cfg).unwrap();
    let mut state = sampler.initial_state();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let n = 5000;
    let p = basis.n_coef();
    let mut sum = DVector::zeros(p);
    let mut sq = DVector::zeros(p);
    for _ in 0..n {
        let d = sampler
            .draw_theta_block(&mut state, 1, 0, Part::Real, &mut rng)
            .unwrap();
        sq += d.component_mul(&d);
        sum += d;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean.component_mul(&mean);
    assert!(mean.amax() < 4.0 / (n as f64).sqrt(), "{mean}");
    assert!(var.iter().all(|v| (v - 1.0).abs() < 0.1), "{var}");
}

#[test]
fn gaussian_precision_scales_with_psi() {
    let data = ma2_two_channel(4, 30, 2);
    let y = dft(&data);
    let cfg = small_config(10, 1);
    let basis = build_basis(data.outcomes(), 30, &cfg).unwrap();
    let sampler = Sampler::new(&y, &basis, cfg).unwrap();
    let base = sampler.initial_state();
    let mut eta = base.eta.clone();
    // Column 0 is the constant, so this sets ψ⁻¹_11 = 4 everywhere.
    eta[base.index_of(Component::Diag(0))][0] = 4f64.ln();
    let scaled =
        condspec::sampler::ChainState::from_coefficients(2, &basis, eta, base.smoothing.clone())
            .unwrap();
    let prior = sampler.diag_prior_precision(&base, 0);
    let (p1, _) = sampler.theta_conditional(&base, 1, 0, Part::Real).unwrap();
    let (p4, _) = sampler
        .theta_conditional(&scaled, 1, 0, Part::Real)
        .unwrap();
    let strip = |m: DMatrix<f64>| {
        let mut m = m;
        for i in 0..m.nrows() {
            m[(i, i)] -= prior[i];
        }
        m
    };
    let (d1, d4) = (strip(p1), strip(p4));
    assert!((d4 - d1 * 4.0).amax() < 1e-9 * 4.0);
}

#[test]
fn gaussian_rhs_matches_dense_residual_form() {
    // With everything else fixed the data energy is quadratic in one block:
    // its gradient at zero is -Σ⁻¹μ and its curvature the data precision.
    let full = generate_ma2(&Ma2Config {
        n_subjects: 3,
        n_time: 20,
        seed: 9,
    })
    .unwrap();
    let y = dft(&full);
    let cfg = small_config(10, 1);
    let basis = build_basis(full.outcomes(), 20, &cfg).unwrap();
    let sampler = Sampler::new(&y, &basis, cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut eta = sampler.initial_state().eta;
    for e in eta.iter_mut() {
        for x in e.iter_mut() {
            *x = 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    let smoothing = sampler.initial_state().smoothing;
    let state =
        condspec::sampler::ChainState::from_coefficients(3, &basis, eta.clone(), smoothing.clone())
            .unwrap();
    let (n, m) = (y.n_subjects(), y.n_freq());
    for (k, l) in [(1usize, 0usize), (2, 0), (2, 1)] {
        for part in [Part::Real, Part::Imag] {
            let comp = match part {
                Part::Real => Component::Real(k, l),
                Part::Imag => Component::Imag(k, l),
            };
            let idx = state.index_of(comp);
            let (prec, rhs) = sampler.theta_conditional(&state, k, l, part).unwrap();
            // Data term Σ ψ_c |Y_c - Σ_{a>c} θ_ac Y_a|² at coefficients x.
            let energy = |x: &DVector<f64>| -> f64 {
                let mut e2 = eta.clone();
                e2[idx] = x.clone();
                let st = condspec::sampler::ChainState::from_coefficients(
                    3,
                    &basis,
                    e2,
                    smoothing.clone(),
                )
                .unwrap();
                let mut acc = 0.0;
                for j in 0..n {
                    for w in 0..m {
                        let yv = y.vector(j, w);
                        for c in 0..3 {
                            let mut r = yv[c];
                            for a in c + 1..3 {
                                r -= st.theta().at(a, c, j, w) * yv[a];
                            }
                            acc += st.psi_inv(c)[(j, w)] * r.norm_sqr();
                        }
                    }
                }
                acc
            };
            let x0 = DVector::zeros(basis.n_coef());
            let h = 1e-4;
            for c in [0usize, 3, basis.n_coef() - 1] {
                let mut xp = x0.clone();
                xp[c] += h;
                let mut xm = x0.clone();
                xm[c] -= h;
                // d/dx of the data energy at 0 equals -Σ⁻¹μ_c (data part).
                let fd = (energy(&xp) - energy(&xm)) / (2.0 * h);
                assert!(
                    (fd + rhs[c]).abs() < 1e-6 * (1.0 + rhs[c].abs()),
                    "({k},{l}) {part:?} col {c}: {fd} vs {}",
                    -rhs[c]
                );
                let prior = sampler.diag_prior_precision(&state, 0)[c];
                let curv = (energy(&xp) - 2.0 * energy(&x0) + energy(&xm)) / (h * h);
                assert!((curv - (prec[(c, c)] - prior)).abs() < 1e-4 * (1.0 + curv.abs()));
            }
        }
    }
}

#[test]
fn log_target_matches_naive_loop() {
    let cfg = small_config(10, 1);
    let basis = build_basis(&[0.0, 0.3, 0.7, 1.0], 24, &cfg).unwrap();
    let q = basis.design_matrix();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let eta = DVector::from_fn(basis.n_coef(), |_, _| 0.1 * normal());
    let v = DMatrix::from_fn(4, basis.n_freq(), |_, _| normal().abs());
    let prec = DVector::from_fn(basis.n_coef(), |_, _| 0.5 + normal().abs());
    let mut naive = 0.0;
    for j in 0..4 {
        for w in 0..basis.n_freq() {
            let s: f64 = (0..basis.n_coef())
                .map(|c| q[(j * basis.n_freq() + w, c)] * eta[c])
                .sum();
            naive += s - s.exp() * v[(j, w)];
        }
    }
    for c in 0..basis.n_coef() {
        naive -= 0.5 * eta[c] * eta[c] * prec[c];
    }
    let fast = log_target_eta_d(&basis, &v, &prec, &eta);
    assert!((fast - naive).abs() < 1e-10 * naive.abs().max(1.0));
}

#[test]
fn newton_mode_is_stationary() {
    let cfg = small_config(10, 1);
    let basis = build_basis(&[0.0, 0.25, 0.5, 1.0], 30, &cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let v = DMatrix::from_fn(4, basis.n_freq(), |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.2 + z * z
    });
    let prec = DVector::from_element(basis.n_coef(), 0.1);
    let out = newton_mode_eta_d(
        &basis,
        &v,
        &prec,
        &DVector::zeros(basis.n_coef()),
        1e-8,
        100,
    )
    .unwrap();
    let g = gradient_eta_d(&basis, &v, &prec, &out.mode);
    let scale = basis
        .weighted_sum(&DMatrix::from_element(4, basis.n_freq(), 1.0))
        .amax();
    assert!(g.amax() < 1e-8 * scale);
    assert!(newton_mode_eta_d(&basis, &v.map(|x| -x), &prec, &out.mode, 1e-8, 100).is_err());
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn zero_block_smoothing_draw_matches_inverse_gamma() {
    let y = zero_data(3, 20, 1);
    let cfg = small_config(10, 1);
    let basis = build_basis(&[0.0, 0.5, 1.0], 20, &cfg).unwrap();
    let sampler = Sampler::new(&y, &basis, cfg.clone()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let n_b = basis.block_map().b.len() as f64;
    let draws: Vec<f64> = (0..5000)
        .map(|_| {
            let mut st = sampler.initial_state();
            sampler.draw_smoothing(&mut st, &mut rng);
            st.smoothing[0].tau2[0]
        })
        .collect();
    // IG(a, b) is b · 2 / χ²_{2a}.
    let (a, b) = ((n_b + cfg.nu) / 2.0, cfg.nu / 1.0);
    let chi = ChiSquared::new(2.0 * a).unwrap();
    let mut rng2 = ChaCha20Rng::seed_from_u64(99);
    let oracle: Vec<f64> = (0..5000).map(|_| 2.0 * b / chi.sample(&mut rng2)).collect();
    let p = ks_two_sample(draws, oracle);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn forced_small_smoothing_shrinks_nonlinear_blocks() {
    let data = ma2_two_channel(5, 40, 1);
    let free = run_chain(&data, &small_config(200, 100)).unwrap();
    let tight = run_chain(
        &data,
        &ModelConfig {
            fixed_smoothing: Some(1e-12),
            ..small_config(200, 100)
        },
    )
    .unwrap();
    let bm = free.basis.block_map().clone();
    let norm = |d: &condspec::sampler::PosteriorDraws, c: Component, r: &std::ops::Range<usize>| {
        (0..d.len())
            .map(|s| d.eta(s, c).rows(r.start, r.len()).norm())
            .sum::<f64>()
            / d.len() as f64
    };
    for c in [
        Component::Real(1, 0),
        Component::Diag(0),
        Component::Diag(1),
    ] {
        for r in [&bm.b, &bm.c, &bm.d] {
            let (f, t) = (norm(&free, c, r), norm(&tight, c, r));
            assert!(t < 1e-3 * f, "{c:?} {r:?}: tight {t} free {f}");
        }
    }
}

#[test]
fn cache_stays_coherent() {
    let data = generate_ma2(&Ma2Config {
        n_subjects: 4,
        n_time: 30,
        seed: 12,
    })
    .unwrap();
    let y = dft(&data);
    let cfg = small_config(300, 10);
    let basis = build_basis(data.outcomes(), 30, &cfg).unwrap();
    let sampler = Sampler::new(&y, &basis, cfg).unwrap();
    let mut state = sampler.initial_state();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut diag = condspec::sampler::ChainDiagnostics {
        accepted: vec![0; 3],
        ..Default::default()
    };
    for s in 1..=300 {
        sampler.step(&mut state, &mut rng, &mut diag).unwrap();
        if s % 100 == 0 {
            assert!(state.cache_deviation(&basis) < 1e-10);
        }
    }
}

#[test]
fn white_noise_fit_is_flat() {
    let (n_subjects, n_time) = (10, 100);
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let data: Vec<f64> = (0..n_subjects * n_time * 2)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let ids = (0..n_subjects).map(|j| format!("w{j}")).collect();
    let outcomes: Vec<f64> = (0..n_subjects)
        .map(|j| j as f64 / (n_subjects - 1) as f64)
        .collect();
    let series =
        condspec::ingest::MultiSubjectSeries::from_unit_outcomes(ids, n_time, 2, data, outcomes)
            .unwrap();
    let cfg = ModelConfig {
        n_j: Rank::Fixed(5),
        n_h: Rank::Fixed(3),
        ..small_config(1000, 300)
    };
    let draws = run_chain(&series, &cfg).unwrap();
    let omegas: Vec<f64> = (0..20).map(|i| 0.02 + 0.46 * i as f64 / 19.0).collect();
    let us: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    for p in 0..2 {
        let s = log_spectrum_surface(&draws, p, &omegas, &us).unwrap();
        let worst = s.mean.iter().map(|m| m.abs()).fold(0.0, f64::max);
        assert!(worst < 0.5, "channel {p}: max |log f| = {worst}");
    }
}
