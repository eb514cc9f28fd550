use condspec::basis::{kernel_h, kernel_j, FrequencyGrid};
use condspec::ingest::{detrend, scale_outcomes, DetrendMode, MultiSubjectSeries};
use condspec::simstudy::{ise, local_linear, plugin_bandwidth, spline_smooth, true_spectrum_ma2};
use condspec::summaries::{percentile_sorted, squared_coherence, summarize};
use condspec::whittle::{
    cholesky_to_spectrum, residual_v, spectrum_to_cholesky, whittle_loglik, CholeskyComponents,
    DftData, PackedHermitian, ThetaField,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

fn complex() -> impl Strategy<Value = Complex64> {
    (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Complex64::new(a, b))
}

fn components(dim: usize) -> impl Strategy<Value = CholeskyComponents> {
    (
        proptest::collection::vec(complex(), dim * (dim - 1) / 2),
        proptest::collection::vec(-2.0..2.0f64, dim),
    )
        .prop_map(move |(t, lp)| {
            let psi: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            CholeskyComponents::new(dim, &t, &psi).unwrap()
        })
}

fn rel(a: &PackedHermitian, b: &PackedHermitian) -> f64 {
    let d = a.dim();
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            num = num.max((a.get(i, j) - b.get(i, j)).norm());
            den = den.max(b.get(i, j).norm());
        }
    }
    num / den
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kernels_are_symmetric_and_nonnegative(a in 0.0..0.5f64, b in 0.0..0.5f64, c in 0.0..1.0f64) {
        prop_assert_eq!(kernel_j(a, b).unwrap(), kernel_j(b, a).unwrap());
        prop_assert!(kernel_j(a, b).unwrap() >= 0.0);
        prop_assert!(kernel_h(c, a).unwrap() >= 0.0);
        // Cauchy-Schwarz for a positive semidefinite kernel.
        let k = kernel_h(a, c).unwrap();
        prop_assert!(k * k <= kernel_h(a, a).unwrap() * kernel_h(c, c).unwrap() * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn spectrum_round_trip(c3 in components(3), c2 in components(2)) {
        for c in [c3, c2] {
            if let Ok(f) = cholesky_to_spectrum(&c) {
                let back = cholesky_to_spectrum(&spectrum_to_cholesky(&f).unwrap()).unwrap();
                prop_assert!(rel(&back, &f) < 1e-10);
            }
        }
    }

    #[test]
    fn squared_coherence_in_unit_interval(c in components(3)) {
        if let Ok(f) = cholesky_to_spectrum(&c) {
            for (p, q) in [(0, 1), (1, 2), (0, 2)] {
                let raw = f.get(p, q).norm_sqr() / (f.get(p, p).re * f.get(q, q).re);
                prop_assert!(raw <= 1.0 + 1e-10);
                prop_assert!((0.0..=1.0).contains(&squared_coherence(&f, p, q)));
            }
        }
    }

    #[test]
    fn averaged_coherence_in_unit_interval(cs in proptest::collection::vec(components(2), 1..6)) {
        let fs: Vec<PackedHermitian> = cs.iter().filter_map(|c| cholesky_to_spectrum(c).ok()).collect();
        prop_assume!(!fs.is_empty());
        let avg = |a: usize, b: usize| fs.iter().map(|f| f.get(a, b)).sum::<Complex64>() / fs.len() as f64;
        let r = avg(0, 1).norm_sqr() / (avg(0, 0).re * avg(1, 1).re);
        prop_assert!(r <= 1.0 + 1e-10);
    }

    #[test]
    fn residuals_match_squared_modulus(ys in proptest::collection::vec(complex(), 3), ts in proptest::collection::vec(complex(), 3)) {
        let grid = FrequencyGrid::new(15).unwrap();
        let m = grid.len();
        let mut y = Vec::new();
        for _ in 0..m {
            y.extend_from_slice(&ys);
        }
        let data = DftData::from_coefficients(grid, 1, 3, y).unwrap();
        let mut theta = ThetaField::zeros(3, 1, m);
        for (i, (k, l)) in [(1, 0), (2, 0), (2, 1)].into_iter().enumerate() {
            theta.set(k, l, DMatrix::from_element(1, m, ts[i]));
        }
        let v0 = residual_v(0, &data, &theta).unwrap()[(0, 0)];
        let v1 = residual_v(1, &data, &theta).unwrap()[(0, 0)];
        let v2 = residual_v(2, &data, &theta).unwrap()[(0, 0)];
        let o0 = (ys[0] - ts[0] * ys[1] - ts[1] * ys[2]).norm_sqr();
        let o1 = (ys[1] - ts[2] * ys[2]).norm_sqr();
        prop_assert!((v0 - o0).abs() < 1e-12 * (1.0 + o0));
        prop_assert!((v1 - o1).abs() < 1e-12 * (1.0 + o1));
        prop_assert!((v2 - ys[2].norm_sqr()).abs() < 1e-12);
        prop_assert!(v0 >= -1e-12 && v1 >= -1e-12);
    }

    #[test]
    fn loglik_is_unitarily_invariant(c in components(2), ys in proptest::collection::vec(complex(), 2), phase in 0.0..std::f64::consts::TAU, mix in 0.0..1.57f64) {
        let f = match cholesky_to_spectrum(&c) { Ok(f) => f, Err(_) => return Ok(()) };
        let u = DMatrix::from_row_slice(2, 2, &[
            Complex64::new(mix.cos(), 0.0), Complex64::from_polar(-mix.sin(), phase),
            Complex64::from_polar(mix.sin(), -phase), Complex64::new(mix.cos(), 0.0),
        ]);
        let fr = PackedHermitian::from_full(&(&u * f.to_full() * u.adjoint())).unwrap();
        let yv = nalgebra::DVector::from_column_slice(&ys);
        let yr = &u * &yv;
        let grid = FrequencyGrid::new(15).unwrap();
        let m = grid.len();
        let mk = |v: &[Complex64]| {
            let mut all = Vec::new();
            for _ in 0..m { all.extend_from_slice(v); }
            DftData::from_coefficients(grid.clone(), 1, 2, all).unwrap()
        };
        let a = whittle_loglik(&mk(&ys), &vec![f; m]).unwrap();
        let b = whittle_loglik(&mk(yr.as_slice()), &vec![fr; m]).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn scale_outcomes_is_idempotent(raw in proptest::collection::vec(-1e3..1e3f64, 2..20)) {
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-6);
        let (u, t) = scale_outcomes(&raw).unwrap();
        for (x, r) in u.iter().zip(&raw) {
            prop_assert!((t.to_unit(*r) - x).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(x));
        }
        let (u2, t2) = scale_outcomes(&u).unwrap();
        prop_assert_eq!(u2, u);
        prop_assert_eq!(t2.offset, 0.0);
        prop_assert_eq!(t2.scale, 1.0);
    }

    #[test]
    fn mean_detrend_centres_channels(vals in proptest::collection::vec(-50.0..50.0f64, 2 * 16 * 2)) {
        let s = MultiSubjectSeries::from_unit_outcomes(vec!["a".into(), "b".into()], 16, 2, vals, vec![0.0, 1.0]).unwrap();
        let d = detrend(&s, DetrendMode::Mean);
        for j in 0..2 {
            for p in 0..2 {
                let x = d.channel(j, p);
                let orig = s.channel(j, p);
                let mean = x.iter().sum::<f64>() / 16.0;
                let om = orig.iter().sum::<f64>() / 16.0;
                let sd = (orig.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 15.0).sqrt();
                prop_assert!(mean.abs() < 1e-10 * sd.max(1.0));
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 3 * 15), raw in proptest::collection::vec(-1e6..1e6f64, 3)) {
        prop_assume!(raw[0] != raw[1] || raw[1] != raw[2]);
        let ids = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let s = MultiSubjectSeries::new(ids, 15, 1, vals, raw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (sp, op) = (dir.path().join("s.csv"), dir.path().join("o.csv"));
        s.write_series_csv(&sp).unwrap();
        s.write_outcomes_csv(&op).unwrap();
        let back = condspec::ingest::load_dataset(&sp, &op, condspec::ingest::IngestOptions { detrend: DetrendMode::None }).unwrap();
        prop_assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), s.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.outcomes_raw(), s.outcomes_raw());
        prop_assert_eq!(back.outcomes(), s.outcomes());
    }

    #[test]
    fn percentiles_bracket_sorted_values(mut v in proptest::collection::vec(-1e3..1e3f64, 1..300)) {
        let (mean, lo, hi) = summarize(&mut v);
        prop_assert!(lo <= hi);
        prop_assert!(v[0] <= mean + 1e-9 && mean <= v[v.len() - 1] + 1e-9);
        prop_assert_eq!(lo, percentile_sorted(&v, 0.025));
    }

    #[test]
    fn true_spectrum_is_hermitian_pd(w in 0.0..0.5f64, u in 0.0..1.0f64) {
        let f = true_spectrum_ma2(w, u).unwrap();
        prop_assert!(spectrum_to_cholesky(&f).is_ok());
        let c2 = f.get(0, 1).norm_sqr() / (f.get(0, 0).re * f.get(1, 1).re);
        prop_assert!((c2 - condspec::simstudy::rho(u).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn ise_shift_and_baseline_equivariance(shift in -5.0..5.0f64, a in -1.0..1.0f64, b in -2.0..2.0f64) {
        let u: Vec<f64> = (1..=15).map(|j| j as f64 / 15.0).collect();
        let y: Vec<f64> = u.iter().enumerate().map(|(i, x)| a + b * x + 0.2 * ((i * 31 % 7) as f64 - 3.0)).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let s1 = spline_smooth(&u, &y, &grid).unwrap();
        let s2 = spline_smooth(&u, &ys, &grid).unwrap();
        prop_assert!(s1.iter().zip(&s2).all(|(p, q)| (q - p - shift).abs() < 1e-7));
        let h = plugin_bandwidth(&u, 1.0);
        let l1 = local_linear(&u, &y, &grid, h).unwrap();
        let l2 = local_linear(&u, &ys, &grid, h).unwrap();
        prop_assert!(l1.iter().zip(&l2).all(|(p, q)| (q - p - shift).abs() < 1e-9));
        let off: Vec<f64> = s1.iter().map(|v| v + shift).collect();
        prop_assert!((ise(&off, &s1, &grid).unwrap() - shift * shift).abs() < 1e-9 * (1.0 + shift * shift));
    }
}
