mod common;

use common::{dense_apply, dense_solve, dense_weight, dirichlet_matrix, random, random_factors, rng};
use lordnet::cnn::CnnConfig;
use lordnet::eval::relative_error;
use lordnet::fdm::{self, GridSpec, NsParams, DEFAULT_CG_TOL};
use lordnet::lordnet::{apply_factors, bind, layer_counts, materialize_dense, CpFactors, ParamSet};
use lordnet::msr::{self, ResidualKind, ResidualSpec};
use lordnet::randfield::{mean_project, sample_grf, GrfSpec};
use lordnet::tensor::{ConvBoundary, Tape};
use lordnet::train::{adam_step, AdamState, LossKind, TrainConfig};
use lordnet::{io, Field};
use proptest::prelude::*;

fn grid_for(kind: ResidualKind, n: usize) -> GridSpec {
    match kind {
        ResidualKind::PoissonDirichlet => GridSpec::dirichlet(n).unwrap(),
        ResidualKind::NsLiddriven => GridSpec::lid_driven(n, 1.0).unwrap(),
        _ => GridSpec::periodic(n).unwrap(),
    }
}

fn poisson_residual(spec: &ResidualSpec, u: &Field, f: &Field) -> Field {
    let mut t = Tape::new();
    let v = t.constant(u.clone());
    let r = msr::poisson_residual(&mut t, v, f, spec).unwrap();
    t.value(r).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn factored_layers_match_their_dense_weights(
        c in 1usize..5, r in 1usize..3,
        i1 in 1usize..9, i2 in 1usize..9, o1 in 1usize..9, o2 in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut g = rng(seed);
        let p = random_factors(c, r, &[i1, i2], &[o1, o2], &mut g);
        let x = random(&[c, i1, i2], &mut g);
        let w = dense_weight(&p);
        let lib = materialize_dense(&p).unwrap().w;
        prop_assert!(lib.max_abs_diff(&w).unwrap() < 1e-12);
        let want = dense_apply(&x, &w, &[c, o1, o2]);
        prop_assert!(apply_factors(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
        let counts = layer_counts(c, r, &[i1, i2], &[o1, o2]);
        prop_assert_eq!(counts.matrix_factored, p.factor_count());
        prop_assert_eq!(counts.dense, w.len());
    }

    #[test]
    fn rank_one_factors_reproduce_the_cp_form(
        c in 1usize..4, r in 1usize..3,
        i1 in 1usize..6, i2 in 1usize..6, o1 in 1usize..6, o2 in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut g = rng(seed);
        let cp = CpFactors {
            sigma: random(&[c, r], &mut g),
            a: vec![random(&[c, r, i1], &mut g), random(&[c, r, i2], &mut g)],
            b: vec![random(&[c, r, o1], &mut g), random(&[c, r, o2], &mut g)],
        };
        let x = random(&[c, i1, i2], &mut g);
        prop_assert!(lordnet::lordnet::cp_specialization_check(&cp, &x).unwrap() < 1e-12);
        prop_assert_eq!(cp.vector_count(), layer_counts(c, r, &[i1, i2], &[o1, o2]).cp);
    }

    #[test]
    fn poisson_residual_is_affine_in_the_prediction(
        periodic in any::<bool>(), n in 4usize..10, seed in any::<u64>(),
    ) {
        let kind = if periodic { ResidualKind::PoissonPeriodic } else { ResidualKind::PoissonDirichlet };
        let spec = ResidualSpec::new(kind, grid_for(kind, n), None).unwrap();
        let mut g = rng(seed);
        let shape = spec.prediction_shape();
        let (u1, u2, f) = (random(&shape, &mut g), random(&shape, &mut g), random(&[n, n], &mut g));
        let mut sum = u1.clone();
        sum.axpy(1.0, &u2).unwrap();
        let mut combo = poisson_residual(&spec, &sum, &f);
        combo.axpy(-1.0, &poisson_residual(&spec, &u1, &f)).unwrap();
        combo.axpy(-1.0, &poisson_residual(&spec, &u2, &f)).unwrap();
        combo.axpy(1.0, &poisson_residual(&spec, &Field::zeros(&shape), &f)).unwrap();
        let scale = (n * n) as f64;
        prop_assert!(combo.max_abs() < 1e-12 * scale);
    }

    #[test]
    fn residuals_cover_exactly_the_equation_set(kind_ix in 0usize..4, n in 4usize..9) {
        let kind = [
            ResidualKind::PoissonDirichlet,
            ResidualKind::PoissonPeriodic,
            ResidualKind::NsLiddriven,
            ResidualKind::NsPeriodic,
        ][kind_ix];
        let grid = grid_for(kind, n);
        let ns = kind.is_navier_stokes().then(|| NsParams::new(100.0, 0.01, 1).unwrap());
        let spec = ResidualSpec::new(kind, grid, ns).unwrap();
        let m = if grid.is_periodic() { n } else { n - 2 };
        prop_assert_eq!(spec.prediction_shape(), [1, m, m]);
    }

    #[test]
    fn fdm_solutions_are_residual_zeros(kind_ix in 0usize..4, seed in 0u64..1000) {
        let kind = [
            ResidualKind::PoissonDirichlet,
            ResidualKind::PoissonPeriodic,
            ResidualKind::NsLiddriven,
            ResidualKind::NsPeriodic,
        ][kind_ix];
        let n = 16;
        let grid = grid_for(kind, n);
        if kind.is_navier_stokes() {
            let p = NsParams::new(100.0, 0.01, 1).unwrap();
            let spec = ResidualSpec::new(kind, grid, Some(p)).unwrap();
            let w0 = sample_grf(&GrfSpec::initial_vorticity(n, seed)).unwrap();
            let psi0 = fdm::poisson_solve(&w0, &grid, DEFAULT_CG_TOL).unwrap();
            let psi1 = fdm::ns_advance(&psi0, &grid, &p, DEFAULT_CG_TOL).unwrap();
            prop_assert!(msr::audit(&psi0, &psi1, &spec, DEFAULT_CG_TOL).unwrap().passed());
        } else {
            let spec = ResidualSpec::new(kind, grid, None).unwrap();
            let f = sample_grf(&GrfSpec::poisson_forcing(n, seed)).unwrap();
            let u = fdm::poisson_solve(&f, &grid, DEFAULT_CG_TOL).unwrap();
            prop_assert!(msr::audit(&f, &u, &spec, DEFAULT_CG_TOL).unwrap().passed());
        }
    }

    #[test]
    fn dirichlet_solve_matches_dense_elimination(n in 4usize..9, seed in any::<u64>()) {
        let mut g = rng(seed);
        let f = random(&[n, n], &mut g);
        let grid = GridSpec::dirichlet(n).unwrap();
        let u = fdm::poisson_solve(&f, &grid, 1e-13).unwrap();
        let interior = fdm::interior(&f).unwrap();
        let x = dense_solve(dirichlet_matrix(n), interior.data().to_vec());
        let m = n - 2;
        for i in 0..m {
            for j in 0..m {
                let want = x[i * m + j];
                prop_assert!((u.get(&[i + 1, j + 1]) - want).abs() < 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn periodic_solutions_are_gauge_fixed(seed in any::<u64>(), offset in -5.0f64..5.0) {
        let n = 16;
        let grid = GridSpec::periodic(n).unwrap();
        let f = sample_grf(&GrfSpec::poisson_forcing(n, seed)).unwrap().map(|v| v + offset);
        let u = fdm::poisson_solve(&f, &grid, DEFAULT_CG_TOL).unwrap();
        prop_assert!(u.mean().abs() <= 1e-15 * (1.0 + u.max_abs()));
    }

    #[test]
    fn solvers_and_sampler_are_deterministic(seed in any::<u64>()) {
        let n = 16;
        let grid = GridSpec::lid_driven(n, 1.0).unwrap();
        let p = NsParams::new(100.0, 0.01, 1).unwrap();
        let w = sample_grf(&GrfSpec::initial_vorticity(n, seed)).unwrap();
        prop_assert_eq!(&w, &sample_grf(&GrfSpec::initial_vorticity(n, seed)).unwrap());
        let a = fdm::ns_step(&w, &grid, &p, DEFAULT_CG_TOL).unwrap();
        let b = fdm::ns_step(&w, &grid, &p, DEFAULT_CG_TOL).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn periodic_cnn_is_translation_equivariant(sx in 0usize..8, sy in 0usize..8, seed in any::<u64>()) {
        let cfg = CnnConfig::new(8, 3, ConvBoundary::PeriodicWrap);
        let params = cfg.init(seed).unwrap();
        let mut g = rng(seed);
        let x = random(&[1, 8, 8], &mut g);
        let shifted = Field::from_fn(&[1, 8, 8], |ix| x.get(&[0, (ix[1] + 8 - sx) % 8, (ix[2] + 8 - sy) % 8]));
        let run = |x: &Field| {
            let mut t = Tape::new();
            let b = bind(&mut t, &params, false);
            let v = t.constant(x.clone());
            let y = cfg.forward(&mut t, &b, v).unwrap();
            t.value(y).clone()
        };
        let (y, ys) = (run(&x), run(&shifted));
        let want = Field::from_fn(ys.shape(), |ix| y.get(&[ix[0], (ix[1] + 8 - sx) % 8, (ix[2] + 8 - sy) % 8]));
        prop_assert!(ys.max_abs_diff(&want).unwrap() < 1e-12 * (1.0 + y.max_abs()));
    }

    #[test]
    fn relative_error_is_scale_invariant_and_zero_on_truth(seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut g = rng(seed);
        let (a, b) = (random(&[6, 6], &mut g), random(&[6, 6], &mut g));
        prop_assert_eq!(relative_error(&b, &b, false).unwrap(), 0.0);
        let e = relative_error(&a, &b, false).unwrap();
        let es = relative_error(&a.scaled(s), &b.scaled(s), false).unwrap();
        prop_assert!((e - es).abs() < 1e-12 * e.max(1.0));
        let shifted = relative_error(&a.map(|v| v + 3.0), &b, true).unwrap();
        prop_assert!((shifted - relative_error(&a, &b, true).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn field_files_round_trip_bit_exactly(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut g = rng(seed);
        let f = random(&shape, &mut g).map(|v| v * 1e300f64.powf(v));
        let bytes = io::encode_field(&f);
        prop_assert_eq!(bytes.len(), 12 + 4 * shape.len() + 8 * f.len());
        let back = io::decode_field(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), f.shape());
        for (x, y) in back.data().iter().zip(f.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn schedule_is_piecewise_geometric(lr0 in 1e-5f64..1.0, factor in 0.1f64..1.0, every in 1usize..50, k in 0usize..6) {
        let cfg = TrainConfig {
            loss: LossKind::Msr,
            lr0,
            decay_factor: factor,
            decay_every: every,
            batch: 1,
            max_iters: 1,
            log_every: 1,
            divergence_threshold: 1e6,
            checkpoint_every: None,
            adam_eps: 1e-8,
        };
        prop_assert_eq!(cfg.lr_at(k * every), lr0 * factor.powi(k as i32));
        prop_assert_eq!(cfg.lr_at(k * every + every - 1), lr0 * factor.powi(k as i32));
    }

    #[test]
    fn adam_moments_track_parameter_shapes(seed in any::<u64>(), steps in 1usize..5) {
        let mut g = rng(seed);
        let mut params = ParamSet::new();
        params.insert("a".into(), random(&[2, 3], &mut g));
        params.insert("b".into(), random(&[4], &mut g));
        let mut state = AdamState::new(&params);
        for _ in 0..steps {
            let grads = vec![random(&[2, 3], &mut g), random(&[4], &mut g)];
            adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        }
        prop_assert_eq!(state.t, steps as u64);
        for (k, p) in params.values().enumerate() {
            prop_assert_eq!(state.m[k].shape(), p.shape());
            prop_assert_eq!(state.v[k].shape(), p.shape());
        }
    }

    #[test]
    fn mean_projection_is_idempotent(seed in any::<u64>()) {
        let mut g = rng(seed);
        let f = random(&[5, 7], &mut g).map(|v| v * 10.0 + 3.0);
        let p = mean_project(&f);
        prop_assert!(p.mean().abs() < 1e-14);
        prop_assert!(mean_project(&p).max_abs_diff(&p).unwrap() < 1e-14);
    }
}
