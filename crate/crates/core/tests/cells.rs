use crur_core::autodiff::{Fault, Graph, Var};
use crur_core::cells::{
    compose_output, cross_param_names, feedback_transform, init_params, init_state, param_shapes,
    pos_head, step, step_lstm, u_orthogonality, CellKind, Coupling, CrurConfig, CrurState, Dropout,
    FeedbackScheme,
};
use crur_core::gradcheck::{check_params, random_projection, TOLERANCE};
use crur_core::params::{ParamVars, Params};
use crur_core::{CrurError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/oracle.rs"]
mod oracle;

use oracle::*;

#[test]
fn scalar_oracle_matches_all_variants() {
    let gap = scalar_oracle_max_gap(100, 11);
    assert!(gap < 1e-12, "{gap}");
}

#[test]
fn open_streams_are_independent() {
    let bad = open_independence_violations(12);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn closed_streams_interact() {
    let bad = closed_interaction_violations(13);
    assert!(bad.is_empty(), "{bad:?}");
}
#[test]
fn closed_equals_open_iff_cross_weights_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for kind in [CellKind::Rnn, CellKind::Lstm] {
        let cfg = small(kind, Coupling::Closed);
        let mut params = init_params(&cfg, &mut rng)
            .unwrap()
            .resampled(0.5, &mut rng);
        let st = random_state(&cfg, 1, 3, &mut rng);
        let x = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let open = run_step(&cfg, Coupling::Open, &params, &st, &x, &x);
        let closed = run_step(&cfg, Coupling::Closed, &params, &st, &x, &x);
        assert_ne!(open.s, closed.s);
        assert_ne!(open.p, closed.p);

        for branch in [
            crur_core::cells::Branch::Context,
            crur_core::cells::Branch::Structure,
        ] {
            for name in cross_param_names(&cfg, branch) {
                let shape = params.get(&name).unwrap().shape().to_vec();
                params.insert(name, Tensor::zeros(&shape));
            }
        }
        let open = run_step(&cfg, Coupling::Open, &params, &st, &x, &x);
        let closed = run_step(&cfg, Coupling::Closed, &params, &st, &x, &x);
        assert_eq!(open, closed);
    }
}

#[test]
fn first_step_ignores_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for kind in KINDS {
        for coupling in COUPLINGS {
            let cfg = small(kind, coupling);
            let params = init_params(&cfg, &mut rng)
                .unwrap()
                .resampled(0.5, &mut rng);
            let st = random_state(&cfg, 2, 1, &mut rng);
            let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
            let a = run_step(&cfg, coupling, &params, &st, &x, &x);
            let b = run_step(
                &cfg,
                coupling,
                &params,
                &st,
                &perturbed(&x, &mut rng),
                &perturbed(&x, &mut rng),
            );
            assert_eq!(a, b, "{kind:?} {coupling:?}");

            let mut later = st.clone();
            later.t = 2;
            let c = run_step(&cfg, coupling, &params, &later, &x, &x);
            let d = run_step(
                &cfg,
                coupling,
                &params,
                &later,
                &perturbed(&x, &mut rng),
                &x,
            );
            assert_ne!(c.s, d.s);
        }
    }
}

fn zero_params(cfg: &CrurConfig) -> Params {
    let mut p = Params::new();
    for (n, s) in param_shapes(cfg) {
        p.insert(n, Tensor::zeros(&s));
    }
    p
}

#[test]
fn zero_parameter_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for kind in KINDS {
        let cfg = small(kind, Coupling::Closed);
        let params = zero_params(&cfg);
        let mut g = Graph::new();
        let pv = params.bind_with(&mut g, false);
        let v = g.constant(Tensor::zeros(&[1, 5]));
        let w = g.constant(Tensor::zeros(&[1, 4]));
        let st = init_state(&mut g, &cfg, &pv, v, w).unwrap();
        assert!(g.value(st.s).data().iter().all(|&x| x == 0.5));
        assert!(g.value(st.p).data().iter().all(|&x| x == 0.5));
        assert_eq!(st.t, 1);

        let x = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let prev = st.snapshot(&g);
        let next = run_step(&cfg, Coupling::Closed, &params, &prev, &x, &x);
        let expect = match kind {
            CellKind::Rnn => 0.5,
            CellKind::Lstm => 0.5 * sig(0.25),
            CellKind::Gru => 0.25,
        };
        for v in next.s.data().iter().chain(next.p.data()) {
            assert!((v - expect).abs() < 1e-15, "{kind:?}: {v} vs {expect}");
        }
    }
}

#[test]
fn saturated_update_gate_carries_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for coupling in COUPLINGS {
        let cfg = small(CellKind::Gru, coupling);
        let mut params = init_params(&cfg, &mut rng)
            .unwrap()
            .resampled(0.5, &mut rng);
        params.insert("s.z.from_s", Tensor::full(&[6, 6], 1e4));
        params.insert("p.z.from_p", Tensor::full(&[3, 3], 1e4));
        let st = random_state(&cfg, 1, 4, &mut rng);
        let x = Tensor::uniform(&[1, 4], 0.1, &mut rng);
        let next = run_step(&cfg, coupling, &params, &st, &x, &x);
        assert_eq!(next.s, st.s);
        assert_eq!(next.p, st.p);
    }
}

#[test]
fn init_state_is_deterministic_and_checks_dims() {
    let cfg = small(CellKind::Lstm, Coupling::Closed);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let params = init_params(&cfg, &mut rng).unwrap();
        let v = Tensor::uniform(&[1, 5], 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let (v, w) = (g.constant(v), g.constant(w));
        init_state(&mut g, &cfg, &pv, v, w).unwrap().snapshot(&g)
    };
    assert_eq!(run(), run());

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let params = init_params(&cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let v = g.constant(Tensor::zeros(&[1, 6]));
    let w = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        init_state(&mut g, &cfg, &pv, v, w),
        Err(CrurError::Dimension { .. })
    ));
}

#[test]
fn rollout_shapes_and_ranges_are_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for kind in KINDS {
        for coupling in COUPLINGS {
            for feedback in [
                FeedbackScheme::Shared,
                FeedbackScheme::Mlp,
                FeedbackScheme::Memory,
            ] {
                let cfg = CrurConfig {
                    feedback,
                    ..small(kind, coupling)
                };
                let params = init_params(&cfg, &mut rng)
                    .unwrap()
                    .resampled(1.0, &mut rng);
                let mut g = Graph::new();
                let pv = params.bind_with(&mut g, false);
                let v = g.constant(Tensor::uniform(&[2, 5], 1.0, &mut rng));
                let w = g.constant(Tensor::uniform(&[2, 4], 1.0, &mut rng));
                let mut st = init_state(&mut g, &cfg, &pv, v, w).unwrap();
                let shapes = |g: &Graph, st: &CrurState| {
                    [Some(st.s), Some(st.p), st.c1, st.c2]
                        .iter()
                        .map(|v| v.map(|v| g.shape(v).to_vec()))
                        .collect::<Vec<_>>()
                };
                let first = shapes(&g, &st);
                for step_i in 0..50 {
                    let tokens = [rng.random_range(0..7), rng.random_range(0..7)];
                    let (x1, x2) = feedback_transform(
                        &mut g,
                        &cfg,
                        &pv,
                        &mut st,
                        &tokens,
                        &mut Dropout::eval(),
                    )
                    .unwrap();
                    st = step(&mut g, &cfg, &pv, &st, x1, x2).unwrap();
                    assert_eq!(st.t, step_i + 2);
                    assert_eq!(shapes(&g, &st), first);
                    let out = compose_output(&mut g, &cfg, &pv, &st, &mut Dropout::eval()).unwrap();
                    assert!(g.value(out.u).data().iter().all(|&u| u > 0.0 && u < 1.0));
                    if kind != CellKind::Gru {
                        assert!(g.value(st.s).data().iter().all(|&s| s > 0.0 && s < 1.0));
                    }
                    assert!(g.value(out.logits).all_finite());
                }
            }
        }
    }
}

#[test]
fn compose_matricizes_row_major() {
    let cfg = CrurConfig {
        s_rows: 2,
        s_cols: 2,
        p_dim: 1,
        ..small(CellKind::Lstm, Coupling::Closed)
    };
    let mut params = zero_params(&cfg);
    params.insert(
        "head.u",
        Tensor::matrix(2, 1, vec![0.0, (1.0f64 / 3.0).ln()]).unwrap(),
    );
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let st = CrurState {
        s: g.constant(Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
        p: g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap()),
        c1: None,
        c2: None,
        fb1: None,
        fb2: None,
        t: 2,
    };
    let out = compose_output(&mut g, &cfg, &pv, &st, &mut Dropout::eval()).unwrap();
    let f = g.value(out.f).data();
    assert!(
        (f[0] - 0.5).abs() < 1e-12 && (f[1] - 0.25).abs() < 1e-12,
        "{f:?}"
    );
}

#[test]
fn zero_context_gives_uniform_words_and_zero_pos_weights_uniform_tags() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = small(CellKind::Lstm, Coupling::Closed);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    params.insert("head.pos", Tensor::zeros(&[6, 2]));
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let st = CrurState {
        s: g.constant(Tensor::zeros(&[1, 6])),
        p: g.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng)),
        c1: None,
        c2: None,
        fb1: None,
        fb2: None,
        t: 2,
    };
    let out = compose_output(&mut g, &cfg, &pv, &st, &mut Dropout::eval()).unwrap();
    assert!(g.value(out.f).data().iter().all(|&x| x == 0.0));
    let lp = g.log_softmax(out.logits).unwrap();
    let expect = -(7.0f64).ln();
    assert!(g
        .value(lp)
        .data()
        .iter()
        .all(|&x| (x - expect).abs() < 1e-12));

    let pos = pos_head(&mut g, &pv, out.u).unwrap();
    let lp = g.log_softmax(pos).unwrap();
    let expect = -(6.0f64).ln();
    assert!(g
        .value(lp)
        .data()
        .iter()
        .all(|&x| (x - expect).abs() < 1e-12));
}

#[test]
fn feedback_schemes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let shared = small(CellKind::Lstm, Coupling::Closed);
    let params = init_params(&shared, &mut rng).unwrap();
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let v = g.constant(Tensor::zeros(&[1, 5]));
    let w = g.constant(Tensor::zeros(&[1, 4]));
    let mut st = init_state(&mut g, &shared, &pv, v, w).unwrap();
    let (a, b) =
        feedback_transform(&mut g, &shared, &pv, &mut st, &[3], &mut Dropout::eval()).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let shared_x = g.value(a).clone();

    let mlp = CrurConfig {
        feedback: FeedbackScheme::Mlp,
        ..shared.clone()
    };
    let mut mp = params.clone();
    mp.insert("fb.w1", Tensor::identity(4));
    mp.insert("fb.w2", Tensor::identity(4));
    let mut g = Graph::new();
    let pv = mp.bind_with(&mut g, false);
    let (a, b) =
        feedback_transform(&mut g, &mlp, &pv, &mut st, &[3], &mut Dropout::eval()).unwrap();
    assert_eq!(g.value(a), &shared_x);
    assert_eq!(g.value(b), &shared_x);

    let mem = CrurConfig {
        feedback: FeedbackScheme::Memory,
        ..shared
    };
    let params = init_params(&mem, &mut rng)
        .unwrap()
        .resampled(0.5, &mut rng);
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let v = g.constant(Tensor::zeros(&[1, 5]));
    let w = g.constant(Tensor::zeros(&[1, 4]));
    let mut st = init_state(&mut g, &mem, &pv, v, w).unwrap();
    let mut xs = Vec::new();
    for tok in [2, 5, 2] {
        let (x1, _) =
            feedback_transform(&mut g, &mem, &pv, &mut st, &[tok], &mut Dropout::eval()).unwrap();
        xs.push(g.value(x1).clone());
    }
    assert_ne!(xs[0], xs[2]);
}

#[test]
fn missing_memory_state_and_parameters_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = small(CellKind::Lstm, Coupling::Open);
    let params = init_params(&cfg, &mut rng).unwrap();
    let st = random_state(&cfg, 1, 2, &mut rng);
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let s = st.load(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let err = step_lstm(&mut g, &cfg, &pv, Coupling::Closed, &s, x, x).unwrap_err();
    assert!(matches!(err, CrurError::MissingParam(_)));
    let bad = g.constant(Tensor::zeros(&[1, 3]));
    let err = step_lstm(&mut g, &cfg, &pv, Coupling::Open, &s, bad, x).unwrap_err();
    assert!(matches!(err, CrurError::Dimension { .. }));
}

#[test]
fn parameter_layout_matches_config() {
    for kind in KINDS {
        for coupling in COUPLINGS {
            let cfg = small(kind, coupling);
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let p = init_params(&cfg, &mut rng).unwrap();
            p.check_shapes(&param_shapes(&cfg)).unwrap();
            assert!(p
                .iter()
                .all(|(_, t)| t.data().iter().all(|x| x.abs() <= 0.08)));
            let cross = cross_param_names(&cfg, crur_core::cells::Branch::Context);
            assert_eq!(cross.is_empty(), coupling == Coupling::Open);
        }
    }
    let bad = CrurConfig {
        s_cols: 0,
        ..small(CellKind::Rnn, Coupling::Open)
    };
    match bad.validate() {
        Err(CrurError::Config { keys, .. }) => assert_eq!(keys, vec!["s_cols".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn orthogonality_diagnostic() {
    assert_eq!(u_orthogonality(&[vec![1.0, 0.0], vec![0.0, 2.0]]), 0.0);
    assert!((u_orthogonality(&[vec![1.0, 1.0], vec![2.0, 2.0]]) - 1.0).abs() < 1e-12);
    assert_eq!(u_orthogonality(&[vec![1.0]]), 0.0);
}

/// Two coupled steps from `init_state` followed by the word and POS heads.
fn two_step_loss(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    seed: u64,
) -> crur_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = g.constant(Tensor::uniform(&[2, cfg.v_dim], 1.0, &mut rng));
    let w = g.constant(Tensor::uniform(&[2, cfg.w_dim], 1.0, &mut rng));
    let mut st = init_state(g, cfg, pv, v, w)?;
    let mut terms = Vec::new();
    for tokens in [[1, 4], [5, 2]] {
        let (x1, x2) = feedback_transform(g, cfg, pv, &mut st, &tokens, &mut Dropout::eval())?;
        st = step(g, cfg, pv, &st, x1, x2)?;
        let out = compose_output(g, cfg, pv, &st, &mut Dropout::eval())?;
        let lp = g.log_softmax(out.logits)?;
        terms.push(random_projection(g, lp, &mut rng)?);
        let pos = pos_head(g, pv, out.u)?;
        terms.push(random_projection(g, pos, &mut rng)?);
        terms.push(random_projection(g, st.s, &mut rng)?);
        terms.push(random_projection(g, st.p, &mut rng)?);
    }
    g.add_all(&terms)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for kind in KINDS {
        for coupling in COUPLINGS {
            for feedback in [FeedbackScheme::Shared, FeedbackScheme::Memory] {
                let cfg = CrurConfig {
                    feedback,
                    ..small(kind, coupling)
                };
                let params = init_params(&cfg, &mut rng)
                    .unwrap()
                    .resampled(0.5, &mut rng);
                let errs = check_params(&params, Fault::None, 12, &mut rng, |g, pv| {
                    two_step_loss(g, &cfg, pv, 99)
                })
                .unwrap();
                for (name, e) in errs {
                    assert!(
                        e < TOLERANCE,
                        "{kind:?} {coupling:?} {feedback:?} {name}: {e}"
                    );
                }
            }
        }
    }
}

#[test]
fn corrupted_sigmoid_gradient_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let cfg = small(CellKind::Lstm, Coupling::Closed);
    let params = init_params(&cfg, &mut rng)
        .unwrap()
        .resampled(0.5, &mut rng);
    let errs = check_params(&params, Fault::SigmoidGrad, 12, &mut rng, |g, pv| {
        two_step_loss(g, &cfg, pv, 7)
    })
    .unwrap();
    let worst = errs.values().cloned().fold(0.0, f64::max);
    assert!(worst > TOLERANCE, "{worst}");
}

#[test]
fn dropout_context_only_active_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let cfg = CrurConfig {
        dropout_rate: 0.5,
        ..small(CellKind::Lstm, Coupling::Closed)
    };
    let params = init_params(&cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let v = g.constant(Tensor::uniform(&[1, 5], 1.0, &mut rng));
    let w = g.constant(Tensor::uniform(&[1, 4], 1.0, &mut rng));
    let st = init_state(&mut g, &cfg, &pv, v, w).unwrap();
    let a = compose_output(&mut g, &cfg, &pv, &st, &mut Dropout::eval()).unwrap();
    let b = compose_output(&mut g, &cfg, &pv, &st, &mut Dropout::eval()).unwrap();
    assert_eq!(g.value(a.f), g.value(b.f));
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    let mut drop = Dropout::train(cfg.dropout_rate, &mut drng);
    let c = compose_output(&mut g, &cfg, &pv, &st, &mut drop).unwrap();
    assert!(g.value(c.f).data().contains(&0.0));
}
