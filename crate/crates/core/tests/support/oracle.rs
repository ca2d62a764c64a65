//! Independent scalar re-implementation of the coupled cells and the
//! stream-coupling checks, shared by the cell tests and the acceptance run.
#![allow(dead_code)]

use crur_core::autodiff::Graph;
use crur_core::cells::{
    init_params, step_gru, step_lstm, step_rnn, CellKind, Coupling, CrurConfig, FeedbackScheme,
    StateValues,
};
use crur_core::params::Params;
use crur_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const KINDS: [CellKind; 3] = [CellKind::Rnn, CellKind::Lstm, CellKind::Gru];
pub const COUPLINGS: [Coupling; 2] = [Coupling::Open, Coupling::Closed];

pub fn small(kind: CellKind, coupling: Coupling) -> CrurConfig {
    CrurConfig {
        cell_kind: kind,
        coupling,
        s_rows: 3,
        s_cols: 2,
        p_dim: 3,
        embed_dim: 4,
        vocab_size: 7,
        v_dim: 5,
        w_dim: 4,
        pos_classes: 6,
        feedback: FeedbackScheme::Shared,
        dropout_rate: 0.0,
        ..CrurConfig::default()
    }
}

pub fn scalar_cfg(kind: CellKind, coupling: Coupling) -> CrurConfig {
    CrurConfig {
        s_rows: 1,
        s_cols: 1,
        p_dim: 1,
        embed_dim: 1,
        vocab_size: 1,
        v_dim: 1,
        w_dim: 1,
        pos_classes: 1,
        ..small(kind, coupling)
    }
}

pub fn random_state(cfg: &CrurConfig, batch: usize, t: usize, rng: &mut ChaCha8Rng) -> StateValues {
    let lstm = cfg.cell_kind == CellKind::Lstm;
    let unit = |dim: usize, rng: &mut ChaCha8Rng| {
        Tensor::uniform(&[batch, dim], 1.0, rng).map(|x| 0.5 + 0.5 * x)
    };
    StateValues {
        s: unit(cfg.s_dim(), rng),
        p: unit(cfg.p_dim, rng),
        c1: lstm.then(|| Tensor::uniform(&[batch, cfg.s_dim()], 1.0, rng)),
        c2: lstm.then(|| Tensor::uniform(&[batch, cfg.p_dim], 1.0, rng)),
        fb1: None,
        fb2: None,
        t,
    }
}

pub fn run_step(
    cfg: &CrurConfig,
    coupling: Coupling,
    params: &Params,
    st: &StateValues,
    x1: &Tensor,
    x2: &Tensor,
) -> StateValues {
    let mut g = Graph::new();
    let pv = params.bind_with(&mut g, false);
    let state = st.load(&mut g);
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let next = match cfg.cell_kind {
        CellKind::Rnn => step_rnn(&mut g, cfg, &pv, coupling, &state, a, b),
        CellKind::Lstm => step_lstm(&mut g, cfg, &pv, coupling, &state, a, b),
        CellKind::Gru => step_gru(&mut g, cfg, &pv, coupling, &state, a, b),
    }
    .unwrap();
    next.snapshot(&g)
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand-written scalar version of every coupled update, all dims 1.
pub struct ScalarOracle<'a> {
    pub params: &'a Params,
    pub closed: bool,
}

impl ScalarOracle<'_> {
    pub fn w(&self, name: &str) -> f64 {
        if self.params.contains(name) {
            self.params.get(name).unwrap().data()[0]
        } else {
            0.0
        }
    }

    pub fn pre(&self, b: &str, gate: &str, s: f64, p: f64, x: f64, t: usize) -> f64 {
        let ind = if t > 1 { 1.0 } else { 0.0 };
        let wp = self.w(&format!("{b}.{gate}.from_p"));
        let dx = self.w(&format!("{b}.{gate}.from_x"));
        let us = self.w(&format!("{b}.{gate}.from_s"));
        match (b, self.closed) {
            ("s", false) => ind * x * dx + s * us,
            ("p", false) => p * wp + ind * x * dx,
            _ => p * wp + ind * x * dx + s * us,
        }
    }

    pub fn rnn(&self, s: f64, p: f64, x1: f64, x2: f64, t: usize) -> (f64, f64) {
        (
            sig(self.pre("s", "h", s, p, x1, t)),
            sig(self.pre("p", "h", s, p, x2, t)),
        )
    }

    pub fn lstm_branch(&self, b: &str, s: f64, p: f64, c: f64, x: f64, t: usize) -> (f64, f64) {
        let i = sig(self.pre(b, "i", s, p, x, t));
        let f = sig(self.pre(b, "f", s, p, x, t));
        let o = sig(self.pre(b, "o", s, p, x, t));
        let g = sig(self.pre(b, "c", s, p, x, t));
        let c_new = f * c + i * g;
        (o * sig(c_new), c_new)
    }

    pub fn gru_branch(&self, b: &str, s: f64, p: f64, x: f64, t: usize) -> f64 {
        let own = if b == "s" { s } else { p };
        let ind = if t > 1 { 1.0 } else { 0.0 };
        let z = sig(self.pre(b, "z", s, p, x, t));
        let r = sig(self.pre(b, "r", s, p, x, t));
        let mut arg =
            ind * x * self.w(&format!("{b}.cand.x")) + (r * own) * self.w(&format!("{b}.cand.r"));
        if self.closed {
            arg += (z * own) * self.w(&format!("{b}.cand.z"));
        }
        z * own + (1.0 - z) * arg.tanh()
    }
}
/// Largest gap between the graph cells and the scalar oracle over `draws`
/// random draws per variant.
pub fn scalar_oracle_max_gap(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for kind in KINDS {
        for coupling in COUPLINGS {
            let cfg = scalar_cfg(kind, coupling);
            for draw in 0..draws {
                let params = init_params(&cfg, &mut rng)
                    .unwrap()
                    .resampled(2.0, &mut rng);
                let t = 1 + draw % 3;
                let st = random_state(&cfg, 1, t, &mut rng);
                let x1 = Tensor::uniform(&[1, 1], 2.0, &mut rng);
                let x2 = Tensor::uniform(&[1, 1], 2.0, &mut rng);
                let next = run_step(&cfg, coupling, &params, &st, &x1, &x2);
                assert_eq!(next.t, t + 1);

                let oracle = ScalarOracle {
                    params: &params,
                    closed: coupling == Coupling::Closed,
                };
                let (s, p, a, b) = (st.s.data()[0], st.p.data()[0], x1.data()[0], x2.data()[0]);
                let (es, ep) = match kind {
                    CellKind::Rnn => oracle.rnn(s, p, a, b, t),
                    CellKind::Lstm => {
                        let (c1, c2) = (
                            st.c1.as_ref().unwrap().data()[0],
                            st.c2.as_ref().unwrap().data()[0],
                        );
                        let (hs, cs) = oracle.lstm_branch("s", s, p, c1, a, t);
                        let (hp, cp) = oracle.lstm_branch("p", s, p, c2, b, t);
                        worst = worst.max((next.c1.as_ref().unwrap().data()[0] - cs).abs());
                        worst = worst.max((next.c2.as_ref().unwrap().data()[0] - cp).abs());
                        (hs, hp)
                    }
                    CellKind::Gru => (
                        oracle.gru_branch("s", s, p, a, t),
                        oracle.gru_branch("p", s, p, b, t),
                    ),
                };
                worst = worst.max((next.s.data()[0] - es).abs());
                worst = worst.max((next.p.data()[0] - ep).abs());
            }
        }
    }
    worst
}

pub fn perturbed(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Tensor::uniform(t.shape(), 0.3, rng);
    t.zip_map(&noise, "perturb", |a, b| a + b).unwrap()
}

/// Open variants: perturbing one stream (state, memory, input, weights)
/// must leave the other bit-identical. Returns the violations found.
pub fn open_independence_violations(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for kind in KINDS {
        let cfg = small(kind, Coupling::Open);
        let params = init_params(&cfg, &mut rng)
            .unwrap()
            .resampled(0.5, &mut rng);
        let st = random_state(&cfg, 2, 2, &mut rng);
        let x1 = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let x2 = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let base = run_step(&cfg, Coupling::Open, &params, &st, &x1, &x2);

        let mut moved_p = st.clone();
        moved_p.p = perturbed(&st.p, &mut rng);
        moved_p.c2 = st.c2.as_ref().map(|c| perturbed(c, &mut rng));
        let a = run_step(
            &cfg,
            Coupling::Open,
            &params,
            &moved_p,
            &x1,
            &perturbed(&x2, &mut rng),
        );
        if a.s != base.s {
            bad.push(format!("{kind:?}: S moved with p"));
        }
        if a.p == base.p {
            bad.push(format!("{kind:?}: p ignored its own perturbation"));
        }

        let mut moved_s = st.clone();
        moved_s.s = perturbed(&st.s, &mut rng);
        moved_s.c1 = st.c1.as_ref().map(|c| perturbed(c, &mut rng));
        let b = run_step(
            &cfg,
            Coupling::Open,
            &params,
            &moved_s,
            &perturbed(&x1, &mut rng),
            &x2,
        );
        if b.p != base.p {
            bad.push(format!("{kind:?}: p moved with S"));
        }
        if b.s == base.s {
            bad.push(format!("{kind:?}: S ignored its own perturbation"));
        }

        let mut p2 = params.clone();
        let branch2: Vec<String> = p2
            .names()
            .filter(|n| n.starts_with("p."))
            .map(String::from)
            .collect();
        for n in &branch2 {
            let t = perturbed(p2.get(n).unwrap(), &mut rng);
            p2.insert(n.clone(), t);
        }
        if run_step(&cfg, Coupling::Open, &p2, &st, &x1, &x2).s != base.s {
            bad.push(format!("{kind:?}: S moved with branch-2 weights"));
        }
    }
    bad
}

/// Closed variants with nonzero cross weights: perturbing one stream must
/// change the other. Returns the variants where it did not.
pub fn closed_interaction_violations(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for kind in KINDS {
        let cfg = small(kind, Coupling::Closed);
        let params = init_params(&cfg, &mut rng)
            .unwrap()
            .resampled(0.5, &mut rng);
        let st = random_state(&cfg, 1, 2, &mut rng);
        let x = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let base = run_step(&cfg, Coupling::Closed, &params, &st, &x, &x);

        let mut moved = st.clone();
        moved.p = perturbed(&st.p, &mut rng);
        if run_step(&cfg, Coupling::Closed, &params, &moved, &x, &x).s == base.s {
            bad.push(format!("{kind:?}: S ignored p"));
        }
        let mut moved = st.clone();
        moved.s = perturbed(&st.s, &mut rng);
        if run_step(&cfg, Coupling::Closed, &params, &moved, &x, &x).p == base.p {
            bad.push(format!("{kind:?}: p ignored S"));
        }
    }
    bad
}
