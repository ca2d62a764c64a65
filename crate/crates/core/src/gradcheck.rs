//! Finite-difference verification of the autodiff gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, Var};
use crate::bilstm::{bilstm_classify, BiLstmConfig};
use crate::cells::{
    compose_f, compose_output, feedback_transform, init_params, init_state, pos_head, step,
    CellKind, Coupling, CrurConfig, CrurState, DecoderKind, Dropout,
};
use crate::error::{CrurError, Result};
use crate::model::{rollout_step, start_rollout};
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;
use crate::vocab::START;

/// Base step of the extrapolated central difference.
pub const EPS: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Adds `Σ x ⊙ R` for a fixed random `R` so every output entry reaches the
/// loss with a distinct weight.
pub fn random_projection<R: Rng + ?Sized>(g: &mut Graph, x: Var, rng: &mut R) -> Result<Var> {
    let r = Tensor::uniform(g.shape(x), 1.0, rng);
    let r = g.constant(r);
    let prod = g.mul(x, r)?;
    Ok(g.sum(prod))
}

/// Compares backprop against extrapolated central differences on up to `per_param`
/// randomly chosen entries of every parameter tensor. `build` must return
/// a scalar loss and be a pure function of the bound parameters.
///
/// Returns the largest relative error seen for each parameter name.
pub fn check_params<R, F>(
    params: &Params,
    fault: Fault,
    per_param: usize,
    rng: &mut R,
    build: F,
) -> Result<BTreeMap<String, f64>>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let pv = params.bind(&mut g);
    let loss = build(&mut g, &pv)?;
    let grads = pv.gradients(params, &g.backward(loss)?);

    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let pv = p.bind_with(&mut g, false);
        let loss = build(&mut g, &pv)?;
        Ok(g.value(loss).data()[0])
    };

    let mut out = BTreeMap::new();
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let picks = sample(rng, n, per_param.min(n)).into_vec();
        let analytic = grads.get(name)?;
        let mut worst = 0.0f64;
        for i in picks {
            let base = tensor.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = base + h;
                let up = eval(&work)?;
                work.get_mut(name)?.data_mut()[i] = base - h;
                let down = eval(&work)?;
                work.get_mut(name)?.data_mut()[i] = base;
                Ok((up - down) / (2.0 * h))
            };
            // Richardson extrapolation cancels the h² error term, so a
            // large step (little cancellation) still gives an O(h⁴) estimate.
            let coarse = central(EPS)?;
            let fine = central(EPS / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        out.insert(name.to_string(), worst);
    }
    Ok(out)
}

/// Entries sampled per parameter tensor in [`run_suite`].
pub const SUITE_ENTRIES: usize = 8;

/// Components covered by [`run_suite`], in report order.
pub const SUITE_GROUPS: [&str; 10] = [
    "rnn_open",
    "rnn_closed",
    "lstm_open",
    "lstm_closed",
    "gru_open",
    "gru_closed",
    "compose_output",
    "pos_head",
    "attn_decode",
    "bilstm_classify",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: &'static str,
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst_param: String,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub fault: Fault,
    /// Check the all-zero parameter point instead of random values.
    pub zero_params: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            fault: Fault::None,
            zero_params: false,
        }
    }
}

/// Small dimensions that keep the finite-difference suite fast.
pub fn suite_config() -> CrurConfig {
    CrurConfig {
        s_rows: 4,
        s_cols: 3,
        p_dim: 4,
        embed_dim: 5,
        vocab_size: 9,
        v_dim: 6,
        w_dim: 5,
        pos_classes: 6,
        attn_hidden: 5,
        ..CrurConfig::default()
    }
}

/// Two rollout steps over a batch of two, scored by `score`.
fn rollout_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    rng: &mut R,
    score: impl Fn(&mut Graph, &ParamVars, &CrurState, &mut R) -> Result<Var>,
) -> Result<Var> {
    let v = g.constant(Tensor::uniform(&[2, cfg.v_dim], 1.0, rng));
    let w = g.constant(Tensor::uniform(&[2, cfg.w_dim], 1.0, rng));
    let mut st = init_state(g, cfg, pv, v, w)?;
    let mut terms = Vec::new();
    let last = cfg.vocab_size - 1;
    for tokens in [[1, last], [last, 2 % cfg.vocab_size]] {
        let (x1, x2) = feedback_transform(g, cfg, pv, &mut st, &tokens, &mut Dropout::eval())?;
        st = step(g, cfg, pv, &st, x1, x2)?;
        terms.push(score(g, pv, &st, rng)?);
    }
    g.add_all(&terms)
}

fn group_loss(
    g: &mut Graph,
    group: &str,
    cfg: &CrurConfig,
    pv: &ParamVars,
    seed: u64,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match group {
        "compose_output" => rollout_loss(g, cfg, pv, &mut rng, |g, pv, st, rng| {
            let out = compose_output(g, cfg, pv, st, &mut Dropout::eval())?;
            random_projection(g, out.logits, rng)
        }),
        "pos_head" => rollout_loss(g, cfg, pv, &mut rng, |g, pv, st, rng| {
            let (u, _) = compose_f(g, cfg, pv, st, &mut Dropout::eval())?;
            let pos = pos_head(g, pv, u)?;
            random_projection(g, pos, rng)
        }),
        "attn_decode" => {
            let v = g.constant(Tensor::uniform(&[2, cfg.v_dim], 1.0, &mut rng));
            let w = g.constant(Tensor::uniform(&[2, cfg.w_dim], 1.0, &mut rng));
            let mut st = start_rollout(g, cfg, pv, v, w)?;
            let mut terms = Vec::new();
            for prev in [[START, START], [cfg.vocab_size - 1, 2]] {
                let out = rollout_step(g, cfg, pv, &mut st, &prev, &mut Dropout::eval())?;
                terms.push(random_projection(g, out.logits, &mut rng)?);
            }
            g.add_all(&terms)
        }
        "bilstm_classify" => {
            let bcfg = bilstm_config(cfg);
            let seq: Vec<usize> = (0..4)
                .map(|_| rng.random_range(0..bcfg.vocab_size))
                .collect();
            let logits = bilstm_classify(g, &bcfg, pv, &seq)?;
            random_projection(g, logits, &mut rng)
        }
        _ => rollout_loss(g, cfg, pv, &mut rng, |g, _, st, rng| {
            let a = random_projection(g, st.s, rng)?;
            let b = random_projection(g, st.p, rng)?;
            g.add(a, b)
        }),
    }
}

fn bilstm_config(cfg: &CrurConfig) -> BiLstmConfig {
    BiLstmConfig {
        vocab_size: cfg.vocab_size,
        embed_dim: cfg.embed_dim,
        hidden: cfg.p_dim,
        classes: cfg.pos_classes,
    }
}

/// Configuration used for `group`, derived from `base`.
fn group_config(group: &str, base: &CrurConfig) -> CrurConfig {
    let mut cfg = base.clone();
    let variant = |kind, coupling| CrurConfig {
        cell_kind: kind,
        coupling,
        ..base.clone()
    };
    match group {
        "rnn_open" => cfg = variant(CellKind::Rnn, Coupling::Open),
        "rnn_closed" => cfg = variant(CellKind::Rnn, Coupling::Closed),
        "lstm_open" => cfg = variant(CellKind::Lstm, Coupling::Open),
        "lstm_closed" => cfg = variant(CellKind::Lstm, Coupling::Closed),
        "gru_open" => cfg = variant(CellKind::Gru, Coupling::Open),
        "gru_closed" => cfg = variant(CellKind::Gru, Coupling::Closed),
        "attn_decode" => cfg.decoder = DecoderKind::Attn,
        _ => {}
    }
    cfg
}

/// Finite-difference check of every cell variant and head, `trials`
/// random parameter draws each.
pub fn run_suite(base: &CrurConfig, opts: &SuiteOptions) -> Result<Vec<GroupReport>> {
    base.validate()?;
    if opts.trials == 0 {
        return Err(CrurError::Parameter("trials must be positive".into()));
    }
    let mut out = Vec::with_capacity(SUITE_GROUPS.len());
    for (gi, group) in SUITE_GROUPS.into_iter().enumerate() {
        let cfg = group_config(group, base);
        let mut worst = GroupReport {
            group,
            max_rel_error: 0.0,
            worst_param: String::new(),
        };
        for trial in 0..opts.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((gi as u64) << 32) ^ trial as u64);
            let params = if group == "bilstm_classify" {
                bilstm_config(&cfg).init_params(&mut rng)?
            } else {
                init_params(&cfg, &mut rng)?
            };
            let params = if opts.zero_params {
                params.map_values(|t| Tensor::zeros(t.shape()))
            } else {
                params.resampled(0.5, &mut rng)
            };
            let loss_seed = rng.random();
            let errs = check_params(&params, opts.fault, SUITE_ENTRIES, &mut rng, |g, pv| {
                group_loss(g, group, &cfg, pv, loss_seed)
            })?;
            for (name, e) in errs {
                if e > worst.max_rel_error || worst.worst_param.is_empty() {
                    worst.max_rel_error = e;
                    worst.worst_param = name;
                }
            }
        }
        out.push(worst);
    }
    Ok(out)
}
