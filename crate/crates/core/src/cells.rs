//! Coupled recurrent cells and the tensor-product output head.
//!
//! Two streams run side by side. The context stream carries `S_t`
//! (`s_rows · s_cols` wide, matricized to `s_rows × s_cols` by the head)
//! and is seeded from the context feature `v`. The structure stream
//! carries `p_t` and is seeded from the tag feature `w`.
//!
//! Every gate pre-activation is a sum of row-vector products
//! `p_{t-1}·W + 𝟙(t>1)·x_{t-1}·D + S_{t-1}·U`. In the open coupling the
//! context stream drops its `p·W` term and the structure stream drops its
//! `S·U` term, so the streams never read each other. Both streams only
//! read `t-1` state, so within a step their order does not matter.
//!
//! The gate equations carry no biases. The LSTM candidate is squashed by a
//! sigmoid and the hidden state is `o ⊙ σ(c)`. The closed GRU candidate
//! contains an extra `(z ⊙ state)·W` term.
//!
//! Tensors are batched: states are `[batch, dim]` and `x` inputs are
//! `[batch, embed_dim]`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout, Graph, Var};
use crate::error::{CrurError, Result};
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;

/// Scale of the uniform parameter initialization.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackScheme {
    /// Both streams receive the word embedding.
    Shared,
    /// Each stream gets its own linear map of the embedding.
    Mlp,
    /// Each stream gets its own single-layer recurrent transform.
    Memory,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Word logits straight from `W_x · f_t`.
    #[default]
    Head,
    /// A recurrent decoder consuming `[emb(x_{t-1}); f_t]`.
    Attn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnInit {
    /// Decoder hidden state starts at zero.
    Constant,
    /// Decoder hidden state starts at `W_h · f_1`.
    #[default]
    FromF,
}

fn default_attn_hidden() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrurConfig {
    pub cell_kind: CellKind,
    pub coupling: Coupling,
    pub s_rows: usize,
    pub s_cols: usize,
    pub p_dim: usize,
    pub embed_dim: usize,
    /// Filled from the corpus vocabulary when zero.
    #[serde(default)]
    pub vocab_size: usize,
    pub v_dim: usize,
    pub w_dim: usize,
    pub pos_classes: usize,
    pub feedback: FeedbackScheme,
    pub dropout_rate: f64,
    #[serde(default)]
    pub decoder: DecoderKind,
    #[serde(default)]
    pub attn_init: AttnInit,
    #[serde(default = "default_attn_hidden")]
    pub attn_hidden: usize,
}

impl Default for CrurConfig {
    fn default() -> Self {
        Self {
            cell_kind: CellKind::Lstm,
            coupling: Coupling::Closed,
            s_rows: 100,
            s_cols: 16,
            p_dim: 64,
            embed_dim: 64,
            vocab_size: 0,
            v_dim: 64,
            w_dim: 32,
            pos_classes: 6,
            feedback: FeedbackScheme::Shared,
            dropout_rate: 0.5,
            decoder: DecoderKind::Head,
            attn_init: AttnInit::FromF,
            attn_hidden: default_attn_hidden(),
        }
    }
}

impl CrurConfig {
    pub const KEYS: &'static [&'static str] = &[
        "cell_kind",
        "coupling",
        "s_rows",
        "s_cols",
        "p_dim",
        "embed_dim",
        "vocab_size",
        "v_dim",
        "w_dim",
        "pos_classes",
        "feedback",
        "dropout_rate",
        "decoder",
        "attn_init",
        "attn_hidden",
    ];

    /// Width of the flattened context state.
    pub fn s_dim(&self) -> usize {
        self.s_rows * self.s_cols
    }

    /// Width of `u_t`, which must equal the matricized state's column count.
    pub fn u_dim(&self) -> usize {
        self.s_cols
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("s_rows", self.s_rows),
            ("s_cols", self.s_cols),
            ("p_dim", self.p_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("v_dim", self.v_dim),
            ("w_dim", self.w_dim),
            ("pos_classes", self.pos_classes),
            ("attn_hidden", self.attn_hidden),
        ];
        let bad: Vec<String> = dims
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| k.to_string())
            .collect();
        if !bad.is_empty() {
            return Err(CrurError::Config {
                msg: format!("dimensions must be positive: {bad:?}"),
                keys: bad,
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CrurError::Config {
                msg: format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate),
                keys: vec!["dropout_rate".into()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Produces `S_t`.
    Context,
    /// Produces `p_t`.
    Structure,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Context => "s",
            Branch::Structure => "p",
        }
    }

    pub fn dim(self, cfg: &CrurConfig) -> usize {
        match self {
            Branch::Context => cfg.s_dim(),
            Branch::Structure => cfg.p_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    /// `p_{t-1} · W`
    P,
    /// `x_{t-1} · D`, gated by `𝟙(t>1)`
    X,
    /// `S_{t-1} · U`
    S,
}

impl Source {
    fn suffix(self) -> &'static str {
        match self {
            Source::P => "from_p",
            Source::X => "from_x",
            Source::S => "from_s",
        }
    }

    fn dim(self, cfg: &CrurConfig) -> usize {
        match self {
            Source::P => cfg.p_dim,
            Source::X => cfg.embed_dim,
            Source::S => cfg.s_dim(),
        }
    }
}

fn sources(branch: Branch, coupling: Coupling) -> &'static [Source] {
    match (branch, coupling) {
        (Branch::Context, Coupling::Open) => &[Source::X, Source::S],
        (Branch::Context, Coupling::Closed) => &[Source::P, Source::X, Source::S],
        (Branch::Structure, Coupling::Open) => &[Source::P, Source::X],
        (Branch::Structure, Coupling::Closed) => &[Source::P, Source::X, Source::S],
    }
}

fn gates(kind: CellKind) -> &'static [&'static str] {
    match kind {
        CellKind::Rnn => &["h"],
        CellKind::Lstm => &["i", "f", "o", "c"],
        CellKind::Gru => &["z", "r"],
    }
}

fn gate_param(branch: Branch, gate: &str, src: Source) -> String {
    format!("{}.{gate}.{}", branch.prefix(), src.suffix())
}

/// Parameter names of a branch's cross-stream terms (`p·W` for the context
/// stream, `S·U` for the structure stream).
pub fn cross_param_names(cfg: &CrurConfig, branch: Branch) -> Vec<String> {
    let src = match branch {
        Branch::Context => Source::P,
        Branch::Structure => Source::S,
    };
    if cfg.coupling == Coupling::Open {
        return Vec::new();
    }
    gates(cfg.cell_kind)
        .iter()
        .map(|g| gate_param(branch, g, src))
        .collect()
}

/// Names and shapes of every parameter a configuration needs, in a fixed
/// order (initialization consumes the RNG in this order).
pub fn param_shapes(cfg: &CrurConfig) -> Vec<(String, Vec<usize>)> {
    let (v, e, ds, dp) = (cfg.vocab_size, cfg.embed_dim, cfg.s_dim(), cfg.p_dim);
    let mut out = vec![
        ("emb".to_string(), vec![v, e]),
        ("init.s".to_string(), vec![cfg.v_dim, ds]),
        ("init.p".to_string(), vec![cfg.w_dim, dp]),
    ];
    for branch in [Branch::Context, Branch::Structure] {
        let dim = branch.dim(cfg);
        for gate in gates(cfg.cell_kind) {
            for &src in sources(branch, cfg.coupling) {
                out.push((gate_param(branch, gate, src), vec![src.dim(cfg), dim]));
            }
        }
        if cfg.cell_kind == CellKind::Gru {
            let p = branch.prefix();
            out.push((format!("{p}.cand.x"), vec![e, dim]));
            out.push((format!("{p}.cand.r"), vec![dim, dim]));
            if cfg.coupling == Coupling::Closed {
                out.push((format!("{p}.cand.z"), vec![dim, dim]));
            }
        }
    }
    out.push(("head.u".to_string(), vec![cfg.u_dim(), dp]));
    out.push(("head.x".to_string(), vec![v, cfg.s_rows]));
    out.push(("head.pos".to_string(), vec![cfg.pos_classes, cfg.u_dim()]));
    if cfg.decoder == DecoderKind::Attn {
        let (hd, m) = (cfg.attn_hidden, cfg.s_rows);
        for gate in ["i", "f", "o", "c"] {
            out.push((format!("dec.{gate}.x"), vec![e, hd]));
            out.push((format!("dec.{gate}.f"), vec![m, hd]));
            out.push((format!("dec.{gate}.h"), vec![hd, hd]));
        }
        out.push(("dec.init".to_string(), vec![hd, m]));
        out.push(("dec.out".to_string(), vec![v, hd]));
    }
    match cfg.feedback {
        FeedbackScheme::Shared => {}
        FeedbackScheme::Mlp => {
            out.push(("fb.w1".to_string(), vec![e, e]));
            out.push(("fb.w2".to_string(), vec![e, e]));
        }
        FeedbackScheme::Memory => {
            for n in ["fb.in1", "fb.rec1", "fb.in2", "fb.rec2"] {
                out.push((n.to_string(), vec![e, e]));
            }
        }
    }
    out
}

/// Uniform(-0.08, 0.08) initialization of every parameter.
pub fn init_params<R: Rng + ?Sized>(cfg: &CrurConfig, rng: &mut R) -> Result<Params> {
    cfg.validate()?;
    let mut params = Params::new();
    for (name, shape) in param_shapes(cfg) {
        params.insert(name, Tensor::uniform(&shape, INIT_SCALE, rng));
    }
    Ok(params)
}

/// Coupled hidden pair plus per-branch memories, as graph handles.
#[derive(Clone, Copy, Debug)]
pub struct CrurState {
    pub s: Var,
    pub p: Var,
    /// LSTM cell memories.
    pub c1: Option<Var>,
    pub c2: Option<Var>,
    /// Hidden states of the memory feedback transforms.
    pub fb1: Option<Var>,
    pub fb2: Option<Var>,
    pub t: usize,
}

/// A [`CrurState`] detached from its graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub s: Tensor,
    pub p: Tensor,
    pub c1: Option<Tensor>,
    pub c2: Option<Tensor>,
    pub fb1: Option<Tensor>,
    pub fb2: Option<Tensor>,
    pub t: usize,
}

impl CrurState {
    pub fn snapshot(&self, g: &Graph) -> StateValues {
        let val = |v: Option<Var>| v.map(|v| g.value(v).clone());
        StateValues {
            s: g.value(self.s).clone(),
            p: g.value(self.p).clone(),
            c1: val(self.c1),
            c2: val(self.c2),
            fb1: val(self.fb1),
            fb2: val(self.fb2),
            t: self.t,
        }
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.s)[0]
    }
}

impl StateValues {
    /// Places the state on `g` as constants.
    pub fn load(&self, g: &mut Graph) -> CrurState {
        let mut put = |t: &Option<Tensor>| t.as_ref().map(|t| g.constant(t.clone()));
        let (c1, c2, fb1, fb2) = (put(&self.c1), put(&self.c2), put(&self.fb1), put(&self.fb2));
        CrurState {
            s: g.constant(self.s.clone()),
            p: g.constant(self.p.clone()),
            c1,
            c2,
            fb1,
            fb2,
            t: self.t,
        }
    }

    /// Places the state on `g` as trainable leaves.
    pub fn load_leaves(&self, g: &mut Graph) -> CrurState {
        let mut put = |t: &Option<Tensor>| t.as_ref().map(|t| g.leaf(t.clone()));
        let (c1, c2, fb1, fb2) = (put(&self.c1), put(&self.c2), put(&self.fb1), put(&self.fb2));
        CrurState {
            s: g.leaf(self.s.clone()),
            p: g.leaf(self.p.clone()),
            c1,
            c2,
            fb1,
            fb2,
            t: self.t,
        }
    }
}

/// Dropout policy for one forward pass.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    /// Inference: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => dropout(g, x, self.rate, true, rng),
            None => Ok(x),
        }
    }
}

fn expect_cols(g: &Graph, x: Var, cols: usize, op: &'static str) -> Result<usize> {
    match g.shape(x) {
        &[rows, c] if c == cols => Ok(rows),
        other => Err(CrurError::dim(op, other, &[0, cols])),
    }
}

/// `S_1 = σ(v·C_{1,S})`, `p_1 = σ(w·C_{1,p})`; memories start at zero and
/// `t = 1`. `v: [batch, v_dim]`, `w: [batch, w_dim]`.
pub fn init_state(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    v: Var,
    w: Var,
) -> Result<CrurState> {
    let batch = expect_cols(g, v, cfg.v_dim, "init_state(v)")?;
    let wb = expect_cols(g, w, cfg.w_dim, "init_state(w)")?;
    if batch != wb {
        return Err(CrurError::dim("init_state", g.shape(v), g.shape(w)));
    }
    let s = g.matmul(v, pv.get("init.s")?)?;
    let s = g.sigmoid(s);
    let p = g.matmul(w, pv.get("init.p")?)?;
    let p = g.sigmoid(p);
    let (c1, c2) = if cfg.cell_kind == CellKind::Lstm {
        (
            Some(g.constant(Tensor::zeros(&[batch, cfg.s_dim()]))),
            Some(g.constant(Tensor::zeros(&[batch, cfg.p_dim]))),
        )
    } else {
        (None, None)
    };
    let (fb1, fb2) = if cfg.feedback == FeedbackScheme::Memory {
        (
            Some(g.constant(Tensor::zeros(&[batch, cfg.embed_dim]))),
            Some(g.constant(Tensor::zeros(&[batch, cfg.embed_dim]))),
        )
    } else {
        (None, None)
    };
    Ok(CrurState {
        s,
        p,
        c1,
        c2,
        fb1,
        fb2,
        t: 1,
    })
}

struct StepCtx<'a> {
    pv: &'a ParamVars,
    coupling: Coupling,
    state: &'a CrurState,
}

impl StepCtx<'_> {
    fn preact(&self, g: &mut Graph, branch: Branch, gate: &str, x: Var) -> Result<Var> {
        let mut terms = Vec::with_capacity(3);
        for &src in sources(branch, self.coupling) {
            let input = match src {
                Source::P => self.state.p,
                Source::S => self.state.s,
                Source::X if self.state.t > 1 => x,
                Source::X => continue,
            };
            let w = self.pv.get(&gate_param(branch, gate, src))?;
            terms.push(g.matmul(input, w)?);
        }
        g.add_all(&terms)
    }

    fn own(&self, branch: Branch) -> Var {
        match branch {
            Branch::Context => self.state.s,
            Branch::Structure => self.state.p,
        }
    }

    fn rnn(&self, g: &mut Graph, branch: Branch, x: Var) -> Result<Var> {
        let pre = self.preact(g, branch, "h", x)?;
        Ok(g.sigmoid(pre))
    }

    /// Returns `(hidden, cell)`.
    fn lstm(&self, g: &mut Graph, branch: Branch, x: Var, cell: Var) -> Result<(Var, Var)> {
        let act = |g: &mut Graph, gate: &str| -> Result<Var> {
            let pre = self.preact(g, branch, gate, x)?;
            Ok(g.sigmoid(pre))
        };
        let i = act(g, "i")?;
        let f = act(g, "f")?;
        let o = act(g, "o")?;
        let cand = act(g, "c")?;
        let keep = g.mul(f, cell)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let sc = g.sigmoid(c);
        let h = g.mul(o, sc)?;
        Ok((h, c))
    }

    fn gru(&self, g: &mut Graph, branch: Branch, x: Var) -> Result<Var> {
        let own = self.own(branch);
        let zp = self.preact(g, branch, "z", x)?;
        let z = g.sigmoid(zp);
        let rp = self.preact(g, branch, "r", x)?;
        let r = g.sigmoid(rp);

        let prefix = branch.prefix();
        let mut terms = Vec::with_capacity(3);
        if self.coupling == Coupling::Closed {
            let zs = g.mul(z, own)?;
            terms.push(g.matmul(zs, self.pv.get(&format!("{prefix}.cand.z"))?)?);
        }
        if self.state.t > 1 {
            terms.push(g.matmul(x, self.pv.get(&format!("{prefix}.cand.x"))?)?);
        }
        let rs = g.mul(r, own)?;
        terms.push(g.matmul(rs, self.pv.get(&format!("{prefix}.cand.r"))?)?);
        let pre = g.add_all(&terms)?;
        let cand = g.tanh(pre);

        let carry = g.mul(z, own)?;
        let zc = g.one_minus(z);
        let update = g.mul(zc, cand)?;
        g.add(carry, update)
    }
}

fn check_inputs(g: &Graph, cfg: &CrurConfig, state: &CrurState, x1: Var, x2: Var) -> Result<()> {
    let batch = expect_cols(g, state.s, cfg.s_dim(), "step(S)")?;
    if expect_cols(g, state.p, cfg.p_dim, "step(p)")? != batch {
        return Err(CrurError::dim("step", g.shape(state.s), g.shape(state.p)));
    }
    for x in [x1, x2] {
        if expect_cols(g, x, cfg.embed_dim, "step(x)")? != batch {
            return Err(CrurError::dim("step", g.shape(state.s), g.shape(x)));
        }
    }
    Ok(())
}

fn advance(state: &CrurState, s: Var, p: Var) -> CrurState {
    CrurState {
        s,
        p,
        t: state.t + 1,
        ..*state
    }
}

pub fn step_rnn(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    coupling: Coupling,
    state: &CrurState,
    x1: Var,
    x2: Var,
) -> Result<CrurState> {
    check_inputs(g, cfg, state, x1, x2)?;
    let ctx = StepCtx {
        pv,
        coupling,
        state,
    };
    let s = ctx.rnn(g, Branch::Context, x1)?;
    let p = ctx.rnn(g, Branch::Structure, x2)?;
    Ok(advance(state, s, p))
}

pub fn step_lstm(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    coupling: Coupling,
    state: &CrurState,
    x1: Var,
    x2: Var,
) -> Result<CrurState> {
    check_inputs(g, cfg, state, x1, x2)?;
    let (c1, c2) = match (state.c1, state.c2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(CrurError::Input(
                "LSTM step needs cell memories in the state".into(),
            ))
        }
    };
    let ctx = StepCtx {
        pv,
        coupling,
        state,
    };
    let (s, c1) = ctx.lstm(g, Branch::Context, x1, c1)?;
    let (p, c2) = ctx.lstm(g, Branch::Structure, x2, c2)?;
    let mut next = advance(state, s, p);
    next.c1 = Some(c1);
    next.c2 = Some(c2);
    Ok(next)
}

pub fn step_gru(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    coupling: Coupling,
    state: &CrurState,
    x1: Var,
    x2: Var,
) -> Result<CrurState> {
    check_inputs(g, cfg, state, x1, x2)?;
    let ctx = StepCtx {
        pv,
        coupling,
        state,
    };
    let s = ctx.gru(g, Branch::Context, x1)?;
    let p = ctx.gru(g, Branch::Structure, x2)?;
    Ok(advance(state, s, p))
}

macro_rules! coupled_step {
    ($name:ident, $inner:ident, $coupling:expr) => {
        pub fn $name(
            g: &mut Graph,
            cfg: &CrurConfig,
            pv: &ParamVars,
            state: &CrurState,
            x1: Var,
            x2: Var,
        ) -> Result<CrurState> {
            $inner(g, cfg, pv, $coupling, state, x1, x2)
        }
    };
}

coupled_step!(step_rnn_open, step_rnn, Coupling::Open);
coupled_step!(step_rnn_closed, step_rnn, Coupling::Closed);
coupled_step!(step_lstm_open, step_lstm, Coupling::Open);
coupled_step!(step_lstm_closed, step_lstm, Coupling::Closed);
coupled_step!(step_gru_open, step_gru, Coupling::Open);
coupled_step!(step_gru_closed, step_gru, Coupling::Closed);

/// Dispatches on the configured cell kind and coupling.
pub fn step(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    state: &CrurState,
    x1: Var,
    x2: Var,
) -> Result<CrurState> {
    match cfg.cell_kind {
        CellKind::Rnn => step_rnn(g, cfg, pv, cfg.coupling, state, x1, x2),
        CellKind::Lstm => step_lstm(g, cfg, pv, cfg.coupling, state, x1, x2),
        CellKind::Gru => step_gru(g, cfg, pv, cfg.coupling, state, x1, x2),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `σ(W_u · p_t)`, `[batch, s_cols]`.
    pub u: Var,
    /// `mat(S_t) · u_t` after dropout, `[batch, s_rows]`.
    pub f: Var,
    /// `W_x · f_t`, `[batch, vocab]`.
    pub logits: Var,
}

/// `u_t = σ(W_u p_t)`, `f_t = mat(S_t) u_t` (dropout applied), logits
/// `W_x f_t`.
pub fn compose_output(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    state: &CrurState,
    drop: &mut Dropout<'_>,
) -> Result<HeadOutput> {
    let (u, f) = compose_f(g, cfg, pv, state, drop)?;
    let logits = g.matmul_bt(f, pv.get("head.x")?)?;
    Ok(HeadOutput { u, f, logits })
}

/// The `(u_t, f_t)` part of [`compose_output`], without the word logits.
pub fn compose_f(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    state: &CrurState,
    drop: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    expect_cols(g, state.s, cfg.s_dim(), "compose_output(S)")?;
    expect_cols(g, state.p, cfg.p_dim, "compose_output(p)")?;
    let up = g.matmul_bt(state.p, pv.get("head.u")?)?;
    let u = g.sigmoid(up);
    let f = g.bmv(state.s, u, cfg.s_rows, cfg.s_cols)?;
    let f = drop.apply(g, f)?;
    Ok((u, f))
}

/// Language-attribute logits `W_pos · u_t`.
pub fn pos_head(g: &mut Graph, pv: &ParamVars, u: Var) -> Result<Var> {
    g.matmul_bt(u, pv.get("head.pos")?)
}

/// Embeds the previous tokens and derives the two stream inputs according
/// to the configured scheme. Returns `(x1, x2)` and updates the memory
/// feedback states held in `state`.
pub fn feedback_transform(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    state: &mut CrurState,
    prev_tokens: &[usize],
    drop: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    let emb = g.gather_rows(pv.get("emb")?, prev_tokens)?;
    let emb = drop.apply(g, emb)?;
    match cfg.feedback {
        FeedbackScheme::Shared => Ok((emb, emb)),
        FeedbackScheme::Mlp => {
            let x1 = g.matmul_bt(emb, pv.get("fb.w1")?)?;
            let x2 = g.matmul_bt(emb, pv.get("fb.w2")?)?;
            Ok((x1, x2))
        }
        FeedbackScheme::Memory => {
            let (Some(h1), Some(h2)) = (state.fb1, state.fb2) else {
                return Err(CrurError::Input(
                    "memory feedback needs its hidden states".into(),
                ));
            };
            let cell = |g: &mut Graph, h: Var, input: &str, rec: &str| -> Result<Var> {
                let a = g.matmul_bt(emb, pv.get(input)?)?;
                let b = g.matmul_bt(h, pv.get(rec)?)?;
                let s = g.add(a, b)?;
                Ok(g.tanh(s))
            };
            let x1 = cell(g, h1, "fb.in1", "fb.rec1")?;
            let x2 = cell(g, h2, "fb.in2", "fb.rec2")?;
            state.fb1 = Some(x1);
            state.fb2 = Some(x2);
            Ok((x1, x2))
        }
    }
}

/// Mean pairwise `|cos|` between `u_t` vectors of one sequence; lower
/// means the structural keys are closer to mutually orthogonal.
pub fn u_orthogonality(us: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..us.len() {
        for j in i + 1..us.len() {
            let dot: f64 = us[i].iter().zip(&us[j]).map(|(a, b)| a * b).sum();
            let na = us[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = us[j].iter().map(|b| b * b).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                total += (dot / (na * nb)).abs();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
