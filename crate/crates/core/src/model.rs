//! A configured CRUR model and its per-step rollout.
//!
//! A rollout step embeds the previous tokens, advances the coupled cell,
//! and produces word logits either straight from the output head or via
//! the attention decoder, a conventional LSTM that receives `f_t` as an
//! input at every step instead of as an initial state.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::cells::{
    compose_f, feedback_transform, init_params, init_state, param_shapes, step, AttnInit,
    CrurConfig, CrurState, DecoderKind, Dropout, StateValues,
};
use crate::error::{CrurError, Result};
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CrurModel {
    pub config: CrurConfig,
    pub params: Params,
}

impl CrurModel {
    pub fn new<R: Rng + ?Sized>(config: CrurConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Validates that `params` has exactly the layout `config` requires.
    pub fn from_params(config: CrurConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&param_shapes(&config))?;
        Ok(Self { config, params })
    }

    /// Replaces the word embedding table.
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        let want = [self.config.vocab_size, self.config.embed_dim];
        if table.shape() != want {
            return Err(CrurError::dim("set_embeddings", table.shape(), &want));
        }
        self.params.insert("emb", table);
        Ok(())
    }
}

/// Coupled cell state plus the attention decoder's `(h, c)`.
#[derive(Clone, Copy, Debug)]
pub struct RolloutState {
    pub core: CrurState,
    pub dec: Option<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutValues {
    pub core: StateValues,
    pub dec: Option<(Tensor, Tensor)>,
}

impl RolloutState {
    pub fn snapshot(&self, g: &Graph) -> RolloutValues {
        RolloutValues {
            core: self.core.snapshot(g),
            dec: self
                .dec
                .map(|(h, c)| (g.value(h).clone(), g.value(c).clone())),
        }
    }
}

impl RolloutValues {
    pub fn load(&self, g: &mut Graph) -> RolloutState {
        let core = self.core.load(g);
        let dec = self
            .dec
            .as_ref()
            .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())));
        RolloutState { core, dec }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub u: Var,
    pub f: Var,
}

pub fn start_rollout(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    v: Var,
    w: Var,
) -> Result<RolloutState> {
    Ok(RolloutState {
        core: init_state(g, cfg, pv, v, w)?,
        dec: None,
    })
}

/// One generation step fed with the previous token of every batch row.
pub fn rollout_step(
    g: &mut Graph,
    cfg: &CrurConfig,
    pv: &ParamVars,
    st: &mut RolloutState,
    prev: &[usize],
    drop: &mut Dropout<'_>,
) -> Result<StepOutput> {
    let (x1, x2) = feedback_transform(g, cfg, pv, &mut st.core, prev, drop)?;
    st.core = step(g, cfg, pv, &st.core, x1, x2)?;
    let (u, f) = compose_f(g, cfg, pv, &st.core, drop)?;
    let logits = match cfg.decoder {
        DecoderKind::Head => g.matmul_bt(f, pv.get("head.x")?)?,
        DecoderKind::Attn => {
            let (h, c) = match st.dec {
                Some(hc) => hc,
                None => attn_initial(g, cfg, pv, f)?,
            };
            let (h, c) = attn_step(g, pv, x1, f, h, c)?;
            st.dec = Some((h, c));
            g.matmul_bt(h, pv.get("dec.out")?)?
        }
    };
    Ok(StepOutput { logits, u, f })
}

fn attn_initial(g: &mut Graph, cfg: &CrurConfig, pv: &ParamVars, f: Var) -> Result<(Var, Var)> {
    let batch = g.shape(f)[0];
    let zeros = Tensor::zeros(&[batch, cfg.attn_hidden]);
    let h = match cfg.attn_init {
        AttnInit::Constant => g.constant(zeros.clone()),
        AttnInit::FromF => g.matmul_bt(f, pv.get("dec.init")?)?,
    };
    Ok((h, g.constant(zeros)))
}

fn attn_step(g: &mut Graph, pv: &ParamVars, x: Var, f: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let pre = |g: &mut Graph, gate: &str| -> Result<Var> {
        let a = g.matmul(x, pv.get(&format!("dec.{gate}.x"))?)?;
        let b = g.matmul(f, pv.get(&format!("dec.{gate}.f"))?)?;
        let r = g.matmul(h, pv.get(&format!("dec.{gate}.h"))?)?;
        g.add_all(&[a, b, r])
    };
    let i = pre(g, "i")?;
    let i = g.sigmoid(i);
    let fg = pre(g, "f")?;
    let fg = g.sigmoid(fg);
    let o = pre(g, "o")?;
    let o = g.sigmoid(o);
    let cand = pre(g, "c")?;
    let cand = g.tanh(cand);
    let keep = g.mul(fg, c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
