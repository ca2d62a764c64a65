//! Bidirectional LSTM sequence classifier.
//!
//! Each direction is an uncoupled cell of the same form as the context
//! stream of the coupled LSTM (sigmoid candidate, `h = o ⊙ σ(c)`), fed the
//! sequence in its own order. Logits are `W_f h_fwd + W_b h_bwd` over the
//! final states.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::cells::INIT_SCALE;
use crate::error::{CrurError, Result};
use crate::params::{ParamVars, Params};
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl BiLstmConfig {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h) = (self.embed_dim, self.hidden);
        let mut out = vec![("emb".to_string(), vec![self.vocab_size, e])];
        for dir in ["fwd", "bwd"] {
            for g in GATES {
                out.push((format!("{dir}.{g}.x"), vec![e, h]));
                out.push((format!("{dir}.{g}.h"), vec![h, h]));
            }
        }
        out.push(("out.f".to_string(), vec![self.classes, h]));
        out.push(("out.b".to_string(), vec![self.classes, h]));
        out
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Params> {
        if [self.vocab_size, self.embed_dim, self.hidden, self.classes].contains(&0) {
            return Err(CrurError::Parameter(
                "bi-LSTM dimensions must be positive".into(),
            ));
        }
        let mut p = Params::new();
        for (name, shape) in self.param_shapes() {
            p.insert(name, Tensor::uniform(&shape, INIT_SCALE, rng));
        }
        Ok(p)
    }
}

/// Hidden states of both directions. `fwd[i]` has read `seq[..=i]`;
/// `bwd[i]` has read the reversed sequence up to its `i`-th element.
pub struct BiLstmStates {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
}

fn run_direction(
    g: &mut Graph,
    pv: &ParamVars,
    dir: &str,
    xs: &[Var],
    hidden: usize,
) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let act = |g: &mut Graph, gate: &str| -> Result<Var> {
            let a = g.matmul(x, pv.get(&format!("{dir}.{gate}.x"))?)?;
            let b = g.matmul(h, pv.get(&format!("{dir}.{gate}.h"))?)?;
            let s = g.add(a, b)?;
            Ok(g.sigmoid(s))
        };
        let i = act(g, "i")?;
        let f = act(g, "f")?;
        let o = act(g, "o")?;
        let cand = act(g, "c")?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let sc = g.sigmoid(c);
        h = g.mul(o, sc)?;
        out.push(h);
    }
    Ok(out)
}

pub fn bilstm_states(
    g: &mut Graph,
    cfg: &BiLstmConfig,
    pv: &ParamVars,
    seq: &[usize],
) -> Result<BiLstmStates> {
    if seq.is_empty() {
        return Err(CrurError::Input("bi-LSTM needs a nonempty sequence".into()));
    }
    let table = pv.get("emb")?;
    let xs = seq
        .iter()
        .map(|&t| g.gather_rows(table, &[t]))
        .collect::<Result<Vec<_>>>()?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let fwd = run_direction(g, pv, "fwd", &xs, cfg.hidden)?;
    let bwd = run_direction(g, pv, "bwd", &rev, cfg.hidden)?;
    Ok(BiLstmStates { fwd, bwd })
}

/// Class logits `[1, classes]` from the final state of each direction.
pub fn bilstm_classify(
    g: &mut Graph,
    cfg: &BiLstmConfig,
    pv: &ParamVars,
    seq: &[usize],
) -> Result<Var> {
    let st = bilstm_states(g, cfg, pv, seq)?;
    let hf = *st.fwd.last().expect("nonempty");
    let hb = *st.bwd.last().expect("nonempty");
    let a = g.matmul_bt(hf, pv.get("out.f")?)?;
    let b = g.matmul_bt(hb, pv.get("out.b")?)?;
    g.add(a, b)
}
