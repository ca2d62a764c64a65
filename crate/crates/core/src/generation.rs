//! Greedy and beam-search decoding.
//!
//! Decoders are written against [`StepModel`], so the search logic can be
//! checked on hand-built toy models as well as on a [`CrurModel`].
//! Scores are sums of per-token log-softmax values. START is never a
//! candidate; a hypothesis ends when it emits END or reaches `max_len`.

use std::cmp::Ordering;

use crate::autodiff::{softmax_log, Graph};
use crate::cells::{DecoderKind, Dropout};
use crate::error::{CrurError, Result};
use crate::model::{rollout_step, start_rollout, CrurModel, RolloutValues};
use crate::tensor::Tensor;
use crate::vocab::{END, START};

/// An autoregressive model over a fixed vocabulary.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn start(&self) -> Result<Self::State>;

    /// Feeds `prev` and returns the next state with log-probabilities over
    /// the vocabulary.
    fn advance(&self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub beam: usize,
    /// Rank completed hypotheses by `log_prob / len`.
    pub length_norm: bool,
    pub start: usize,
    pub end: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 20,
            beam: 1,
            length_norm: false,
            start: START,
            end: END,
        }
    }
}

impl DecodeOptions {
    fn check(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(CrurError::Parameter("beam width must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(CrurError::Parameter("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A decoded token sequence (START excluded, END included when emitted).
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

/// Indices of the `n` best candidates, best first, ties to the lower index.
fn top_candidates(log_probs: &[f64], n: usize, start: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_probs.len()).filter(|&i| i != start).collect();
    idx.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn greedy<M: StepModel>(model: &M, opts: &DecodeOptions) -> Result<Caption> {
    opts.check()?;
    let mut state = model.start()?;
    let mut prev = opts.start;
    let mut out = Caption {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while out.tokens.len() < opts.max_len {
        let (next, lp) = model.advance(&state, prev)?;
        let tok = top_candidates(&lp, 1, opts.start)[0];
        out.tokens.push(tok);
        out.log_prob += lp[tok];
        if tok == opts.end {
            break;
        }
        state = next;
        prev = tok;
    }
    Ok(out)
}

fn score(c: &Caption, length_norm: bool) -> f64 {
    if length_norm {
        c.log_prob / c.tokens.len().max(1) as f64
    } else {
        c.log_prob
    }
}

/// Final ranking: score descending, then shorter, then lexicographic.
fn rank(a: &Caption, b: &Caption, length_norm: bool) -> Ordering {
    score(b, length_norm)
        .total_cmp(&score(a, length_norm))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Completed hypotheses, best first.
pub fn beam_search<M: StepModel>(model: &M, opts: &DecodeOptions) -> Result<Vec<Caption>> {
    opts.check()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start()?,
        finished: false,
    }];
    let mut done: Vec<Caption> = Vec::new();

    while !live.is_empty() {
        // (hypothesis index, token, total log-prob, next state)
        let mut cands = Vec::new();
        for (h_idx, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(opts.start);
            let (next, lp) = model.advance(&h.state, prev)?;
            for tok in top_candidates(&lp, opts.beam, opts.start) {
                cands.push((h_idx, tok, h.log_prob + lp[tok], next.clone()));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(opts.beam);

        let mut next_live = Vec::with_capacity(cands.len());
        for (h_idx, tok, log_prob, state) in cands {
            let mut tokens = live[h_idx].tokens.clone();
            tokens.push(tok);
            let finished = tok == opts.end || tokens.len() >= opts.max_len;
            if finished {
                done.push(Caption { tokens, log_prob });
            } else {
                next_live.push(Hypothesis {
                    tokens,
                    log_prob,
                    state,
                    finished,
                });
            }
        }
        live = next_live;
    }
    done.sort_by(|a, b| rank(a, b, opts.length_norm));
    Ok(done)
}

/// Decodes a single scene with a [`CrurModel`].
pub struct CrurStepModel<'a> {
    model: &'a CrurModel,
    v: Tensor,
    w: Tensor,
}

impl<'a> CrurStepModel<'a> {
    /// `v` and `w` are the scene's context and tag features.
    pub fn new(model: &'a CrurModel, v: &[f64], w: &[f64]) -> Result<Self> {
        Ok(Self {
            model,
            v: Tensor::matrix(1, v.len(), v.to_vec())?,
            w: Tensor::matrix(1, w.len(), w.to_vec())?,
        })
    }
}

impl StepModel for CrurStepModel<'_> {
    type State = RolloutValues;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn start(&self) -> Result<RolloutValues> {
        let mut g = Graph::new();
        let pv = self.model.params.bind_with(&mut g, false);
        let v = g.constant(self.v.clone());
        let w = g.constant(self.w.clone());
        Ok(start_rollout(&mut g, &self.model.config, &pv, v, w)?.snapshot(&g))
    }

    fn advance(&self, state: &RolloutValues, prev: usize) -> Result<(RolloutValues, Vec<f64>)> {
        let mut g = Graph::new();
        let pv = self.model.params.bind_with(&mut g, false);
        let mut st = state.load(&mut g);
        let out = rollout_step(
            &mut g,
            &self.model.config,
            &pv,
            &mut st,
            &[prev],
            &mut Dropout::eval(),
        )?;
        let lp = softmax_log(g.value(out.logits))?.into_vec();
        Ok((st.snapshot(&g), lp))
    }
}

pub fn greedy_decode(model: &CrurModel, v: &[f64], w: &[f64], max_len: usize) -> Result<Caption> {
    let opts = DecodeOptions {
        max_len,
        ..DecodeOptions::default()
    };
    greedy(&CrurStepModel::new(model, v, w)?, &opts)
}

pub fn beam_decode(
    model: &CrurModel,
    v: &[f64],
    w: &[f64],
    opts: &DecodeOptions,
) -> Result<Vec<Caption>> {
    beam_search(&CrurStepModel::new(model, v, w)?, opts)
}

/// Greedy decoding through the attention decoder; the model must be
/// configured with it.
pub fn attn_decode(model: &CrurModel, v: &[f64], w: &[f64], max_len: usize) -> Result<Caption> {
    if model.config.decoder != DecoderKind::Attn {
        return Err(CrurError::Parameter(
            "model is not configured with the attention decoder".into(),
        ));
    }
    greedy_decode(model, v, w, max_len)
}

/// Greedy decoding of many scenes at once. `vs` is `[batch, v_dim]` and
/// `ws` is `[batch, w_dim]`. Gives the same result as [`greedy_decode`]
/// per row.
pub fn greedy_batch(
    model: &CrurModel,
    vs: &Tensor,
    ws: &Tensor,
    max_len: usize,
) -> Result<Vec<Caption>> {
    if max_len < 1 {
        return Err(CrurError::Parameter("max_len must be at least 1".into()));
    }
    let batch = vs.rows();
    let cfg = &model.config;
    let mut g = Graph::new();
    let pv = model.params.bind_with(&mut g, false);
    let v = g.constant(vs.clone());
    let w = g.constant(ws.clone());
    let mut st = start_rollout(&mut g, cfg, &pv, v, w)?;
    let mut out = vec![
        Caption {
            tokens: Vec::new(),
            log_prob: 0.0,
        };
        batch
    ];
    let mut prev = vec![START; batch];
    for _ in 0..max_len {
        if out.iter().all(|c| c.tokens.last() == Some(&END)) {
            break;
        }
        let step = rollout_step(&mut g, cfg, &pv, &mut st, &prev, &mut Dropout::eval())?;
        let lp = softmax_log(g.value(step.logits))?;
        for (r, cap) in out.iter_mut().enumerate() {
            if cap.tokens.last() == Some(&END) {
                continue;
            }
            let row = lp.row(r);
            let tok = top_candidates(row, 1, START)[0];
            cap.tokens.push(tok);
            cap.log_prob += row[tok];
            prev[r] = tok;
        }
    }
    Ok(out)
}
