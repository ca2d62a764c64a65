//! Decoder fixtures and the beam/greedy/brute-force agreement checks,
//! shared by the generation tests and the acceptance run.
#![allow(dead_code)]

use crur_core::autodiff::softmax_log;
use crur_core::cells::{AttnInit, CellKind, Coupling, CrurConfig, DecoderKind, FeedbackScheme};
use crur_core::generation::{
    beam_decode, beam_search, greedy_decode, Caption, DecodeOptions, StepModel,
};
use crur_core::model::CrurModel;
use crur_core::vocab::{END, START};
use crur_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token log-probabilities are an arbitrary function of the prefix.
pub struct TableModel<F: Fn(&[usize]) -> Vec<f64>> {
    pub vocab: usize,
    pub table: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepModel for TableModel<F> {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut next = state.clone();
        next.push(prev);
        let logits = (self.table)(&next);
        let lp = softmax_log(&Tensor::vector(logits).unwrap())
            .unwrap()
            .into_vec();
        Ok((next, lp))
    }
}

/// Deterministic pseudo-random logits keyed by the prefix.
pub fn hashed_logits(prefix: &[usize], vocab: usize, salt: u64) -> Vec<f64> {
    let mut h = salt;
    for &t in prefix {
        h = h
            .wrapping_mul(6364136223846793005)
            .wrapping_add(t as u64 + 1442695040888963407);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect()
}

pub fn random_model(seed: u64, decoder: DecoderKind) -> CrurModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [CellKind::Rnn, CellKind::Lstm, CellKind::Gru];
    let cfg = CrurConfig {
        cell_kind: kinds[(seed % 3) as usize],
        coupling: if seed.is_multiple_of(2) {
            Coupling::Closed
        } else {
            Coupling::Open
        },
        s_rows: 4,
        s_cols: 3,
        p_dim: 4,
        embed_dim: 5,
        vocab_size: 8,
        v_dim: 6,
        w_dim: 5,
        pos_classes: 6,
        feedback: FeedbackScheme::Shared,
        dropout_rate: 0.5,
        decoder,
        attn_init: AttnInit::FromF,
        attn_hidden: 5,
    };
    let mut m = CrurModel::new(cfg, &mut rng).unwrap();
    m.params = m.params.resampled(1.5, &mut rng);
    m
}

pub fn features(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let v = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    (v, w)
}

pub fn opts(beam: usize, max_len: usize) -> DecodeOptions {
    DecodeOptions {
        beam,
        max_len,
        ..DecodeOptions::default()
    }
}

pub fn enumerate(model: &impl StepModel<State = Vec<usize>>, max_len: usize) -> Vec<Caption> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 0.0, model.start().unwrap())];
    while let Some((tokens, lp, state)) = stack.pop() {
        let prev = tokens.last().copied().unwrap_or(START);
        let (next, probs) = model.advance(&state, prev).unwrap();
        for (tok, &p) in probs.iter().enumerate().take(model.vocab_size()) {
            if tok == START {
                continue;
            }
            let mut t = tokens.clone();
            t.push(tok);
            let score = lp + p;
            if tok == END || t.len() == max_len {
                out.push(Caption {
                    tokens: t,
                    log_prob: score,
                });
            } else {
                stack.push((t, score, next.clone()));
            }
        }
    }
    out
}

/// Models where beam width 1 disagrees with greedy decoding.
pub fn beam_one_mismatches(models: u64) -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..models {
        let m = random_model(seed, DecoderKind::Head);
        let (v, w) = features(seed);
        let g = greedy_decode(&m, &v, &w, 8).unwrap();
        let b = beam_decode(&m, &v, &w, &opts(1, 8)).unwrap();
        if b.len() != 1 || b[0] != g {
            bad.push(format!("seed {seed}"));
        }
    }
    bad
}

/// Cases where a wider beam's best caption scores below greedy.
pub fn beam_dominance_violations(models: u64) -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..models {
        let m = random_model(seed, DecoderKind::Head);
        let (v, w) = features(seed);
        let g = greedy_decode(&m, &v, &w, 8).unwrap();
        for beam in [2, 3, 5] {
            let b = beam_decode(&m, &v, &w, &opts(beam, 8)).unwrap();
            if b[0].log_prob < g.log_prob - 1e-12 {
                bad.push(format!(
                    "seed {seed} beam {beam}: {} < {}",
                    b[0].log_prob, g.log_prob
                ));
            }
        }
    }
    bad
}

/// Tables where a beam as wide as the whole 3-step tree disagrees with
/// enumerating every caption.
pub fn brute_force_mismatches(tables: u64) -> Vec<String> {
    let mut bad = Vec::new();
    for salt in 0..tables {
        let vocab = 5;
        let model = TableModel {
            vocab,
            table: move |p: &[usize]| hashed_logits(p, vocab, salt),
        };
        let all = enumerate(&model, 3);
        let best = all
            .iter()
            .max_by(|a, b| {
                a.log_prob
                    .total_cmp(&b.log_prob)
                    .then(b.tokens.len().cmp(&a.tokens.len()))
            })
            .unwrap();
        let beam = beam_search(&model, &opts(vocab.pow(3), 3)).unwrap();
        if beam.len() != all.len()
            || beam[0].tokens != best.tokens
            || (beam[0].log_prob - best.log_prob).abs() >= 1e-12
        {
            bad.push(format!("salt {salt}"));
        }
    }
    bad
}
