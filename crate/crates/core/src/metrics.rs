//! Caption metrics: corpus BLEU, a lightweight CIDEr-D, and tag accuracy.
//!
//! Sequences are token slices of any hashable type, so the same code scores
//! word strings and vocabulary indices.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{CrurError, Result};

pub const MAX_ORDER: usize = 4;
/// Width of the Gaussian length penalty in CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn check_pairs<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return Err(CrurError::Input("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(CrurError::Input(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Clipped `n`-gram matches and the candidate `n`-gram total of one
/// candidate against its references.
pub fn clipped_counts<T: Eq + Hash, R: AsRef<[T]>>(
    candidate: &[T],
    refs: &[R],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `len`, shorter on ties.
fn closest_ref_len<T, R: AsRef<[T]>>(len: usize, refs: &[R]) -> usize {
    refs.iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Modified precisions `p_1..p_n` with add-one smoothing on zero match
/// counts. Each precision is capped by the previous one, which keeps the
/// scores ordered `BLEU_1 ≥ BLEU_2 ≥ …`.
fn precisions(matched: &[usize], totals: &[usize]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(matched.len());
    for (&m, &t) in matched.iter().zip(totals) {
        let p = if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        out.push(match out.last() {
            Some(&prev) => p.min(prev),
            None => p,
        });
    }
    out
}

/// Corpus BLEU for every order `1..=n`.
pub fn bleu_all<T, C, R>(candidates: &[C], references: &[Vec<R>], n: usize) -> Result<Vec<f64>>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_pairs(candidates, references)?;
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(CrurError::Parameter(format!(
            "BLEU order must be in 1..=4, got {n}"
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(CrurError::Input(
            "every candidate needs at least one reference".into(),
        ));
    }
    let mut matched = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let cand = cand.as_ref();
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for k in 1..=n {
            let (m, t) = clipped_counts(cand, refs, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(vec![0.0; n]);
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let p = precisions(&matched, &totals);
    let mut log_sum = 0.0;
    let mut prev = f64::INFINITY;
    Ok(p.iter()
        .enumerate()
        .map(|(i, pk)| {
            log_sum += pk.ln();
            // Equal precisions can round one ulp upward here.
            prev = prev.min(bp * (log_sum / (i + 1) as f64).exp());
            prev
        })
        .collect())
}

/// Corpus BLEU of order `n`.
pub fn bleu_n<T, C, R>(candidates: &[C], references: &[Vec<R>], n: usize) -> Result<f64>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    Ok(bleu_all(candidates, references, n)?[n - 1])
}

/// BLEU_4 of a single caption; an empty caption scores 0.
pub fn sentence_bleu4<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], refs: &[R]) -> f64 {
    if candidate.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let refs: Vec<&[T]> = refs.iter().map(AsRef::as_ref).collect();
    bleu_n(&[candidate], &[refs], MAX_ORDER).unwrap_or(0.0)
}

/// Document frequencies over a set of reference groups, for CIDEr-D.
#[derive(Clone, Debug)]
pub struct CiderScorer<T: Eq + Hash + Clone> {
    doc_freq: Vec<HashMap<Vec<T>, usize>>,
    log_n: f64,
}

/// TF-IDF weights in first-appearance order (so float sums are
/// reproducible) plus a lookup table and the vector norm.
struct TfIdf<'a, T> {
    ordered: Vec<(&'a [T], f64)>,
    lookup: HashMap<&'a [T], f64>,
    norm: f64,
}

impl<T: Eq + Hash + Clone> CiderScorer<T> {
    /// One entry per scene: the references describing it.
    pub fn new<R: AsRef<[T]>>(reference_sets: &[Vec<R>]) -> Result<Self> {
        if reference_sets.is_empty() || reference_sets.iter().any(|r| r.is_empty()) {
            return Err(CrurError::Input(
                "CIDEr-D needs nonempty reference sets".into(),
            ));
        }
        let mut doc_freq = vec![HashMap::new(); MAX_ORDER];
        for refs in reference_sets {
            for (n, df) in doc_freq.iter_mut().enumerate() {
                let mut seen: Vec<&[T]> = Vec::new();
                for r in refs {
                    for g in ngram_counts(r.as_ref(), n + 1).into_keys() {
                        if !seen.contains(&g) {
                            seen.push(g);
                        }
                    }
                }
                for g in seen {
                    *df.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            doc_freq,
            log_n: (reference_sets.len() as f64).ln(),
        })
    }

    fn vector<'a>(&self, tokens: &'a [T], n: usize) -> TfIdf<'a, T> {
        let counts = ngram_counts(tokens, n);
        let mut ordered = Vec::with_capacity(counts.len());
        let mut lookup = HashMap::with_capacity(counts.len());
        let mut norm = 0.0;
        if tokens.len() >= n {
            for g in tokens.windows(n) {
                if lookup.contains_key(g) {
                    continue;
                }
                let df = self.doc_freq[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                let w = counts[g] as f64 * (self.log_n - df.ln());
                norm += w * w;
                ordered.push((g, w));
                lookup.insert(g, w);
            }
        }
        TfIdf {
            ordered,
            lookup,
            norm: norm.sqrt(),
        }
    }

    /// Score of one caption against its references.
    pub fn score<R: AsRef<[T]>>(&self, candidate: &[T], refs: &[R]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for n in 1..=MAX_ORDER {
            let cv = self.vector(candidate, n);
            let mut acc = 0.0;
            for r in refs {
                let r = r.as_ref();
                let rv = self.vector(r, n);
                if cv.norm == 0.0 || rv.norm == 0.0 {
                    continue;
                }
                let dot: f64 = cv
                    .ordered
                    .iter()
                    .filter_map(|(g, c)| rv.lookup.get(g).map(|&rw| c.min(rw) * rw))
                    .sum();
                let delta = candidate.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                acc += penalty * dot / (cv.norm * rv.norm);
            }
            total += acc / refs.len() as f64;
        }
        10.0 * total / MAX_ORDER as f64
    }
}

/// Mean CIDEr-D over a corpus, with document frequencies taken from its
/// own references.
pub fn ciderd_lite<T, C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<f64>
where
    T: Eq + Hash + Clone,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_pairs(candidates, references)?;
    let scorer = CiderScorer::new(references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c.as_ref(), r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Micro-averaged exact-match rate; each pair is truncated to its shorter
/// length. Zero when there is nothing to compare.
pub fn pos_accuracy<T: PartialEq, P: AsRef<[T]>, G: AsRef<[T]>>(
    predicted: &[P],
    gold: &[G],
) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        for (a, b) in p.as_ref().iter().zip(g.as_ref()) {
            total += 1;
            hit += usize::from(a == b);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub ciderd_lite: f64,
    pub pos_accuracy: f64,
    pub sample_count: usize,
}

impl EvalReport {
    /// Scores captions against reference sets; `pos_accuracy` is supplied
    /// by the caller.
    pub fn compute<T, C, R>(
        candidates: &[C],
        references: &[Vec<R>],
        pos_accuracy: f64,
    ) -> Result<Self>
    where
        T: Eq + Hash + Clone,
        C: AsRef<[T]>,
        R: AsRef<[T]>,
    {
        let b = bleu_all(candidates, references, MAX_ORDER)?;
        Ok(Self {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            ciderd_lite: ciderd_lite(candidates, references)?,
            pos_accuracy,
            sample_count: candidates.len(),
        })
    }
}
