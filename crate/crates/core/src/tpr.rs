//! Tensor-product binding with normalized Hadamard roles.
//!
//! Fillers (word embeddings or feature segments) are bound to the rows of
//! a normalized Sylvester–Hadamard matrix, `s = Σ_j f_j ⊗ r_j`. Because the
//! rows are orthonormal, `s · r_j` returns `f_j` exactly, and a nearest
//! neighbour lookup in the embedding table recovers the original symbol.

use crate::error::{CrurError, Result};
use crate::tensor::Tensor;

/// Largest supported order exponent; `2^16` roles.
pub const MAX_ORDER: u32 = 16;

/// Orthonormal `2^k × 2^k` role matrix.
#[derive(Clone, Debug)]
pub struct HadamardRoles {
    order: u32,
    matrix: Tensor,
}

impl HadamardRoles {
    /// Sylvester recursion `H_{2n} = [[H, H], [H, -H]]` followed by
    /// normalizing every row by its L2 norm.
    pub fn generate(k: u32) -> Result<Self> {
        if k > MAX_ORDER {
            return Err(CrurError::Parameter(format!(
                "hadamard order {k} exceeds cap {MAX_ORDER}"
            )));
        }
        let n = 1usize << k;
        let mut h = vec![1.0f64];
        let mut size = 1;
        while size < n {
            let next = size * 2;
            let mut grown = vec![0.0; next * next];
            for i in 0..size {
                for j in 0..size {
                    let v = h[i * size + j];
                    grown[i * next + j] = v;
                    grown[i * next + j + size] = v;
                    grown[(i + size) * next + j] = v;
                    grown[(i + size) * next + j + size] = -v;
                }
            }
            h = grown;
            size = next;
        }
        for row in h.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self {
            order: k,
            matrix: Tensor::matrix(n, n, h)?,
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Number of roles, `2^k`.
    pub fn count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, j: usize) -> Result<&[f64]> {
        if j >= self.count() {
            return Err(CrurError::Index {
                index: j,
                len: self.count(),
            });
        }
        Ok(self.matrix.row(j))
    }
}

/// Word embedding table `[V, e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(CrurError::rank(
                "embedding table",
                format!("{:?}", matrix.shape()),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.vocab_size() {
            return Err(CrurError::Index {
                index: i,
                len: self.vocab_size(),
            });
        }
        Ok(self.matrix.row(i))
    }

    /// True when no two rows are identical, the precondition for exact
    /// nearest-neighbour recovery.
    pub fn rows_distinct(&self) -> bool {
        let v = self.vocab_size();
        (0..v).all(|i| (i + 1..v).all(|j| self.matrix.row(i) != self.matrix.row(j)))
    }

    /// Smallest L2 distance between two distinct rows.
    pub fn min_row_gap(&self) -> f64 {
        let v = self.vocab_size();
        let mut best = f64::INFINITY;
        for i in 0..v {
            for j in i + 1..v {
                best = best.min(l2(self.matrix.row(i), self.matrix.row(j)));
            }
        }
        best
    }
}

/// A bound filler/role sum `[e, 2^k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRepresentation {
    matrix: Tensor,
    bound_count: usize,
}

impl BoundRepresentation {
    pub fn zeros(filler_dim: usize, roles: &HadamardRoles) -> Self {
        Self {
            matrix: Tensor::zeros(&[filler_dim, roles.count()]),
            bound_count: 0,
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn bound_count(&self) -> usize {
        self.bound_count
    }

    /// Adds `filler ⊗ roles.row(j)`.
    pub fn bind(&mut self, filler: &[f64], j: usize, roles: &HadamardRoles) -> Result<()> {
        let (e, n) = (self.matrix.rows(), self.matrix.cols());
        if filler.len() != e {
            return Err(CrurError::dim("bind", &[filler.len()], &[e]));
        }
        if self.bound_count >= n {
            return Err(CrurError::Capacity {
                needed: self.bound_count + 1,
                available: n,
            });
        }
        let role = roles.row(j)?;
        if role.len() != n {
            return Err(CrurError::dim("bind", &[role.len()], &[n]));
        }
        let data = self.matrix.data_mut();
        for (i, &f) in filler.iter().enumerate() {
            for (c, &r) in data[i * n..(i + 1) * n].iter_mut().zip(role) {
                *c += f * r;
            }
        }
        self.bound_count += 1;
        Ok(())
    }

    /// Entrywise sum of two representations over the same roles.
    pub fn merge(&self, other: &BoundRepresentation) -> Result<BoundRepresentation> {
        let matrix = self.matrix.zip_map(&other.matrix, "merge", |a, b| a + b)?;
        let bound_count = self.bound_count + other.bound_count;
        if bound_count > matrix.cols() {
            return Err(CrurError::Capacity {
                needed: bound_count,
                available: matrix.cols(),
            });
        }
        Ok(Self {
            matrix,
            bound_count,
        })
    }
}

/// `s = Σ_j emb(tokens[j]) ⊗ r_j` with role `j` for position `j`.
pub fn bind_sequence(
    tokens: &[usize],
    table: &EmbeddingTable,
    roles: &HadamardRoles,
) -> Result<BoundRepresentation> {
    bind_at(
        tokens.iter().copied().enumerate(),
        tokens.len(),
        table,
        roles,
    )
}

/// Binds `(position, token)` pairs; used to build representations over
/// disjoint position sets.
pub fn bind_at(
    pairs: impl IntoIterator<Item = (usize, usize)>,
    count_hint: usize,
    table: &EmbeddingTable,
    roles: &HadamardRoles,
) -> Result<BoundRepresentation> {
    if count_hint > roles.count() {
        return Err(CrurError::Capacity {
            needed: count_hint,
            available: roles.count(),
        });
    }
    let mut s = BoundRepresentation::zeros(table.dim(), roles);
    for (pos, tok) in pairs {
        s.bind(table.row(tok)?, pos, roles)?;
    }
    Ok(s)
}

/// `s · r_jᵀ`: the filler bound at role `j`.
pub fn unbind(s: &BoundRepresentation, j: usize, roles: &HadamardRoles) -> Result<Vec<f64>> {
    let role = roles.row(j)?;
    let n = s.matrix.cols();
    if role.len() != n {
        return Err(CrurError::dim("unbind", &[role.len()], &[n]));
    }
    Ok(s.matrix
        .data()
        .chunks(n)
        .map(|row| row.iter().zip(role).map(|(a, b)| a * b).sum())
        .collect())
}

/// Index of the row closest to `v` in L2 distance, lowest index on ties.
pub fn nn_retrieve(v: &[f64], table: &EmbeddingTable) -> Result<usize> {
    if v.len() != table.dim() {
        return Err(CrurError::dim("nn_retrieve", &[v.len()], &[table.dim()]));
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..table.vocab_size() {
        let d: f64 = table
            .matrix
            .row(i)
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// bind → unbind → nearest neighbour for every position.
pub fn roundtrip(
    tokens: &[usize],
    table: &EmbeddingTable,
    roles: &HadamardRoles,
) -> Result<Vec<usize>> {
    let s = bind_sequence(tokens, table, roles)?;
    (0..tokens.len())
        .map(|j| nn_retrieve(&unbind(&s, j, roles)?, table))
        .collect()
}

/// Splits `w` into `ceil(d/q)` segments of length `q` (the last one
/// zero-padded) and binds segment `i` to role `i`.
pub fn bind_feature_segments(
    w: &[f64],
    q: usize,
    roles: &HadamardRoles,
) -> Result<BoundRepresentation> {
    if q == 0 || w.is_empty() {
        return Err(CrurError::Parameter(
            "segment length and feature length must be positive".into(),
        ));
    }
    let chunks = w.len().div_ceil(q);
    if chunks > roles.count() {
        return Err(CrurError::Capacity {
            needed: chunks,
            available: roles.count(),
        });
    }
    let mut s = BoundRepresentation::zeros(q, roles);
    let mut segment = vec![0.0; q];
    for (i, chunk) in w.chunks(q).enumerate() {
        segment.fill(0.0);
        segment[..chunk.len()].copy_from_slice(chunk);
        s.bind(&segment, i, roles)?;
    }
    Ok(s)
}

/// Inverse of [`bind_feature_segments`]: unbinds each segment and drops the
/// padding.
pub fn unbind_feature_segments(
    s: &BoundRepresentation,
    d: usize,
    roles: &HadamardRoles,
) -> Result<Vec<f64>> {
    let q = s.matrix.rows();
    let chunks = d.div_ceil(q);
    let mut out = Vec::with_capacity(chunks * q);
    for i in 0..chunks {
        out.extend(unbind(s, i, roles)?);
    }
    out.truncate(d);
    Ok(out)
}

/// Mixes signals onto orthonormal bases, `D = Σ b_i ⊗ s_i`, recovers each
/// with `s'_i = D · b_i` and returns the largest L∞ reconstruction error.
pub fn spectrum_demo(signals: &[Vec<f64>], roles: &HadamardRoles) -> Result<f64> {
    if signals.len() > roles.count() {
        return Err(CrurError::Capacity {
            needed: signals.len(),
            available: roles.count(),
        });
    }
    let Some(n) = signals.first().map(Vec::len) else {
        return Ok(0.0);
    };
    let mut mixed = BoundRepresentation::zeros(n, roles);
    for (i, s) in signals.iter().enumerate() {
        mixed.bind(s, i, roles)?;
    }
    let mut worst = 0.0f64;
    for (i, s) in signals.iter().enumerate() {
        let rec = unbind(&mixed, i, roles)?;
        worst = rec
            .iter()
            .zip(s)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    Ok(worst)
}

/// Outcome of [`run_tpr_demo`].
#[derive(Clone, Debug, PartialEq)]
pub struct TprDemoReport {
    pub trials: usize,
    pub tokens: usize,
    pub correct: usize,
    /// Largest L∞ gap between an unbound filler and its embedding row.
    pub max_unbind_error: f64,
    pub spectrum_max_error: f64,
    /// `(trial index, error)` for trials whose sentence overflowed the roles.
    pub capacity_failures: Vec<(usize, String)>,
}

impl TprDemoReport {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            1.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

/// Settings for [`run_tpr_demo`].
#[derive(Clone, Debug)]
pub struct TprDemoConfig {
    pub order: u32,
    pub vocab: usize,
    pub dim: usize,
    pub trials: usize,
    /// Longest sentence drawn; defaults to the role count.
    pub max_len: Option<usize>,
    pub seed: u64,
}

/// Random sentences over a random Gaussian embedding table pushed through
/// bind → unbind → nearest neighbour.
pub fn run_tpr_demo(cfg: &TprDemoConfig) -> Result<TprDemoReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    if cfg.order > 10 {
        return Err(CrurError::Parameter(format!(
            "tpr demo supports k <= 10, got {}",
            cfg.order
        )));
    }
    if cfg.vocab == 0 || cfg.dim == 0 {
        return Err(CrurError::Parameter(
            "vocab and dim must be positive".into(),
        ));
    }
    let roles = HadamardRoles::generate(cfg.order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = EmbeddingTable::new(Tensor::normal(&[cfg.vocab, cfg.dim], 1.0, &mut rng))?;
    let max_len = cfg.max_len.unwrap_or(roles.count()).max(1);

    let mut report = TprDemoReport {
        trials: cfg.trials,
        tokens: 0,
        correct: 0,
        max_unbind_error: 0.0,
        spectrum_max_error: 0.0,
        capacity_failures: Vec::new(),
    };
    for trial in 0..cfg.trials {
        let len = rng.random_range(1..=max_len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let s = match bind_sequence(&tokens, &table, &roles) {
            Ok(s) => s,
            Err(e @ CrurError::Capacity { .. }) => {
                report.capacity_failures.push((trial, e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        for (j, &tok) in tokens.iter().enumerate() {
            let filler = unbind(&s, j, &roles)?;
            let err = filler
                .iter()
                .zip(table.row(tok)?)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            report.max_unbind_error = report.max_unbind_error.max(err);
            report.tokens += 1;
            if nn_retrieve(&filler, &table)? == tok {
                report.correct += 1;
            }
        }
    }

    let signals: Vec<Vec<f64>> = (0..roles.count())
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    report.spectrum_max_error = spectrum_demo(&signals, &roles)?;
    Ok(report)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
