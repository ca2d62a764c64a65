//! Feature normalization, teacher-forced training and self-critical
//! fine-tuning.
//!
//! Every random draw during training comes from a generator keyed by
//! `(seed, phase, epoch or step, batch)`, so a run resumed from a saved
//! epoch replays exactly the same trajectory as an uninterrupted one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cells::{pos_head, Dropout};
use crate::corpus::{PosTag, SceneSample};
use crate::error::{CrurError, Result};
use crate::generation::greedy_batch;
use crate::metrics::{bleu_n, pos_accuracy, sentence_bleu4, CiderScorer};
use crate::model::{rollout_step, start_rollout, CrurModel};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, END, PAD, START};

/// `v − mean(v)`.
pub fn normalize_feature(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Subtracts the single mean over every entry of the table.
pub fn normalize_embeddings(table: &Tensor) -> Tensor {
    let mean = table.mean();
    table.map(|x| x - mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    Bleu4,
    CiderdLite,
}

/// Largest accepted scheduled-sampling rate.
pub const MAX_JITTER: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of feeding the model's own previous prediction.
    pub jitter_prob: f64,
    pub scst_enabled: bool,
    /// Sampled captions per scene in a self-critical step.
    pub scst_samples: usize,
    pub scst_steps: usize,
    pub scst_learning_rate: f64,
    pub reward_metric: RewardMetric,
    pub grad_clip: f64,
    /// Weight of the tag cross-entropy.
    pub lambda_pos: f64,
    pub max_len: usize,
    /// Mean-centre every context feature before use.
    pub normalize_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.5,
            jitter_prob: 0.05,
            scst_enabled: false,
            scst_samples: 1,
            scst_steps: 200,
            scst_learning_rate: 0.05,
            reward_metric: RewardMetric::Bleu4,
            grad_clip: 5.0,
            lambda_pos: 0.5,
            max_len: 16,
            normalize_features: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "learning_rate",
        "jitter_prob",
        "scst_enabled",
        "scst_samples",
        "scst_steps",
        "scst_learning_rate",
        "reward_metric",
        "grad_clip",
        "lambda_pos",
        "max_len",
        "normalize_features",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=MAX_JITTER).contains(&self.jitter_prob) {
            bad.push("jitter_prob");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.scst_samples == 0 {
            bad.push("scst_samples");
        }
        if self.max_len == 0 {
            bad.push("max_len");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if !(self.scst_learning_rate >= 0.0 && self.scst_learning_rate.is_finite()) {
            bad.push("scst_learning_rate");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            bad.push("grad_clip");
        }
        if !(self.lambda_pos >= 0.0 && self.lambda_pos.is_finite()) {
            bad.push("lambda_pos");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CrurError::Config {
                msg: format!(
                    "invalid training settings: {bad:?} (jitter_prob must be in [0, {MAX_JITTER}])"
                ),
                keys: bad.into_iter().map(String::from).collect(),
            })
        }
    }
}

/// Generator for one phase/step/batch of a seeded run.
pub fn derive_rng(seed: u64, phase: u64, step: u64, batch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, x) in key.chunks_mut(8).zip([seed, phase, step, batch]) {
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const PHASE_SHUFFLE: u64 = 1;
const PHASE_BATCH: u64 = 2;
const PHASE_SCST: u64 = 3;

/// A scene with captions and tags as indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub scene_id: u64,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub captions: Vec<Vec<usize>>,
    pub tags: Vec<Vec<usize>>,
}

pub fn encode_samples(
    samples: &[SceneSample],
    vocab: &Vocab,
    normalize: bool,
) -> Vec<EncodedSample> {
    samples
        .iter()
        .map(|s| EncodedSample {
            scene_id: s.scene_id,
            v: if normalize {
                normalize_feature(&s.v)
            } else {
                s.v.clone()
            },
            w: s.w.clone(),
            captions: s.refs.iter().map(|r| vocab.encode(r)).collect(),
            tags: s
                .pos
                .iter()
                .map(|p| p.iter().map(|t| t.index()).collect())
                .collect(),
        })
        .collect()
}

/// One teacher-forced sequence: a caption of a scene.
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub sample: &'a EncodedSample,
    pub caption: usize,
}

impl Row<'_> {
    fn tokens(&self) -> &[usize] {
        &self.sample.captions[self.caption]
    }

    /// Target word at step `t` (END after the last word).
    fn target(&self, t: usize) -> usize {
        self.tokens().get(t).copied().unwrap_or(END)
    }

    fn tag(&self, t: usize) -> usize {
        self.sample.captions[self.caption]
            .get(t)
            .map(|_| self.sample.tags[self.caption][t])
            .unwrap_or(PosTag::End.index())
    }

    fn steps(&self) -> usize {
        self.tokens().len() + 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean word cross-entropy plus `λ_pos` times the mean tag cross-entropy.
    pub loss: f64,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub correct_tags: usize,
}

fn stack_rows(rows: &[Row<'_>], pick: impl Fn(&EncodedSample) -> &[f64]) -> Result<Tensor> {
    let cols = pick(rows[0].sample).len();
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|r| pick(r.sample).iter().copied())
        .collect();
    Tensor::matrix(rows.len(), cols, data)
}

fn argmax_excluding(row: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &x) in row.iter().enumerate() {
        if i != skip && (best == usize::MAX || x > row[best]) {
            best = i;
        }
    }
    best
}

/// Builds the teacher-forced loss of a batch on `g`. With probability
/// `jitter` (per row and step) the fed token is the model's own argmax
/// from the previous step instead of the gold word.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &CrurModel,
    pv: &crate::params::ParamVars,
    rows: &[Row<'_>],
    jitter: f64,
    lambda_pos: f64,
    drop: &mut Dropout<'_>,
    rng: &mut R,
) -> Result<(Var, BatchStats)> {
    if rows.is_empty() {
        return Err(CrurError::Input("empty batch".into()));
    }
    let cfg = &model.config;
    let v = g.constant(stack_rows(rows, |s| &s.v)?);
    let w = g.constant(stack_rows(rows, |s| &s.w)?);
    let mut st = start_rollout(g, cfg, pv, v, w)?;
    let steps = rows.iter().map(Row::steps).max().unwrap_or(0);
    let total: usize = rows.iter().map(Row::steps).sum();
    let scale = 1.0 / total as f64;

    let mut stats = BatchStats {
        tokens: total,
        ..BatchStats::default()
    };
    let mut prev = vec![START; rows.len()];
    let mut terms = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        let out = rollout_step(g, cfg, pv, &mut st, &prev, drop)?;
        let lp = g.log_softmax(out.logits)?;
        let pos_lp = {
            let logits = pos_head(g, pv, out.u)?;
            g.log_softmax(logits)?
        };
        let live: Vec<bool> = rows.iter().map(|r| t < r.steps()).collect();
        let targets: Vec<usize> = rows
            .iter()
            .map(|r| if t < r.steps() { r.target(t) } else { PAD })
            .collect();
        let tags: Vec<usize> = rows
            .iter()
            .map(|r| if t < r.steps() { r.tag(t) } else { 0 })
            .collect();
        let word_w: Vec<f64> = live.iter().map(|&l| if l { -scale } else { 0.0 }).collect();
        let tag_w: Vec<f64> = live
            .iter()
            .map(|&l| if l { -scale * lambda_pos } else { 0.0 })
            .collect();
        terms.push(g.pick_weighted(lp, &targets, &word_w)?);
        if lambda_pos != 0.0 {
            terms.push(g.pick_weighted(pos_lp, &tags, &tag_w)?);
        }

        let (lpv, posv) = (g.value(lp), g.value(pos_lp));
        for (r, row) in rows.iter().enumerate() {
            if !live[r] {
                prev[r] = PAD;
                continue;
            }
            let guess = argmax_excluding(lpv.row(r), START);
            stats.correct_tokens += usize::from(guess == targets[r]);
            stats.correct_tags += usize::from(argmax_excluding(posv.row(r), usize::MAX) == tags[r]);
            let own = jitter > 0.0 && rng.random::<f64>() < jitter;
            prev[r] = if own { guess } else { row.target(t) };
        }
    }
    let loss = g.add_all(&terms)?;
    stats.loss = g.value(loss).data()[0];
    Ok((loss, stats))
}

/// Rescales `grads` in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let names: Vec<String> = grads.names().map(String::from).collect();
        for n in names {
            if let Ok(t) = grads.get_mut(&n) {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// `params ← params − lr · grads`.
pub fn sgd_update(params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(CrurError::dim("sgd_update", p.shape(), g.shape()));
        }
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Gradient of the teacher-forced loss of `rows` and the batch statistics.
pub fn batch_gradients<R: Rng + ?Sized>(
    model: &CrurModel,
    rows: &[Row<'_>],
    cfg: &TrainConfig,
    jitter: f64,
    rng: &mut R,
) -> Result<(Params, BatchStats)> {
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut drop = Dropout::train(model.config.dropout_rate, &mut drop_rng);
    let (loss, stats) = teacher_forced_loss(
        &mut g,
        model,
        &pv,
        rows,
        jitter,
        cfg.lambda_pos,
        &mut drop,
        rng,
    )?;
    let grads = pv.gradients(&model.params, &g.backward(loss)?);
    Ok((grads, stats))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub pos_acc: f64,
    pub bleu4_train: f64,
}

impl EpochStats {
    /// Tab-separated log line: epoch, loss, token_acc, pos_acc, bleu4_train.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss, self.token_acc, self.pos_acc, self.bleu4_train
        )
    }
}

/// Every (scene, caption) pair, in a fixed order.
pub fn all_rows(data: &[EncodedSample]) -> Vec<Row<'_>> {
    data.iter()
        .flat_map(|s| {
            (0..s.captions.len()).map(move |c| Row {
                sample: s,
                caption: c,
            })
        })
        .collect()
}

/// One teacher-forced pass over every caption of every scene. `epoch`
/// keys the shuffle, dropout and jitter draws.
pub fn xent_train_epoch(
    model: &mut CrurModel,
    data: &[EncodedSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(CrurError::Input("training corpus is empty".into()));
    }
    cfg.validate()?;
    let mut rows = all_rows(data);
    rows.shuffle(&mut derive_rng(cfg.seed, PHASE_SHUFFLE, epoch as u64, 0));

    let (mut loss_sum, mut tokens, mut correct, mut tags) = (0.0, 0usize, 0usize, 0usize);
    for (b, chunk) in rows.chunks(cfg.batch_size).enumerate() {
        let mut rng = derive_rng(cfg.seed, PHASE_BATCH, epoch as u64, b as u64);
        let (mut grads, stats) = batch_gradients(model, chunk, cfg, cfg.jitter_prob, &mut rng)?;
        clip_gradients(&mut grads, cfg.grad_clip);
        sgd_update(&mut model.params, &grads, cfg.learning_rate)?;
        loss_sum += stats.loss * stats.tokens as f64;
        tokens += stats.tokens;
        correct += stats.correct_tokens;
        tags += stats.correct_tags;
    }
    if !loss_sum.is_finite() {
        return Err(CrurError::Input(format!(
            "training diverged at epoch {epoch}"
        )));
    }
    Ok(EpochStats {
        epoch,
        loss: loss_sum / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        pos_acc: tags as f64 / tokens as f64,
        bleu4_train: greedy_bleu4(model, data, cfg.max_len)?,
    })
}

/// Strips the trailing END.
fn words(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&END, rest)) => rest,
        _ => tokens,
    }
}

/// Greedy captions (END removed) for every scene.
pub fn greedy_captions(
    model: &CrurModel,
    data: &[EncodedSample],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let vs = Tensor::matrix(
            chunk.len(),
            chunk[0].v.len(),
            chunk.iter().flat_map(|s| s.v.clone()).collect(),
        )?;
        let ws = Tensor::matrix(
            chunk.len(),
            chunk[0].w.len(),
            chunk.iter().flat_map(|s| s.w.clone()).collect(),
        )?;
        for c in greedy_batch(model, &vs, &ws, max_len)? {
            out.push(words(&c.tokens).to_vec());
        }
    }
    Ok(out)
}

/// Corpus BLEU-4 of greedy captions.
pub fn greedy_bleu4(model: &CrurModel, data: &[EncodedSample], max_len: usize) -> Result<f64> {
    let caps = greedy_captions(model, data, max_len)?;
    let refs: Vec<Vec<Vec<usize>>> = data.iter().map(|s| s.captions.clone()).collect();
    bleu_n(&caps, &refs, 4)
}

/// Tag accuracy of the POS head on teacher-forced gold captions.
pub fn teacher_forced_pos_accuracy(model: &CrurModel, data: &[EncodedSample]) -> Result<f64> {
    let rows = all_rows(data);
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    for chunk in rows.chunks(64) {
        let mut g = Graph::new();
        let pv = model.params.bind_with(&mut g, false);
        let v = g.constant(stack_rows(chunk, |s| &s.v)?);
        let w = g.constant(stack_rows(chunk, |s| &s.w)?);
        let mut st = start_rollout(&mut g, &model.config, &pv, v, w)?;
        let steps = chunk.iter().map(Row::steps).max().unwrap_or(0);
        let mut pred = vec![Vec::new(); chunk.len()];
        let mut prev = vec![START; chunk.len()];
        for t in 0..steps {
            let out = rollout_step(
                &mut g,
                &model.config,
                &pv,
                &mut st,
                &prev,
                &mut Dropout::eval(),
            )?;
            let logits = pos_head(&mut g, &pv, out.u)?;
            let lv = g.value(logits);
            for (r, row) in chunk.iter().enumerate() {
                if t < row.steps() {
                    pred[r].push(argmax_excluding(lv.row(r), usize::MAX));
                    prev[r] = row.target(t);
                } else {
                    prev[r] = PAD;
                }
            }
        }
        for (r, row) in chunk.iter().enumerate() {
            gold.push((0..row.steps()).map(|t| row.tag(t)).collect::<Vec<_>>());
            predicted.push(std::mem::take(&mut pred[r]));
        }
    }
    Ok(pos_accuracy(&predicted, &gold))
}

/// Per-caption reward against a scene's references.
pub enum Reward {
    Bleu4,
    Cider(CiderScorer<usize>),
    /// Every caption receives the same value.
    Constant(f64),
}

impl Reward {
    pub fn new(metric: RewardMetric, data: &[EncodedSample]) -> Result<Self> {
        Ok(match metric {
            RewardMetric::Bleu4 => Reward::Bleu4,
            RewardMetric::CiderdLite => {
                let refs: Vec<Vec<Vec<usize>>> = data.iter().map(|s| s.captions.clone()).collect();
                Reward::Cider(CiderScorer::new(&refs)?)
            }
        })
    }

    pub fn score(&self, caption: &[usize], refs: &[Vec<usize>]) -> f64 {
        let caption = words(caption);
        match self {
            Reward::Constant(c) => *c,
            _ if caption.is_empty() => 0.0,
            Reward::Bleu4 => sentence_bleu4(caption, refs),
            Reward::Cider(s) => s.score(caption, refs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScstStats {
    pub sampled_reward: f64,
    pub greedy_reward: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One self-critical update on `batch`. Each scene gets
/// `cfg.scst_samples` sampled captions; the greedy caption is the
/// baseline. Runs without dropout.
pub fn scst_step(
    model: &mut CrurModel,
    batch: &[&EncodedSample],
    cfg: &TrainConfig,
    reward: &Reward,
    step: usize,
) -> Result<ScstStats> {
    if batch.is_empty() {
        return Err(CrurError::Input("empty SCST batch".into()));
    }
    let mut rng = derive_rng(cfg.seed, PHASE_SCST, step as u64, 1);
    let rows: Vec<&EncodedSample> = batch
        .iter()
        .flat_map(|s| std::iter::repeat_n(*s, cfg.scst_samples))
        .collect();
    let n = rows.len();
    let owned: Vec<EncodedSample> = rows.iter().map(|s| (*s).clone()).collect();
    let greedy = greedy_captions(model, &owned, cfg.max_len)?;

    let mut g = Graph::new();
    let pv = model.params.bind(&mut g);
    let vdata: Vec<f64> = rows.iter().flat_map(|s| s.v.iter().copied()).collect();
    let wdata: Vec<f64> = rows.iter().flat_map(|s| s.w.iter().copied()).collect();
    let v = g.constant(Tensor::matrix(n, rows[0].v.len(), vdata)?);
    let w = g.constant(Tensor::matrix(n, rows[0].w.len(), wdata)?);
    let mut st = start_rollout(&mut g, &model.config, &pv, v, w)?;

    let mut sampled: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut steps: Vec<(Var, Vec<usize>, Vec<bool>)> = Vec::new();
    let mut prev = vec![START; n];
    for _ in 0..cfg.max_len {
        let live: Vec<bool> = sampled.iter().map(|c| c.last() != Some(&END)).collect();
        if !live.iter().any(|&l| l) {
            break;
        }
        let out = rollout_step(
            &mut g,
            &model.config,
            &pv,
            &mut st,
            &prev,
            &mut Dropout::eval(),
        )?;
        let lp = g.log_softmax(out.logits)?;
        let lpv = g.value(lp);
        let mut picks = vec![PAD; n];
        for r in 0..n {
            if !live[r] {
                continue;
            }
            let probs: Vec<f64> = lpv.row(r).iter().map(|x| x.exp()).collect();
            let dist =
                WeightedIndex::new(&probs).map_err(|e| CrurError::Parameter(e.to_string()))?;
            let tok = dist.sample(&mut rng);
            sampled[r].push(tok);
            picks[r] = tok;
            prev[r] = tok;
        }
        steps.push((lp, picks, live));
    }

    let r_s: Vec<f64> = rows
        .iter()
        .zip(&sampled)
        .map(|(s, c)| reward.score(c, &s.captions))
        .collect();
    let r_g: Vec<f64> = rows
        .iter()
        .zip(&greedy)
        .map(|(s, c)| reward.score(c, &s.captions))
        .collect();
    let adv: Vec<f64> = r_s.iter().zip(&r_g).map(|(a, b)| a - b).collect();

    let mut terms = Vec::with_capacity(steps.len());
    for (lp, picks, live) in &steps {
        let weights: Vec<f64> = (0..n)
            .map(|r| if live[r] { -adv[r] / n as f64 } else { 0.0 })
            .collect();
        terms.push(g.pick_weighted(*lp, picks, &weights)?);
    }
    let loss = g.add_all(&terms)?;
    let mut grads = pv.gradients(&model.params, &g.backward(loss)?);
    drop(g);
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
    sgd_update(&mut model.params, &grads, cfg.scst_learning_rate)?;
    Ok(ScstStats {
        sampled_reward: r_s.iter().sum::<f64>() / n as f64,
        greedy_reward: r_g.iter().sum::<f64>() / n as f64,
        grad_norm,
    })
}

/// Scenes for SCST step `step`, drawn without replacement.
pub fn scst_batch<'a>(
    data: &'a [EncodedSample],
    cfg: &TrainConfig,
    step: usize,
) -> Vec<&'a EncodedSample> {
    let mut rng = derive_rng(cfg.seed, PHASE_SCST, step as u64, 0);
    let k = cfg.batch_size.min(data.len());
    rand::seq::index::sample(&mut rng, data.len(), k)
        .into_iter()
        .map(|i| &data[i])
        .collect()
}
