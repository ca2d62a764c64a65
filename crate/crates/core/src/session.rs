//! A resumable training run: vocabulary, model, and progress counters,
//! all recoverable from a [`Checkpoint`].

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_vocab, SceneSample};
use crate::error::{CrurError, Result};
use crate::generation::{beam_decode, DecodeOptions};
use crate::metrics::EvalReport;
use crate::model::CrurModel;
use crate::training::{
    derive_rng, encode_samples, greedy_captions, scst_batch, scst_step,
    teacher_forced_pos_accuracy, xent_train_epoch, EncodedSample, EpochStats, Reward, ScstStats,
    TrainConfig,
};
use crate::vocab::END;

/// Phase tag for the initialization stream.
const PHASE_INIT: u64 = 0;

pub struct Session {
    pub ckpt: Checkpoint,
    pub data: Vec<EncodedSample>,
    reward: Option<Reward>,
}

impl Session {
    /// Fresh run: the vocabulary comes from `train`, and both it and the
    /// model are drawn from the seed's initialization stream.
    pub fn new(cfg: &RunConfig, train: &[SceneSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(CrurError::Input("training split is empty".into()));
        }
        cfg.validate()?;
        let seed = cfg.train.seed;
        let mut rng = derive_rng(seed, PHASE_INIT, 0, 0);
        let (vocab, table) = build_vocab(train, cfg.model.embed_dim, &mut rng)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = vocab.len();
        let mut model = CrurModel::new(model_cfg, &mut rng)?;
        model.set_embeddings(table.into_matrix())?;
        let ckpt = Checkpoint {
            model,
            train: cfg.train.clone(),
            vocab,
            seed,
            epoch: 0,
            scst_step: 0,
        };
        Ok(Self::from_checkpoint(ckpt, train))
    }

    /// Continues from `ckpt`, taking schedule settings (epochs, SCST
    /// steps) from `cfg`. The model settings must match the checkpoint.
    pub fn resume(ckpt: Checkpoint, cfg: &RunConfig, train: &[SceneSample]) -> Result<Self> {
        cfg.validate()?;
        let mut expected = cfg.model.clone();
        expected.vocab_size = ckpt.model.config.vocab_size;
        if expected != ckpt.model.config {
            return Err(CrurError::Config {
                msg: "model settings differ from the checkpoint being resumed".into(),
                keys: Vec::new(),
            });
        }
        let mut ckpt = ckpt;
        ckpt.train = TrainConfig {
            seed: ckpt.seed,
            ..cfg.train.clone()
        };
        Ok(Self::from_checkpoint(ckpt, train))
    }

    pub fn from_checkpoint(ckpt: Checkpoint, train: &[SceneSample]) -> Self {
        let data = encode_samples(train, &ckpt.vocab, ckpt.train.normalize_features);
        Self {
            ckpt,
            data,
            reward: None,
        }
    }

    pub fn encode(&self, samples: &[SceneSample]) -> Vec<EncodedSample> {
        encode_samples(
            samples,
            &self.ckpt.vocab,
            self.ckpt.train.normalize_features,
        )
    }

    pub fn model(&self) -> &CrurModel {
        &self.ckpt.model
    }

    pub fn xent_done(&self) -> bool {
        self.ckpt.epoch >= self.ckpt.train.epochs
    }

    /// Runs the next teacher-forced epoch, or returns `None` once the
    /// epoch budget is spent.
    pub fn next_epoch(&mut self) -> Result<Option<EpochStats>> {
        if self.xent_done() {
            return Ok(None);
        }
        let epoch = self.ckpt.epoch;
        let stats = xent_train_epoch(&mut self.ckpt.model, &self.data, &self.ckpt.train, epoch)?;
        self.ckpt.epoch += 1;
        Ok(Some(stats))
    }

    pub fn scst_done(&self) -> bool {
        !self.ckpt.train.scst_enabled || self.ckpt.scst_step >= self.ckpt.train.scst_steps
    }

    /// Runs the next self-critical step once teacher forcing is finished.
    pub fn next_scst_step(&mut self) -> Result<Option<ScstStats>> {
        if !self.xent_done() || self.scst_done() {
            return Ok(None);
        }
        if self.reward.is_none() {
            self.reward = Some(Reward::new(self.ckpt.train.reward_metric, &self.data)?);
        }
        let step = self.ckpt.scst_step;
        let batch = scst_batch(&self.data, &self.ckpt.train, step);
        let reward = self.reward.as_ref().expect("reward initialized above");
        let stats = scst_step(&mut self.ckpt.model, &batch, &self.ckpt.train, reward, step)?;
        self.ckpt.scst_step += 1;
        Ok(Some(stats))
    }
}

/// Decoded caption for one scene, END stripped.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub scene_id: u64,
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub log_prob: f64,
}

/// Decodes every sample with beam width `beam` (1 is greedy).
pub fn decode_all(
    ckpt: &Checkpoint,
    data: &[EncodedSample],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Decoded>> {
    let opts = DecodeOptions {
        max_len,
        beam,
        ..DecodeOptions::default()
    };
    data.iter()
        .map(|s| {
            let best = beam_decode(&ckpt.model, &s.v, &s.w, &opts)?
                .into_iter()
                .next()
                .ok_or_else(|| CrurError::Generation("beam search returned no caption".into()))?;
            let tokens: Vec<usize> = best
                .tokens
                .iter()
                .copied()
                .take_while(|&t| t != END)
                .collect();
            Ok(Decoded {
                scene_id: s.scene_id,
                words: ckpt.vocab.decode(&tokens),
                tokens,
                log_prob: best.log_prob,
            })
        })
        .collect()
}

/// Metrics of decoded captions against the raw reference words.
pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[SceneSample],
    beam: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let data = encode_samples(samples, &ckpt.vocab, ckpt.train.normalize_features);
    let decoded = decode_all(ckpt, &data, beam, max_len)?;
    let cands: Vec<Vec<String>> = decoded.into_iter().map(|d| d.words).collect();
    let refs: Vec<Vec<Vec<String>>> = samples.iter().map(|s| s.refs.clone()).collect();
    let pos = teacher_forced_pos_accuracy(&ckpt.model, &data)?;
    EvalReport::compute(&cands, &refs, pos)
}

/// Scores each sample's first reference against all of its references.
pub fn evaluate_passthrough(samples: &[SceneSample]) -> Result<EvalReport> {
    let cands: Vec<Vec<String>> = samples
        .iter()
        .map(|s| s.refs.first().cloned().unwrap_or_default())
        .collect();
    let refs: Vec<Vec<Vec<String>>> = samples.iter().map(|s| s.refs.clone()).collect();
    EvalReport::compute(&cands, &refs, 1.0)
}

/// Greedy captions as words.
pub fn greedy_words(
    ckpt: &Checkpoint,
    data: &[EncodedSample],
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    Ok(greedy_captions(&ckpt.model, data, max_len)?
        .iter()
        .map(|c| ckpt.vocab.decode(c))
        .collect())
}
