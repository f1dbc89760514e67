//! Supervised pretraining loops and their shared bookkeeping.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::asr::{apply_masks, Asr};
use crate::autograd::Graph;
use crate::checkpoint;
use crate::corpus::{Spectrogram, TokenSequence, Utterance};
use crate::error::{bail, Error, Result};
use crate::optim::{AdaDelta, Adam, Optimizer, OptimizerState};
use crate::params::{Grads, ParamStore};
use crate::seed;
use crate::tensor::Tensor;
use crate::tts::{guided_attention_var, Tts};

/// Stops after `patience` consecutive epochs without a strict improvement
/// of a higher-is-better metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the metric of `epoch` (1-based); returns true when it is a
    /// new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss_per_token: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

/// Gradient of the summed cross entropy of one utterance.
pub fn asr_utterance_grads(
    asr: &Asr,
    spec: &Spectrogram,
    chars: &TokenSequence,
    dropout_seed: Option<u64>,
) -> Result<(Grads, f64, usize)> {
    let mut g = Graph::new();
    let b = g.bind(asr.params(), true);
    let enc = asr.encode_spectrogram(&mut g, b, spec)?;
    let f = asr.teacher_forced(&mut g, b, enc, chars, dropout_seed)?;
    let loss = g.scalar(f.loss);
    g.backward(f.loss);
    Ok((g.param_grads(b), loss, f.tokens))
}

/// Teacher-forced token accuracy over a set of utterances.
pub fn asr_token_accuracy(asr: &Asr, utts: &[Utterance]) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for u in utts {
        let mut g = Graph::new();
        let b = g.bind(asr.params(), false);
        let f = asr.loss(&mut g, b, &u.spec, &u.chars)?;
        correct += f.correct;
        total += f.tokens;
    }
    if total == 0 {
        bail!(Argument, "no tokens to score");
    }
    Ok(correct as f64 / total as f64)
}

/// Runs one optimizer update over `batch`; returns `(loss, tokens)`.
pub fn asr_batch_update(
    asr: &mut Asr,
    opt: &mut AdaDelta,
    batch: &[&Utterance],
    mask_fill: f64,
    step_seed: u64,
) -> Result<(f64, usize)> {
    let mut grads = Grads::zeros_like(asr.params());
    let (mut loss, mut tokens) = (0.0, 0usize);
    let policy = asr.config().specaug;
    let dropout = asr.config().dropout > 0.0;
    for (i, u) in batch.iter().enumerate() {
        let s = seed::derive(step_seed, "utt", i as u64);
        let spec = apply_masks(&u.spec, &policy, mask_fill, s)?;
        let (g, l, n) = asr_utterance_grads(asr, &spec, &u.chars, dropout.then_some(s ^ 0x5a5a))?;
        grads.add_assign(&g);
        loss += l;
        tokens += n;
    }
    if !grads.is_finite() {
        bail!(Invariant, "non-finite ASR gradient");
    }
    grads.clip_norm(asr.config().grad_clip);
    opt.step(asr.params_mut(), &grads);
    Ok((loss, tokens))
}

#[derive(Serialize, Deserialize)]
struct AsrStateMeta {
    kind: String,
    run_seed: u64,
    mask_fill: f64,
    history: Vec<EpochLog>,
    stop: EarlyStopping,
    stopped_early: bool,
    optimizer_lr: f64,
    param_blocks: usize,
}

/// Epoch-at-a-time supervised ASR training with early stopping on dev
/// token accuracy. The full state (current and best parameters, optimizer
/// buffers, history) can be saved and resumed exactly.
#[derive(Clone, Debug)]
pub struct AsrPretrainer {
    opt: AdaDelta,
    stop: EarlyStopping,
    best: ParamStore,
    history: Vec<EpochLog>,
    stopped_early: bool,
    run_seed: u64,
    mask_fill: f64,
}

impl AsrPretrainer {
    pub fn new(asr: &Asr, mask_fill: f64, run_seed: u64) -> Self {
        let cfg = asr.config();
        Self {
            opt: AdaDelta::new(cfg.optimizer),
            stop: EarlyStopping::new(cfg.patience),
            best: asr.params().clone(),
            history: Vec::new(),
            stopped_early: false,
            run_seed,
            mask_fill,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn is_finished(&self, asr: &Asr) -> bool {
        self.stopped_early || self.epochs_done() >= asr.config().max_epochs
    }

    pub fn run_epoch(&mut self, asr: &mut Asr, train: &[Utterance], dev: &[Utterance]) -> Result<EpochLog> {
        if train.is_empty() || dev.is_empty() {
            bail!(Argument, "ASR pretraining needs train and dev utterances");
        }
        if self.is_finished(asr) {
            bail!(State, "ASR pretraining already finished");
        }
        let epoch = self.epochs_done() + 1;
        let batch_size = asr.config().batch_size.max(1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::derived_rng(self.run_seed, "asr-shuffle", epoch as u64));
        let (mut loss, mut tokens) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = seed::derive(self.run_seed, "asr-step", (epoch * 1_000_000 + bi) as u64);
            let (l, n) = asr_batch_update(asr, &mut self.opt, &batch, self.mask_fill, step_seed)?;
            loss += l;
            tokens += n;
        }
        let metric = asr_token_accuracy(asr, dev)?;
        let log = EpochLog {
            epoch,
            train_loss_per_token: loss / tokens as f64,
            dev_metric: metric,
        };
        self.history.push(log.clone());
        if self.stop.observe(epoch, metric) {
            self.best = asr.params().clone();
        }
        if self.stop.should_stop() {
            self.stopped_early = true;
        }
        Ok(log)
    }

    /// Restores the best parameters into `asr`.
    pub fn finish(self, asr: &mut Asr) -> TrainReport {
        *asr.params_mut() = self.best;
        TrainReport {
            history: self.history,
            best_epoch: self.stop.best_epoch(),
            best_metric: self.stop.best().unwrap_or(0.0),
            stopped_early: self.stopped_early,
        }
    }

    pub fn save_state(&self, asr: &Asr, path: &Path) -> Result<()> {
        let st = self.opt.state();
        let meta = AsrStateMeta {
            kind: "asr-pretrain".into(),
            run_seed: self.run_seed,
            mask_fill: self.mask_fill,
            history: self.history.clone(),
            stop: self.stop.clone(),
            stopped_early: self.stopped_early,
            optimizer_lr: st.lr,
            param_blocks: asr.params().len(),
        };
        let mut blocks = asr.params().to_blocks();
        blocks.extend(self.best.to_blocks());
        blocks.extend(st.slots);
        checkpoint::save_state(path, &serde_json::to_value(meta)?, &blocks)
    }

    /// Loads a state written by [`AsrPretrainer::save_state`] into `asr`
    /// (which must be built from the same config) and returns the trainer.
    pub fn load_state(asr: &mut Asr, path: &Path) -> Result<Self> {
        let (meta, blocks) = checkpoint::load_state(path)?;
        let meta: AsrStateMeta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("ASR state header: {e}")))?;
        let n = asr.params().len();
        if meta.kind != "asr-pretrain" || meta.param_blocks != n || blocks.len() < 2 * n {
            bail!(
                Format,
                "{} is not an ASR pretraining state for this model",
                path.display()
            );
        }
        let mut best = asr.params().clone();
        if !asr.params_mut().load_blocks(&blocks[..n]) || !best.load_blocks(&blocks[n..2 * n]) {
            bail!(Format, "ASR state parameters do not fit the model");
        }
        let mut opt = AdaDelta::new(asr.config().optimizer);
        let st = OptimizerState {
            steps: 0,
            lr: meta.optimizer_lr,
            slots: blocks[2 * n..].to_vec(),
        };
        if opt.restore(asr.params(), &st).is_none() {
            bail!(Format, "ASR optimizer state does not fit the model");
        }
        Ok(Self {
            opt,
            stop: meta.stop,
            best,
            history: meta.history,
            stopped_early: meta.stopped_early,
            run_seed: meta.run_seed,
            mask_fill: meta.mask_fill,
        })
    }
}

/// Supervised ASR training on paired speech with early stopping on dev
/// token accuracy; the best parameters are restored at the end.
pub fn pretrain_asr(
    asr: &mut Asr,
    train: &[Utterance],
    dev: &[Utterance],
    mask_fill: f64,
    run_seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    let mut t = AsrPretrainer::new(asr, mask_fill, run_seed);
    while !t.is_finished(asr) {
        on_epoch(&t.run_epoch(asr, train, dev)?);
    }
    Ok(t.finish(asr))
}

/// Teacher-forced TTS loss terms of one utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TtsTerms {
    pub total: f64,
    pub mse: f64,
    pub mae: f64,
    pub bce: f64,
    pub guided: f64,
}

impl TtsTerms {
    fn add(&mut self, o: &TtsTerms) {
        self.total += o.total;
        self.mse += o.mse;
        self.mae += o.mae;
        self.bce += o.bce;
        self.guided += o.guided;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.mse *= s;
        self.mae *= s;
        self.bce *= s;
        self.guided *= s;
        self
    }
}

/// Gradient of `L_TTS + w_ga · L_guided` for one utterance conditioned on
/// `spk`. `total` in the returned terms excludes the guided term.
pub fn tts_utterance_grads(
    tts: &Tts,
    utt: &Utterance,
    spk: &[f64],
    guided_weight: f64,
    dropout_seed: Option<u64>,
) -> Result<(Grads, TtsTerms)> {
    let mut g = Graph::new();
    let b = g.bind(tts.params(), true);
    let s = g.input(Tensor::row_vector(spk));
    let out = tts.teacher_forced(&mut g, b, &utt.phonemes, s, &utt.spec, dropout_seed)?;
    let l = tts.loss(&mut g, &out, &utt.spec)?;
    let ga = guided_attention_var(&mut g, out.alignment, tts.config().guided_attention.sigma);
    let terms = TtsTerms {
        total: g.scalar(l.total),
        mse: l.mse,
        mae: l.mae,
        bce: l.bce,
        guided: g.scalar(ga),
    };
    let objective = if guided_weight > 0.0 {
        let w = g.scale(ga, guided_weight);
        g.add(l.total, w)
    } else {
        l.total
    };
    g.backward(objective);
    Ok((g.param_grads(b), terms))
}

/// Mean teacher-forced loss terms without dropout.
pub fn tts_eval_terms(tts: &Tts, utts: &[Utterance], spk: &[Vec<f64>]) -> Result<TtsTerms> {
    let mut acc = TtsTerms::default();
    for (u, e) in utts.iter().zip(spk) {
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let s = g.input(Tensor::row_vector(e));
        let out = tts.teacher_forced(&mut g, b, &u.phonemes, s, &u.spec, None)?;
        let l = tts.loss(&mut g, &out, &u.spec)?;
        let ga = crate::tts::guided_attention_loss(g.value(out.alignment), &tts.config().guided_attention);
        acc.add(&TtsTerms {
            total: g.scalar(l.total),
            mse: l.mse,
            mae: l.mae,
            bce: l.bce,
            guided: ga,
        });
    }
    Ok(acc.scaled(1.0 / utts.len().max(1) as f64))
}

#[derive(Serialize, Deserialize)]
struct TtsStateMeta {
    kind: String,
    run_seed: u64,
    history: Vec<TtsTerms>,
    optimizer_steps: i32,
    optimizer_lr: f64,
    param_blocks: usize,
}

/// Epoch-at-a-time supervised TTS training with the guided-attention term
/// at its configured weight; resumable like [`AsrPretrainer`].
#[derive(Clone, Debug)]
pub struct TtsPretrainer {
    opt: Adam,
    history: Vec<TtsTerms>,
    run_seed: u64,
}

impl TtsPretrainer {
    pub fn new(tts: &Tts, run_seed: u64) -> Self {
        Self {
            opt: Adam::new(tts.config().optimizer),
            history: Vec::new(),
            run_seed,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[TtsTerms] {
        &self.history
    }

    pub fn is_finished(&self, tts: &Tts) -> bool {
        self.epochs_done() >= tts.config().epochs
    }

    /// `spk[i]` conditions `train[i]`; returns the epoch's mean terms.
    pub fn run_epoch(&mut self, tts: &mut Tts, train: &[Utterance], spk: &[Vec<f64>]) -> Result<TtsTerms> {
        if train.is_empty() || train.len() != spk.len() {
            bail!(Argument, "TTS pretraining needs one embedding per training utterance");
        }
        if self.is_finished(tts) {
            bail!(State, "TTS pretraining already finished");
        }
        let cfg = tts.config().clone();
        let epoch = self.epochs_done() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::derived_rng(self.run_seed, "tts-shuffle", epoch as u64));
        let mut acc = TtsTerms::default();
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads = Grads::zeros_like(tts.params());
            for &i in chunk {
                let s = seed::derive(self.run_seed, "tts-dropout", (epoch * 1_000_000 + bi * 1000 + i) as u64);
                let (g, t) = tts_utterance_grads(tts, &train[i], &spk[i], cfg.guided_attention.weight, Some(s))?;
                grads.add_assign(&g);
                acc.add(&t);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                bail!(Invariant, "non-finite TTS gradient");
            }
            grads.clip_norm(cfg.grad_clip);
            self.opt.step(tts.params_mut(), &grads);
        }
        let mean = acc.scaled(1.0 / train.len() as f64);
        self.history.push(mean);
        Ok(mean)
    }

    pub fn finish(self) -> Vec<TtsTerms> {
        self.history
    }

    pub fn save_state(&self, tts: &Tts, path: &Path) -> Result<()> {
        let st = self.opt.state();
        let meta = TtsStateMeta {
            kind: "tts-pretrain".into(),
            run_seed: self.run_seed,
            history: self.history.clone(),
            optimizer_steps: st.steps,
            optimizer_lr: st.lr,
            param_blocks: tts.params().len(),
        };
        let mut blocks = tts.params().to_blocks();
        blocks.extend(st.slots);
        checkpoint::save_state(path, &serde_json::to_value(meta)?, &blocks)
    }

    pub fn load_state(tts: &mut Tts, path: &Path) -> Result<Self> {
        let (meta, blocks) = checkpoint::load_state(path)?;
        let meta: TtsStateMeta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("TTS state header: {e}")))?;
        let n = tts.params().len();
        if meta.kind != "tts-pretrain" || meta.param_blocks != n || blocks.len() < n {
            bail!(
                Format,
                "{} is not a TTS pretraining state for this model",
                path.display()
            );
        }
        if !tts.params_mut().load_blocks(&blocks[..n]) {
            bail!(Format, "TTS state parameters do not fit the model");
        }
        let mut opt = Adam::new(tts.config().optimizer);
        let st = OptimizerState {
            steps: meta.optimizer_steps,
            lr: meta.optimizer_lr,
            slots: blocks[n..].to_vec(),
        };
        if opt.restore(tts.params(), &st).is_none() {
            bail!(Format, "TTS optimizer state does not fit the model");
        }
        Ok(Self {
            opt,
            history: meta.history,
            run_seed: meta.run_seed,
        })
    }
}

/// Supervised TTS training for the configured number of epochs. `spk[i]`
/// conditions `train[i]`.
pub fn pretrain_tts(
    tts: &mut Tts,
    train: &[Utterance],
    spk: &[Vec<f64>],
    run_seed: u64,
    mut on_epoch: impl FnMut(usize, &TtsTerms),
) -> Result<Vec<TtsTerms>> {
    let mut t = TtsPretrainer::new(tts, run_seed);
    while !t.is_finished(tts) {
        let terms = t.run_epoch(tts, train, spk)?;
        on_epoch(t.epochs_done(), &terms);
    }
    Ok(t.finish())
}
