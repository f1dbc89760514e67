//! TTS→ASR joint training: domain adaptation from unpaired target text and
//! few-shot speaker adaptation with a frozen TTS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{apply_masks, Asr};
use crate::autograd::Graph;
use crate::corpus::{Spectrogram, TextItem, TokenSequence};
use crate::error::{bail, Result};
use crate::optim::{AdaDelta, Adam, Optimizer};
use crate::params::Grads;
use crate::seed;
use crate::speaker::SpeakerEmbedding;
use crate::tensor::Tensor;
use crate::train::tts_utterance_grads;
use crate::tts::Tts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    DomainAdapt,
    SpeakerAdapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStrategy {
    pub update_asr: bool,
    pub update_tts: bool,
    pub mode: AdaptMode,
}

impl TrainStrategy {
    pub fn domain(update_tts: bool) -> Self {
        Self {
            update_asr: true,
            update_tts,
            mode: AdaptMode::DomainAdapt,
        }
    }

    pub fn speaker() -> Self {
        Self {
            update_asr: true,
            update_tts: false,
            mode: AdaptMode::SpeakerAdapt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.update_asr && !self.update_tts {
            bail!(Config, "strategy updates neither model");
        }
        if self.mode == AdaptMode::SpeakerAdapt && self.update_tts {
            bail!(Config, "speaker adaptation keeps the TTS frozen");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradBalanceConfig {
    pub asr_clip: f64,
    pub tts_clip: f64,
    pub accumulation_steps: usize,
}

impl Default for GradBalanceConfig {
    fn default() -> Self {
        Self {
            asr_clip: 5.0,
            tts_clip: 1.0,
            accumulation_steps: 4,
        }
    }
}

impl GradBalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.asr_clip > 0.0 && self.tts_clip > 0.0) {
            bail!(Config, "clip norms must be positive");
        }
        if self.accumulation_steps == 0 {
            bail!(Config, "accumulation_steps must be at least 1");
        }
        Ok(())
    }
}

/// Source-domain speech with both transcripts and the embedding of its own
/// speaker that conditions the TTS.
#[derive(Clone, Debug)]
pub struct PairedItem {
    pub spec: Spectrogram,
    pub chars: TokenSequence,
    pub phonemes: TokenSequence,
    pub speaker_id: String,
    pub embedding: Vec<f64>,
}

/// Target-domain text with an assigned speaker; never carries speech.
#[derive(Clone, Debug)]
pub struct UnpairedItem {
    pub chars: TokenSequence,
    pub phonemes: TokenSequence,
    pub speaker: SpeakerEmbedding,
}

#[derive(Clone, Debug, Default)]
pub struct ChainBatch {
    pub paired: Vec<PairedItem>,
    pub unpaired: Vec<UnpairedItem>,
}

/// Draws one embedding per text uniformly with replacement from `pool`.
pub fn assign_speakers(num_texts: usize, pool: &[SpeakerEmbedding], rng_seed: u64) -> Result<Vec<SpeakerEmbedding>> {
    if pool.is_empty() {
        bail!(Argument, "speaker pool is empty");
    }
    let mut rng = seed::rng(rng_seed);
    Ok((0..num_texts)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect())
}

/// Pairs texts with speakers for unpaired training.
pub fn make_unpaired(texts: &[TextItem], pool: &[SpeakerEmbedding], rng_seed: u64) -> Result<Vec<UnpairedItem>> {
    let spk = assign_speakers(texts.len(), pool, rng_seed)?;
    Ok(texts
        .iter()
        .zip(spk)
        .map(|(t, speaker)| UnpairedItem {
            chars: t.chars.clone(),
            phonemes: t.phonemes.clone(),
            speaker,
        })
        .collect())
}

/// Loss value and model-bound gradients of the TTS→ASR pipeline for one
/// text.
#[derive(Clone, Debug)]
pub struct ChainLoss {
    pub loss: f64,
    pub tokens: usize,
    pub asr_grads: Grads,
    /// `None` when the TTS is detached.
    pub tts_grads: Option<Grads>,
    pub truncated: bool,
    pub frames: usize,
}

/// Generates speech for the text with the TTS and scores it with the ASR
/// under teacher forcing. Gradients reach the TTS only when `update_tts`.
pub fn chain_loss(asr: &Asr, tts: &Tts, item: &UnpairedItem, update_tts: bool) -> Result<ChainLoss> {
    let mut g = Graph::new();
    let bt = g.bind(tts.params(), update_tts);
    let ba = g.bind(asr.params(), true);
    let s = g.input(Tensor::row_vector(&item.speaker.vector));
    let out = tts.generate(&mut g, bt, &item.phonemes, s)?;
    let enc = asr.encode(&mut g, ba, out.spec)?;
    let f = asr.teacher_forced(&mut g, ba, enc, &item.chars, None)?;
    let loss = g.scalar(f.loss);
    g.backward(f.loss);
    Ok(ChainLoss {
        loss,
        tokens: f.tokens,
        asr_grads: g.param_grads(ba),
        tts_grads: update_tts.then(|| g.param_grads(bt)),
        truncated: out.truncated,
        frames: out.num_frames,
    })
}

/// Which loss terms contribute to a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSources {
    pub asr: bool,
    pub tts: bool,
    pub chain: bool,
}

impl Default for LossSources {
    fn default() -> Self {
        Self {
            asr: true,
            tts: true,
            chain: true,
        }
    }
}

/// Summed losses of one step and the norms of what reached each optimizer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub asr_loss: f64,
    pub tts_loss: f64,
    pub guided_loss: f64,
    pub chain_loss: f64,
    pub total: f64,
    pub asr_tokens: usize,
    pub chain_tokens: usize,
    pub asr_update_norm: Option<f64>,
    pub tts_update_norm: Option<f64>,
    pub truncated: usize,
}

/// Optimizer state and TTS accumulation buffer for one adaptation run.
pub struct ChainTrainer {
    strategy: TrainStrategy,
    balance: GradBalanceConfig,
    pub sources: LossSources,
    asr_opt: AdaDelta,
    tts_opt: Adam,
    tts_buffer: Option<Grads>,
    tts_contributions: usize,
    tts_pending_steps: usize,
    mask_fill: f64,
    steps: u64,
    seed: u64,
}

impl ChainTrainer {
    /// The TTS optimizer starts from fresh state.
    pub fn new(
        asr: &Asr,
        tts: &Tts,
        strategy: TrainStrategy,
        balance: GradBalanceConfig,
        mask_fill: f64,
        run_seed: u64,
    ) -> Result<Self> {
        strategy.validate()?;
        balance.validate()?;
        Ok(Self {
            strategy,
            balance,
            sources: LossSources::default(),
            asr_opt: AdaDelta::new(asr.config().optimizer),
            tts_opt: Adam::new(tts.config().optimizer),
            tts_buffer: None,
            tts_contributions: 0,
            tts_pending_steps: 0,
            mask_fill,
            steps: 0,
            seed: run_seed,
        })
    }

    pub fn strategy(&self) -> TrainStrategy {
        self.strategy
    }

    pub fn balance(&self) -> GradBalanceConfig {
        self.balance
    }

    /// Multiplies both learning rates by `factor`.
    pub fn decay_learning_rates(&mut self, factor: f64) {
        self.asr_opt.set_lr(self.asr_opt.lr() * factor);
        self.tts_opt.set_lr(self.tts_opt.lr() * factor);
    }

    fn asr_update(&mut self, asr: &mut Asr, parts: Vec<Grads>) -> Result<Option<f64>> {
        if parts.is_empty() {
            return Ok(None);
        }
        let n = parts.len() as f64;
        let mut sum = Grads::zeros_like(asr.params());
        for mut p in parts {
            if !p.is_finite() {
                bail!(Invariant, "non-finite ASR gradient");
            }
            p.clip_norm(self.balance.asr_clip);
            sum.add_assign(&p);
        }
        sum.scale(1.0 / n);
        let norm = sum.norm();
        if norm > self.balance.asr_clip * (1.0 + 1e-12) {
            bail!(
                Invariant,
                "ASR update norm {norm} exceeds clip {}",
                self.balance.asr_clip
            );
        }
        self.asr_opt.step(asr.params_mut(), &sum);
        Ok(Some(norm))
    }

    fn tts_accumulate(&mut self, tts: &mut Tts, parts: Vec<Grads>) -> Result<Option<f64>> {
        for mut p in parts {
            if !p.is_finite() {
                bail!(Invariant, "non-finite TTS gradient");
            }
            p.clip_norm(self.balance.tts_clip);
            match &mut self.tts_buffer {
                Some(b) => b.add_assign(&p),
                None => self.tts_buffer = Some(p),
            }
            self.tts_contributions += 1;
        }
        self.tts_pending_steps += 1;
        if self.tts_pending_steps < self.balance.accumulation_steps {
            return Ok(None);
        }
        self.tts_pending_steps = 0;
        let Some(mut sum) = self.tts_buffer.take() else {
            return Ok(None);
        };
        sum.scale(1.0 / self.tts_contributions as f64);
        self.tts_contributions = 0;
        let norm = sum.norm();
        if norm > self.balance.tts_clip * (1.0 + 1e-12) {
            bail!(
                Invariant,
                "TTS update norm {norm} exceeds clip {}",
                self.balance.tts_clip
            );
        }
        self.tts_opt.step(tts.params_mut(), &sum);
        Ok(Some(norm))
    }

    /// `L_ASR + L_TTS + L_TTS→ASR`; each loss only reaches the models it is
    /// routed to, TTS-bound gradients are clipped per source and accumulated.
    pub fn domain_adapt_step(&mut self, asr: &mut Asr, tts: &mut Tts, batch: &ChainBatch) -> Result<StepMetrics> {
        if self.strategy.mode != AdaptMode::DomainAdapt {
            bail!(State, "domain_adapt_step called in {:?} mode", self.strategy.mode);
        }
        self.run_step(asr, tts, batch)
    }

    /// `L_ASR + L_TTS→ASR` with the TTS frozen; fails hard if any TTS
    /// parameter moves.
    pub fn speaker_adapt_step(&mut self, asr: &mut Asr, tts: &mut Tts, batch: &ChainBatch) -> Result<StepMetrics> {
        if self.strategy.mode != AdaptMode::SpeakerAdapt {
            bail!(State, "speaker_adapt_step called in {:?} mode", self.strategy.mode);
        }
        let before = tts.params().content_hash();
        let m = self.run_step(asr, tts, batch)?;
        if tts.params().content_hash() != before {
            bail!(Invariant, "TTS parameters changed during speaker adaptation");
        }
        Ok(m)
    }

    /// Dispatches on the strategy mode.
    pub fn step(&mut self, asr: &mut Asr, tts: &mut Tts, batch: &ChainBatch) -> Result<StepMetrics> {
        match self.strategy.mode {
            AdaptMode::DomainAdapt => self.domain_adapt_step(asr, tts, batch),
            AdaptMode::SpeakerAdapt => self.speaker_adapt_step(asr, tts, batch),
        }
    }

    fn run_step(&mut self, asr: &mut Asr, tts: &mut Tts, batch: &ChainBatch) -> Result<StepMetrics> {
        self.steps += 1;
        let step_seed = seed::derive(self.seed, "chain-step", self.steps);
        let update_tts = self.strategy.update_tts;
        let use_tts_loss = update_tts && self.sources.tts && self.strategy.mode == AdaptMode::DomainAdapt;
        let mut m = StepMetrics::default();
        let mut asr_parts = Vec::new();
        let mut tts_parts = Vec::new();

        if self.strategy.update_asr && self.sources.asr && !batch.paired.is_empty() {
            let mut sum = Grads::zeros_like(asr.params());
            let policy = asr.config().specaug;
            for (i, p) in batch.paired.iter().enumerate() {
                let s = seed::derive(step_seed, "asr", i as u64);
                let spec = apply_masks(&p.spec, &policy, self.mask_fill, s)?;
                let (gr, l, n) = crate::train::asr_utterance_grads(asr, &spec, &p.chars, None)?;
                sum.add_assign(&gr);
                m.asr_loss += l;
                m.asr_tokens += n;
            }
            asr_parts.push(sum);
        }

        if use_tts_loss && !batch.paired.is_empty() {
            let mut sum = Grads::zeros_like(tts.params());
            let w = tts.config().guided_attention.weight;
            for (i, p) in batch.paired.iter().enumerate() {
                let utt = crate::corpus::Utterance {
                    utt_id: String::new(),
                    speaker_id: p.speaker_id.clone(),
                    chars: p.chars.clone(),
                    phonemes: p.phonemes.clone(),
                    spec: p.spec.clone(),
                };
                let s = seed::derive(step_seed, "tts", i as u64);
                let (gr, t) = tts_utterance_grads(tts, &utt, &p.embedding, w, Some(s))?;
                sum.add_assign(&gr);
                m.tts_loss += t.total;
                m.guided_loss += w * t.guided;
            }
            tts_parts.push(sum);
        }

        if self.sources.chain && !batch.unpaired.is_empty() {
            let mut asr_sum = Grads::zeros_like(asr.params());
            let mut tts_sum = Grads::zeros_like(tts.params());
            for item in &batch.unpaired {
                let c = chain_loss(asr, tts, item, update_tts)?;
                m.chain_loss += c.loss;
                m.chain_tokens += c.tokens;
                m.truncated += usize::from(c.truncated);
                asr_sum.add_assign(&c.asr_grads);
                if let Some(t) = &c.tts_grads {
                    tts_sum.add_assign(t);
                }
            }
            if self.strategy.update_asr {
                asr_parts.push(asr_sum);
            }
            if update_tts {
                tts_parts.push(tts_sum);
            }
        }

        m.total = m.asr_loss + m.tts_loss + m.guided_loss + m.chain_loss;
        if self.strategy.update_asr {
            m.asr_update_norm = self.asr_update(asr, asr_parts)?;
        }
        if update_tts {
            m.tts_update_norm = self.tts_accumulate(tts, tts_parts)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Size of both the paired and the unpaired sub-batch.
    pub batch_size: usize,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            lr_decay: 0.5,
        }
    }
}

/// Per-epoch adaptation record; loss terms are per token (ASR terms) or per
/// utterance (TTS terms).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochLog {
    pub epoch: usize,
    pub asr_loss: f64,
    pub tts_loss: f64,
    pub guided_loss: f64,
    pub chain_loss: f64,
    pub total: f64,
    pub steps: usize,
    pub asr_updates: usize,
    pub tts_updates: usize,
    pub truncated: usize,
    /// Mean chain loss per token over mean TTS loss per utterance.
    pub chain_to_tts_ratio: Option<f64>,
    pub dev_wer: Option<f64>,
}

/// Paired material and unpaired text for an adaptation run. Unpaired texts
/// are matched with speakers from `pool` afresh every epoch.
pub struct AdaptData<'a> {
    pub paired: &'a [PairedItem],
    pub texts: &'a [TextItem],
    pub pool: &'a [SpeakerEmbedding],
    pub dev: &'a [crate::corpus::Utterance],
}

/// Runs `cfg.epochs` epochs over the unpaired texts, drawing a paired
/// sub-batch of the same size for every step.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptation(
    asr: &mut Asr,
    tts: &mut Tts,
    data: &AdaptData,
    strategy: TrainStrategy,
    balance: GradBalanceConfig,
    cfg: &AdaptConfig,
    mask_fill: f64,
    run_seed: u64,
    mut on_epoch: impl FnMut(&AdaptEpochLog),
) -> Result<Vec<AdaptEpochLog>> {
    use rand::seq::SliceRandom;
    if data.texts.is_empty() {
        bail!(Argument, "no unpaired text to adapt on");
    }
    if data.paired.is_empty() && strategy.mode == AdaptMode::DomainAdapt {
        bail!(Argument, "domain adaptation needs paired data");
    }
    let mut trainer = ChainTrainer::new(asr, tts, strategy, balance, mask_fill, run_seed)?;
    let bs = cfg.batch_size.max(1);
    let mut history = Vec::new();
    let mut paired_order: Vec<usize> = (0..data.paired.len()).collect();
    let mut paired_pos = paired_order.len();
    let mut paired_round = 0u64;
    for epoch in 1..=cfg.epochs {
        let unpaired = make_unpaired(data.texts, data.pool, seed::derive(run_seed, "assign", epoch as u64))?;
        let mut order: Vec<usize> = (0..unpaired.len()).collect();
        order.shuffle(&mut seed::derived_rng(run_seed, "unpaired-shuffle", epoch as u64));
        let mut log = AdaptEpochLog {
            epoch,
            asr_loss: 0.0,
            tts_loss: 0.0,
            guided_loss: 0.0,
            chain_loss: 0.0,
            total: 0.0,
            steps: 0,
            asr_updates: 0,
            tts_updates: 0,
            truncated: 0,
            chain_to_tts_ratio: None,
            dev_wer: None,
        };
        let (mut asr_tokens, mut chain_tokens, mut tts_utts) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(bs) {
            let mut batch = ChainBatch {
                paired: Vec::with_capacity(bs),
                unpaired: chunk.iter().map(|&i| unpaired[i].clone()).collect(),
            };
            while batch.paired.len() < bs && !data.paired.is_empty() {
                if paired_pos == paired_order.len() {
                    paired_order.shuffle(&mut seed::derived_rng(run_seed, "paired-shuffle", paired_round));
                    paired_round += 1;
                    paired_pos = 0;
                }
                batch.paired.push(data.paired[paired_order[paired_pos]].clone());
                paired_pos += 1;
            }
            let m = trainer.step(asr, tts, &batch)?;
            log.asr_loss += m.asr_loss;
            log.tts_loss += m.tts_loss;
            log.guided_loss += m.guided_loss;
            log.chain_loss += m.chain_loss;
            log.total += m.total;
            log.truncated += m.truncated;
            log.steps += 1;
            log.asr_updates += usize::from(m.asr_update_norm.is_some());
            log.tts_updates += usize::from(m.tts_update_norm.is_some());
            asr_tokens += m.asr_tokens;
            chain_tokens += m.chain_tokens;
            if m.tts_loss > 0.0 {
                tts_utts += batch.paired.len();
            }
        }
        log.asr_loss /= asr_tokens.max(1) as f64;
        log.chain_loss /= chain_tokens.max(1) as f64;
        if tts_utts > 0 {
            log.tts_loss /= tts_utts as f64;
            log.guided_loss /= tts_utts as f64;
            log.chain_to_tts_ratio = Some(log.chain_loss / log.tts_loss);
        }
        log.total = log.asr_loss + log.tts_loss + log.guided_loss + log.chain_loss;
        if !data.dev.is_empty() {
            log.dev_wer = Some(crate::eval::asr_wer(asr, data.dev)?.wer_percent);
        }
        on_epoch(&log);
        history.push(log);
        trainer.decay_learning_rates(cfg.lr_decay);
    }
    Ok(history)
}
