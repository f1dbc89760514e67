//! Tacotron-style spectrogram generator conditioned on a speaker embedding.
//!
//! Encoder: phoneme embedding, 1-D convolutions, a bidirectional LSTM, then
//! the speaker embedding appended to every state. Decoder: a one-layer
//! pre-net on the previous frame, location-aware attention queried with the
//! previous decoder state, an LSTM, and linear heads emitting
//! `reduction_factor` frames plus a stop logit per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid_scalar, Bind, Graph, Var};
use crate::checkpoint;
use crate::corpus::{Spectrogram, TokenSequence, VocabKind, Vocabulary};
use crate::error::{bail, Result};
use crate::nn::{AttentionKeys, BiLstm, Conv1d, Embedding, Linear, LocationAttention, Lstm, LstmState};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "tts";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedAttentionConfig {
    pub sigma: f64,
    pub weight: f64,
}

impl Default for GuidedAttentionConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsConfig {
    pub mel_bins: usize,
    pub phoneme_embed_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_conv_filters: usize,
    pub enc_conv_kernel: usize,
    pub enc_birnn_units: usize,
    pub speaker_dim: usize,
    pub prenet_units: usize,
    /// Dropout on the pre-net output during teacher-forced training only.
    pub prenet_dropout: f64,
    /// Dropout after each encoder convolution, teacher-forced training only.
    pub encoder_dropout: f64,
    pub dec_units: usize,
    pub attention_dim: usize,
    pub attention_channels: usize,
    pub attention_kernel: usize,
    pub reduction_factor: usize,
    pub stop_threshold: f64,
    /// Generation cap per input phoneme.
    pub max_frames_per_phoneme: usize,
    /// Absolute generation cap; overrides the per-phoneme cap when set.
    pub max_frames: Option<usize>,
    pub grad_clip: f64,
    pub guided_attention: GuidedAttentionConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            mel_bins: 20,
            phoneme_embed_dim: 32,
            enc_conv_layers: 2,
            enc_conv_filters: 32,
            enc_conv_kernel: 5,
            enc_birnn_units: 32,
            speaker_dim: 16,
            prenet_units: 32,
            prenet_dropout: 0.5,
            encoder_dropout: 0.0,
            dec_units: 96,
            attention_dim: 32,
            attention_channels: 8,
            attention_kernel: 15,
            reduction_factor: 2,
            stop_threshold: 0.5,
            max_frames_per_phoneme: 10,
            max_frames: None,
            grad_clip: 1.0,
            guided_attention: GuidedAttentionConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 8,
            epochs: 60,
            init_seed: 0,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_clip > 0.0) {
            bail!(Config, "grad_clip must be positive");
        }
        if self.reduction_factor == 0 {
            bail!(Config, "reduction_factor must be at least 1");
        }
        if let Some(m) = self.max_frames {
            if m < self.reduction_factor {
                bail!(Config, "max_frames must be at least reduction_factor");
            }
        }
        if self.max_frames_per_phoneme == 0 {
            bail!(Config, "max_frames_per_phoneme must be positive");
        }
        if !(self.guided_attention.sigma > 0.0) || self.guided_attention.weight < 0.0 {
            bail!(Config, "guided attention needs sigma > 0 and weight >= 0");
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            bail!(Config, "stop_threshold must lie in [0, 1]");
        }
        if self.enc_conv_kernel.is_multiple_of(2) || self.attention_kernel.is_multiple_of(2) {
            bail!(Config, "convolution kernels must be odd");
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) || !(0.0..1.0).contains(&self.encoder_dropout) {
            bail!(Config, "dropout rates must be in [0, 1)");
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        2 * self.enc_birnn_units + self.speaker_dim
    }
}

/// Result of a teacher-forced pass or of free-running generation.
pub struct TtsOutput {
    /// Predicted frames, `num_frames × mel_bins`.
    pub spec: Var,
    pub stop_logits: Var,
    /// Attention weights, decoder steps × encoder steps.
    pub alignment: Var,
    pub steps: usize,
    pub num_frames: usize,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TtsLoss {
    pub total: Var,
    pub mse: f64,
    pub mae: f64,
    pub bce: f64,
}

#[derive(Clone, Debug)]
pub struct Tts {
    cfg: TtsConfig,
    params: ParamStore,
    embed: Embedding,
    convs: Vec<Conv1d>,
    birnn: BiLstm,
    prenet: Linear,
    attention: LocationAttention,
    lstm: Lstm,
    frames_out: Linear,
    stop_out: Linear,
}

/// Guided-attention penalty weights `1 − exp(−(n/N − t/T)² / 2σ²)`.
pub fn guided_attention_weights(steps: usize, enc_len: usize, sigma: f64) -> Tensor {
    let mut w = Tensor::zeros(steps, enc_len);
    for t in 0..steps {
        for n in 0..enc_len {
            let d = n as f64 / enc_len as f64 - t as f64 / steps as f64;
            w.set(t, n, 1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    w
}

/// Mean of `A ⊙ W` over all cells.
pub fn guided_attention_loss(align: &Tensor, cfg: &GuidedAttentionConfig) -> f64 {
    let w = guided_attention_weights(align.rows(), align.cols(), cfg.sigma);
    let s: f64 = align.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    s / align.len() as f64
}

/// Differentiable guided-attention loss (unweighted).
pub fn guided_attention_var(g: &mut Graph, align: Var, sigma: f64) -> Var {
    let (t, n) = g.shape(align);
    let w = g.input(guided_attention_weights(t, n, sigma));
    let p = g.mul(align, w);
    g.mean(p)
}

impl Tts {
    pub fn new(cfg: TtsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::derived_rng(cfg.init_seed, "tts-init", 0);
        let mut p = ParamStore::new();
        let vocab = Vocabulary::phonemes().len();
        let embed = Embedding::new(&mut p, "enc.embed", vocab, cfg.phoneme_embed_dim, &mut rng);
        let mut convs = Vec::new();
        let mut width = cfg.phoneme_embed_dim;
        for l in 0..cfg.enc_conv_layers {
            convs.push(Conv1d::new(
                &mut p,
                &format!("enc.conv{l}"),
                width,
                cfg.enc_conv_filters,
                cfg.enc_conv_kernel,
                true,
                &mut rng,
            ));
            width = cfg.enc_conv_filters;
        }
        let birnn = BiLstm::new(&mut p, "enc.birnn", width, cfg.enc_birnn_units, &mut rng);
        let state_dim = cfg.state_dim();
        let prenet = Linear::new(&mut p, "dec.prenet", cfg.mel_bins, cfg.prenet_units, true, &mut rng);
        let attention = LocationAttention::new(
            &mut p,
            "dec.att",
            cfg.dec_units,
            state_dim,
            cfg.attention_dim,
            cfg.attention_channels,
            cfg.attention_kernel,
            &mut rng,
        );
        let lstm = Lstm::new(
            &mut p,
            "dec.lstm",
            cfg.prenet_units + state_dim,
            cfg.dec_units,
            &mut rng,
        );
        let head_in = cfg.dec_units + state_dim;
        let frames_out = Linear::new(
            &mut p,
            "dec.frames",
            head_in,
            cfg.reduction_factor * cfg.mel_bins,
            true,
            &mut rng,
        );
        let stop_out = Linear::new(&mut p, "dec.stop", head_in, 1, true, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            embed,
            convs,
            birnn,
            prenet,
            attention,
            lstm,
            frames_out,
            stop_out,
        })
    }

    pub fn config(&self) -> &TtsConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut TtsConfig {
        &mut self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.cfg, serde_json::Value::Null, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let l = checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(l.config()?)?;
        l.restore_into(&mut model.params)?;
        Ok(model)
    }

    /// Encoder states with the speaker embedding appended to every row.
    pub fn encode(&self, g: &mut Graph, b: Bind, phonemes: &TokenSequence, spk: Var) -> Result<Var> {
        self.encode_with_dropout(g, b, phonemes, spk, None)
    }

    fn encode_with_dropout(
        &self,
        g: &mut Graph,
        b: Bind,
        phonemes: &TokenSequence,
        spk: Var,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        if phonemes.kind() != VocabKind::Phoneme {
            bail!(Vocabulary, "TTS input must be a phoneme sequence");
        }
        let (r, d) = g.shape(spk);
        if r != 1 || d != self.cfg.speaker_dim {
            bail!(
                Shape,
                "speaker embedding is {r}x{d}, expected 1x{}",
                self.cfg.speaker_dim
            );
        }
        let mut x = self.embed.forward(g, b, phonemes.ids());
        let p = self.cfg.encoder_dropout;
        let mut rng = dropout_seed
            .filter(|_| p > 0.0)
            .map(|s| seed::derived_rng(s, "tts-encoder", 0));
        for conv in &self.convs {
            x = conv.forward(g, b, x);
            x = g.relu(x);
            if let Some(rng) = rng.as_mut() {
                let (rows, cols) = g.shape(x);
                let data = (0..rows * cols)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect();
                let m = g.input(Tensor::from_vec(rows, cols, data));
                x = g.mul(x, m);
            }
        }
        let h = self.birnn.forward(g, b, x);
        let spk_rows = g.repeat_row(spk, phonemes.len());
        Ok(g.hcat(&[h, spk_rows]))
    }

    pub fn max_frames_for(&self, phonemes: usize) -> usize {
        self.cfg
            .max_frames
            .unwrap_or(self.cfg.max_frames_per_phoneme * phonemes)
            .max(self.cfg.reduction_factor)
    }

    fn prenet_masks(&self, steps: usize, dropout_seed: Option<u64>) -> Vec<Option<Tensor>> {
        let p = self.cfg.prenet_dropout;
        match dropout_seed {
            Some(s) if p > 0.0 => {
                let mut rng = seed::rng(s);
                (0..steps)
                    .map(|_| {
                        let data = (0..self.cfg.prenet_units)
                            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                            .collect();
                        Some(Tensor::from_vec(1, self.cfg.prenet_units, data))
                    })
                    .collect()
            }
            _ => vec![None; steps],
        }
    }

    /// One decoder step from the previous frame (`1×mel`). Returns
    /// `(frames 1×(r·mel), stop 1×1, weights 1×N, new state)`.
    fn step(
        &self,
        g: &mut Graph,
        b: Bind,
        mem: AttentionKeys,
        prev_frame: Var,
        state: LstmState,
        prev_alpha: Var,
        mask: Option<&Tensor>,
    ) -> (Var, Var, Var, LstmState) {
        let pre = self.prenet.forward(g, b, prev_frame);
        let mut pre = g.relu(pre);
        if let Some(m) = mask {
            let m = g.input(m.clone());
            pre = g.mul(pre, m);
        }
        let (ctx, alpha) = self.attention.step(g, b, state.h, mem, prev_alpha);
        let x = g.hcat(&[pre, ctx]);
        let s = self.lstm.step(g, b, x, state);
        let head = g.hcat(&[s.h, ctx]);
        let frames = self.frames_out.forward(g, b, head);
        let stop = self.stop_out.forward(g, b, head);
        (frames, stop, alpha, s)
    }

    fn initial(&self, g: &mut Graph, n: usize) -> (Var, LstmState, Var) {
        let frame = g.input(Tensor::zeros(1, self.cfg.mel_bins));
        let state = self.lstm.zero_state(g);
        let mut a = Tensor::zeros(1, n);
        a.set(0, 0, 1.0);
        (frame, state, g.input(a))
    }

    /// Teacher-forced pass: step `i` consumes the last ground-truth frame of
    /// group `i − 1`.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        b: Bind,
        phonemes: &TokenSequence,
        spk: Var,
        target: &Spectrogram,
        dropout_seed: Option<u64>,
    ) -> Result<TtsOutput> {
        if target.mel_bins() != self.cfg.mel_bins {
            bail!(
                Shape,
                "target has {} bins, model expects {}",
                target.mel_bins(),
                self.cfg.mel_bins
            );
        }
        let enc = self.encode_with_dropout(g, b, phonemes, spk, dropout_seed)?;
        let mem = self.attention.prepare(g, b, enc);
        let r = self.cfg.reduction_factor;
        let frames = target.num_frames();
        let steps = frames.div_ceil(r);
        let tgt = g.input(target.frames().clone());
        let masks = self.prenet_masks(steps, dropout_seed);
        let (mut prev, mut state, mut alpha) = self.initial(g, phonemes.len());
        let (mut outs, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..steps {
            if i > 0 {
                prev = g.row(tgt, i * r - 1);
            }
            let (f, s, a, st) = self.step(g, b, mem, prev, state, alpha, masks[i].as_ref());
            outs.push(f);
            stops.push(s);
            aligns.push(a);
            state = st;
            alpha = a;
        }
        self.assemble(g, outs, stops, aligns, frames, false)
    }

    fn assemble(
        &self,
        g: &mut Graph,
        outs: Vec<Var>,
        stops: Vec<Var>,
        aligns: Vec<Var>,
        frames: usize,
        truncated: bool,
    ) -> Result<TtsOutput> {
        let steps = outs.len();
        let all = g.vcat(&outs);
        let grid = g.reshape(all, steps * self.cfg.reduction_factor, self.cfg.mel_bins);
        let spec = g.slice_rows(grid, 0, frames);
        let stop_logits = g.vcat(&stops);
        let stop_logits = g.reshape(stop_logits, 1, steps);
        let alignment = g.vcat(&aligns);
        Ok(TtsOutput {
            spec,
            stop_logits,
            alignment,
            steps,
            num_frames: frames,
            truncated,
        })
    }

    /// Free-running generation: each step consumes its own previous output.
    /// Nothing is detached, so the output carries gradients back to every
    /// TTS parameter when the binding is trainable.
    pub fn generate(&self, g: &mut Graph, b: Bind, phonemes: &TokenSequence, spk: Var) -> Result<TtsOutput> {
        let enc = self.encode(g, b, phonemes, spk)?;
        let mem = self.attention.prepare(g, b, enc);
        let r = self.cfg.reduction_factor;
        let mel = self.cfg.mel_bins;
        let max_frames = self.max_frames_for(phonemes.len());
        let max_steps = max_frames.div_ceil(r);
        let (mut prev, mut state, mut alpha) = self.initial(g, phonemes.len());
        let (mut outs, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        let mut stopped = false;
        for _ in 0..max_steps {
            let (f, s, a, st) = self.step(g, b, mem, prev, state, alpha, None);
            outs.push(f);
            stops.push(s);
            aligns.push(a);
            state = st;
            alpha = a;
            prev = g.slice_cols(f, (r - 1) * mel, r * mel);
            if sigmoid_scalar(g.scalar(s)) > self.cfg.stop_threshold {
                stopped = true;
                break;
            }
        }
        let frames = (outs.len() * r).min(max_frames);
        self.assemble(g, outs, stops, aligns, frames, !stopped)
    }

    /// `L = MSE + MAE + BCE` against a target spectrogram; the stop label is
    /// positive on the final decoder step only.
    pub fn loss(&self, g: &mut Graph, out: &TtsOutput, target: &Spectrogram) -> Result<TtsLoss> {
        let (rows, cols) = g.shape(out.spec);
        if rows != target.num_frames() || cols != target.mel_bins() {
            bail!(
                Shape,
                "prediction {rows}x{cols} vs target {}x{}",
                target.num_frames(),
                target.mel_bins()
            );
        }
        let tgt = g.input(target.frames().clone());
        let diff = g.sub(out.spec, tgt);
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let ab = g.abs(diff);
        let mae = g.mean(ab);
        let mut labels = Tensor::zeros(1, out.steps);
        labels.set(0, out.steps - 1, 1.0);
        let bce_sum = g.bce_with_logits_sum(out.stop_logits, labels);
        let bce = g.scale(bce_sum, 1.0 / out.steps as f64);
        let partial = g.add(mse, mae);
        let total = g.add(partial, bce);
        Ok(TtsLoss {
            total,
            mse: g.scalar(mse),
            mae: g.scalar(mae),
            bce: g.scalar(bce),
        })
    }

    /// Generation without gradients: returns the spectrogram, alignment and
    /// truncation flag.
    pub fn synthesize(&self, phonemes: &TokenSequence, spk: &[f64]) -> Result<(Spectrogram, Tensor, bool)> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let s = g.input(Tensor::row_vector(spk));
        let out = self.generate(&mut g, b, phonemes, s)?;
        let spec = Spectrogram::new(g.value(out.spec).clone(), 10.0)?;
        Ok((spec, g.value(out.alignment).clone(), out.truncated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    fn tiny() -> TtsConfig {
        TtsConfig {
            phoneme_embed_dim: 4,
            enc_conv_layers: 1,
            enc_conv_filters: 3,
            enc_conv_kernel: 3,
            enc_birnn_units: 3,
            speaker_dim: 2,
            prenet_units: 3,
            dec_units: 4,
            attention_dim: 3,
            attention_channels: 2,
            attention_kernel: 3,
            ..Default::default()
        }
    }

    fn phon(s: &str) -> TokenSequence {
        TokenSequence::parse(s, VocabKind::Phoneme, Domain::Source).unwrap()
    }

    #[test]
    fn encoder_state_dim_is_concatenation() {
        let cfg = TtsConfig::default();
        assert_eq!(cfg.state_dim(), 80);
        let tts = Tts::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let spk = g.input(Tensor::row_vector(&[0.25; 16]));
        let e = tts.encode(&mut g, b, &phon("B AH K"), spk).unwrap();
        assert_eq!(g.shape(e), (3, 80));
        for r in 0..3 {
            assert_eq!(&g.value(e).row(r)[64..], &[0.25; 16]);
        }
    }

    #[test]
    fn different_embeddings_only_change_the_appended_block() {
        let tts = Tts::new(tiny()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let s1 = g.input(Tensor::row_vector(&[1.0, 0.0]));
        let s2 = g.input(Tensor::row_vector(&[0.0, 0.0]));
        let e1 = tts.encode(&mut g, b, &phon("B AH"), s1).unwrap();
        let e2 = tts.encode(&mut g, b, &phon("B AH"), s2).unwrap();
        let (v1, v2) = (g.value(e1), g.value(e2));
        for r in 0..2 {
            assert_eq!(v1.row(r)[..6], v2.row(r)[..6]);
            assert_ne!(v1.row(r)[6..], v2.row(r)[6..]);
            assert_eq!(v2.row(r)[6..], [0.0, 0.0]);
        }
    }

    #[test]
    fn embedding_dim_mismatch_is_shape_error() {
        let tts = Tts::new(tiny()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let s = g.input(Tensor::row_vector(&[1.0, 0.0, 0.0]));
        assert!(matches!(
            tts.encode(&mut g, b, &phon("B"), s),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn teacher_forced_step_count() {
        let tts = Tts::new(tiny()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), true);
        let spk = g.input(Tensor::row_vector(&[0.6, 0.8]));
        let target = Spectrogram::new(Tensor::filled(10, 20, 0.1), 10.0).unwrap();
        let out = tts
            .teacher_forced(&mut g, b, &phon("B AH K"), spk, &target, None)
            .unwrap();
        assert_eq!(out.steps, 5);
        assert_eq!(g.shape(out.stop_logits), (1, 5));
        assert_eq!(g.shape(out.spec), (10, 20));
        let a = g.value(out.alignment);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_decomposes_exactly() {
        let tts = Tts::new(tiny()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), true);
        let spk = g.input(Tensor::row_vector(&[0.6, 0.8]));
        let target = Spectrogram::new(Tensor::filled(7, 20, 0.3), 10.0).unwrap();
        let out = tts
            .teacher_forced(&mut g, b, &phon("B AH"), spk, &target, None)
            .unwrap();
        let l = tts.loss(&mut g, &out, &target).unwrap();
        assert_eq!(g.scalar(l.total) - (l.mse + l.mae + l.bce), 0.0);
    }

    #[test]
    fn zero_stop_threshold_stops_after_one_step() {
        let mut cfg = tiny();
        cfg.stop_threshold = 0.0;
        let tts = Tts::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let spk = g.input(Tensor::row_vector(&[0.6, 0.8]));
        let out = tts.generate(&mut g, b, &phon("B AH K"), spk).unwrap();
        assert_eq!((out.steps, out.num_frames, out.truncated), (1, 2, false));
    }

    #[test]
    fn never_stopping_model_is_truncated() {
        let mut cfg = tiny();
        cfg.stop_threshold = 1.0;
        cfg.max_frames = Some(8);
        let tts = Tts::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = g.bind(tts.params(), false);
        let spk = g.input(Tensor::row_vector(&[0.6, 0.8]));
        let out = tts.generate(&mut g, b, &phon("B AH K"), spk).unwrap();
        assert_eq!(g.shape(out.spec).0, 8);
        assert!(out.truncated);
        let (s1, _, _) = tts.synthesize(&phon("B AH K"), &[0.6, 0.8]).unwrap();
        let (s2, _, _) = tts.synthesize(&phon("B AH K"), &[0.6, 0.8]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn guided_attention_on_diagonal_is_zero() {
        let cfg = GuidedAttentionConfig::default();
        assert_eq!(guided_attention_loss(&Tensor::identity(8), &cfg), 0.0);
        let mut p = Tensor::zeros(4, 4);
        for (t, n) in [(0, 1), (1, 0), (2, 2), (3, 3)] {
            p.set(t, n, 1.0);
        }
        assert!(guided_attention_loss(&p, &cfg) > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny();
        cfg.grad_clip = 0.0;
        assert!(Tts::new(cfg).is_err());
        let mut cfg = tiny();
        cfg.max_frames = Some(1);
        assert!(Tts::new(cfg).is_err());
    }
}
