//! Listen-attend-spell style character recognizer.
//!
//! Encoder: two 3×3 convolutions, each followed by 2×2 max pooling, then a
//! stack of bidirectional LSTMs. Decoder: location-aware attention queried
//! with the previous decoder state, an LSTM stack fed with the previous
//! character and the current context, and a softmax over characters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_row, Bind, Graph, Var};
use crate::checkpoint;
use crate::corpus::{Spectrogram, TokenSequence, VocabKind, Vocabulary, EOS, SOS};
use crate::error::{bail, Result};
use crate::nn::{max_pool_2x2, AttentionKeys, BiLstm, Conv2d, Embedding, Linear, LocationAttention, Lstm, LstmState};
use crate::optim::AdaDeltaConfig;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{argmax, Tensor};

pub const CHECKPOINT_KIND: &str = "asr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub conv_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    /// Use the maximum width for every mask instead of drawing it.
    pub fixed_width: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrConfig {
    pub mel_bins: usize,
    pub conv_filters: (usize, usize),
    pub encoder_layers: usize,
    pub encoder_units: usize,
    pub decoder_layers: usize,
    pub decoder_units: usize,
    pub embed_dim: usize,
    pub attention: AttentionConfig,
    pub downsample_factor: usize,
    pub grad_clip: f64,
    pub beam_size: usize,
    /// Rank finished hypotheses by score / length.
    pub length_norm: bool,
    pub specaug: MaskPolicy,
    pub dropout: f64,
    pub optimizer: AdaDeltaConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_seed: u64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            mel_bins: 20,
            conv_filters: (8, 16),
            encoder_layers: 1,
            encoder_units: 64,
            decoder_layers: 1,
            decoder_units: 96,
            embed_dim: 16,
            attention: AttentionConfig {
                dim: 32,
                conv_channels: 8,
                kernel: 15,
            },
            downsample_factor: 4,
            grad_clip: 5.0,
            beam_size: 20,
            length_norm: true,
            specaug: MaskPolicy {
                num_time_masks: 2,
                max_time_width: 4,
                num_freq_masks: 2,
                max_freq_width: 3,
                fixed_width: false,
            },
            dropout: 0.0,
            optimizer: AdaDeltaConfig::default(),
            batch_size: 8,
            max_epochs: 40,
            patience: 5,
            init_seed: 0,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 4 {
            bail!(Config, "downsample_factor must equal the 2x2 pooling product (4)");
        }
        if !(self.grad_clip > 0.0) {
            bail!(Config, "grad_clip must be positive");
        }
        if self.beam_size == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            bail!(Config, "beam_size and layer counts must be positive");
        }
        if self.attention.kernel.is_multiple_of(2) {
            bail!(Config, "attention kernel must be odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Encoder time length for `frames` input frames.
pub fn encoded_length(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Masks random time and frequency bands with `fill`.
pub fn apply_masks(spec: &Spectrogram, policy: &MaskPolicy, fill: f64, rng_seed: u64) -> Result<Spectrogram> {
    let (t, f) = (spec.num_frames(), spec.mel_bins());
    if policy.num_time_masks > 0 && policy.max_time_width > t {
        bail!(Config, "time mask width {} exceeds {t} frames", policy.max_time_width);
    }
    if policy.num_freq_masks > 0 && policy.max_freq_width > f {
        bail!(
            Config,
            "frequency mask width {} exceeds {f} bins",
            policy.max_freq_width
        );
    }
    let mut rng = seed::rng(rng_seed);
    let mut frames = spec.frames().clone();
    let width = |rng: &mut rand_chacha::ChaCha8Rng, max: usize| {
        if policy.fixed_width {
            max
        } else {
            rng.random_range(0..=max)
        }
    };
    for _ in 0..policy.num_time_masks {
        let w = width(&mut rng, policy.max_time_width);
        let start = rng.random_range(0..=t - w);
        for r in start..start + w {
            frames.row_mut(r).fill(fill);
        }
    }
    for _ in 0..policy.num_freq_masks {
        let w = width(&mut rng, policy.max_freq_width);
        let start = rng.random_range(0..=f - w);
        for r in 0..t {
            frames.row_mut(r)[start..start + w].fill(fill);
        }
    }
    Spectrogram::new(frames, spec.frame_shift_ms())
}

#[derive(Clone, Debug)]
pub struct Asr {
    cfg: AsrConfig,
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    encoder: Vec<BiLstm>,
    embed: Embedding,
    decoder: Vec<Lstm>,
    attention: LocationAttention,
    output: Linear,
}

/// Decoder recurrent state between steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<LstmState>,
    alpha: Var,
}

/// Teacher-forced evaluation of one utterance.
pub struct AsrForward {
    /// Summed cross entropy, 1×1.
    pub loss: Var,
    pub tokens: usize,
    pub correct: usize,
    /// Decoder steps × encoder steps.
    pub alignment: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Character ids without framing symbols.
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities, including the end symbol if emitted.
    pub score: f64,
    pub finished: bool,
    pub alignment: Tensor,
}

impl Hypothesis {
    pub fn normalized_score(&self) -> f64 {
        let len = self.ids.len() + usize::from(self.finished);
        self.score / len.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let v = Vocabulary::characters();
        self.ids.iter().map(|&i| v.symbol(i).unwrap_or("?")).collect()
    }

    pub fn to_sequence(&self, domain: crate::corpus::Domain) -> Option<TokenSequence> {
        TokenSequence::new(self.ids.clone(), VocabKind::Character, domain).ok()
    }
}

impl Asr {
    pub fn new(cfg: AsrConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::derived_rng(cfg.init_seed, "asr-init", 0);
        let mut p = ParamStore::new();
        let (c1, c2) = cfg.conv_filters;
        let conv1 = Conv2d::new(&mut p, "enc.conv1", 1, c1, &mut rng);
        let conv2 = Conv2d::new(&mut p, "enc.conv2", c1, c2, &mut rng);
        let pooled_bins = encoded_length(cfg.mel_bins);
        let mut in_dim = pooled_bins * c2;
        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            let layer = BiLstm::new(&mut p, &format!("enc.blstm{l}"), in_dim, cfg.encoder_units, &mut rng);
            in_dim = layer.out_dim();
            encoder.push(layer);
        }
        let enc_dim = in_dim;
        let vocab = Vocabulary::characters().len();
        let embed = Embedding::new(&mut p, "dec.embed", vocab, cfg.embed_dim, &mut rng);
        let mut decoder = Vec::new();
        let mut dec_in = cfg.embed_dim + enc_dim;
        for l in 0..cfg.decoder_layers {
            decoder.push(Lstm::new(
                &mut p,
                &format!("dec.lstm{l}"),
                dec_in,
                cfg.decoder_units,
                &mut rng,
            ));
            dec_in = cfg.decoder_units;
        }
        let attention = LocationAttention::new(
            &mut p,
            "dec.att",
            cfg.decoder_units,
            enc_dim,
            cfg.attention.dim,
            cfg.attention.conv_channels,
            cfg.attention.kernel,
            &mut rng,
        );
        // Small output weights give near-uniform initial predictions.
        let output = Linear::with_gain(&mut p, "dec.out", cfg.decoder_units + enc_dim, vocab, 0.1, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            conv1,
            conv2,
            encoder,
            embed,
            decoder,
            attention,
            output,
        })
    }

    pub fn config(&self) -> &AsrConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        Vocabulary::characters().len()
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

    /// Encodes a `T×mel` spectrogram node into `ceil(ceil(T/2)/2)` states.
    pub fn encode(&self, g: &mut Graph, b: Bind, spec: Var) -> Result<Var> {
        let (t, f) = g.shape(spec);
        if f != self.cfg.mel_bins {
            bail!(Shape, "spectrogram has {f} bins, model expects {}", self.cfg.mel_bins);
        }
        if t == 0 {
            bail!(Shape, "empty spectrogram");
        }
        let x = g.reshape(spec, t * f, 1);
        let x = self.conv1.forward(g, b, x, t, f);
        let x = g.relu(x);
        let (x, t1, f1) = max_pool_2x2(g, x, t, f);
        let x = self.conv2.forward(g, b, x, t1, f1);
        let x = g.relu(x);
        let (x, t2, f2) = max_pool_2x2(g, x, t1, f1);
        let c2 = self.cfg.conv_filters.1;
        let mut h = g.reshape(x, t2, f2 * c2);
        for layer in &self.encoder {
            h = layer.forward(g, b, h);
        }
        Ok(h)
    }

    pub fn encode_spectrogram(&self, g: &mut Graph, b: Bind, spec: &Spectrogram) -> Result<Var> {
        let x = g.input(spec.frames().clone());
        self.encode(g, b, x)
    }

    pub fn prepare_attention(&self, g: &mut Graph, b: Bind, enc: Var) -> AttentionKeys {
        self.attention.prepare(g, b, enc)
    }

    pub fn initial_state(&self, g: &mut Graph, enc_steps: usize) -> DecoderState {
        let layers = self.decoder.iter().map(|l| l.zero_state(g)).collect();
        let mut a = Tensor::zeros(1, enc_steps);
        a.set(0, 0, 1.0);
        DecoderState {
            layers,
            alpha: g.input(a),
        }
    }

    /// One decoder step: returns `(logits 1×V, new state)`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        b: Bind,
        mem: AttentionKeys,
        state: &DecoderState,
        prev_token: usize,
        dropout_mask: Option<&Tensor>,
    ) -> (Var, DecoderState) {
        let top = state.layers.last().unwrap().h;
        let (ctx, alpha) = self.attention.step(g, b, top, mem, state.alpha);
        let emb = self.embed.forward(g, b, &[prev_token]);
        let mut x = g.hcat(&[emb, ctx]);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (lstm, s) in self.decoder.iter().zip(&state.layers) {
            let ns = lstm.step(g, b, x, *s);
            x = ns.h;
            layers.push(ns);
        }
        let mut feat = g.hcat(&[x, ctx]);
        if let Some(mask) = dropout_mask {
            let m = g.input(mask.clone());
            feat = g.mul(feat, m);
        }
        let logits = self.output.forward(g, b, feat);
        (logits, DecoderState { layers, alpha })
    }

    fn dropout_masks(&self, steps: usize, seed: Option<u64>) -> Vec<Option<Tensor>> {
        let p = self.cfg.dropout;
        match seed {
            Some(s) if p > 0.0 => {
                let mut rng = seed::rng(s);
                let width = self.output.in_dim;
                (0..steps)
                    .map(|_| {
                        let data = (0..width)
                            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                            .collect();
                        Some(Tensor::from_vec(1, width, data))
                    })
                    .collect()
            }
            _ => vec![None; steps],
        }
    }

    /// Teacher-forced loss on an encoded utterance: `−Σ log p(y_i | y_<i, X)`
    /// over the target followed by the end symbol. `dropout_seed` enables
    /// dropout on the output layer input.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        b: Bind,
        enc: Var,
        target: &TokenSequence,
        dropout_seed: Option<u64>,
    ) -> Result<AsrForward> {
        if target.kind() != VocabKind::Character {
            bail!(Vocabulary, "ASR targets must be character sequences");
        }
        if target.is_empty() {
            bail!(Argument, "empty target");
        }
        let n = g.shape(enc).0;
        let mem = self.prepare_attention(g, b, enc);
        let mut state = self.initial_state(g, n);
        let mut outputs: Vec<usize> = target.ids().to_vec();
        outputs.push(EOS);
        let masks = self.dropout_masks(outputs.len(), dropout_seed);
        let mut prev = SOS;
        let mut logits = Vec::with_capacity(outputs.len());
        let mut alignment = Tensor::zeros(outputs.len(), n);
        for (i, &y) in outputs.iter().enumerate() {
            let (l, s) = self.decoder_step(g, b, mem, &state, prev, masks[i].as_ref());
            alignment.row_mut(i).copy_from_slice(g.value(s.alpha).data());
            logits.push(l);
            state = s;
            prev = y;
        }
        let all = g.vcat(&logits);
        let loss = g.cross_entropy_sum(all, &outputs);
        let lv = g.value(all);
        let correct = outputs
            .iter()
            .enumerate()
            .filter(|(r, &y)| lv.argmax_row(*r) == y)
            .count();
        Ok(AsrForward {
            loss,
            tokens: outputs.len(),
            correct,
            alignment,
        })
    }

    /// Convenience: encode + teacher-forced loss on a fixed spectrogram.
    pub fn loss(&self, g: &mut Graph, b: Bind, spec: &Spectrogram, target: &TokenSequence) -> Result<AsrForward> {
        let enc = self.encode_spectrogram(g, b, spec)?;
        self.teacher_forced(g, b, enc, target, None)
    }

    fn max_decode_len(&self, enc_steps: usize) -> usize {
        2 * enc_steps + 5
    }

    /// Argmax decoding until the end symbol or the length limit.
    pub fn greedy_decode(&self, spec: &Spectrogram) -> Result<Hypothesis> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let enc = self.encode_spectrogram(&mut g, b, spec)?;
        let n = g.shape(enc).0;
        let mem = self.prepare_attention(&mut g, b, enc);
        let mut state = self.initial_state(&mut g, n);
        let mut prev = SOS;
        let mut hyp = Hypothesis {
            ids: Vec::new(),
            score: 0.0,
            finished: false,
            alignment: Tensor::zeros(0, n),
        };
        let mut rows = Vec::new();
        for _ in 0..self.max_decode_len(n) {
            let (l, s) = self.decoder_step(&mut g, b, mem, &state, prev, None);
            rows.extend_from_slice(g.value(s.alpha).data());
            let lp = log_softmax_row(g.value(l).data());
            let best = argmax(&lp);
            hyp.score += lp[best];
            state = s;
            if best == EOS {
                hyp.finished = true;
                break;
            }
            hyp.ids.push(best);
            prev = best;
        }
        hyp.alignment = Tensor::from_vec(rows.len() / n, n, rows);
        Ok(hyp)
    }

    /// Beam search without an external language model. Hypotheses are
    /// expanded until every beam has ended or the length limit is hit; the
    /// final ranking optionally divides scores by length.
    pub fn beam_search(&self, spec: &Spectrogram, beam_size: usize, length_norm: bool) -> Result<Hypothesis> {
        if beam_size == 0 {
            bail!(Argument, "beam size must be at least 1");
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let enc = self.encode_spectrogram(&mut g, b, spec)?;
        let n = g.shape(enc).0;
        let mem = self.prepare_attention(&mut g, b, enc);

        struct Live {
            ids: Vec<usize>,
            score: f64,
            state: DecoderState,
            align: Vec<f64>,
        }
        let init = self.initial_state(&mut g, n);
        let mut live = vec![Live {
            ids: Vec::new(),
            score: 0.0,
            state: init,
            align: Vec::new(),
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let max_len = self.max_decode_len(n);
        for step in 0..max_len {
            // (score, parent, token, log-prob table index)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(live.len());
            for (pi, h) in live.iter().enumerate() {
                let prev = h.ids.last().copied().unwrap_or(SOS);
                let (l, s) = self.decoder_step(&mut g, b, mem, &h.state, prev, None);
                let lp = log_softmax_row(g.value(l).data());
                let mut order: Vec<usize> = (0..lp.len()).collect();
                // Highest first; lower id first on ties.
                order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]).then(x.cmp(&y)));
                for &tok in order.iter().take(beam_size) {
                    cands.push((h.score + lp[tok], pi, tok));
                }
                next_states.push(s);
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, pi, tok) in cands.into_iter().take(beam_size) {
                let parent = &live[pi];
                let mut align = parent.align.clone();
                align.extend_from_slice(g.value(next_states[pi].alpha).data());
                if tok == EOS {
                    finished.push(Hypothesis {
                        ids: parent.ids.clone(),
                        score,
                        finished: true,
                        alignment: Tensor::from_vec(align.len() / n, n, align),
                    });
                } else {
                    let mut ids = parent.ids.clone();
                    ids.push(tok);
                    next.push(Live {
                        ids,
                        score,
                        state: next_states[pi].clone(),
                        align,
                    });
                }
            }
            live = next;
            if live.is_empty() || finished.len() >= beam_size {
                break;
            }
            if step + 1 == max_len {
                for h in live.drain(..) {
                    let rows = h.align.len() / n;
                    finished.push(Hypothesis {
                        ids: h.ids,
                        score: h.score,
                        finished: false,
                        alignment: Tensor::from_vec(rows, n, h.align),
                    });
                }
            }
        }
        let key = |h: &Hypothesis| if length_norm { h.normalized_score() } else { h.score };
        let mut best: Option<Hypothesis> = None;
        for h in finished {
            if best.as_ref().is_none_or(|b| key(&h) > key(b)) {
                best = Some(h);
            }
        }
        Ok(best.expect("beam search always yields a hypothesis"))
    }

    /// Beam search with the configured beam size and normalization.
    pub fn decode(&self, spec: &Spectrogram) -> Result<Hypothesis> {
        self.beam_search(spec, self.cfg.beam_size, self.cfg.length_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Oracle, OracleConfig, Voice};

    pub(crate) fn tiny_config() -> AsrConfig {
        AsrConfig {
            conv_filters: (2, 3),
            encoder_units: 4,
            decoder_units: 5,
            embed_dim: 3,
            attention: AttentionConfig {
                dim: 4,
                conv_channels: 2,
                kernel: 3,
            },
            ..Default::default()
        }
    }

    fn spec(frames: usize, value: f64) -> Spectrogram {
        Spectrogram::new(Tensor::filled(frames, 20, value), 10.0).unwrap()
    }

    #[test]
    fn encoder_lengths() {
        let asr = Asr::new(tiny_config()).unwrap();
        for (t, want) in [(16, 4), (17, 5), (1, 1), (3, 1), (5, 2)] {
            let mut g = Graph::new();
            let b = g.bind(asr.params(), false);
            let enc = asr.encode_spectrogram(&mut g, b, &spec(t, 0.3)).unwrap();
            assert_eq!(g.shape(enc).0, want, "T={t}");
            assert_eq!(encoded_length(t), want);
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let asr = Asr::new(AsrConfig::default()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(asr.params(), false);
        let enc = asr.encode_spectrogram(&mut g, b, &spec(12, 0.0)).unwrap();
        assert!(g.value(enc).is_finite());
    }

    #[test]
    fn mel_mismatch_is_shape_error() {
        let asr = Asr::new(tiny_config()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(asr.params(), false);
        let s = Spectrogram::new(Tensor::zeros(8, 10), 10.0).unwrap();
        assert!(matches!(
            asr.encode_spectrogram(&mut g, b, &s),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let asr = Asr::new(AsrConfig::default()).unwrap();
        let o = Oracle::new(OracleConfig::default());
        let p = TokenSequence::parse("B AH sil K OW", VocabKind::Phoneme, Domain::Source).unwrap();
        let v = Voice {
            speaker_id: "a".into(),
            base_shift: 0.0,
            template_gain: 1.0,
            noise_std: 0.2,
        };
        let s = o.synthesize(&p, &v, 3).unwrap();
        let chars = crate::corpus::spell(&p).unwrap();
        let mut g = Graph::new();
        let b = g.bind(asr.params(), true);
        let f = asr.loss(&mut g, b, &s, &chars).unwrap();
        let per_token = g.scalar(f.loss) / f.tokens as f64;
        let uniform = (asr.vocab_size() as f64).ln();
        assert!((per_token - uniform).abs() < 0.1 * uniform, "{per_token} vs {uniform}");
        for r in 0..f.alignment.rows() {
            let s: f64 = f.alignment.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn masks_identity_when_empty() {
        let s = Spectrogram::new(Tensor::from_vec(10, 20, (0..200).map(f64::from).collect()), 10.0).unwrap();
        let out = apply_masks(&s, &MaskPolicy::default(), -1.0, 4).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn single_time_mask_replaces_consecutive_frames() {
        let s = Spectrogram::new(Tensor::from_vec(10, 20, (1..=200).map(f64::from).collect()), 10.0).unwrap();
        let policy = MaskPolicy {
            num_time_masks: 1,
            max_time_width: 3,
            fixed_width: true,
            ..Default::default()
        };
        let out = apply_masks(&s, &policy, 0.0, 9).unwrap();
        let masked: Vec<usize> = (0..10)
            .filter(|&r| out.frames().row(r).iter().all(|&v| v == 0.0))
            .collect();
        assert_eq!(masked.len(), 3);
        assert_eq!(masked[2] - masked[0], 2);
        assert_eq!(out, apply_masks(&s, &policy, 0.0, 9).unwrap());
    }

    #[test]
    fn oversized_mask_is_config_error() {
        let s = spec(5, 0.0);
        let policy = MaskPolicy {
            num_time_masks: 1,
            max_time_width: 6,
            ..Default::default()
        };
        assert!(matches!(apply_masks(&s, &policy, 0.0, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn empty_target_rejected() {
        let asr = Asr::new(tiny_config()).unwrap();
        assert!(TokenSequence::new(vec![], VocabKind::Character, Domain::Source).is_err());
        let p = TokenSequence::parse("B", VocabKind::Phoneme, Domain::Source).unwrap();
        let mut g = Graph::new();
        let b = g.bind(asr.params(), true);
        assert!(asr.loss(&mut g, b, &spec(4, 0.1), &p).is_err());
    }
}
