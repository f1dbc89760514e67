//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod numerics;

use rand::Rng;
use speech_chain::asr::{AsrConfig, AttentionConfig};
use speech_chain::corpus::{CorpusConfig, Domain, Spectrogram, TokenSequence, VocabKind};
use speech_chain::params::{Grads, ParamStore};
use speech_chain::seed;
use speech_chain::speaker::SpeakerEncoderConfig;
use speech_chain::tensor::Tensor;
use speech_chain::tts::TtsConfig;

pub fn tiny_asr() -> AsrConfig {
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
        beam_size: 4,
        ..Default::default()
    }
}

pub fn tiny_tts() -> TtsConfig {
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

/// Corpus small enough to build in well under a second.
pub fn small_corpus() -> CorpusConfig {
    CorpusConfig {
        paired_train: 48,
        unpaired_target: 16,
        dev: 8,
        test_source: 8,
        test_target: 12,
        length_range: (4, 6),
        ..Default::default()
    }
}

/// Models small enough that a few adaptation steps take seconds.
pub fn small_asr() -> AsrConfig {
    AsrConfig {
        conv_filters: (4, 4),
        encoder_units: 8,
        decoder_units: 12,
        embed_dim: 6,
        attention: AttentionConfig {
            dim: 8,
            conv_channels: 2,
            kernel: 5,
        },
        beam_size: 2,
        max_epochs: 2,
        ..Default::default()
    }
}

pub fn small_tts() -> TtsConfig {
    TtsConfig {
        phoneme_embed_dim: 8,
        enc_conv_filters: 8,
        enc_birnn_units: 8,
        prenet_units: 8,
        dec_units: 12,
        attention_dim: 8,
        attention_kernel: 5,
        epochs: 1,
        ..Default::default()
    }
}

pub fn small_speaker() -> SpeakerEncoderConfig {
    SpeakerEncoderConfig {
        frame_units: 16,
        epochs: 2,
        ..Default::default()
    }
}

pub fn random_spec(frames: usize, bins: usize, rng_seed: u64) -> Spectrogram {
    let mut rng = seed::rng(rng_seed);
    let data = (0..frames * bins).map(|_| rng.random_range(-1.0..1.0)).collect();
    Spectrogram::new(Tensor::from_vec(frames, bins, data), 10.0).unwrap()
}

pub fn chars(s: &str) -> TokenSequence {
    TokenSequence::parse(s, VocabKind::Character, Domain::Source).unwrap()
}

pub fn phonemes(s: &str) -> TokenSequence {
    TokenSequence::parse(s, VocabKind::Phoneme, Domain::Source).unwrap()
}

/// Relative error of two vectors under the L2 norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Central differences of `loss` with respect to every scalar of the store
/// returned by `store`, compared tensor by tensor with `analytic`. Returns
/// the worst relative error over tensors whose gradient is not negligible.
pub fn worst_param_error<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &Grads,
    h: f64,
) -> (f64, String) {
    let ids: Vec<_> = store(model).ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let n = store(model).get(id).len();
        let mut fd = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store(model).get(id).data()[k];
            store(model).get_mut(id).data_mut()[k] = orig + h;
            let up = loss(model);
            store(model).get_mut(id).data_mut()[k] = orig - h;
            let down = loss(model);
            store(model).get_mut(id).data_mut()[k] = orig;
            fd.push((up - down) / (2.0 * h));
        }
        let an = analytic.get(id).data();
        let scale = an.iter().chain(&fd).map(|x| x.abs()).fold(0.0, f64::max);
        if scale < 1e-8 {
            continue;
        }
        let e = rel_err(&fd, an);
        if e > worst.0 {
            worst = (e, store(model).name(id).to_string());
        }
    }
    worst
}

/// Moves every parameter off exact zero so the check point is generic:
/// zero-initialized biases put ReLUs and max-pooling ties exactly on their
/// kinks, where central differences and subgradients disagree.
pub fn jitter(store: &mut ParamStore, rng_seed: u64) {
    let mut rng = seed::rng(rng_seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Textbook memoized recursion for the unit-cost edit distance.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let keep = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            keep.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

/// Every sequence over `{0, 1, 2}` of length at most `max_len`.
pub fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Compares `edit_distance` with the oracle on every pair of sequences up
/// to length 6; returns the number of pairs checked or the first mismatch.
pub fn exhaustive_edit_distance_check() -> Result<usize, String> {
    let seqs = all_sequences(6);
    let mut n = 0;
    for a in &seqs {
        for b in &seqs {
            let c = speech_chain::eval::edit_distance(a, b);
            let want = levenshtein(a, b);
            if c.total() != want || c.deletions + b.len() != c.insertions + a.len() {
                return Err(format!("{a:?} vs {b:?}: got {c:?}, oracle distance {want}"));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Small untrained models and a corpus to draw chain batches from.
pub struct ChainFixture {
    pub corpus: speech_chain::corpus::Corpus,
    pub asr: speech_chain::asr::Asr,
    pub tts: speech_chain::tts::Tts,
}

pub fn unit_vector(dim: usize, phase: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|i| ((i + phase) as f64 * 0.7).sin() + 0.1).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl ChainFixture {
    pub fn new() -> Self {
        let corpus = speech_chain::corpus::Corpus::generate(&small_corpus()).unwrap();
        Self {
            corpus,
            asr: speech_chain::asr::Asr::new(small_asr()).unwrap(),
            tts: speech_chain::tts::Tts::new(small_tts()).unwrap(),
        }
    }

    /// Batch `i`: `n` paired utterances and `n` unpaired texts.
    pub fn batch(&self, i: usize, n: usize) -> speech_chain::chain::ChainBatch {
        use speech_chain::chain::{ChainBatch, PairedItem, UnpairedItem};
        let dim = self.tts.config().speaker_dim;
        let paired = (0..n)
            .map(|k| {
                let u = &self.corpus.paired_train[(i * n + k) % self.corpus.paired_train.len()];
                PairedItem {
                    spec: u.spec.clone(),
                    chars: u.chars.clone(),
                    phonemes: u.phonemes.clone(),
                    speaker_id: u.speaker_id.clone(),
                    embedding: unit_vector(dim, k),
                }
            })
            .collect();
        let unpaired = (0..n)
            .map(|k| {
                let t = &self.corpus.unpaired_target_text[(i * n + k) % self.corpus.unpaired_target_text.len()];
                UnpairedItem {
                    chars: t.chars.clone(),
                    phonemes: t.phonemes.clone(),
                    speaker: speech_chain::speaker::SpeakerEmbedding {
                        vector: unit_vector(dim, 3 + k),
                        source_utt_id: format!("pool{k}"),
                    },
                }
            })
            .collect();
        ChainBatch { paired, unpaired }
    }
}

/// One routing probe: a single step with only `sources` enabled. Returns
/// whether the ASR and the TTS parameters moved.
pub fn routing_probe(
    fx: &ChainFixture,
    sources: speech_chain::chain::LossSources,
    strategy: speech_chain::chain::TrainStrategy,
) -> (bool, bool) {
    use speech_chain::chain::{ChainTrainer, GradBalanceConfig};
    let (mut asr, mut tts) = (fx.asr.clone(), fx.tts.clone());
    let balance = GradBalanceConfig {
        accumulation_steps: 1,
        ..Default::default()
    };
    let mut t = ChainTrainer::new(&asr, &tts, strategy, balance, 0.0, 11).unwrap();
    t.sources = sources;
    let (a0, t0) = (asr.params().to_blocks(), tts.params().to_blocks());
    t.step(&mut asr, &mut tts, &fx.batch(0, 2)).unwrap();
    (asr.params().to_blocks() != a0, tts.params().to_blocks() != t0)
}

/// The six (loss source × model) cells as `(source, model, updates)`.
pub fn routing_matrix(fx: &ChainFixture) -> Vec<(&'static str, &'static str, bool)> {
    use speech_chain::chain::{LossSources, TrainStrategy};
    let only = |asr, tts, chain| LossSources { asr, tts, chain };
    let both = TrainStrategy::domain(true);
    let mut cells = Vec::new();
    for (name, src) in [
        ("L_ASR", only(true, false, false)),
        ("L_TTS", only(false, true, false)),
        ("L_TTS->ASR", only(false, false, true)),
    ] {
        let (a, t) = routing_probe(fx, src, both);
        cells.push((name, "asr", a));
        cells.push((name, "tts", t));
    }
    cells
}

pub const EXPECTED_ROUTING: [(&str, &str, bool); 6] = [
    ("L_ASR", "asr", true),
    ("L_ASR", "tts", false),
    ("L_TTS", "asr", false),
    ("L_TTS", "tts", true),
    ("L_TTS->ASR", "asr", true),
    ("L_TTS->ASR", "tts", true),
];

/// Adaptation-side source files and whether each one mentions test-set
/// transcripts. Only the text-stripped view `test_target_audio` may appear.
pub fn static_transcript_scan() -> Vec<(String, Vec<String>)> {
    let src = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    ["chain.rs", "adaptation.rs", "train.rs", "speaker.rs"]
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(src.join(f)).unwrap();
            let offending = text
                .lines()
                .filter(|l| {
                    let stripped = l.replace("test_target_audio", "");
                    stripped.contains("test_target") || stripped.contains("test_source")
                })
                .map(str::to_string)
                .collect();
            (f.to_string(), offending)
        })
        .collect()
}

/// Runs speaker adaptation and a domain adaptation epoch on a corpus and
/// on a copy whose test-target transcripts are replaced; returns the
/// content hashes of both runs' outputs.
pub fn transcript_scramble_hashes() -> (Vec<String>, Vec<String>) {
    use speech_chain::adaptation::{adapt_domain, adapt_speaker, AdaptRun, AdaptationInputs};
    use speech_chain::chain::AdaptConfig;
    use speech_chain::corpus::Corpus;
    use speech_chain::experiment::train_speaker_encoder;

    let corpus = Corpus::generate(&small_corpus()).unwrap();
    let mut scrambled = corpus.clone();
    let n = scrambled.test_target.len();
    for i in 0..n {
        let donor = corpus.unpaired_target_text[i % corpus.unpaired_target_text.len()].clone();
        scrambled.test_target[i].chars = donor.chars;
        scrambled.test_target[i].phonemes = donor.phonemes;
    }
    assert_ne!(
        corpus.test_target.iter().map(|u| u.chars.to_text()).collect::<Vec<_>>(),
        scrambled
            .test_target
            .iter()
            .map(|u| u.chars.to_text())
            .collect::<Vec<_>>()
    );
    let (encoder, _) = train_speaker_encoder(&small_speaker(), &corpus, 1).unwrap();
    let asr = speech_chain::asr::Asr::new(small_asr()).unwrap();
    let tts = speech_chain::tts::Tts::new(small_tts()).unwrap();
    let cfg = AdaptConfig {
        epochs: 1,
        batch_size: 4,
        lr_decay: 0.5,
    };
    let run = AdaptRun {
        balance: speech_chain::chain::GradBalanceConfig {
            accumulation_steps: 1,
            ..Default::default()
        },
        run_seed: 3,
    };
    let outputs = |c: &Corpus| -> Vec<String> {
        let inputs = AdaptationInputs::from_corpus(c, &encoder).unwrap();
        let mut h = Vec::new();
        for k in [1, 5] {
            let a = adapt_speaker(&asr, &tts, &encoder, &inputs, k, &cfg, run, |_| {}).unwrap();
            h.push(a.asr.params().content_hash());
            h.push(a.tts.params().content_hash());
            h.push(format!("{:?}", a.pool));
        }
        let d = adapt_domain(&asr, &tts, &inputs, true, &cfg, run, |_| {}).unwrap();
        h.push(d.asr.params().content_hash());
        h.push(d.tts.params().content_hash());
        h
    };
    (outputs(&corpus), outputs(&scrambled))
}

/// Corpus build, pretraining of all three models, one adaptation epoch and
/// checkpoint export into `dir`; returns `(file name, sha256)` pairs.
pub fn micro_pipeline(dir: &std::path::Path, master: u64) -> Vec<(String, String)> {
    use speech_chain::adaptation::{adapt_domain, AdaptRun, AdaptationInputs};
    use speech_chain::chain::AdaptConfig;
    use speech_chain::experiment::{pretrain_all, ExperimentConfig};

    let cfg = ExperimentConfig {
        corpus: CorpusConfig {
            paired_train: 24,
            unpaired_target: 8,
            dev: 4,
            test_source: 4,
            test_target: 6,
            ..small_corpus()
        },
        asr: small_asr(),
        tts: small_tts(),
        speaker: small_speaker(),
        adapt: AdaptConfig {
            epochs: 1,
            batch_size: 4,
            lr_decay: 0.5,
        },
        ..Default::default()
    };
    let (corpus, _) = speech_chain::corpus::build_corpus(&cfg.corpus, &dir.join("corpus")).unwrap();
    let pre = pretrain_all(&cfg, &corpus, master, &mut |_| {}).unwrap();
    let inputs = AdaptationInputs::from_corpus(&corpus, &pre.speaker).unwrap();
    let run = AdaptRun {
        balance: cfg.balance,
        run_seed: master,
    };
    let adapted = adapt_domain(&pre.asr, &pre.tts, &inputs, true, &cfg.adapt, run, |_| {}).unwrap();
    pre.speaker.save(&dir.join("speaker.ckpt")).unwrap();
    pre.asr.save(&dir.join("asr.ckpt")).unwrap();
    pre.tts.save(&dir.join("tts.ckpt")).unwrap();
    adapted.asr.save(&dir.join("asr_adapted.ckpt")).unwrap();
    adapted.tts.save(&dir.join("tts_adapted.ckpt")).unwrap();
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            (rel, speech_chain::checkpoint::file_hash(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
