//! Synthetic two-domain speech corpus.
//!
//! Source-domain text is paired with oracle speech from the training
//! speakers; target-domain text comes in two forms: an unpaired text pool
//! for adaptation and a paired test set spoken by held-out speakers.

mod grammar;
pub mod manifest;
mod oracle;
mod vocab;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{bigram_table, generate_text, total_variation, Grammar, GrammarConfig};
pub use oracle::{Oracle, OracleConfig, Spectrogram, Voice};
pub use vocab::{silence_id, spell, Domain, TokenSequence, VocabKind, Vocabulary, EOS, PAD, PHONEMES, SILENCE, SOS};

use crate::error::{bail, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_speakers_train: usize,
    pub n_speakers_test: usize,
    pub paired_train: usize,
    pub unpaired_target: usize,
    pub dev: usize,
    pub test_source: usize,
    pub test_target: usize,
    /// Phonemes per utterance, inclusive.
    pub length_range: (usize, usize),
    pub train_shift_range: (f64, f64),
    pub test_shift_range: (f64, f64),
    pub gain_range: (f64, f64),
    pub noise_std_range: (f64, f64),
    /// Explicit speaker ids; generated as `spkNN` / `tgtNN` when absent.
    pub train_speaker_ids: Option<Vec<String>>,
    pub test_speaker_ids: Option<Vec<String>>,
    pub source_grammar: GrammarConfig,
    pub target_grammar: GrammarConfig,
    pub oracle: OracleConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_speakers_train: 8,
            n_speakers_test: 2,
            paired_train: 500,
            unpaired_target: 500,
            dev: 60,
            test_source: 300,
            test_target: 300,
            length_range: (6, 12),
            train_shift_range: (-1.0, 1.0),
            test_shift_range: (-0.6, 0.6),
            gain_range: (0.85, 1.15),
            noise_std_range: (0.3, 0.4),
            train_speaker_ids: None,
            test_speaker_ids: None,
            source_grammar: GrammarConfig::default_for(Domain::Source),
            target_grammar: GrammarConfig::default_for(Domain::Target),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Unpaired,
    Dev,
    TestSource,
    TestTarget,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Unpaired => "unpaired",
            Split::Dev => "dev",
            Split::TestSource => "test_source",
            Split::TestTarget => "test_target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "unpaired" => Split::Unpaired,
            "dev" => Split::Dev,
            "test_source" => Split::TestSource,
            "test_target" => Split::TestTarget,
            other => bail!(Argument, "unknown split {other:?}"),
        })
    }
}

/// Speech with its transcript in both tokenizations.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub chars: TokenSequence,
    pub phonemes: TokenSequence,
    pub spec: Spectrogram,
}

/// Text without speech.
#[derive(Clone, Debug, PartialEq)]
pub struct TextItem {
    pub utt_id: String,
    pub chars: TokenSequence,
    pub phonemes: TokenSequence,
}

/// Speech without its transcript; the only view of the target-speaker test
/// audio that adaptation code receives.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechOnly {
    pub utt_id: String,
    pub speaker_id: String,
    pub spec: Spectrogram,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub voices: Vec<Voice>,
    pub paired_train: Vec<Utterance>,
    pub unpaired_target_text: Vec<TextItem>,
    pub dev: Vec<Utterance>,
    pub test_source: Vec<Utterance>,
    pub test_target: Vec<Utterance>,
}

fn spread(range: (f64, f64), i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5 * (range.0 + range.1)
    } else {
        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers_train < 1 || self.n_speakers_test < 1 {
            bail!(Config, "need at least one training and one test speaker");
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            bail!(Config, "invalid length range ({lo}, {hi})");
        }
        if self.paired_train == 0 {
            bail!(Config, "paired_train must be positive");
        }
        let train = self.train_ids();
        let test = self.test_ids();
        if train.len() != self.n_speakers_train || test.len() != self.n_speakers_test {
            bail!(Config, "explicit speaker id lists must match the speaker counts");
        }
        if let Some(s) = train.iter().find(|s| test.contains(s)) {
            bail!(Config, "speaker {s} appears in both paired_train and test_target");
        }
        let mut all = train.clone();
        all.extend(test);
        all.sort();
        all.dedup();
        if all.len() != self.n_speakers_train + self.n_speakers_test {
            bail!(Config, "speaker ids must be unique");
        }
        Ok(())
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.train_speaker_ids
            .clone()
            .unwrap_or_else(|| (0..self.n_speakers_train).map(|i| format!("spk{i:02}")).collect())
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test_speaker_ids
            .clone()
            .unwrap_or_else(|| (0..self.n_speakers_test).map(|i| format!("tgt{i:02}")).collect())
    }

    fn make_voices(&self) -> Result<(Vec<Voice>, Vec<Voice>)> {
        let mut rng = seed::derived_rng(self.seed, "voices", 0);
        let mut make = |id: String, shift: f64| Voice {
            speaker_id: id,
            base_shift: shift,
            template_gain: rng.random_range(self.gain_range.0..=self.gain_range.1),
            noise_std: rng.random_range(self.noise_std_range.0..=self.noise_std_range.1),
        };
        let train: Vec<Voice> = self
            .train_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| make(id, spread(self.train_shift_range, i, self.n_speakers_train)))
            .collect();
        let test: Vec<Voice> = self
            .test_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| make(id, spread(self.test_shift_range, i, self.n_speakers_test)))
            .collect();
        for v in train.iter().chain(&test) {
            v.validate()?;
        }
        Ok((train, test))
    }
}

impl Corpus {
    /// Builds the corpus in memory; a pure function of the config.
    pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
        cfg.validate()?;
        let (train_voices, test_voices) = cfg.make_voices()?;
        let oracle = Oracle::new(cfg.oracle.clone());
        let source = Grammar::new(Domain::Source, &cfg.source_grammar);
        let target = Grammar::new(Domain::Target, &cfg.target_grammar);

        let text = |g: &Grammar, split: Split, i: usize| -> Result<(TokenSequence, TokenSequence)> {
            let p = g.sample(
                cfg.length_range,
                seed::derive(cfg.seed, &format!("text/{}", split.as_str()), i as u64),
            )?;
            let c = spell(&p)?;
            Ok((p, c))
        };
        let paired = |g: &Grammar, split: Split, n: usize, voices: &[Voice]| -> Result<Vec<Utterance>> {
            (0..n)
                .map(|i| {
                    let (phonemes, chars) = text(g, split, i)?;
                    let voice = &voices[i % voices.len()];
                    let spec = oracle.synthesize(
                        &phonemes,
                        voice,
                        seed::derive(cfg.seed, &format!("audio/{}", split.as_str()), i as u64),
                    )?;
                    Ok(Utterance {
                        utt_id: format!("{}-{i:05}", split.as_str()),
                        speaker_id: voice.speaker_id.clone(),
                        chars,
                        phonemes,
                        spec,
                    })
                })
                .collect()
        };

        let paired_train = paired(&source, Split::Train, cfg.paired_train, &train_voices)?;
        let dev = paired(&source, Split::Dev, cfg.dev, &train_voices)?;
        let test_source = paired(&source, Split::TestSource, cfg.test_source, &train_voices)?;
        let test_target = paired(&target, Split::TestTarget, cfg.test_target, &test_voices)?;
        let unpaired_target_text = (0..cfg.unpaired_target)
            .map(|i| {
                let (phonemes, chars) = text(&target, Split::Unpaired, i)?;
                Ok(TextItem {
                    utt_id: format!("{}-{i:05}", Split::Unpaired.as_str()),
                    chars,
                    phonemes,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut voices = train_voices;
        voices.extend(test_voices);
        Ok(Corpus {
            config: cfg.clone(),
            voices,
            paired_train,
            unpaired_target_text,
            dev,
            test_source,
            test_target,
        })
    }

    pub fn voice(&self, speaker_id: &str) -> Option<&Voice> {
        self.voices.iter().find(|v| v.speaker_id == speaker_id)
    }

    pub fn train_speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.paired_train.iter().map(|u| u.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn test_target_speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.test_target.iter().map(|u| u.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.paired_train,
            Split::Dev => &self.dev,
            Split::TestSource => &self.test_source,
            Split::TestTarget => &self.test_target,
            Split::Unpaired => &[],
        }
    }

    /// Target-speaker test audio with the transcripts removed.
    pub fn test_target_audio(&self) -> Vec<SpeechOnly> {
        self.test_target
            .iter()
            .map(|u| SpeechOnly {
                utt_id: u.utt_id.clone(),
                speaker_id: u.speaker_id.clone(),
                spec: u.spec.clone(),
            })
            .collect()
    }

    /// Mean feature value over the paired training set.
    pub fn feature_mean(&self) -> f64 {
        let (sum, n) = self.paired_train.iter().fold((0.0, 0usize), |(s, n), u| {
            (s + u.spec.frames().sum(), n + u.spec.frames().len())
        });
        sum / n.max(1) as f64
    }

    pub fn mel_bins(&self) -> usize {
        self.config.oracle.mel_bins
    }

    /// Checks the structural invariants of a corpus.
    pub fn check_invariants(&self) -> Result<()> {
        let train = self.train_speakers();
        for s in self.test_target_speakers() {
            if train.contains(&s) {
                bail!(Invariant, "test_target speaker {s} also in paired_train");
            }
        }
        let mel = self.mel_bins();
        for u in self
            .paired_train
            .iter()
            .chain(&self.dev)
            .chain(&self.test_source)
            .chain(&self.test_target)
        {
            if self.voice(&u.speaker_id).is_none() {
                bail!(Invariant, "speaker {} of {} not registered", u.speaker_id, u.utt_id);
            }
            if u.spec.mel_bins() != mel {
                bail!(Invariant, "{} has {} mel bins", u.utt_id, u.spec.mel_bins());
            }
        }
        Ok(())
    }
}

/// Generates the corpus and writes its manifest and feature files under
/// `dir`; returns the corpus and its content hash.
pub fn build_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<(Corpus, String)> {
    let corpus = Corpus::generate(cfg)?;
    corpus.check_invariants()?;
    let hash = manifest::write_corpus(&corpus, dir)?;
    Ok((corpus, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            paired_train: 40,
            unpaired_target: 30,
            dev: 8,
            test_source: 10,
            test_target: 10,
            ..Default::default()
        }
    }

    #[test]
    fn split_sizes_match_config() {
        let cfg = CorpusConfig {
            paired_train: 500,
            unpaired_target: 500,
            dev: 0,
            test_source: 0,
            test_target: 4,
            ..Default::default()
        };
        let c = Corpus::generate(&cfg).unwrap();
        assert_eq!(c.paired_train.len(), 500);
        assert_eq!(c.unpaired_target_text.len(), 500);
    }

    #[test]
    fn speakers_disjoint() {
        let cfg = CorpusConfig {
            n_speakers_train: 8,
            n_speakers_test: 2,
            ..small()
        };
        let c = Corpus::generate(&cfg).unwrap();
        assert_eq!(c.train_speakers().len(), 8);
        assert_eq!(c.test_target_speakers().len(), 2);
        assert!(c.check_invariants().is_ok());
        assert_eq!(c.voices.len(), 10);
    }

    #[test]
    fn overlapping_speakers_rejected() {
        let cfg = CorpusConfig {
            n_speakers_train: 2,
            n_speakers_test: 1,
            train_speaker_ids: Some(vec!["a".into(), "b".into()]),
            test_speaker_ids: Some(vec!["b".into()]),
            ..small()
        };
        assert!(matches!(Corpus::generate(&cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn deterministic() {
        let a = Corpus::generate(&small()).unwrap();
        let b = Corpus::generate(&small()).unwrap();
        assert_eq!(a.paired_train, b.paired_train);
        assert_eq!(a.unpaired_target_text, b.unpaired_target_text);
    }

    #[test]
    fn target_audio_view_strips_text() {
        let c = Corpus::generate(&small()).unwrap();
        let audio = c.test_target_audio();
        assert_eq!(audio.len(), c.test_target.len());
        assert_eq!(audio[0].spec, c.test_target[0].spec);
    }
}
