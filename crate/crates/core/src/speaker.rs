//! Small x-vector style speaker encoder and reference selection.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bind, Graph, Var};
use crate::checkpoint;
use crate::corpus::manifest::read_jsonl;
use crate::corpus::{Spectrogram, SpeechOnly, Utterance};
use crate::error::{bail, Result};
use crate::nn::Linear;
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::params::{Grads, ParamId, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "speaker";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerEncoderConfig {
    pub mel_bins: usize,
    pub frame_layers: usize,
    pub frame_units: usize,
    pub pooling: Pooling,
    pub embed_dim: usize,
    pub num_speakers_train: usize,
    /// Logit scale of the cosine classifier.
    pub scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub init_seed: u64,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        Self {
            mel_bins: 20,
            frame_layers: 2,
            frame_units: 32,
            pooling: Pooling::MeanStd,
            embed_dim: 16,
            num_speakers_train: 8,
            scale: 10.0,
            epochs: 6,
            batch_size: 8,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            init_seed: 0,
        }
    }
}

impl SpeakerEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            bail!(Config, "embed_dim must be at least 2");
        }
        if self.num_speakers_train < 2 {
            bail!(Config, "speaker encoder needs at least two training speakers");
        }
        if self.frame_layers == 0 {
            bail!(Config, "frame_layers must be positive");
        }
        Ok(())
    }
}

/// A unit-norm speaker vector and the utterance it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub source_utt_id: String,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }

    /// Normalized mean of several embeddings.
    pub fn centroid(items: &[SpeakerEmbedding], label: impl Into<String>) -> Result<SpeakerEmbedding> {
        let Some(first) = items.first() else {
            bail!(Argument, "centroid of no embeddings");
        };
        let mut v = vec![0.0; first.dim()];
        for e in items {
            if e.dim() != v.len() {
                bail!(Shape, "embedding dimensions differ");
            }
            for (a, b) in v.iter_mut().zip(&e.vector) {
                *a += b;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        Ok(SpeakerEmbedding {
            vector: v,
            source_utt_id: label.into(),
        })
    }
}

/// Persisted embedding record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    read_jsonl(path)
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    cfg: SpeakerEncoderConfig,
    params: ParamStore,
    frames: Vec<Linear>,
    proj: Linear,
    classifier: ParamId,
    speakers: Vec<String>,
    trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

impl SpeakerEncoder {
    pub fn new(cfg: SpeakerEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::derived_rng(cfg.init_seed, "speaker-init", 0);
        let mut p = ParamStore::new();
        let mut frames = Vec::new();
        let mut width = cfg.mel_bins;
        for l in 0..cfg.frame_layers {
            frames.push(Linear::new(
                &mut p,
                &format!("frame{l}"),
                width,
                cfg.frame_units,
                true,
                &mut rng,
            ));
            width = cfg.frame_units;
        }
        let proj = Linear::new(&mut p, "proj", 2 * width, cfg.embed_dim, true, &mut rng);
        let classifier = p.add_uniform(
            "classifier",
            cfg.embed_dim,
            cfg.num_speakers_train,
            cfg.embed_dim,
            &mut rng,
        );
        Ok(Self {
            cfg,
            params: p,
            frames,
            proj,
            classifier,
            speakers: Vec::new(),
            trained: false,
        })
    }

    pub fn config(&self) -> &SpeakerEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks a loaded encoder as trained with the given speaker label order.
    pub fn set_trained(&mut self, speakers: Vec<String>) {
        self.speakers = speakers;
        self.trained = true;
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.trained {
            bail!(State, "refusing to save an untrained speaker encoder");
        }
        let extra = serde_json::json!({ "speakers": self.speakers });
        checkpoint::save(path, CHECKPOINT_KIND, &self.cfg, extra, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let l = checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(l.config()?)?;
        l.restore_into(&mut model.params)?;
        let speakers: Vec<String> = serde_json::from_value(l.header.extra["speakers"].clone())
            .map_err(|e| crate::Error::Format(format!("speaker list: {e}")))?;
        model.set_trained(speakers);
        Ok(model)
    }

    fn embed_var(&self, g: &mut Graph, b: Bind, spec: &Spectrogram) -> Result<Var> {
        if spec.mel_bins() != self.cfg.mel_bins {
            bail!(
                Shape,
                "spectrogram has {} bins, encoder expects {}",
                spec.mel_bins(),
                self.cfg.mel_bins
            );
        }
        let mut h = g.input(spec.frames().clone());
        for layer in &self.frames {
            h = layer.forward(g, b, h);
            h = g.relu(h);
        }
        let stats = match self.cfg.pooling {
            Pooling::MeanStd => g.mean_std_pool(h),
        };
        let e = self.proj.forward(g, b, stats);
        Ok(g.l2_normalize_rows(e))
    }

    /// Statistics pooling, projection and L2 normalization of one utterance.
    pub fn extract(&self, spec: &Spectrogram, utt_id: &str) -> Result<SpeakerEmbedding> {
        if !self.trained {
            bail!(State, "speaker encoder has not been trained");
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, false);
        let e = self.embed_var(&mut g, b, spec)?;
        Ok(SpeakerEmbedding {
            vector: g.value(e).data().to_vec(),
            source_utt_id: utt_id.to_string(),
        })
    }

    /// Trains the encoder with a scaled cosine speaker classifier and
    /// freezes it.
    pub fn train(&mut self, utts: &[Utterance], run_seed: u64) -> Result<SpeakerTrainReport> {
        let mut speakers: Vec<String> = utts.iter().map(|u| u.speaker_id.clone()).collect();
        speakers.sort();
        speakers.dedup();
        if speakers.len() < 2 {
            bail!(Config, "speaker encoder needs at least two training speakers");
        }
        if speakers.len() != self.cfg.num_speakers_train {
            bail!(
                Config,
                "corpus has {} training speakers, encoder configured for {}",
                speakers.len(),
                self.cfg.num_speakers_train
            );
        }
        let labels: Vec<usize> = utts
            .iter()
            .map(|u| speakers.binary_search(&u.speaker_id).expect("known speaker"))
            .collect();
        let mut opt = Adam::new(self.cfg.optimizer);
        let mut order: Vec<usize> = (0..utts.len()).collect();
        let mut epoch_losses = Vec::new();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut seed::derived_rng(run_seed, "speaker-shuffle", epoch as u64));
            let mut total = 0.0;
            for chunk in order.chunks(self.cfg.batch_size.max(1)) {
                let mut grads = Grads::zeros_like(&self.params);
                for &i in chunk {
                    let mut g = Graph::new();
                    let b = g.bind(&self.params, true);
                    let e = self.embed_var(&mut g, b, &utts[i].spec)?;
                    let w = g.param(b, self.classifier);
                    let logits = g.matmul(e, w);
                    let logits = g.scale(logits, self.cfg.scale);
                    let loss = g.cross_entropy_sum(logits, &[labels[i]]);
                    total += g.scalar(loss);
                    g.backward(loss);
                    grads.add_assign(&g.param_grads(b));
                }
                grads.scale(1.0 / chunk.len() as f64);
                opt.step(&mut self.params, &grads);
            }
            epoch_losses.push(total / utts.len() as f64);
        }
        self.speakers = speakers;
        self.trained = true;
        let correct = utts
            .iter()
            .zip(&labels)
            .filter(|(u, &l)| self.classify(&u.spec).ok() == Some(l))
            .count();
        Ok(SpeakerTrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / utts.len() as f64,
        })
    }

    /// Index of the most likely training speaker.
    pub fn classify(&self, spec: &Spectrogram) -> Result<usize> {
        let e = self.extract(spec, "")?;
        let w = self.params.get(self.classifier);
        let logits = Tensor::row_vector(&e.vector).matmul(w);
        Ok(logits.argmax_row(0))
    }
}

/// Draws `k` distinct utterances of `speaker_id` in seeded random order and
/// embeds them. Only features are visible here.
pub fn select_references(
    encoder: &SpeakerEncoder,
    utts: &[SpeechOnly],
    speaker_id: &str,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<SpeakerEmbedding>> {
    let own: Vec<&SpeechOnly> = utts.iter().filter(|u| u.speaker_id == speaker_id).collect();
    if k == 0 || k > own.len() {
        bail!(
            Argument,
            "cannot select {k} references from {} utterances of {speaker_id}",
            own.len()
        );
    }
    let picked = rand::seq::index::sample(&mut seed::rng(rng_seed), own.len(), k);
    picked
        .iter()
        .map(|i| encoder.extract(&own[i].spec, &own[i].utt_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spec(frames: usize, s: u64) -> Spectrogram {
        let mut rng = seed::rng(s);
        let data = (0..frames * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        Spectrogram::new(Tensor::from_vec(frames, 20, data), 10.0).unwrap()
    }

    fn trained_stub() -> SpeakerEncoder {
        let mut enc = SpeakerEncoder::new(SpeakerEncoderConfig::default()).unwrap();
        enc.set_trained((0..8).map(|i| format!("s{i}")).collect());
        enc
    }

    #[test]
    fn untrained_extraction_is_state_error() {
        let enc = SpeakerEncoder::new(SpeakerEncoderConfig::default()).unwrap();
        assert!(matches!(
            enc.extract(&random_spec(5, 1), "u"),
            Err(crate::Error::State(_))
        ));
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let enc = trained_stub();
        let s = random_spec(9, 2);
        let a = enc.extract(&s, "u").unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a, enc.extract(&s, "u").unwrap());
    }

    #[test]
    fn frame_order_does_not_matter() {
        let enc = trained_stub();
        let s = random_spec(7, 3);
        let mut rows: Vec<Vec<f64>> = (0..7).map(|r| s.frames().row(r).to_vec()).collect();
        rows.reverse();
        rows.swap(1, 4);
        let p = Spectrogram::new(Tensor::from_rows(&rows), 10.0).unwrap();
        let (a, b) = (enc.extract(&s, "u").unwrap(), enc.extract(&p, "u").unwrap());
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn small_embed_dim_rejected() {
        let cfg = SpeakerEncoderConfig {
            embed_dim: 1,
            ..Default::default()
        };
        assert!(SpeakerEncoder::new(cfg).is_err());
    }

    fn speech(n: usize) -> Vec<SpeechOnly> {
        (0..n)
            .map(|i| SpeechOnly {
                utt_id: format!("t{i}"),
                speaker_id: if i % 2 == 0 { "a".into() } else { "b".into() },
                spec: random_spec(4, i as u64),
            })
            .collect()
    }

    #[test]
    fn reference_selection() {
        let enc = trained_stub();
        let utts = speech(10);
        let one = select_references(&enc, &utts, "a", 1, 5).unwrap();
        assert_eq!(one.len(), 1);
        let five = select_references(&enc, &utts, "a", 5, 5).unwrap();
        let mut ids: Vec<&str> = five.iter().map(|e| e.source_utt_id.as_str()).collect();
        assert_eq!(five, select_references(&enc, &utts, "a", 5, 5).unwrap());
        ids.sort();
        assert_eq!(ids, ["t0", "t2", "t4", "t6", "t8"]);
        assert!(select_references(&enc, &utts, "a", 6, 5).is_err());
    }

    #[test]
    fn embedding_records_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("emb.jsonl");
        let recs = vec![EmbeddingRecord {
            utt_id: "u1".into(),
            speaker_id: "spk00".into(),
            vector: vec![0.6, 0.8],
        }];
        write_embeddings(&p, &recs).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), recs);
    }
}
