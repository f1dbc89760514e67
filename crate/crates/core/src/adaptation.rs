//! Inputs and drivers of the two adaptation recipes.
//!
//! Adaptation sees paired source material, unpaired target text and the
//! features of the test-target speakers' audio. Test transcripts never
//! enter this module: [`AdaptationInputs::from_corpus`] copies the test
//! audio through [`Corpus::test_target_audio`], which strips text.

use serde::{Deserialize, Serialize};

use crate::asr::Asr;
use crate::chain::{
    run_adaptation, AdaptConfig, AdaptData, AdaptEpochLog, GradBalanceConfig, PairedItem, TrainStrategy,
};
use crate::corpus::{Corpus, SpeechOnly, TextItem, Utterance};
use crate::error::{bail, Result};
use crate::speaker::{select_references, SpeakerEmbedding, SpeakerEncoder};
use crate::tts::Tts;

/// Everything an adaptation run is allowed to read.
#[derive(Clone, Debug)]
pub struct AdaptationInputs {
    pub paired: Vec<PairedItem>,
    pub texts: Vec<TextItem>,
    pub dev: Vec<Utterance>,
    /// One centroid per training speaker.
    pub training_pool: Vec<SpeakerEmbedding>,
    /// Test-target features, text stripped.
    pub test_audio: Vec<SpeechOnly>,
    pub mask_fill: f64,
}

impl AdaptationInputs {
    pub fn from_corpus(corpus: &Corpus, encoder: &SpeakerEncoder) -> Result<Self> {
        Ok(Self {
            paired: paired_items(encoder, &corpus.paired_train)?,
            texts: corpus.unpaired_target_text.clone(),
            dev: corpus.dev.clone(),
            training_pool: training_speaker_pool(encoder, &corpus.paired_train)?,
            test_audio: corpus.test_target_audio(),
            mask_fill: corpus.feature_mean(),
        })
    }
}

/// Paired items conditioned on their own utterance's embedding.
pub fn paired_items(encoder: &SpeakerEncoder, utts: &[Utterance]) -> Result<Vec<PairedItem>> {
    utts.iter()
        .map(|u| {
            Ok(PairedItem {
                spec: u.spec.clone(),
                chars: u.chars.clone(),
                phonemes: u.phonemes.clone(),
                speaker_id: u.speaker_id.clone(),
                embedding: encoder.extract(&u.spec, &u.utt_id)?.vector,
            })
        })
        .collect()
}

/// Per-utterance embeddings, in order.
pub fn utterance_embeddings(encoder: &SpeakerEncoder, utts: &[Utterance]) -> Result<Vec<Vec<f64>>> {
    utts.iter()
        .map(|u| encoder.extract(&u.spec, &u.utt_id).map(|e| e.vector))
        .collect()
}

/// Normalized centroid of every speaker's embeddings, sorted by speaker id.
pub fn training_speaker_pool(encoder: &SpeakerEncoder, utts: &[Utterance]) -> Result<Vec<SpeakerEmbedding>> {
    let mut speakers: Vec<&str> = utts.iter().map(|u| u.speaker_id.as_str()).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.is_empty() {
        bail!(Argument, "no utterances to pool speakers from");
    }
    speakers
        .into_iter()
        .map(|s| {
            let own = utts
                .iter()
                .filter(|u| u.speaker_id == s)
                .map(|u| encoder.extract(&u.spec, &u.utt_id))
                .collect::<Result<Vec<_>>>()?;
            SpeakerEmbedding::centroid(&own, format!("centroid:{s}"))
        })
        .collect()
}

/// `k` reference embeddings for every speaker present in `audio`.
pub fn reference_pool(
    encoder: &SpeakerEncoder,
    audio: &[SpeechOnly],
    k: usize,
    rng_seed: u64,
) -> Result<Vec<SpeakerEmbedding>> {
    let mut speakers: Vec<&str> = audio.iter().map(|u| u.speaker_id.as_str()).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.is_empty() {
        bail!(Argument, "no reference audio");
    }
    let mut pool = Vec::with_capacity(k * speakers.len());
    for (i, s) in speakers.iter().enumerate() {
        pool.extend(select_references(
            encoder,
            audio,
            s,
            k,
            crate::seed::derive(rng_seed, "refs", i as u64),
        )?);
    }
    Ok(pool)
}

/// Outcome of one adaptation recipe.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub asr: Asr,
    pub tts: Tts,
    pub history: Vec<AdaptEpochLog>,
    pub pool: Vec<SpeakerEmbedding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRun {
    pub balance: GradBalanceConfig,
    pub run_seed: u64,
}

/// Domain adaptation: unpaired target text matched with training-speaker
/// centroids, ASR always updated, TTS updated when `update_tts`.
pub fn adapt_domain(
    asr: &Asr,
    tts: &Tts,
    inputs: &AdaptationInputs,
    update_tts: bool,
    cfg: &AdaptConfig,
    run: AdaptRun,
    on_epoch: impl FnMut(&AdaptEpochLog),
) -> Result<Adapted> {
    let (mut asr, mut tts) = (asr.clone(), tts.clone());
    let data = AdaptData {
        paired: &inputs.paired,
        texts: &inputs.texts,
        pool: &inputs.training_pool,
        dev: &inputs.dev,
    };
    let history = run_adaptation(
        &mut asr,
        &mut tts,
        &data,
        TrainStrategy::domain(update_tts),
        run.balance,
        cfg,
        inputs.mask_fill,
        run.run_seed,
        on_epoch,
    )?;
    Ok(Adapted {
        asr,
        tts,
        history,
        pool: inputs.training_pool.clone(),
    })
}

/// Few-shot speaker adaptation: unpaired target text matched with `refs`
/// reference embeddings per test speaker; the TTS stays frozen.
pub fn adapt_speaker(
    asr: &Asr,
    tts: &Tts,
    encoder: &SpeakerEncoder,
    inputs: &AdaptationInputs,
    refs: usize,
    cfg: &AdaptConfig,
    run: AdaptRun,
    on_epoch: impl FnMut(&AdaptEpochLog),
) -> Result<Adapted> {
    let pool = reference_pool(
        encoder,
        &inputs.test_audio,
        refs,
        crate::seed::derive(run.run_seed, "reference-pick", refs as u64),
    )?;
    let (mut asr, mut tts) = (asr.clone(), tts.clone());
    let data = AdaptData {
        paired: &inputs.paired,
        texts: &inputs.texts,
        pool: &pool,
        dev: &inputs.dev,
    };
    let history = run_adaptation(
        &mut asr,
        &mut tts,
        &data,
        TrainStrategy::speaker(),
        run.balance,
        cfg,
        inputs.mask_fill,
        run.run_seed,
        on_epoch,
    )?;
    Ok(Adapted {
        asr,
        tts,
        history,
        pool,
    })
}
