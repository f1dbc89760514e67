//! Seeded end-to-end runs: pretraining all three models, both adaptation
//! recipes and the evaluations behind the four result tables.

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_domain, adapt_speaker, utterance_embeddings, AdaptRun, AdaptationInputs, Adapted};
use crate::asr::{Asr, AsrConfig};
use crate::chain::{AdaptConfig, AdaptEpochLog, GradBalanceConfig};
use crate::corpus::{Corpus, CorpusConfig, Utterance};
use crate::error::Result;
use crate::eval::{asr_wer, tts_robustness_eval, ReportRecord, RobustnessReport};
use crate::seed;
use crate::speaker::{SpeakerEncoder, SpeakerEncoderConfig, SpeakerTrainReport};
use crate::train::{pretrain_asr, pretrain_tts, TrainReport, TtsTerms};
use crate::tts::{Tts, TtsConfig};

/// Every knob of a run except the master seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub asr: AsrConfig,
    pub tts: TtsConfig,
    pub speaker: SpeakerEncoderConfig,
    pub balance: GradBalanceConfig,
    pub adapt: AdaptConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.asr.validate()?;
        self.tts.validate()?;
        self.speaker.validate()?;
        self.balance.validate()
    }
}

/// System names used in report records.
pub mod systems {
    pub const BASELINE: &str = "baseline";
    pub const DOMAIN_ASR_ONLY: &str = "domain_asr_only";
    pub const DOMAIN_BOTH: &str = "domain_both";
    pub const SPEAKER_REFS1: &str = "speaker_refs1";
    pub const SPEAKER_REFS5: &str = "speaker_refs5";
    pub const TTS_BASELINE: &str = "tts_baseline";
    pub const TTS_ADAPTED: &str = "tts_adapted";
}

pub const TEST_SOURCE: &str = "test_source";
pub const TEST_TARGET: &str = "test_target";

/// Seeds of every stochastic stage, derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub speaker_init: u64,
    pub speaker_run: u64,
    pub asr_init: u64,
    pub asr_run: u64,
    pub tts_init: u64,
    pub tts_run: u64,
    pub adapt_run: u64,
    pub robustness: u64,
}

impl StageSeeds {
    pub fn from_master(master: u64) -> Self {
        let d = |label| seed::derive(master, label, 0);
        Self {
            speaker_init: d("speaker-init"),
            speaker_run: d("speaker-run"),
            asr_init: d("asr-init"),
            asr_run: d("asr-run"),
            tts_init: d("tts-init"),
            tts_run: d("tts-run"),
            adapt_run: d("adapt-run"),
            robustness: d("robustness"),
        }
    }
}

/// Model configs with the init seed mixed with the stage seed, so the
/// config's own `init_seed` and the master seed both matter.
pub fn seeded_asr_config(cfg: &AsrConfig, master: u64) -> AsrConfig {
    AsrConfig {
        init_seed: seed::derive(StageSeeds::from_master(master).asr_init, "config", cfg.init_seed),
        ..cfg.clone()
    }
}

pub fn seeded_tts_config(cfg: &TtsConfig, master: u64) -> TtsConfig {
    TtsConfig {
        init_seed: seed::derive(StageSeeds::from_master(master).tts_init, "config", cfg.init_seed),
        ..cfg.clone()
    }
}

pub fn seeded_speaker_config(cfg: &SpeakerEncoderConfig, master: u64) -> SpeakerEncoderConfig {
    SpeakerEncoderConfig {
        init_seed: seed::derive(StageSeeds::from_master(master).speaker_init, "config", cfg.init_seed),
        ..cfg.clone()
    }
}

pub fn train_speaker_encoder(
    cfg: &SpeakerEncoderConfig,
    corpus: &Corpus,
    master: u64,
) -> Result<(SpeakerEncoder, SpeakerTrainReport)> {
    let mut enc = SpeakerEncoder::new(seeded_speaker_config(cfg, master))?;
    let report = enc.train(&corpus.paired_train, StageSeeds::from_master(master).speaker_run)?;
    Ok((enc, report))
}

/// Per-utterance conditioning vectors of the paired training set.
pub fn tts_conditioning(encoder: &SpeakerEncoder, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    utterance_embeddings(encoder, &corpus.paired_train)
}

/// The three pretrained models of one seed.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub speaker: SpeakerEncoder,
    pub asr: Asr,
    pub tts: Tts,
    pub speaker_report: SpeakerTrainReport,
    pub asr_report: TrainReport,
    pub tts_history: Vec<TtsTerms>,
}

pub fn pretrain_all(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    master: u64,
    log: &mut dyn FnMut(&str),
) -> Result<Pretrained> {
    let seeds = StageSeeds::from_master(master);
    let (speaker, speaker_report) = train_speaker_encoder(&cfg.speaker, corpus, master)?;
    log(&format!(
        "speaker encoder: train accuracy {:.3}",
        speaker_report.train_accuracy
    ));

    let mut asr = Asr::new(seeded_asr_config(&cfg.asr, master))?;
    let asr_report = pretrain_asr(
        &mut asr,
        &corpus.paired_train,
        &corpus.dev,
        corpus.feature_mean(),
        seeds.asr_run,
        |e| {
            log(&format!(
                "asr epoch {}: loss/token {:.4} dev accuracy {:.4}",
                e.epoch, e.train_loss_per_token, e.dev_metric
            ))
        },
    )?;

    let spk = tts_conditioning(&speaker, corpus)?;
    let mut tts = Tts::new(seeded_tts_config(&cfg.tts, master))?;
    let tts_history = pretrain_tts(&mut tts, &corpus.paired_train, &spk, seeds.tts_run, |epoch, t| {
        log(&format!(
            "tts epoch {epoch}: loss {:.4} guided {:.4}",
            t.total, t.guided
        ))
    })?;
    Ok(Pretrained {
        speaker,
        asr,
        tts,
        speaker_report,
        asr_report,
        tts_history,
    })
}

/// One-line progress summary of an adaptation epoch.
pub fn format_epoch(name: &str, e: &AdaptEpochLog) -> String {
    format!(
        "{name} epoch {}: asr {:.4} tts {:.4} chain {:.4} dev WER {}",
        e.epoch,
        e.asr_loss,
        e.tts_loss,
        e.chain_loss,
        e.dev_wer.map_or("-".into(), |w| format!("{w:.2}"))
    )
}

fn record(system: &str, test_set: &str, asr: &Asr, utts: &[Utterance]) -> Result<ReportRecord> {
    Ok(ReportRecord {
        system: system.into(),
        test_set: test_set.into(),
        report: asr_wer(asr, utts)?,
    })
}

/// TTS robustness result: synthetic speech of one test set's text scored
/// by the frozen baseline ASR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub system: String,
    pub test_set: String,
    pub report: RobustnessReport,
}

/// Scores `tts` on the text of both test sets with the frozen `scorer`,
/// pairing texts with the training-speaker pool.
pub fn robustness_records(
    system: &str,
    tts: &Tts,
    scorer: &Asr,
    corpus: &Corpus,
    pool: &[crate::speaker::SpeakerEmbedding],
    rng_seed: u64,
) -> Result<Vec<RobustnessRecord>> {
    [(TEST_SOURCE, &corpus.test_source), (TEST_TARGET, &corpus.test_target)]
        .into_iter()
        .map(|(name, set)| {
            let texts: Vec<_> = set.iter().map(|u| (u.chars.clone(), u.phonemes.clone())).collect();
            Ok(RobustnessRecord {
                system: system.into(),
                test_set: name.into(),
                report: tts_robustness_eval(tts, scorer, &texts, pool, rng_seed)?,
            })
        })
        .collect()
}

/// All table cells of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResults {
    pub master_seed: u64,
    pub asr: Vec<ReportRecord>,
    pub robustness: Vec<RobustnessRecord>,
    pub adaptation_logs: Vec<(String, Vec<AdaptEpochLog>)>,
    pub asr_pretrain: TrainReport,
}

impl SeedResults {
    pub fn asr_wer(&self, system: &str, test_set: &str) -> Option<f64> {
        self.asr
            .iter()
            .find(|r| r.system == system && r.test_set == test_set)
            .map(|r| r.report.wer_percent)
    }

    pub fn tts_wer(&self, system: &str, test_set: &str) -> Option<f64> {
        self.robustness
            .iter()
            .find(|r| r.system == system && r.test_set == test_set)
            .map(|r| r.report.wer.wer_percent)
    }
}

/// Pretrains, runs every adaptation recipe and evaluates every system for
/// one master seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    master: u64,
    log: &mut dyn FnMut(&str),
) -> Result<SeedResults> {
    use systems::*;
    cfg.validate()?;
    let seeds = StageSeeds::from_master(master);
    let pre = pretrain_all(cfg, corpus, master, log)?;
    let inputs = AdaptationInputs::from_corpus(corpus, &pre.speaker)?;
    let run = AdaptRun {
        balance: cfg.balance,
        run_seed: seeds.adapt_run,
    };
    let mut asr_records = vec![
        record(BASELINE, TEST_SOURCE, &pre.asr, &corpus.test_source)?,
        record(BASELINE, TEST_TARGET, &pre.asr, &corpus.test_target)?,
    ];
    let mut logs = Vec::new();
    let mut report_adapt = |name: &str, a: &Adapted, logs: &mut Vec<(String, Vec<AdaptEpochLog>)>| {
        for e in &a.history {
            log(&format_epoch(name, e));
        }
        logs.push((name.to_string(), a.history.clone()));
    };

    let both = adapt_domain(&pre.asr, &pre.tts, &inputs, true, &cfg.adapt, run, |_| {})?;
    report_adapt(DOMAIN_BOTH, &both, &mut logs);
    asr_records.push(record(DOMAIN_BOTH, TEST_SOURCE, &both.asr, &corpus.test_source)?);
    asr_records.push(record(DOMAIN_BOTH, TEST_TARGET, &both.asr, &corpus.test_target)?);
    let mut robustness = robustness_records(
        TTS_BASELINE,
        &pre.tts,
        &pre.asr,
        corpus,
        &inputs.training_pool,
        seeds.robustness,
    )?;
    robustness.extend(robustness_records(
        TTS_ADAPTED,
        &both.tts,
        &pre.asr,
        corpus,
        &inputs.training_pool,
        seeds.robustness,
    )?);
    drop(both);

    let asr_only = adapt_domain(&pre.asr, &pre.tts, &inputs, false, &cfg.adapt, run, |_| {})?;
    report_adapt(DOMAIN_ASR_ONLY, &asr_only, &mut logs);
    asr_records.push(record(
        DOMAIN_ASR_ONLY,
        TEST_SOURCE,
        &asr_only.asr,
        &corpus.test_source,
    )?);
    asr_records.push(record(
        DOMAIN_ASR_ONLY,
        TEST_TARGET,
        &asr_only.asr,
        &corpus.test_target,
    )?);

    for (name, k) in [(SPEAKER_REFS1, 1), (SPEAKER_REFS5, 5)] {
        let a = adapt_speaker(&pre.asr, &pre.tts, &pre.speaker, &inputs, k, &cfg.adapt, run, |_| {})?;
        report_adapt(name, &a, &mut logs);
        asr_records.push(record(name, TEST_TARGET, &a.asr, &corpus.test_target)?);
    }
    Ok(SeedResults {
        master_seed: master,
        asr: asr_records,
        robustness,
        adaptation_logs: logs,
        asr_pretrain: pre.asr_report,
    })
}
