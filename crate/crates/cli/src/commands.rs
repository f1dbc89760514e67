//! Command implementations. Every command returns the summary printed as
//! the final `RESULT` line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use speech_chain::adaptation::{
    adapt_domain, adapt_speaker, training_speaker_pool, AdaptRun, AdaptationInputs, Adapted,
};
use speech_chain::asr::Asr;
use speech_chain::checkpoint::{self, file_hash};
use speech_chain::corpus::manifest::{load_corpus, write_features, MANIFEST};
use speech_chain::corpus::{build_corpus, Corpus, CorpusConfig, Domain, TokenSequence, Utterance, VocabKind};
use speech_chain::eval::{self, export_alignment_plot, ReportRecord};
use speech_chain::experiment::{
    seeded_asr_config, seeded_tts_config, train_speaker_encoder, tts_conditioning, StageSeeds,
};
use speech_chain::speaker::{SpeakerEmbedding, SpeakerEncoder};
use speech_chain::train::{AsrPretrainer, TtsPretrainer};
use speech_chain::tts::Tts;

use crate::config::{parse_toml, usage, RunConfig, OUTPUT_ROOT_ENV};

/// Summary of a finished command: `RESULT <command> key=value ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub command: String,
    pub fields: Vec<(String, String)>,
}

impl Outcome {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            fields: Vec::new(),
        }
    }

    fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn line(&self) -> String {
        let mut s = format!("RESULT {}", self.command);
        for (k, v) in &self.fields {
            let _ = write!(s, " {k}={v}");
        }
        s
    }
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn state(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.state"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}_metrics.jsonl"))
    }

    pub fn adapt(&self, name: &str) -> PathBuf {
        self.root.join("adapt").join(name)
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.jsonl")
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    /// Appends one provenance record naming the command, the run config
    /// hash and the hash of every output file.
    fn record(&self, command: &str, rc: &RunConfig, outputs: &[PathBuf]) -> Result<()> {
        #[derive(Serialize)]
        struct Output {
            path: String,
            sha256: String,
        }
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(Output {
                    path: self.relative(p),
                    sha256: file_hash(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = serde_json::json!({
            "command": command,
            "seed": rc.seed,
            "config_hash": rc.hash()?,
            "outputs": outputs,
        });
        append_line(&self.manifest(), &serde_json::to_string(&rec)?)
    }

    /// Loads the run's corpus, building it first when absent. A corpus
    /// built from a different config is an error.
    pub fn corpus_for(&self, rc: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<Corpus> {
        let dir = self.corpus();
        if !dir.join(MANIFEST).exists() {
            log(&format!("building corpus in {}", dir.display()));
            build_corpus(&rc.experiment.corpus, &dir)?;
        }
        let corpus = load_corpus(&dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
        if corpus.config != rc.experiment.corpus {
            return Err(usage(format!(
                "corpus in {} was built from a different config",
                dir.display()
            )));
        }
        Ok(corpus)
    }

    fn load_speaker(&self) -> Result<SpeakerEncoder> {
        let p = self.model("speaker");
        SpeakerEncoder::load(&p).with_context(|| format!("pretrain the speaker encoder first ({})", p.display()))
    }

    fn load_asr(&self) -> Result<Asr> {
        let p = self.model("asr");
        Asr::load(&p).with_context(|| format!("pretrain the ASR first ({})", p.display()))
    }

    fn load_tts(&self) -> Result<Tts> {
        let p = self.model("tts");
        Tts::load(&p).with_context(|| format!("pretrain the TTS first ({})", p.display()))
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Default output root when neither a flag nor the environment names one.
pub const DEFAULT_ROOT: &str = "runs";

pub fn build_corpus_cmd(config: &Path, out_dir: Option<&Path>) -> Result<Outcome> {
    let cfg: CorpusConfig = parse_toml(config, "corpus config")?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|r| !r.is_empty())
            .map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from)
            .join("corpus"),
    };
    let (corpus, hash) = build_corpus(&cfg, &dir)?;
    std::fs::write(dir.join("manifest.sha256"), format!("{hash}\n"))?;
    let utterances = corpus.paired_train.len()
        + corpus.dev.len()
        + corpus.test_source.len()
        + corpus.test_target.len()
        + corpus.unpaired_target_text.len();
    Ok(Outcome::new("build-corpus")
        .with("dir", dir.display())
        .with("utterances", utterances)
        .with("manifest_hash", hash))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Speaker,
    Asr,
    Tts,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Speaker => "speaker",
            Model::Asr => "asr",
            Model::Tts => "tts",
        }
    }
}

/// Pretrains one model. ASR and TTS save their full training state after
/// every epoch; `resume` continues from it. `stop_after` pauses once that
/// many epochs are done in total.
pub fn pretrain_cmd(
    model: Model,
    rc: &RunConfig,
    resume: bool,
    stop_after: Option<usize>,
    log: &mut dyn FnMut(&str),
) -> Result<Outcome> {
    let run = RunDir::new(&rc.output_dir);
    let corpus = run.corpus_for(rc, log)?;
    let seeds = StageSeeds::from_master(rc.seed);
    let keep_going = |done: usize| stop_after.is_none_or(|n| done < n);
    let name = model.name();
    let (ckpt, state, metrics) = (run.model(name), run.state(name), run.metrics(name));
    let out = Outcome::new("pretrain").with("model", name);
    match model {
        Model::Speaker => {
            let (enc, report) = train_speaker_encoder(&rc.experiment.speaker, &corpus, rc.seed)?;
            enc.save(&ckpt)?;
            let lines: Vec<_> = report
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(i, l)| serde_json::json!({"epoch": i + 1, "loss": l}))
                .collect();
            write_jsonl(&metrics, &lines)?;
            run.record("pretrain speaker", rc, &[ckpt, metrics])?;
            Ok(out
                .with("status", "done")
                .with("epochs", report.epoch_losses.len())
                .with("train_accuracy", format!("{:.4}", report.train_accuracy)))
        }
        Model::Asr => {
            let mut asr = Asr::new(seeded_asr_config(&rc.experiment.asr, rc.seed))?;
            let mut trainer = if resume && state.exists() {
                let t = AsrPretrainer::load_state(&mut asr, &state)?;
                log(&format!("resuming ASR after epoch {}", t.epochs_done()));
                t
            } else {
                AsrPretrainer::new(&asr, corpus.feature_mean(), seeds.asr_run)
            };
            while !trainer.is_finished(&asr) && keep_going(trainer.epochs_done()) {
                let e = trainer.run_epoch(&mut asr, &corpus.paired_train, &corpus.dev)?;
                log(&format!(
                    "asr epoch {}: loss/token {:.4} dev accuracy {:.4}",
                    e.epoch, e.train_loss_per_token, e.dev_metric
                ));
                trainer.save_state(&asr, &state)?;
                write_jsonl(&metrics, trainer.history())?;
            }
            if !trainer.is_finished(&asr) {
                return Ok(out.with("status", "paused").with("epochs", trainer.epochs_done()));
            }
            let epochs = trainer.epochs_done();
            let report = trainer.finish(&mut asr);
            write_jsonl(&metrics, &report.history)?;
            asr.save(&ckpt)?;
            run.record("pretrain asr", rc, &[ckpt, metrics])?;
            Ok(out
                .with("status", "done")
                .with("epochs", epochs)
                .with("best_epoch", report.best_epoch)
                .with("dev_token_accuracy", format!("{:.4}", report.best_metric)))
        }
        Model::Tts => {
            let encoder = run.load_speaker()?;
            let spk = tts_conditioning(&encoder, &corpus)?;
            let mut tts = Tts::new(seeded_tts_config(&rc.experiment.tts, rc.seed))?;
            let mut trainer = if resume && state.exists() {
                let t = TtsPretrainer::load_state(&mut tts, &state)?;
                log(&format!("resuming TTS after epoch {}", t.epochs_done()));
                t
            } else {
                TtsPretrainer::new(&tts, seeds.tts_run)
            };
            while !trainer.is_finished(&tts) && keep_going(trainer.epochs_done()) {
                let t = trainer.run_epoch(&mut tts, &corpus.paired_train, &spk)?;
                log(&format!(
                    "tts epoch {}: loss {:.4} guided {:.4}",
                    trainer.epochs_done(),
                    t.total,
                    t.guided
                ));
                trainer.save_state(&tts, &state)?;
                write_tts_metrics(&metrics, trainer.history())?;
            }
            if !trainer.is_finished(&tts) {
                return Ok(out.with("status", "paused").with("epochs", trainer.epochs_done()));
            }
            let history = trainer.finish();
            write_tts_metrics(&metrics, &history)?;
            tts.save(&ckpt)?;
            run.record("pretrain tts", rc, &[ckpt, metrics])?;
            let last = history.last().copied().unwrap_or_default();
            Ok(out
                .with("status", "done")
                .with("epochs", history.len())
                .with("train_loss", format!("{:.4}", last.total)))
        }
    }
}

fn write_tts_metrics(path: &Path, history: &[speech_chain::train::TtsTerms]) -> Result<()> {
    let lines: Vec<_> = history
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"epoch": i + 1, "terms": t}))
        .collect();
    write_jsonl(path, &lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptKind {
    Domain,
    Speaker,
}

/// Runs one adaptation recipe from the pretrained checkpoints and writes
/// the adapted models under `adapt/<name>/`.
pub fn adapt_cmd(
    kind: AdaptKind,
    rc: &RunConfig,
    update_tts: Option<bool>,
    refs: usize,
    name: Option<&str>,
    log: &mut dyn FnMut(&str),
) -> Result<Outcome> {
    let run = RunDir::new(&rc.output_dir);
    let corpus = run.corpus_for(rc, log)?;
    let (encoder, asr, tts) = (run.load_speaker()?, run.load_asr()?, run.load_tts()?);
    let inputs = AdaptationInputs::from_corpus(&corpus, &encoder)?;
    drop(corpus);
    let adapt_run = AdaptRun {
        balance: rc.experiment.balance,
        run_seed: StageSeeds::from_master(rc.seed).adapt_run,
    };
    let cfg = &rc.experiment.adapt;
    let (default_name, adapted): (String, Adapted) = match kind {
        AdaptKind::Domain => {
            let update_tts = update_tts.unwrap_or(rc.strategy.update_tts);
            let n = if update_tts { "domain_both" } else { "domain_asr_only" };
            (
                n.into(),
                adapt_domain(&asr, &tts, &inputs, update_tts, cfg, adapt_run, |_| {})?,
            )
        }
        AdaptKind::Speaker => {
            if update_tts == Some(true) {
                return Err(usage("speaker adaptation keeps the TTS frozen; drop --update-tts"));
            }
            if refs == 0 {
                return Err(usage("--refs must be at least 1"));
            }
            (
                format!("speaker_refs{refs}"),
                adapt_speaker(&asr, &tts, &encoder, &inputs, refs, cfg, adapt_run, |_| {})?,
            )
        }
    };
    let name = name.map_or(default_name, str::to_string);
    for e in &adapted.history {
        log(&speech_chain::experiment::format_epoch(&name, e));
    }
    let dir = run.adapt(&name);
    std::fs::create_dir_all(&dir)?;
    let (asr_path, tts_path, epochs_path, refs_path) = (
        dir.join("asr.ckpt"),
        dir.join("tts.ckpt"),
        dir.join("epochs.jsonl"),
        dir.join("speaker_pool.jsonl"),
    );
    adapted.asr.save(&asr_path)?;
    adapted.tts.save(&tts_path)?;
    write_jsonl(&epochs_path, &adapted.history)?;
    write_jsonl(&refs_path, &adapted.pool)?;
    run.record(
        &format!("adapt {name}"),
        rc,
        &[asr_path, tts_path, epochs_path, refs_path],
    )?;
    let dev_wer = adapted.history.last().and_then(|e| e.dev_wer);
    Ok(Outcome::new("adapt")
        .with("mode", if kind == AdaptKind::Domain { "domain" } else { "speaker" })
        .with("name", &name)
        .with(
            "update_tts",
            matches!(kind, AdaptKind::Domain) && update_tts.unwrap_or(rc.strategy.update_tts),
        )
        .with("pool_size", adapted.pool.len())
        .with("dev_wer_percent", dev_wer.map_or("nan".into(), |w| format!("{w:.2}"))))
}

fn test_set<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [Utterance]> {
    Ok(match name {
        "test_source" => &corpus.test_source,
        "test_target" => &corpus.test_target,
        "dev" => &corpus.dev,
        other => {
            return Err(usage(format!(
                "unknown test set {other} (test_source, test_target, dev)"
            )))
        }
    })
}

/// Evaluates an ASR checkpoint by decoding, or a TTS checkpoint through
/// the robustness protocol scored by `scorer` (the baseline ASR by
/// default).
pub fn eval_cmd(
    rc: &RunConfig,
    set_name: &str,
    checkpoint_path: &Path,
    system: Option<&str>,
    scorer: Option<&Path>,
    plot_alignments: bool,
    log: &mut dyn FnMut(&str),
) -> Result<Outcome> {
    let run = RunDir::new(&rc.output_dir);
    let header = checkpoint::read_header(checkpoint_path).map_err(|e| usage(format!("{e}")))?;
    let corpus = run.corpus_for(rc, log)?;
    let utts = test_set(&corpus, set_name)?;
    let system = system.map(str::to_string).unwrap_or_else(|| {
        checkpoint_path
            .parent()
            .and_then(Path::file_name)
            .map_or("system".into(), |n| format!("{}_{}", n.to_string_lossy(), header.kind))
    });
    let plots = run.eval().join("plots").join(&system).join(set_name);
    let mut outputs = Vec::new();
    let mut plot = |i: usize, align: &speech_chain::tensor::Tensor| -> speech_chain::Result<()> {
        if plot_alignments {
            export_alignment_plot(align, &plots.join(format!("{}.pgm", utts[i].utt_id)))?;
        }
        Ok(())
    };
    let report_path = run.eval().join(format!("{system}.{set_name}.jsonl"));
    let report = match header.kind.as_str() {
        speech_chain::asr::CHECKPOINT_KIND => {
            let asr = Asr::load(checkpoint_path)?;
            let mut hyps = Vec::with_capacity(utts.len());
            for (i, u) in utts.iter().enumerate() {
                let h = asr.decode(&u.spec)?;
                plot(i, &h.alignment)?;
                hyps.push(h.to_text());
            }
            let refs: Vec<String> = utts.iter().map(|u| u.chars.to_text()).collect();
            let report = eval::wer(&refs, &hyps)?;
            let rec = ReportRecord {
                system: system.clone(),
                test_set: set_name.into(),
                report: report.clone(),
            };
            write_jsonl(&report_path, &[rec])?;
            report
        }
        speech_chain::tts::CHECKPOINT_KIND => {
            let tts = Tts::load(checkpoint_path)?;
            let scorer_path = scorer.map_or_else(|| run.model("asr"), Path::to_path_buf);
            let asr = Asr::load(&scorer_path).with_context(|| format!("loading scorer {}", scorer_path.display()))?;
            let pool = training_speaker_pool(&run.load_speaker()?, &corpus.paired_train)?;
            let texts: Vec<_> = utts.iter().map(|u| (u.chars.clone(), u.phonemes.clone())).collect();
            let seed = StageSeeds::from_master(rc.seed).robustness;
            let r = eval::tts_robustness_eval_with(&tts, &asr, &texts, &pool, seed, &mut plot)?;
            let rec = serde_json::json!({
                "system": system,
                "test_set": set_name,
                "S": r.wer.substitutions,
                "D": r.wer.deletions,
                "I": r.wer.insertions,
                "ref_tokens": r.wer.ref_tokens,
                "wer_percent": r.wer.wer_percent,
                "truncated": r.truncated,
                "mean_diagonality": r.mean_diagonality,
                "monotonicity_violations": r.monotonicity_violations,
                "mean_coverage_deficit": r.mean_coverage_deficit,
            });
            write_jsonl(&report_path, &[rec])?;
            r.wer
        }
        other => bail!(usage(format!("cannot evaluate a {other} checkpoint"))),
    };
    outputs.push(report_path);
    run.record(&format!("eval {system} {set_name}"), rc, &outputs)?;
    Ok(Outcome::new("eval")
        .with("system", &system)
        .with("test_set", set_name)
        .with("ref_tokens", report.ref_tokens)
        .with("wer_percent", format!("{:.2}", report.wer_percent)))
}

/// Where the phonemes to synthesize come from.
pub enum SynthText<'a> {
    UttId(&'a str),
    Phonemes(&'a str),
}

/// Synthesizes one text with a training speaker's centroid voice; writes
/// the features and the alignment graymap.
pub fn synthesize_cmd(
    rc: &RunConfig,
    checkpoint_path: &Path,
    text: SynthText,
    speaker: &str,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Outcome> {
    let run = RunDir::new(&rc.output_dir);
    let corpus = run.corpus_for(rc, log)?;
    let tts = Tts::load(checkpoint_path)?;
    let (name, phonemes) = match text {
        SynthText::UttId(id) => {
            let found = [
                &corpus.paired_train,
                &corpus.dev,
                &corpus.test_source,
                &corpus.test_target,
            ]
            .into_iter()
            .flat_map(|s| s.iter().map(|u| (&u.utt_id, &u.phonemes)))
            .chain(corpus.unpaired_target_text.iter().map(|t| (&t.utt_id, &t.phonemes)))
            .find(|(u, _)| u.as_str() == id);
            let Some((_, p)) = found else {
                return Err(usage(format!("no utterance {id} in the corpus")));
            };
            (id.to_string(), p.clone())
        }
        SynthText::Phonemes(t) => {
            let p = TokenSequence::parse(t, VocabKind::Phoneme, Domain::Target)
                .map_err(|e| usage(format!("bad phoneme text: {e}")))?;
            ("text".to_string(), p)
        }
    };
    let pool = training_speaker_pool(&run.load_speaker()?, &corpus.paired_train)?;
    let label = format!("centroid:{speaker}");
    let Some(voice): Option<&SpeakerEmbedding> = pool.iter().find(|e| e.source_utt_id == label) else {
        return Err(usage(format!("{speaker} is not a training speaker")));
    };
    let (spec, align, truncated) = tts.synthesize(&phonemes, &voice.vector)?;
    let dir = out_dir.map_or_else(|| run.root.join("synth"), Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let stem = format!("{name}.{speaker}");
    let (feat, pgm) = (dir.join(format!("{stem}.f32")), dir.join(format!("{stem}.pgm")));
    write_features(&feat, &spec)?;
    export_alignment_plot(&align, &pgm)?;
    let diag = eval::alignment_diagnostics(&align)?;
    Ok(Outcome::new("synthesize")
        .with("features", feat.display())
        .with("frames", spec.num_frames())
        .with("truncated", truncated)
        .with("diagonality", format!("{:.4}", diag.diagonality)))
}
