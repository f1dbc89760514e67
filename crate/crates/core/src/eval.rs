//! Scoring: edit-distance WER over space-delimited token groups, attention
//! alignment diagnostics and graymap export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{bail, Result};
use crate::tensor::{argmax, Tensor};

/// Substitution / deletion / insertion counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. Among optimal
/// alignments the backtrace prefers substitutions (or matches), then
/// deletions, then insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word-level edit counts between two character sequences of the same
/// vocabulary.
pub fn word_edit_counts(reference: &TokenSequence, hyp: &TokenSequence) -> Result<EditCounts> {
    if reference.kind() != hyp.kind() {
        bail!(Argument, "reference and hypothesis use different vocabularies");
    }
    Ok(edit_distance(&reference.words(), &hyp.words()))
}

/// Splits raw text into space-delimited words.
pub fn words(text: &str) -> Vec<&str> {
    text.split(' ').filter(|w| !w.is_empty()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    pub ref_tokens: usize,
    pub wer_percent: f64,
}

impl WerReport {
    pub fn from_counts(counts: EditCounts, ref_tokens: usize) -> Result<Self> {
        if ref_tokens == 0 {
            bail!(Argument, "WER needs at least one reference token");
        }
        Ok(Self {
            substitutions: counts.substitutions,
            deletions: counts.deletions,
            insertions: counts.insertions,
            ref_tokens,
            wer_percent: 100.0 * counts.total() as f64 / ref_tokens as f64,
        })
    }

    /// Pools two reports by summing their counts.
    pub fn merge(&self, other: &WerReport) -> WerReport {
        let counts = EditCounts {
            substitutions: self.substitutions + other.substitutions,
            deletions: self.deletions + other.deletions,
            insertions: self.insertions + other.insertions,
        };
        WerReport::from_counts(counts, self.ref_tokens + other.ref_tokens).expect("nonzero reference tokens")
    }
}

/// Corpus-level WER over text pairs: summed errors over summed reference
/// words.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        bail!(Argument, "{} references but {} hypotheses", refs.len(), hyps.len());
    }
    if refs.is_empty() {
        bail!(Argument, "no references");
    }
    let mut counts = EditCounts::default();
    let mut ref_tokens = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let rw = words(r.as_ref());
        let hw = words(h.as_ref());
        let c = edit_distance(&rw, &hw);
        counts.substitutions += c.substitutions;
        counts.deletions += c.deletions;
        counts.insertions += c.insertions;
        ref_tokens += rw.len();
    }
    WerReport::from_counts(counts, ref_tokens)
}

/// One JSONL line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub system: String,
    pub test_set: String,
    #[serde(flatten)]
    pub report: WerReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    pub diagonality: f64,
    pub monotonicity_violations: usize,
    pub coverage_deficit: f64,
}

const DIAGONAL_WIDTH: f64 = 0.2;

/// Row-stochastic check shared by the diagnostics and exporters.
pub fn check_row_stochastic(align: &Tensor) -> Result<()> {
    if align.rows() == 0 || align.cols() == 0 {
        bail!(Argument, "empty alignment");
    }
    for r in 0..align.rows() {
        let row = align.row(r);
        if row.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            bail!(Argument, "alignment row {r} has entries outside [0, 1]");
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            bail!(Argument, "alignment row {r} sums to {s}");
        }
    }
    Ok(())
}

/// Diagonality, monotonicity violations and coverage deficit of a
/// decoder-steps × encoder-steps alignment.
pub fn alignment_diagnostics(align: &Tensor) -> Result<AlignmentDiagnostics> {
    check_row_stochastic(align)?;
    let (t_len, n_len) = align.shape();
    let mut diag = 0.0;
    let mut violations = 0;
    let mut prev: Option<usize> = None;
    for t in 0..t_len {
        let am = argmax(align.row(t));
        let d = am as f64 / n_len as f64 - t as f64 / t_len as f64;
        diag += (-d * d / (2.0 * DIAGONAL_WIDTH * DIAGONAL_WIDTH)).exp();
        if let Some(p) = prev {
            if am < p {
                violations += 1;
            }
        }
        prev = Some(am);
    }
    let mut deficit = 0.0;
    for n in 0..n_len {
        let col: f64 = (0..t_len).map(|t| align.get(t, n)).sum();
        deficit += (1.0 - col).max(0.0);
    }
    Ok(AlignmentDiagnostics {
        diagonality: diag / t_len as f64,
        monotonicity_violations: violations,
        coverage_deficit: deficit / n_len as f64,
    })
}

/// Binary graymap bytes: width = encoder steps, height = decoder steps,
/// decoder step 0 on the bottom row, white = weight 1.
pub fn alignment_pgm(align: &Tensor) -> Result<Vec<u8>> {
    check_row_stochastic(align)?;
    let (h, w) = align.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        let t = h - 1 - y;
        for n in 0..w {
            out.push((align.get(t, n).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn export_alignment_plot(align: &Tensor, path: &Path) -> Result<()> {
    let bytes = alignment_pgm(align)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Decodes every utterance with the ASR's configured search and pools WER.
pub fn asr_wer(asr: &crate::asr::Asr, utts: &[crate::corpus::Utterance]) -> Result<WerReport> {
    let refs: Vec<String> = utts.iter().map(|u| u.chars.to_text()).collect();
    let hyps = utts
        .iter()
        .map(|u| asr.decode(&u.spec).map(|h| h.to_text()))
        .collect::<Result<Vec<_>>>()?;
    wer(&refs, &hyps)
}

/// Pairs every text with a speaker through a seeded permutation of the
/// pool cycled to the text count, synthesizes it and scores the frozen
/// ASR's transcripts against the input text.
pub fn tts_robustness_eval(
    tts: &crate::tts::Tts,
    asr: &crate::asr::Asr,
    texts: &[(TokenSequence, TokenSequence)],
    pool: &[crate::speaker::SpeakerEmbedding],
    rng_seed: u64,
) -> Result<RobustnessReport> {
    tts_robustness_eval_with(tts, asr, texts, pool, rng_seed, |_, _| Ok(()))
}

/// [`tts_robustness_eval`] that also hands every utterance's index and TTS
/// alignment to `on_utt`.
pub fn tts_robustness_eval_with(
    tts: &crate::tts::Tts,
    asr: &crate::asr::Asr,
    texts: &[(TokenSequence, TokenSequence)],
    pool: &[crate::speaker::SpeakerEmbedding],
    rng_seed: u64,
    mut on_utt: impl FnMut(usize, &Tensor) -> Result<()>,
) -> Result<RobustnessReport> {
    use rand::seq::SliceRandom;
    if pool.is_empty() {
        bail!(Argument, "speaker pool is empty");
    }
    let mut slots: Vec<usize> = (0..texts.len()).map(|i| i % pool.len()).collect();
    slots.shuffle(&mut crate::seed::rng(rng_seed));
    let mut refs = Vec::with_capacity(texts.len());
    let mut hyps = Vec::with_capacity(texts.len());
    let mut truncated = 0;
    let mut diag = AlignmentDiagnostics {
        diagonality: 0.0,
        monotonicity_violations: 0,
        coverage_deficit: 0.0,
    };
    for (i, ((chars, phonemes), &slot)) in texts.iter().zip(&slots).enumerate() {
        let (spec, align, trunc) = tts.synthesize(phonemes, &pool[slot].vector)?;
        on_utt(i, &align)?;
        let d = alignment_diagnostics(&align)?;
        diag.diagonality += d.diagonality;
        diag.monotonicity_violations += d.monotonicity_violations;
        diag.coverage_deficit += d.coverage_deficit;
        truncated += usize::from(trunc);
        refs.push(chars.to_text());
        hyps.push(asr.decode(&spec)?.to_text());
    }
    let n = texts.len().max(1) as f64;
    diag.diagonality /= n;
    diag.coverage_deficit /= n;
    Ok(RobustnessReport {
        wer: wer(&refs, &hyps)?,
        truncated,
        mean_diagonality: diag.diagonality,
        monotonicity_violations: diag.monotonicity_violations,
        mean_coverage_deficit: diag.coverage_deficit,
    })
}

/// Loads both checkpoints, then runs [`tts_robustness_eval`].
pub fn tts_robustness_eval_checkpoints(
    tts_checkpoint: &Path,
    frozen_asr_checkpoint: &Path,
    texts: &[(TokenSequence, TokenSequence)],
    pool: &[crate::speaker::SpeakerEmbedding],
    rng_seed: u64,
) -> Result<RobustnessReport> {
    let tts = crate::tts::Tts::load(tts_checkpoint)?;
    let asr = crate::asr::Asr::load(frozen_asr_checkpoint)?;
    tts_robustness_eval(&tts, &asr, texts, pool, rng_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub wer: WerReport,
    pub truncated: usize,
    pub mean_diagonality: f64,
    pub monotonicity_violations: usize,
    pub mean_coverage_deficit: f64,
}
