//! On-disk corpus layout.
//!
//! ```text
//! <dir>/corpus.toml          the generating config
//! <dir>/voices.jsonl         one Voice per line
//! <dir>/manifest.jsonl       one ManifestRecord per utterance
//! <dir>/features/<id>.f32    f32 LE, row-major [num_frames x mel_bins]
//! <dir>/features/<id>.json   FeatureHeader sidecar
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusConfig, Domain, Spectrogram, Split, TextItem, TokenSequence, Utterance, VocabKind, Voice};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub split: Split,
    pub speaker_id: Option<String>,
    pub domain: Domain,
    pub char_text: String,
    pub phoneme_text: String,
    pub feature_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub num_frames: usize,
    pub mel_bins: usize,
    pub frame_shift_ms: f64,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const VOICES: &str = "voices.jsonl";
pub const CONFIG: &str = "corpus.toml";

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `spec` as raw f32 plus its JSON header sidecar; returns the bytes
/// of the binary file.
pub fn write_features(path: &Path, spec: &Spectrogram) -> Result<Vec<u8>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(spec.frames().len() * 4);
    for &v in spec.frames().data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes)?;
    let header = FeatureHeader {
        num_frames: spec.num_frames(),
        mel_bins: spec.mel_bins(),
        frame_shift_ms: spec.frame_shift_ms(),
    };
    fs::write(sidecar(path), serde_json::to_string(&header)? + "\n")?;
    Ok(bytes)
}

pub fn read_features(path: &Path) -> Result<Spectrogram> {
    let header: FeatureHeader = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != header.num_frames * header.mel_bins * 4 {
        bail!(
            Format,
            "{}: {} bytes for a {}x{} feature matrix",
            path.display(),
            bytes.len(),
            header.num_frames,
            header.mel_bins
        );
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Spectrogram::new(
        Tensor::from_vec(header.num_frames, header.mel_bins, data),
        header.frame_shift_ms,
    )
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes the full corpus; returns a SHA-256 over the manifest and every
/// feature file, in manifest order.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir.join("features"))?;
    let cfg_text = toml::to_string(&corpus.config).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(CONFIG), cfg_text)?;
    write_jsonl(&dir.join(VOICES), &corpus.voices)?;

    let mut records = Vec::new();
    let mut hasher = Sha256::new();
    let mut paired = |split: Split, utts: &[Utterance], records: &mut Vec<ManifestRecord>| -> Result<()> {
        for u in utts {
            let rel = format!("features/{}.f32", u.utt_id);
            let bytes = write_features(&dir.join(&rel), &u.spec)?;
            hasher.update(&bytes);
            records.push(ManifestRecord {
                utt_id: u.utt_id.clone(),
                split,
                speaker_id: Some(u.speaker_id.clone()),
                domain: u.chars.domain(),
                char_text: u.chars.to_text(),
                phoneme_text: u.phonemes.to_text(),
                feature_file: Some(rel),
            });
        }
        Ok(())
    };
    paired(Split::Train, &corpus.paired_train, &mut records)?;
    paired(Split::Dev, &corpus.dev, &mut records)?;
    paired(Split::TestSource, &corpus.test_source, &mut records)?;
    paired(Split::TestTarget, &corpus.test_target, &mut records)?;
    for t in &corpus.unpaired_target_text {
        records.push(ManifestRecord {
            utt_id: t.utt_id.clone(),
            split: Split::Unpaired,
            speaker_id: None,
            domain: t.chars.domain(),
            char_text: t.chars.to_text(),
            phoneme_text: t.phonemes.to_text(),
            feature_file: None,
        });
    }
    let manifest = write_jsonl(&dir.join(MANIFEST), &records)?;
    hasher.update(&manifest);
    Ok(hex::encode(hasher.finalize()))
}

/// Reads a corpus previously written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let cfg_path = dir.join(CONFIG);
    let cfg_text =
        fs::read_to_string(&cfg_path).map_err(|e| Error::State(format!("no corpus at {}: {e}", dir.display())))?;
    let config: CorpusConfig = toml::from_str(&cfg_text).map_err(|e| Error::Format(e.to_string()))?;
    let voices: Vec<Voice> = read_jsonl(&dir.join(VOICES))?;
    let records: Vec<ManifestRecord> = read_jsonl(&dir.join(MANIFEST))?;
    let mut corpus = Corpus {
        config,
        voices,
        paired_train: Vec::new(),
        unpaired_target_text: Vec::new(),
        dev: Vec::new(),
        test_source: Vec::new(),
        test_target: Vec::new(),
    };
    for r in records {
        let chars = TokenSequence::parse(&r.char_text, VocabKind::Character, r.domain)?;
        let phonemes = TokenSequence::parse(&r.phoneme_text, VocabKind::Phoneme, r.domain)?;
        if r.split == Split::Unpaired {
            if r.feature_file.is_some() {
                bail!(Format, "unpaired record {} carries features", r.utt_id);
            }
            corpus.unpaired_target_text.push(TextItem {
                utt_id: r.utt_id,
                chars,
                phonemes,
            });
            continue;
        }
        let (Some(file), Some(speaker_id)) = (r.feature_file, r.speaker_id) else {
            bail!(Format, "paired record {} lacks features or speaker", r.utt_id);
        };
        let utt = Utterance {
            spec: read_features(&dir.join(file))?,
            utt_id: r.utt_id,
            speaker_id,
            chars,
            phonemes,
        };
        match r.split {
            Split::Train => corpus.paired_train.push(utt),
            Split::Dev => corpus.dev.push(utt),
            Split::TestSource => corpus.test_source.push(utt),
            Split::TestTarget => corpus.test_target.push(utt),
            Split::Unpaired => unreachable!(),
        }
    }
    corpus.check_invariants()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            paired_train: 6,
            unpaired_target: 4,
            dev: 2,
            test_source: 2,
            test_target: 2,
            ..Default::default()
        }
    }

    #[test]
    fn rebuild_gives_identical_hash() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (_, h1) = build_corpus(&tiny(), d1.path()).unwrap();
        let (_, h2) = build_corpus(&tiny(), d2.path()).unwrap();
        assert_eq!(h1, h2);
        let m1 = fs::read(d1.path().join(MANIFEST)).unwrap();
        let m2 = fs::read(d2.path().join(MANIFEST)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn load_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let (c, _) = build_corpus(&tiny(), d.path()).unwrap();
        let back = load_corpus(d.path()).unwrap();
        assert_eq!(back.paired_train, c.paired_train);
        assert_eq!(back.unpaired_target_text, c.unpaired_target_text);
        assert_eq!(back.test_target, c.test_target);
        assert_eq!(back.voices, c.voices);
    }

    #[test]
    fn manifest_records_match_schema() {
        let d = tempfile::tempdir().unwrap();
        build_corpus(&tiny(), d.path()).unwrap();
        let text = fs::read_to_string(d.path().join(MANIFEST)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "utt_id",
            "split",
            "speaker_id",
            "domain",
            "char_text",
            "phoneme_text",
            "feature_file",
        ] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert!(last["feature_file"].is_null());
        let header = fs::read_to_string(d.path().join("features/train-00000.json")).unwrap();
        let h: FeatureHeader = serde_json::from_str(&header).unwrap();
        let raw = fs::metadata(d.path().join("features/train-00000.f32")).unwrap().len();
        assert_eq!(raw as usize, h.num_frames * h.mel_bins * 4);
    }

    #[test]
    fn truncated_feature_file_is_a_format_error() {
        let d = tempfile::tempdir().unwrap();
        build_corpus(&tiny(), d.path()).unwrap();
        let p = d.path().join("features/train-00000.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format(_))));
    }
}
