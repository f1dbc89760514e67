//! Deterministic parametric speech generator standing in for recordings.
//!
//! Every phoneme owns a formant-like spectral row. An utterance is rendered
//! by holding each row for a jittered number of frames (the first frame of a
//! segment is attenuated as an onset marker), shifting it along the mel axis
//! by the voice's offset, scaling by the voice gain and adding white noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{silence_id, TokenSequence, VocabKind, Vocabulary, PHONEMES};
use crate::error::{bail, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Frames × mel bins, all entries finite, at least one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: Tensor,
    frame_shift_ms: f64,
}

impl Spectrogram {
    pub fn new(frames: Tensor, frame_shift_ms: f64) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            bail!(Shape, "spectrogram needs at least one frame and one bin");
        }
        if !frames.is_finite() {
            bail!(Argument, "spectrogram contains non-finite values");
        }
        if !(frame_shift_ms > 0.0) {
            bail!(Argument, "frame shift must be positive");
        }
        Ok(Self { frames, frame_shift_ms })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn mean(&self) -> f64 {
        self.frames.sum() / self.frames.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub speaker_id: String,
    /// Offset of the spectral pattern along the mel axis, in bins.
    pub base_shift: f64,
    pub template_gain: f64,
    pub noise_std: f64,
}

impl Voice {
    pub fn validate(&self) -> Result<()> {
        if !(self.template_gain > 0.0) || !(self.noise_std >= 0.0) {
            bail!(Config, "voice {} has invalid gain/noise", self.speaker_id);
        }
        if self.noise_std >= self.template_gain {
            bail!(
                Config,
                "voice {}: noise_std must stay below template_gain",
                self.speaker_id
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mel_bins: usize,
    /// Nominal frames per phoneme.
    pub duration: usize,
    /// Draw each duration from `{D-1, D, D+1}`.
    pub jitter: bool,
    pub frame_shift_ms: f64,
    /// Gaussian width of a formant bump, in bins.
    pub formant_width: f64,
    /// Attenuation of the first frame of each segment.
    pub onset_scale: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mel_bins: 20,
            duration: 6,
            jitter: true,
            frame_shift_ms: 10.0,
            formant_width: 1.0,
            onset_scale: 0.75,
        }
    }
}

const F1: [f64; 3] = [2.0, 5.0, 8.0];
const F2: [f64; 4] = [11.0, 13.5, 16.0, 18.5];

/// Flat energy floor of voiced phonemes (the upper half of the inventory).
const VOICING: f64 = 0.4;

/// `(position, amplitude)` formants of phoneme index `k` in `0..24`.
fn formants(k: usize) -> [(f64, f64); 2] {
    [(F1[k % 3], 1.0), (F2[(k / 3) % 4], 0.8)]
}

/// The oracle's deterministic renderer.
#[derive(Clone, Debug)]
pub struct Oracle {
    cfg: OracleConfig,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// The steady-state spectral row of a phoneme for a voice (noise free,
    /// before the onset envelope).
    pub fn template_row(&self, phoneme: usize, voice: &Voice) -> Result<Vec<f64>> {
        let v = Vocabulary::phonemes();
        if phoneme >= v.len() || Vocabulary::is_special(phoneme) {
            bail!(Vocabulary, "unknown phoneme id {phoneme}");
        }
        let mut row = vec![0.0; self.cfg.mel_bins];
        if phoneme == silence_id() {
            return Ok(row);
        }
        let k = phoneme - Vocabulary::first_regular();
        debug_assert!(k < PHONEMES.len());
        let w2 = 2.0 * self.cfg.formant_width * self.cfg.formant_width;
        let scale = self.cfg.mel_bins as f64 / 20.0;
        let floor = if k >= 12 { VOICING } else { 0.0 };
        for (m, out) in row.iter_mut().enumerate() {
            *out = floor;
            for (pos, amp) in formants(k) {
                let d = m as f64 - (pos * scale + voice.base_shift);
                *out += amp * (-d * d / w2).exp();
            }
            *out *= voice.template_gain;
        }
        Ok(row)
    }

    /// Per-phoneme frame counts drawn from the seeded stream.
    pub fn durations(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let d = self.cfg.duration;
        (0..n)
            .map(|_| {
                if self.cfg.jitter && d > 1 {
                    rng.random_range(d - 1..=d + 1)
                } else {
                    d
                }
            })
            .collect()
    }

    pub fn synthesize(&self, phonemes: &TokenSequence, voice: &Voice, rng_seed: u64) -> Result<Spectrogram> {
        if phonemes.kind() != VocabKind::Phoneme {
            bail!(Vocabulary, "oracle expects a phoneme sequence");
        }
        voice.validate()?;
        let mut rng = seed::rng(rng_seed);
        let durations = self.durations(phonemes.len(), &mut rng);
        let total: usize = durations.iter().sum();
        let mel = self.cfg.mel_bins;
        let mut frames = Tensor::zeros(total, mel);
        let noise = Normal::new(0.0, voice.noise_std.max(0.0)).expect("valid normal");
        let mut t = 0;
        for (&p, &d) in phonemes.ids().iter().zip(&durations) {
            let row = self.template_row(p, voice)?;
            for j in 0..d {
                let env = if j == 0 { self.cfg.onset_scale } else { 1.0 };
                for (out, &v) in frames.row_mut(t).iter_mut().zip(&row) {
                    let n = if voice.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    // Values are kept f32-representable so that feature files
                    // round-trip exactly.
                    *out = (env * v + n) as f32 as f64;
                }
                t += 1;
            }
        }
        Spectrogram::new(frames, self.cfg.frame_shift_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::Domain;

    fn voice(shift: f64, noise: f64) -> Voice {
        Voice {
            speaker_id: "v".into(),
            base_shift: shift,
            template_gain: 1.0,
            noise_std: noise,
        }
    }

    fn phon(text: &str) -> TokenSequence {
        TokenSequence::parse(text, VocabKind::Phoneme, Domain::Source).unwrap()
    }

    #[test]
    fn noiseless_synthesis_is_bit_identical() {
        let o = Oracle::new(OracleConfig::default());
        let a = o.synthesize(&phon("B AH sil K"), &voice(0.3, 0.0), 5).unwrap();
        let b = o.synthesize(&phon("B AH sil K"), &voice(0.3, 0.0), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_durations_add_up() {
        let o = Oracle::new(OracleConfig {
            duration: 4,
            jitter: false,
            ..Default::default()
        });
        let s = o.synthesize(&phon("B AH K"), &voice(0.0, 0.0), 1).unwrap();
        assert_eq!(s.num_frames(), 12);
        assert_eq!(s.mel_bins(), 20);
    }

    #[test]
    fn voices_differ() {
        let o = Oracle::new(OracleConfig::default());
        let a = o.synthesize(&phon("B AH K"), &voice(-0.5, 0.0), 1).unwrap();
        let b = o.synthesize(&phon("B AH K"), &voice(0.5, 0.0), 1).unwrap();
        let mut d = a.frames().clone();
        d.scale_in_place(-1.0);
        d.add_assign(b.frames());
        assert!(d.norm_sq().sqrt() > 0.0);
    }

    #[test]
    fn templates_are_distinct() {
        let o = Oracle::new(OracleConfig::default());
        let v = voice(0.0, 0.0);
        let off = Vocabulary::first_regular();
        let rows: Vec<_> = (off..Vocabulary::phonemes().len())
            .map(|p| o.template_row(p, &v).unwrap())
            .collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1.0, "templates {i} and {j} too close");
            }
        }
    }

    #[test]
    fn rejects_invalid_voice_and_ids() {
        let o = Oracle::new(OracleConfig::default());
        assert!(o.synthesize(&phon("B"), &voice(0.0, 2.0), 1).is_err());
        assert!(o.template_row(0, &voice(0.0, 0.0)).is_err());
    }
}
