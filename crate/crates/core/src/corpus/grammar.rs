//! Domain-specific phoneme bigram grammars.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{silence_id, spell, Domain, TokenSequence, VocabKind, Vocabulary, PHONEMES};
use crate::error::{bail, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    /// Seed of the favoured-successor draw.
    pub seed: u64,
    /// Number of favoured successors per phoneme.
    pub favored: usize,
    /// Probability mass given to the favoured successors.
    pub favored_mass: f64,
    /// Probability of a word boundary after a phoneme.
    pub silence_prob: f64,
}

impl GrammarConfig {
    pub fn default_for(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self {
                seed: 11,
                favored: 3,
                favored_mass: 0.85,
                silence_prob: 0.25,
            },
            Domain::Target => Self {
                seed: 29,
                favored: 3,
                favored_mass: 0.85,
                silence_prob: 0.3,
            },
        }
    }
}

/// Bigram model over phonemes plus silence. Row `i` of `transitions` is the
/// successor distribution of phoneme-vocabulary id `i + first_regular`.
#[derive(Clone, Debug)]
pub struct Grammar {
    domain: Domain,
    transitions: Vec<Vec<f64>>,
}

fn regular_count() -> usize {
    PHONEMES.len() + 1
}

impl Grammar {
    pub fn new(domain: Domain, cfg: &GrammarConfig) -> Self {
        let n_ph = PHONEMES.len();
        let sil = silence_id() - Vocabulary::first_regular();
        let mut rng = seed::rng(cfg.seed);
        let mut transitions = Vec::with_capacity(regular_count());
        for from in 0..regular_count() {
            let mut row = vec![0.0; regular_count()];
            let boundary = if from == sil { 0.0 } else { cfg.silence_prob };
            let body = 1.0 - boundary;
            // A phoneme never follows itself: repeats are not separable
            // acoustically once segments are merged.
            let successors: Vec<usize> = (0..n_ph).filter(|&p| p != from).collect();
            let favored: Vec<usize> = sample(&mut rng, successors.len(), cfg.favored.min(successors.len()))
                .iter()
                .map(|i| successors[i])
                .collect();
            let rest = successors.len() - favored.len();
            for &p in &successors {
                row[p] = body * (1.0 - cfg.favored_mass) / rest.max(1) as f64;
            }
            for &f in &favored {
                row[f] = body * cfg.favored_mass / favored.len() as f64;
            }
            row[sil] = boundary;
            let total: f64 = row.iter().sum();
            for p in &mut row {
                *p /= total;
            }
            transitions.push(row);
        }
        Self { domain, transitions }
    }

    pub fn for_domain(domain: Domain) -> Self {
        Self::new(domain, &GrammarConfig::default_for(domain))
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Successor probability between two phoneme-vocabulary ids.
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        let off = Vocabulary::first_regular();
        self.transitions[from - off][to - off]
    }

    fn draw(rng: &mut impl Rng, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap()
    }

    /// Samples a phoneme sequence of a length drawn uniformly from
    /// `length_range` (inclusive). Sequences neither start nor end in
    /// silence and never hold two silences in a row.
    pub fn sample(&self, length_range: (usize, usize), rng_seed: u64) -> Result<TokenSequence> {
        let (lo, hi) = length_range;
        if lo < 1 || lo > hi {
            bail!(Argument, "invalid length range ({lo}, {hi})");
        }
        let mut rng = seed::rng(rng_seed);
        let len = rng.random_range(lo..=hi);
        let sil = silence_id() - Vocabulary::first_regular();
        let mut out = Vec::with_capacity(len);
        let mut prev = sil;
        for i in 0..len {
            let mut w = self.transitions[prev].clone();
            if i == 0 || i + 1 == len {
                w[sil] = 0.0;
            }
            let next = Self::draw(&mut rng, &w);
            out.push(next + Vocabulary::first_regular());
            prev = next;
        }
        TokenSequence::new(out, VocabKind::Phoneme, self.domain)
    }
}

/// Samples a phoneme sequence from the domain's shipped grammar together
/// with its spelling.
pub fn generate_text(
    domain: Domain,
    length_range: (usize, usize),
    rng_seed: u64,
) -> Result<(TokenSequence, TokenSequence)> {
    let phonemes = Grammar::for_domain(domain).sample(length_range, rng_seed)?;
    let chars = spell(&phonemes)?;
    Ok((phonemes, chars))
}

/// Normalized bigram frequency table over adjacent symbol pairs.
pub fn bigram_table(seqs: &[TokenSequence]) -> Vec<f64> {
    let n = Vocabulary::phonemes().len();
    let mut table = vec![0.0; n * n];
    let mut total = 0.0;
    for s in seqs {
        for w in s.ids().windows(2) {
            table[w[0] * n + w[1]] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for v in &mut table {
            *v /= total;
        }
    }
    table
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_text() {
        let a = generate_text(Domain::Source, (5, 5), 7).unwrap();
        let b = generate_text(Domain::Source, (5, 5), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 5);
    }

    #[test]
    fn single_symbol_boundary() {
        let (p, c) = generate_text(Domain::Target, (1, 1), 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(c.len(), 1);
        assert_ne!(p.ids()[0], silence_id());
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(generate_text(Domain::Source, (0, 3), 1).is_err());
        assert!(generate_text(Domain::Source, (4, 3), 1).is_err());
    }

    #[test]
    fn rows_are_distributions() {
        let g = Grammar::for_domain(Domain::Target);
        let off = Vocabulary::first_regular();
        for from in off..Vocabulary::phonemes().len() {
            let s: f64 = (off..Vocabulary::phonemes().len())
                .map(|to| g.transition(from, to))
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_edge_or_double_silence() {
        let sil = silence_id();
        for s in 0..300 {
            let (p, _) = generate_text(Domain::Source, (2, 12), s).unwrap();
            let ids = p.ids();
            assert_ne!(ids[0], sil);
            assert_ne!(*ids.last().unwrap(), sil);
            assert!(ids.windows(2).all(|w| !(w[0] == sil && w[1] == sil)));
        }
    }
}
