use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Character,
    Phoneme,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

/// 24 phonemes; the silence symbol is appended after them.
pub const PHONEMES: [&str; 24] = [
    "AH", "EH", "IH", "OW", "UW", "B", "D", "F", "G", "HH", "JH", "K", "L", "M", "N", "P", "R", "S", "SH", "T", "V",
    "W", "Y", "Z",
];
pub const SILENCE: &str = "sil";
/// Spelling of each entry of [`PHONEMES`].
const SPELLING: [char; 24] = [
    'a', 'e', 'i', 'o', 'u', 'b', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 'x', 't', 'v', 'w', 'y',
    'z',
];

/// An ordered symbol inventory with the three framing symbols at ids 0..3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    kind: VocabKind,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn build(kind: VocabKind, items: impl IntoIterator<Item = String>) -> Self {
        let symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(items).collect();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect::<HashMap<_, _>>();
        assert_eq!(index.len(), symbols.len(), "duplicate symbols");
        Self { kind, symbols, index }
    }

    /// 26 letters plus the word separator.
    pub fn characters() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| {
            Self::build(
                VocabKind::Character,
                ('a'..='z').map(String::from).chain([" ".to_string()]),
            )
        })
    }

    pub fn phonemes() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| {
            Self::build(
                VocabKind::Phoneme,
                PHONEMES.iter().map(|s| s.to_string()).chain([SILENCE.to_string()]),
            )
        })
    }

    pub fn of(kind: VocabKind) -> &'static Vocabulary {
        match kind {
            VocabKind::Character => Self::characters(),
            VocabKind::Phoneme => Self::phonemes(),
        }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Id of the first non-special symbol.
    pub fn first_regular() -> usize {
        SPECIALS.len()
    }
}

/// Phoneme id of the silence symbol.
pub fn silence_id() -> usize {
    Vocabulary::phonemes().id(SILENCE).unwrap()
}

/// A framed-free sequence of symbol ids in one vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    kind: VocabKind,
    domain: Domain,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, kind: VocabKind, domain: Domain) -> Result<Self> {
        if ids.is_empty() {
            bail!(Argument, "token sequence must not be empty");
        }
        let vocab = Vocabulary::of(kind);
        for &id in &ids {
            if id >= vocab.len() {
                bail!(Vocabulary, "id {id} outside {kind:?} vocabulary");
            }
            if Vocabulary::is_special(id) {
                bail!(Vocabulary, "framing symbol {id} inside a token sequence");
            }
        }
        Ok(Self { ids, kind, domain })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocabulary(&self) -> &'static Vocabulary {
        Vocabulary::of(self.kind)
    }

    /// Characters are concatenated; phonemes are space separated.
    pub fn to_text(&self) -> String {
        let v = self.vocabulary();
        let syms = self.ids.iter().map(|&i| v.symbol(i).unwrap());
        match self.kind {
            VocabKind::Character => syms.collect(),
            VocabKind::Phoneme => syms.collect::<Vec<_>>().join(" "),
        }
    }

    pub fn parse(text: &str, kind: VocabKind, domain: Domain) -> Result<Self> {
        let v = Vocabulary::of(kind);
        let lookup = |s: &str| {
            v.id(s)
                .ok_or_else(|| crate::Error::Vocabulary(format!("unknown symbol {s:?}")))
        };
        let ids = match kind {
            VocabKind::Character => text
                .chars()
                .map(|c| lookup(&c.to_string()))
                .collect::<Result<Vec<_>>>()?,
            VocabKind::Phoneme => text.split_whitespace().map(lookup).collect::<Result<_>>()?,
        };
        Self::new(ids, kind, domain)
    }

    /// Space-delimited groups, used as toy words for scoring.
    pub fn words(&self) -> Vec<Vec<usize>> {
        let space = Vocabulary::characters().id(" ").unwrap();
        self.ids
            .split(|&i| i == space && self.kind == VocabKind::Character)
            .filter(|w| !w.is_empty())
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Fixed phoneme-to-character dictionary; silence spells as a space.
pub fn spell(phonemes: &TokenSequence) -> Result<TokenSequence> {
    if phonemes.kind() != VocabKind::Phoneme {
        bail!(Vocabulary, "spelling expects a phoneme sequence");
    }
    let chars = Vocabulary::characters();
    let sil = silence_id();
    let ids = phonemes
        .ids()
        .iter()
        .map(|&p| {
            if p == sil {
                chars.id(" ").unwrap()
            } else {
                let letter = SPELLING[p - Vocabulary::first_regular()];
                chars.id(&letter.to_string()).unwrap()
            }
        })
        .collect();
    TokenSequence::new(ids, VocabKind::Character, phonemes.domain())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventories_have_expected_sizes() {
        assert_eq!(Vocabulary::characters().len(), 3 + 27);
        assert_eq!(Vocabulary::phonemes().len(), 3 + 25);
    }

    #[test]
    fn lookup_is_a_bijection() {
        for v in [Vocabulary::characters(), Vocabulary::phonemes()] {
            for id in 0..v.len() {
                assert_eq!(v.id(v.symbol(id).unwrap()), Some(id));
            }
        }
    }

    #[test]
    fn spelling_is_injective_over_phonemes() {
        let mut seen = std::collections::HashSet::new();
        for c in SPELLING {
            assert!(seen.insert(c));
        }
    }

    #[test]
    fn rejects_framing_symbols_and_empty() {
        assert!(TokenSequence::new(vec![], VocabKind::Character, Domain::Source).is_err());
        assert!(TokenSequence::new(vec![EOS], VocabKind::Character, Domain::Source).is_err());
        assert!(TokenSequence::new(vec![99], VocabKind::Phoneme, Domain::Source).is_err());
    }

    #[test]
    fn text_roundtrip_and_words() {
        let p = TokenSequence::parse("B AH sil K", VocabKind::Phoneme, Domain::Source).unwrap();
        let c = spell(&p).unwrap();
        assert_eq!(c.to_text(), "ba k");
        assert_eq!(c.words().len(), 2);
        assert_eq!(
            TokenSequence::parse(&c.to_text(), VocabKind::Character, Domain::Source).unwrap(),
            c
        );
    }
}
