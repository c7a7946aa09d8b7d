use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{ClothingColor, ClothingType, Gender};
use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.json");

/// Supported lexicon file version.
pub const LEXICON_VERSION: &str = "1";

/// Keyword tables driving [`extract_attributes`](super::extract_attributes).
///
/// Every table maps a lowercase surface form onto a canonical value. The
/// built-in tables live in `data/lexicon.json`; a custom file with the same
/// layout can be loaded with [`Lexicon::from_json`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub version: String,
    /// Person head nouns and pronouns.
    pub gender: BTreeMap<String, Gender>,
    /// Subset of `gender` keys that refer back to an earlier mention.
    pub pronouns: BTreeSet<String>,
    pub colors: BTreeMap<String, ClothingColor>,
    pub garments: BTreeMap<String, ClothingType>,
    /// Conjunctions and verbs that end a clause.
    pub clause_breaks: BTreeSet<String>,
    /// Words that never end a clause, even when they look like a verb.
    pub attachment_words: BTreeSet<String>,
}

impl Lexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let lex: Lexicon =
            serde_json::from_str(text).map_err(|e| Error::malformed(format!("lexicon: {e}")))?;
        lex.validate()?;
        Ok(lex)
    }

    fn validate(&self) -> Result<()> {
        if self.version != LEXICON_VERSION {
            return Err(Error::malformed(format!(
                "lexicon version {:?}, expected {LEXICON_VERSION:?}",
                self.version
            )));
        }
        if let Some((k, _)) = self
            .colors
            .iter()
            .find(|(_, v)| **v == ClothingColor::Unknown)
        {
            return Err(Error::malformed(format!(
                "lexicon color {k:?} maps to unknown"
            )));
        }
        if let Some((k, _)) = self
            .garments
            .iter()
            .find(|(_, v)| **v == ClothingType::Unknown)
        {
            return Err(Error::malformed(format!(
                "lexicon garment {k:?} maps to unknown"
            )));
        }
        for p in &self.pronouns {
            match self.gender.get(p) {
                Some(Gender::Female) | Some(Gender::Male) => {}
                _ => {
                    return Err(Error::malformed(format!(
                        "pronoun {p:?} needs a female/male gender entry"
                    )))
                }
            }
        }
        let keys = |m: &dyn Fn(&str) -> bool| self.gender.keys().any(|k| m(k));
        if keys(&|k| self.colors.contains_key(k) || self.garments.contains_key(k)) {
            return Err(Error::malformed("lexicon tables overlap"));
        }
        Ok(())
    }

    pub fn gender_of(&self, word: &str) -> Option<Gender> {
        self.gender.get(word).copied()
    }

    pub fn color_of(&self, word: &str) -> Option<ClothingColor> {
        self.colors.get(word).copied()
    }

    pub fn garment_of(&self, word: &str) -> Option<ClothingType> {
        self.garments.get(word).copied()
    }

    pub fn is_pronoun(&self, word: &str) -> bool {
        self.pronouns.contains(word)
    }

    pub(crate) fn is_known(&self, word: &str) -> bool {
        self.gender.contains_key(word)
            || self.colors.contains_key(word)
            || self.garments.contains_key(word)
            || self.clause_breaks.contains(word)
            || self.attachment_words.contains(word)
    }
}

/// The built-in keyword tables. Parsed once, shared by all callers.
pub fn lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| Lexicon::from_json(BUILTIN_LEXICON).expect("built-in lexicon is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synonyms() {
        let lex = lexicon();
        assert_eq!(lex.color_of("grey"), Some(ClothingColor::Gray));
        assert_eq!(lex.color_of("crimson"), Some(ClothingColor::Red));
        assert_eq!(lex.garment_of("dress"), Some(ClothingType::Cloth));
        assert_eq!(lex.garment_of("shirt"), Some(ClothingType::Top));
        assert_eq!(lex.garment_of("t-shirt"), Some(ClothingType::Top));
        assert_eq!(lex.garment_of("trousers"), Some(ClothingType::Bottom));
        assert_eq!(lex.garment_of("coat"), Some(ClothingType::Cloth));
    }

    #[test]
    fn stable_across_calls() {
        assert!(std::ptr::eq(lexicon(), lexicon()));
        assert_eq!(lexicon(), &Lexicon::from_json(BUILTIN_LEXICON).unwrap());
    }

    #[test]
    fn eleven_colors_covered() {
        let distinct: BTreeSet<_> = lexicon().colors.values().collect();
        assert_eq!(distinct.len(), 11);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Lexicon::from_json("{}").is_err());
        let mut lex = lexicon().clone();
        lex.version = "0".into();
        assert!(Lexicon::from_json(&serde_json::to_string(&lex).unwrap()).is_err());
        let mut lex = lexicon().clone();
        lex.colors.insert("mauve".into(), ClothingColor::Unknown);
        assert!(Lexicon::from_json(&serde_json::to_string(&lex).unwrap()).is_err());
    }
}
