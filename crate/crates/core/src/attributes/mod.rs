//! Rule-based extraction of per-person appearance attributes from a query sentence.
//!
//! Extraction runs in two passes over a lowercase token stream. The first pass
//! finds person mentions (head nouns and pronouns); a pronoun refers back to the
//! latest mention of the same gender when one exists. The second pass collects
//! garment phrases (`[color] garment`, or a bare `in <color>`) and attaches each
//! one to the nearest mention inside the same clause, preferring a mention that
//! precedes the phrase. A mention keeps only its first garment.

mod lexicon;

use serde::{Deserialize, Serialize};

pub use lexicon::{lexicon, Lexicon, LEXICON_VERSION};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClothingColor {
    White,
    Black,
    Gray,
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Purple,
    Pink,
    Brown,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClothingType {
    Top,
    Bottom,
    Cloth,
    Unknown,
}

/// Half-open character offset range `[start, end)` into the source sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTriple {
    pub gender: Gender,
    pub color: ClothingColor,
    pub clothing: ClothingType,
    /// Span of the head noun (or pronoun) that introduced the person.
    pub mention_span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceAttributes {
    pub triples: Vec<AttributeTriple>,
    pub person_count: usize,
}

impl SentenceAttributes {
    /// Gender of the first mention, which is taken as the query subject.
    pub fn subject_gender(&self) -> Gender {
        self.triples.first().map_or(Gender::Unknown, |t| t.gender)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Head { gender: Gender, pronoun: bool },
    Color(ClothingColor),
    Garment(ClothingType),
    Break,
    Other,
}

#[derive(Debug)]
struct Token {
    word: String,
    span: Span,
    kind: Kind,
}

/// Splits into word tokens (letters, digits, `-`, `'`) and clause punctuation.
fn tokenize(sentence: &str) -> Vec<(String, Span)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut n = 0;
    for (i, ch) in sentence.chars().enumerate() {
        n = i + 1;
        if ch.is_alphanumeric() || ch == '-' || ch == '\'' {
            if current.is_empty() {
                start = i;
            }
            current.extend(ch.to_lowercase());
            continue;
        }
        if !current.is_empty() {
            out.push((std::mem::take(&mut current), Span { start, end: i }));
        }
        if matches!(ch, ',' | ';' | ':' | '.' | '!' | '?') {
            out.push((
                ch.to_string(),
                Span {
                    start: i,
                    end: i + 1,
                },
            ));
        }
    }
    if !current.is_empty() {
        out.push((current, Span { start, end: n }));
    }
    out
}

fn classify(lex: &Lexicon, word: &str) -> Kind {
    if matches!(word, "," | ";" | ":" | "." | "!" | "?") || lex.clause_breaks.contains(word) {
        return Kind::Break;
    }
    let word = word.trim_matches(|c| c == '\'' || c == '-');
    let word = word.strip_suffix("'s").unwrap_or(word);
    if let Some(gender) = lex.gender_of(word) {
        return Kind::Head {
            gender,
            pronoun: lex.is_pronoun(word),
        };
    }
    if let Some(t) = lex.garment_of(word) {
        return Kind::Garment(t);
    }
    if let Some(c) = lex.color_of(word) {
        return Kind::Color(c);
    }
    if word.contains('-') {
        let parts: Vec<&str> = word.split('-').collect();
        if let Some(t) = parts.iter().rev().find_map(|p| lex.garment_of(p)) {
            return Kind::Garment(t);
        }
        if let Some(c) = parts.iter().rev().find_map(|p| lex.color_of(p)) {
            return Kind::Color(c);
        }
    }
    Kind::Other
}

/// Unlisted third-person verbs: an `-s` word right after a head, garment or color.
fn looks_like_verb(lex: &Lexicon, word: &str, prev: Option<Kind>) -> bool {
    let follows_phrase = matches!(
        prev,
        Some(Kind::Head { .. }) | Some(Kind::Garment(_)) | Some(Kind::Color(_))
    );
    follows_phrase
        && word.len() > 3
        && word.ends_with('s')
        && !word.ends_with("ss")
        && !word.ends_with("us")
        && word.chars().all(|c| c.is_alphabetic())
        && !lex.is_known(word)
}

struct Mention {
    gender: Gender,
    span: Span,
    color: ClothingColor,
    clothing: ClothingType,
    dressed: bool,
}

struct Phrase {
    pos: usize,
    color: ClothingColor,
    clothing: ClothingType,
}

/// Attribute parser bound to a set of keyword tables.
#[derive(Debug, Clone, Copy)]
pub struct AttributeParser<'a> {
    lexicon: &'a Lexicon,
}

impl Default for AttributeParser<'static> {
    fn default() -> Self {
        AttributeParser { lexicon: lexicon() }
    }
}

impl<'a> AttributeParser<'a> {
    pub fn new(lexicon: &'a Lexicon) -> Self {
        AttributeParser { lexicon }
    }

    pub fn lexicon(&self) -> &'a Lexicon {
        self.lexicon
    }

    pub fn extract(&self, sentence: &str) -> Result<SentenceAttributes> {
        if sentence.trim().is_empty() {
            return Err(Error::EmptyInput("sentence is empty".into()));
        }
        let lex = self.lexicon;
        let mut tokens: Vec<Token> = Vec::new();
        for (word, span) in tokenize(sentence) {
            let mut kind = classify(lex, &word);
            if kind == Kind::Other && looks_like_verb(lex, &word, tokens.last().map(|t| t.kind)) {
                kind = Kind::Break;
            }
            tokens.push(Token { word, span, kind });
        }

        let mut clause = Vec::with_capacity(tokens.len());
        let mut c = 0usize;
        for t in &tokens {
            if t.kind == Kind::Break {
                c += 1;
            }
            clause.push(c);
        }

        // Pass 1: mentions, and the anchor tokens that refer to each one.
        let mut mentions: Vec<Mention> = Vec::new();
        let mut anchors: Vec<(usize, usize)> = Vec::new(); // (token index, mention index)
        for (i, t) in tokens.iter().enumerate() {
            let Kind::Head { gender, pronoun } = t.kind else {
                continue;
            };
            if pronoun {
                if let Some(m) = mentions.iter().rposition(|m| m.gender == gender) {
                    anchors.push((i, m));
                    continue;
                }
            } else if let Some(&(prev_i, m)) = anchors.last() {
                // "male doctor": adjacent nouns describe one person
                let prev = &tokens[prev_i];
                if prev_i + 1 == i && matches!(prev.kind, Kind::Head { pronoun: false, .. }) {
                    let mention = &mut mentions[m];
                    mention.span.end = t.span.end;
                    if mention.gender == Gender::Unknown {
                        mention.gender = gender;
                    }
                    anchors.push((i, m));
                    continue;
                }
            }
            anchors.push((i, mentions.len()));
            mentions.push(Mention {
                gender,
                span: t.span,
                color: ClothingColor::Unknown,
                clothing: ClothingType::Unknown,
                dressed: false,
            });
        }

        // Pass 2: garment phrases, then bare "in <color>".
        let mut phrases = Vec::new();
        let mut used_color = vec![false; tokens.len()];
        for (g, t) in tokens.iter().enumerate() {
            let Kind::Garment(clothing) = t.kind else {
                continue;
            };
            let mut color = ClothingColor::Unknown;
            for back in (g.saturating_sub(3)..g).rev() {
                match tokens[back].kind {
                    Kind::Color(cl) => {
                        color = cl;
                        used_color[back] = true;
                        break;
                    }
                    Kind::Other => {}
                    _ => break,
                }
            }
            phrases.push(Phrase {
                pos: g,
                color,
                clothing,
            });
        }
        for (i, t) in tokens.iter().enumerate() {
            if let Kind::Color(color) = t.kind {
                if !used_color[i] && i > 0 && tokens[i - 1].word == "in" {
                    phrases.push(Phrase {
                        pos: i,
                        color,
                        clothing: ClothingType::Unknown,
                    });
                }
            }
        }
        phrases.sort_by_key(|p| p.pos);

        for p in &phrases {
            let same_clause = anchors.iter().filter(|(i, _)| clause[*i] == clause[p.pos]);
            let before = same_clause.clone().rfind(|(i, _)| *i < p.pos);
            let after = same_clause.clone().find(|(i, _)| *i > p.pos);
            let Some(&(_, m)) = before.or(after) else {
                continue;
            };
            let mention = &mut mentions[m];
            if !mention.dressed {
                mention.color = p.color;
                mention.clothing = p.clothing;
                mention.dressed = true;
            }
        }

        let triples: Vec<AttributeTriple> = mentions
            .into_iter()
            .map(|m| AttributeTriple {
                gender: m.gender,
                color: m.color,
                clothing: m.clothing,
                mention_span: m.span,
            })
            .collect();
        Ok(SentenceAttributes {
            person_count: triples.len(),
            triples,
        })
    }
}

/// Extracts attribute triples with the built-in lexicon.
///
/// ```
/// use tubeground::attributes::{extract_attributes, ClothingColor, ClothingType, Gender};
///
/// let attrs = extract_attributes("A man in a black top pushes a woman.").unwrap();
/// assert_eq!(attrs.person_count, 2);
/// assert_eq!(attrs.triples[0].gender, Gender::Male);
/// assert_eq!(attrs.triples[0].color, ClothingColor::Black);
/// assert_eq!(attrs.triples[0].clothing, ClothingType::Top);
/// assert_eq!(attrs.triples[1].clothing, ClothingType::Unknown);
/// ```
pub fn extract_attributes(sentence: &str) -> Result<SentenceAttributes> {
    AttributeParser::default().extract(sentence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(s: &str) -> Vec<(Gender, ClothingColor, ClothingType)> {
        extract_attributes(s)
            .unwrap()
            .triples
            .iter()
            .map(|t| (t.gender, t.color, t.clothing))
            .collect()
    }

    #[test]
    fn two_women_in_dresses() {
        use ClothingColor::*;
        let s = "The woman in the green dress walks to the woman in the red dress.";
        assert_eq!(
            flat(s),
            vec![
                (Gender::Female, Green, ClothingType::Cloth),
                (Gender::Female, Red, ClothingType::Cloth)
            ]
        );
    }

    #[test]
    fn lone_pronoun() {
        let attrs = extract_attributes("He stands up.").unwrap();
        assert_eq!(attrs.person_count, 1);
        assert_eq!(
            flat("He stands up."),
            vec![(Gender::Male, ClothingColor::Unknown, ClothingType::Unknown)]
        );
        assert_eq!(attrs.triples[0].mention_span, Span { start: 0, end: 2 });
    }

    #[test]
    fn pronoun_refers_back() {
        let t = flat("The woman in the white dress puts down the phone, then she leaves.");
        assert_eq!(t.len(), 1);
        // garment reached through the possessive
        assert_eq!(
            flat("She takes off her red coat."),
            vec![(Gender::Female, ClothingColor::Red, ClothingType::Cloth)]
        );
    }

    #[test]
    fn first_garment_wins() {
        let t = flat("The man in a red top and blue pants waits.");
        assert_eq!(
            t,
            vec![(Gender::Male, ClothingColor::Red, ClothingType::Top)]
        );
    }

    #[test]
    fn unknown_gender_counts() {
        let a = extract_attributes("The person in the green sweater opens the door.").unwrap();
        assert_eq!(a.person_count, 1);
        assert_eq!(a.triples[0].gender, Gender::Unknown);
    }

    #[test]
    fn adjacent_nouns_are_one_person() {
        assert_eq!(flat("The male doctor sits.").len(), 1);
        assert_eq!(flat("The male doctor sits.")[0].0, Gender::Male);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(extract_attributes(""), Err(Error::EmptyInput(_))));
        assert!(matches!(
            extract_attributes(" \t\n"),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn spans_point_at_heads() {
        let s = "Then the lady in a pink gown waves.";
        let a = extract_attributes(s).unwrap();
        let sp = a.triples[0].mention_span;
        let head: String = s.chars().skip(sp.start).take(sp.end - sp.start).collect();
        assert_eq!(head, "lady");
    }

    proptest! {
        #[test]
        fn never_panics_and_counts_match(s in "\\PC{0,80}") {
            if let Ok(a) = extract_attributes(&s) {
                prop_assert_eq!(a.person_count, a.triples.len());
                let n = s.chars().count();
                for t in &a.triples {
                    prop_assert!(t.mention_span.start < t.mention_span.end);
                    prop_assert!(t.mention_span.end <= n);
                }
                for w in a.triples.windows(2) {
                    prop_assert!(w[0].mention_span.end <= w[1].mention_span.start);
                }
            } else {
                prop_assert!(s.trim().is_empty());
            }
        }

        #[test]
        fn case_insensitive_and_deterministic(
            words in proptest::collection::vec(
                prop::sample::select(vec![
                    "the", "man", "woman", "in", "red", "grey", "dress", "shirt", "walks",
                    "to", "she", "her", "and", "jeans", "person", "black", ",", "looks", "with",
                ]),
                1..16,
            )
        ) {
            let s = words.join(" ");
            let a = extract_attributes(&s).unwrap();
            prop_assert_eq!(&a, &extract_attributes(&s).unwrap());
            prop_assert_eq!(&a, &extract_attributes(&s.to_uppercase()).unwrap());
        }
    }
}
