//! Text-to-text NER task format.
//!
//! Inputs are `<instruction> Options: <label>, <label> Sentence: <tokens>`;
//! targets linearize entities as `((person: Johnson) (location: Baltimore))`.
//! [`parse_output`] accepts arbitrary model output and never fails: every
//! problem becomes a [`ParseWarning`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Canonical instruction string shared by every domain.
pub const INSTRUCTION: &str = "Extract named entities from the sentence. Choose entity types only from the options.";

/// Characters that may not appear inside label names or mentions.
pub const SEPARATOR_CHARS: [char; 3] = ['(', ')', ':'];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("domain {0:?} has no labels")]
    EmptyLabelSet(String),
    #[error("invalid label {label:?}: {reason}")]
    InvalidLabel { label: String, reason: &'static str },
    #[error("cannot build an input from an empty sentence")]
    EmptySentence,
    #[error("mention {0:?} contains a separator character")]
    SeparatorInMention(String),
    #[error("invalid entity span {label}:{start}..{end} in a sentence of {len} tokens")]
    BadSpan { label: String, start: usize, end: usize, len: usize },
    #[error("mention {mention:?} does not match tokens {tokens:?}")]
    MentionMismatch { mention: String, tokens: String },
    #[error("entity spans overlap or are unsorted at token {0}")]
    Overlap(usize),
}

/// An entity-type inventory with a stable order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub labels: Vec<String>,
}

impl Domain {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Result<Self, FormatError> {
        let d = Self { name: name.into(), labels };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.labels.is_empty() {
            return Err(FormatError::EmptyLabelSet(self.name.clone()));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            let bad = |reason| Err(FormatError::InvalidLabel { label: l.clone(), reason });
            if l.trim().is_empty() {
                return bad("empty");
            }
            if l.chars().any(|c| SEPARATOR_CHARS.contains(&c) || c == ',') {
                return bad("contains a separator");
            }
            if l.chars().any(char::is_uppercase) {
                return bad("must be lowercase");
            }
            if l.trim() != l || l.contains("  ") {
                return bad("irregular whitespace");
            }
            if !seen.insert(l.as_str()) {
                return bad("duplicate");
            }
        }
        Ok(())
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// A typed token span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub label: String,
    pub mention: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    /// Builds a span whose mention is taken from `tokens`.
    pub fn from_tokens(label: impl Into<String>, tokens: &[String], start: usize, end: usize) -> Result<Self, FormatError> {
        let label = label.into();
        if start >= end || end > tokens.len() {
            return Err(FormatError::BadSpan { label, start, end, len: tokens.len() });
        }
        Ok(Self { label, mention: tokens[start..end].join(" "), start, end })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
}

impl AnnotatedSentence {
    pub fn validate(&self) -> Result<(), FormatError> {
        let n = self.tokens.len();
        let mut last_end = 0;
        for e in &self.entities {
            if e.start >= e.end || e.end > n {
                return Err(FormatError::BadSpan { label: e.label.clone(), start: e.start, end: e.end, len: n });
            }
            let joined = self.tokens[e.start..e.end].join(" ");
            if joined != e.mention {
                return Err(FormatError::MentionMismatch { mention: e.mention.clone(), tokens: joined });
            }
            if e.start < last_end {
                return Err(FormatError::Overlap(e.start));
            }
            if e.mention.contains(SEPARATOR_CHARS) {
                return Err(FormatError::SeparatorInMention(e.mention.clone()));
            }
            last_end = e.end;
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.entities.iter().map(|e| (e.label.clone(), e.mention.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    /// Input ended inside an open group or before the outer close.
    Truncated,
    MissingOuterOpen,
    MissingSeparator { group: String },
    /// More than one `:` in a group; no mention may contain one.
    ExtraSeparator { group: String },
    EmptyMention { group: String },
    UnknownType { label: String },
    Duplicate { label: String, mention: String },
    StrayText { text: String },
    /// A group was interrupted by a new `(` and closed implicitly.
    InterruptedGroup { group: String },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Truncated => write!(f, "output truncated"),
            Self::MissingOuterOpen => write!(f, "missing outer parenthesis"),
            Self::MissingSeparator { group } => write!(f, "group {group:?} lacks \": \""),
            Self::ExtraSeparator { group } => write!(f, "group {group:?} has more than one \":\""),
            Self::EmptyMention { group } => write!(f, "group {group:?} has an empty mention"),
            Self::UnknownType { label } => write!(f, "type {label:?} is not a domain option"),
            Self::Duplicate { label, mention } => write!(f, "duplicate ({label}: {mention})"),
            Self::StrayText { text } => write!(f, "ignored text {text:?}"),
            Self::InterruptedGroup { group } => write!(f, "group {group:?} interrupted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub entities: Vec<(String, String)>,
    pub warnings: Vec<ParseWarning>,
    pub aligned: Vec<EntitySpan>,
}

/// Assembles the model input in instruction, options, sentence order.
pub fn build_input(instruction: &str, domain: &Domain, tokens: &[String]) -> Result<String, FormatError> {
    if domain.labels.is_empty() {
        return Err(FormatError::EmptyLabelSet(domain.name.clone()));
    }
    if tokens.is_empty() {
        return Err(FormatError::EmptySentence);
    }
    Ok(format!("{instruction} Options: {} Sentence: {}", domain.labels.join(", "), tokens.join(" ")))
}

/// Input with the options segment removed (ablation of domain-related options).
pub fn build_input_without_options(instruction: &str, tokens: &[String]) -> Result<String, FormatError> {
    if tokens.is_empty() {
        return Err(FormatError::EmptySentence);
    }
    Ok(format!("{instruction} Sentence: {}", tokens.join(" ")))
}

pub fn serialize_entities(entities: &[EntitySpan]) -> Result<String, FormatError> {
    let mut out = String::from("(");
    for (i, e) in entities.iter().enumerate() {
        if e.mention.contains(SEPARATOR_CHARS) {
            return Err(FormatError::SeparatorInMention(e.mention.clone()));
        }
        if i > 0 {
            out.push(' ');
        }
        out.push('(');
        out.push_str(&e.label);
        out.push_str(": ");
        out.push_str(&e.mention);
        out.push(')');
    }
    out.push(')');
    Ok(out)
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a linearized entity string. Never fails.
pub fn parse_output(text: &str, domain: &Domain) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].is_whitespace() {
            *i += 1;
        }
    };

    let mut finish_group = |group: &str, out: &mut ParsedOutput| {
        let Some(pos) = group.find(':') else {
            out.warnings.push(ParseWarning::MissingSeparator { group: group.to_string() });
            return;
        };
        if group[pos + 1..].contains(':') {
            out.warnings.push(ParseWarning::ExtraSeparator { group: group.to_string() });
            return;
        }
        let label = normalize_ws(&group[..pos]);
        let mention = normalize_ws(&group[pos + 1..]);
        if mention.is_empty() {
            out.warnings.push(ParseWarning::EmptyMention { group: group.to_string() });
            return;
        }
        if !domain.has_label(&label) {
            out.warnings.push(ParseWarning::UnknownType { label });
            return;
        }
        if !seen.insert((label.clone(), mention.clone())) {
            out.warnings.push(ParseWarning::Duplicate { label, mention });
            return;
        }
        out.entities.push((label, mention));
    };

    skip_ws(&mut i);
    let mut outer_open = if i < chars.len() && chars[i] == '(' {
        i += 1;
        true
    } else {
        if i < chars.len() {
            out.warnings.push(ParseWarning::MissingOuterOpen);
        }
        false
    };
    let mut outer_closed = false;
    let mut stray = String::new();
    let flush_stray = |stray: &mut String, out: &mut ParsedOutput| {
        let t = stray.trim();
        if !t.is_empty() {
            out.warnings.push(ParseWarning::StrayText { text: t.to_string() });
        }
        stray.clear();
    };

    while i < chars.len() {
        let c = chars[i];
        if c == '(' {
            flush_stray(&mut stray, &mut out);
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if !outer_open && j < chars.len() && chars[j] == '(' {
                // A late outer opener, e.g. after leading junk.
                outer_open = true;
                outer_closed = false;
                i += 1;
                continue;
            }
            if outer_closed {
                // Content after the outer close is parsed but reported.
                out.warnings.push(ParseWarning::StrayText { text: "(".into() });
                outer_closed = false;
            }
            i += 1;
            let mut group = String::new();
            let mut closed = false;
            while i < chars.len() {
                match chars[i] {
                    ')' => {
                        closed = true;
                        i += 1;
                        break;
                    }
                    '(' => break,
                    ch => group.push(ch),
                }
                i += 1;
            }
            if !closed && i < chars.len() {
                out.warnings.push(ParseWarning::InterruptedGroup { group: group.clone() });
            }
            finish_group(&group, &mut out);
            if !closed && i >= chars.len() {
                out.warnings.push(ParseWarning::Truncated);
                return out;
            }
        } else if c == ')' {
            flush_stray(&mut stray, &mut out);
            if outer_open {
                outer_open = false;
                outer_closed = true;
            } else {
                out.warnings.push(ParseWarning::StrayText { text: ")".into() });
            }
            i += 1;
        } else {
            if !c.is_whitespace() && outer_closed {
                outer_closed = false;
            }
            stray.push(c);
            i += 1;
        }
    }
    flush_stray(&mut stray, &mut out);
    if outer_open {
        out.warnings.push(ParseWarning::Truncated);
    }
    out
}

/// Greedy left-to-right mention alignment. Each token is used by at most one
/// span; returns the aligned spans and the indices of unmatched pairs.
pub fn align_mentions(parsed: &[(String, String)], tokens: &[String]) -> (Vec<EntitySpan>, Vec<usize>) {
    let mut used = vec![false; tokens.len()];
    let mut aligned = Vec::new();
    let mut unmatched = Vec::new();
    for (idx, (label, mention)) in parsed.iter().enumerate() {
        let words: Vec<&str> = mention.split_whitespace().collect();
        let n = words.len();
        let found = (n > 0 && n <= tokens.len())
            .then(|| {
                (0..=tokens.len() - n).find(|&s| {
                    (s..s + n).all(|t| !used[t]) && tokens[s..s + n].iter().zip(&words).all(|(a, b)| a == b)
                })
            })
            .flatten();
        match found {
            Some(s) => {
                used[s..s + n].iter_mut().for_each(|u| *u = true);
                aligned.push(EntitySpan { label: label.clone(), mention: words.join(" "), start: s, end: s + n });
            }
            None => unmatched.push(idx),
        }
    }
    aligned.sort_by_key(|e| e.start);
    (aligned, unmatched)
}

/// Parses and aligns in one step.
pub fn parse_and_align(text: &str, domain: &Domain, tokens: &[String]) -> ParsedOutput {
    let mut parsed = parse_output(text, domain);
    parsed.aligned = align_mentions(&parsed.entities, tokens).0;
    parsed
}

/// Splits text into model tokens: whitespace-separated words with `(`, `)`,
/// `:` and `,` always standing alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '(' | ')' | ':' | ',') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Inverse of [`tokenize`] for target strings, restoring canonical spacing.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_str();
        let space = !matches!((prev, t), (None, _) | (_, ")" | ":" | ",") | (Some("("), _));
        if space {
            out.push(' ');
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn conll() -> Domain {
        Domain::new("conll2003", vec!["person".into(), "location".into(), "organization".into(), "miscellaneous".into()])
            .unwrap()
    }

    fn johnson() -> AnnotatedSentence {
        let tokens = toks("Johnson , who played eight seasons in Baltimore , was named Oriloes manager in the off-season replacing Phil Regan .");
        let entities = vec![
            EntitySpan::from_tokens("person", &tokens, 0, 1).unwrap(),
            EntitySpan::from_tokens("location", &tokens, 7, 8).unwrap(),
            EntitySpan::from_tokens("organization", &tokens, 11, 12).unwrap(),
        ];
        AnnotatedSentence { tokens, entities }
    }

    #[test]
    fn input_contains_all_segments_in_order() {
        let s = johnson();
        let input = build_input(INSTRUCTION, &conll(), &s.tokens).unwrap();
        assert_eq!(
            input,
            "Extract named entities from the sentence. Choose entity types only from the options. \
             Options: person, location, organization, miscellaneous Sentence: Johnson , who played eight seasons \
             in Baltimore , was named Oriloes manager in the off-season replacing Phil Regan ."
        );
    }

    #[test]
    fn single_label_option_segment() {
        let d = Domain::new("p", vec!["person".into()]).unwrap();
        let input = build_input(INSTRUCTION, &d, &toks("Ada")).unwrap();
        assert!(input.contains(" Options: person Sentence: Ada"));
    }

    #[test]
    fn label_order_changes_input() {
        let a = Domain::new("a", vec!["person".into(), "location".into()]).unwrap();
        let b = Domain::new("b", vec!["location".into(), "person".into()]).unwrap();
        let x = toks("Ada went home");
        assert_ne!(build_input(INSTRUCTION, &a, &x).unwrap(), build_input(INSTRUCTION, &b, &x).unwrap());
    }

    #[test]
    fn empty_sentence_rejected() {
        assert_eq!(build_input(INSTRUCTION, &conll(), &[]), Err(FormatError::EmptySentence));
    }

    #[test]
    fn domain_validation() {
        assert!(Domain::new("x", vec![]).is_err());
        assert!(Domain::new("x", vec!["a:b".into()]).is_err());
        assert!(Domain::new("x", vec!["Person".into()]).is_err());
        assert!(Domain::new("x", vec!["a".into(), "a".into()]).is_err());
        assert!(Domain::new("x", vec!["music genre".into()]).is_ok());
    }

    #[test]
    fn serialize_matches_reference_format() {
        let s = johnson();
        assert_eq!(
            serialize_entities(&s.entities).unwrap(),
            "((person: Johnson) (location: Baltimore) (organization: Oriloes))"
        );
        assert_eq!(serialize_entities(&[]).unwrap(), "()");
        let t = toks("Ada");
        let one = EntitySpan::from_tokens("person", &t, 0, 1).unwrap();
        assert_eq!(serialize_entities(&[one]).unwrap(), "((person: Ada))");
        let bad = EntitySpan { label: "person".into(), mention: "A(da".into(), start: 0, end: 1 };
        assert!(serialize_entities(&[bad]).is_err());
    }

    #[test]
    fn parse_reference_output() {
        let p = parse_output("((person: Johnson) (location: Baltimore) (organization: Oriloes))", &conll());
        assert_eq!(p.entities.len(), 3);
        assert!(p.warnings.is_empty());
        assert_eq!(p.entities[1], ("location".to_string(), "Baltimore".to_string()));
        let p = parse_output("()", &conll());
        assert!(p.entities.is_empty() && p.warnings.is_empty());
    }

    #[test]
    fn truncated_output_recovers_entity() {
        let p = parse_output("((person: Johnson", &conll());
        assert_eq!(p.entities, vec![("person".to_string(), "Johnson".to_string())]);
        assert_eq!(p.warnings, vec![ParseWarning::Truncated]);
    }

    #[test]
    fn recovery_rules() {
        let d = conll();
        let p = parse_output("((person Johnson) (location: Baltimore))", &d);
        assert_eq!(p.entities.len(), 1);
        assert!(matches!(p.warnings[0], ParseWarning::MissingSeparator { .. }));

        let p = parse_output("((animal: cat) (person: Ada))", &d);
        assert_eq!(p.entities, vec![("person".into(), "Ada".into())]);
        assert_eq!(p.warnings, vec![ParseWarning::UnknownType { label: "animal".into() }]);

        let p = parse_output("((person: Ada) (person: Ada))", &d);
        assert_eq!(p.entities.len(), 1);
        assert!(matches!(p.warnings[0], ParseWarning::Duplicate { .. }));

        let p = parse_output("junk ((person: Ada)) trailing", &d);
        assert_eq!(p.entities.len(), 1);
        assert!(p.warnings.iter().all(|w| matches!(w, ParseWarning::StrayText { .. } | ParseWarning::MissingOuterOpen)));

        let p = parse_output("((person: Ada (location: Rome))", &d);
        assert_eq!(p.entities.len(), 2);

        for s in ["", ")", "(((", ":::", ") (", "((: ))"] {
            let _ = parse_output(s, &d);
        }
    }

    #[test]
    fn alignment_cases() {
        let s = johnson();
        let (al, un) = align_mentions(&[("location".into(), "Baltimore".into())], &s.tokens);
        assert_eq!(al, vec![EntitySpan { label: "location".into(), mention: "Baltimore".into(), start: 7, end: 8 }]);
        assert!(un.is_empty());

        let (al, un) = align_mentions(&[("location".into(), "Paris".into())], &s.tokens);
        assert!(al.is_empty());
        assert_eq!(un, vec![0]);

        let t = toks("Rome and Rome again");
        let pairs = vec![("location".to_string(), "Rome".to_string()); 2];
        let (al, _) = align_mentions(&pairs, &t);
        assert_eq!((al[0].start, al[1].start), (0, 2));
    }

    #[test]
    fn tokenizer_splits_separators() {
        assert_eq!(tokenize("((person: New York) (x: y))").join(" "), "( ( person : New York ) ( x : y ) )");
        assert_eq!(tokenize("Options: a, b"), vec!["Options", ":", "a", ",", "b"]);
        let target = "((person: Johnson) (location: New York))";
        assert_eq!(detokenize(&tokenize(target)), target);
        assert_eq!(detokenize(&tokenize("()")), "()");
    }

    #[test]
    fn sentence_validation() {
        let mut s = johnson();
        assert!(s.validate().is_ok());
        s.entities.swap(0, 1);
        assert!(matches!(s.validate(), Err(FormatError::Overlap(_))));
    }
}
