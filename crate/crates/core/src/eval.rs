//! Span-level and mention-level NER scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::taskformat::{AnnotatedSentence, ParsedOutput};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {gold} gold sentences")]
    LengthMismatch { predictions: usize, gold: usize },
}

/// Micro precision, recall and F1 with their counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// Zero denominators give zero scores.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, correct, predicted, gold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Exact match on (type, start, end). Unaligned predictions count as false positives.
    pub span: Prf,
    /// Match on (type, mention) regardless of position.
    pub mention: Prf,
    pub per_type: BTreeMap<String, Prf>,
    /// Parsed pairs whose mention was not found in the sentence.
    pub unaligned: usize,
    /// Parser warnings across all predictions.
    pub warnings: usize,
    pub sentences: usize,
}

pub fn score(predictions: &[ParsedOutput], gold: &[AnnotatedSentence]) -> Result<EvalResult, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), gold: gold.len() });
    }
    let (mut sc, mut sp, mut sg) = (0, 0, 0);
    let (mut mc, mut mp, mut mg) = (0, 0, 0);
    let mut per: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let mut unaligned = 0;
    let mut warnings = 0;
    for (p, g) in predictions.iter().zip(gold) {
        warnings += p.warnings.len();
        let pred: BTreeSet<(&str, usize, usize)> = p.aligned.iter().map(|e| (e.label.as_str(), e.start, e.end)).collect();
        let gold_spans: BTreeSet<(&str, usize, usize)> = g.entities.iter().map(|e| (e.label.as_str(), e.start, e.end)).collect();
        let aligned_pairs: BTreeSet<(&str, &str)> = p.aligned.iter().map(|e| (e.label.as_str(), e.mention.as_str())).collect();
        let extra: Vec<(&str, &str)> = p
            .entities
            .iter()
            .map(|(t, m)| (t.as_str(), m.as_str()))
            .filter(|pair| !aligned_pairs.contains(pair))
            .collect();
        unaligned += extra.len();

        let hit = pred.intersection(&gold_spans).count();
        sc += hit;
        sp += pred.len() + extra.len();
        sg += gold_spans.len();
        for (t, ..) in &pred {
            per.entry(t.to_string()).or_default().1 += 1;
        }
        for (t, _) in &extra {
            per.entry(t.to_string()).or_default().1 += 1;
        }
        for (t, ..) in &gold_spans {
            per.entry(t.to_string()).or_default().2 += 1;
        }
        for (t, ..) in pred.intersection(&gold_spans) {
            per.entry(t.to_string()).or_default().0 += 1;
        }

        // Mention level matches multisets of (type, mention).
        let mut pm: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for &(t, s, e) in &pred {
            let m = p.aligned.iter().find(|x| x.label == t && x.start == s && x.end == e).expect("span from aligned");
            *pm.entry((t, m.mention.as_str())).or_default() += 1;
        }
        for pair in &extra {
            *pm.entry(*pair).or_default() += 1;
        }
        let mut gm: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for &(t, s, e) in &gold_spans {
            let m = g.entities.iter().find(|x| x.label == t && x.start == s && x.end == e).expect("gold span");
            *gm.entry((t, m.mention.as_str())).or_default() += 1;
        }
        mc += pm.iter().map(|(k, &c)| c.min(gm.get(k).copied().unwrap_or(0))).sum::<usize>();
        mp += pm.values().sum::<usize>();
        mg += gm.values().sum::<usize>();
    }
    Ok(EvalResult {
        span: Prf::from_counts(sc, sp, sg),
        mention: Prf::from_counts(mc, mp, mg),
        per_type: per.into_iter().map(|(t, (c, p, g))| (t, Prf::from_counts(c, p, g))).collect(),
        unaligned,
        warnings,
        sentences: gold.len(),
    })
}

/// Per-type breakdown as CSV: `type,precision,recall,f1,correct,predicted,gold`.
pub fn breakdown_csv(result: &EvalResult) -> String {
    let mut out = String::from("type,precision,recall,f1,correct,predicted,gold\n");
    let rows = result.per_type.iter().map(|(t, p)| (t.as_str(), p)).chain([("ALL", &result.span)]);
    for (t, p) in rows {
        out.push_str(&format!("{t},{:.6},{:.6},{:.6},{},{},{}\n", p.precision, p.recall, p.f1, p.correct, p.predicted, p.gold));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskformat::EntitySpan;

    fn sent(tokens: &str, spans: &[(&str, usize, usize)]) -> AnnotatedSentence {
        let tokens: Vec<String> = tokens.split(' ').map(String::from).collect();
        let entities = spans.iter().map(|&(l, s, e)| EntitySpan::from_tokens(l, &tokens, s, e).unwrap()).collect();
        AnnotatedSentence { tokens, entities }
    }

    fn pred_from(s: &AnnotatedSentence) -> ParsedOutput {
        ParsedOutput { entities: s.pairs(), warnings: vec![], aligned: s.entities.clone() }
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![sent("Ada met Bob", &[("person", 0, 1), ("person", 2, 3)])];
        let r = score(&[pred_from(&g[0])], &g).unwrap();
        assert_eq!((r.span.precision, r.span.recall, r.span.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.mention.f1, 1.0);
    }

    #[test]
    fn empty_predictions() {
        let g = vec![sent("Ada met Bob", &[("person", 0, 1)])];
        let r = score(&[ParsedOutput::default()], &g).unwrap();
        assert_eq!((r.span.precision, r.span.recall, r.span.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_right() {
        let g = vec![sent("Ada met Bob", &[("person", 0, 1), ("person", 2, 3)])];
        let wrong = sent("Ada met Bob", &[("person", 0, 1), ("location", 2, 3)]);
        let r = score(&[pred_from(&wrong)], &g).unwrap();
        assert_eq!((r.span.precision, r.span.recall, r.span.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.per_type["person"].recall, 0.5);
    }

    #[test]
    fn unaligned_counts_against_precision() {
        let g = vec![sent("Ada met Bob", &[("person", 0, 1)])];
        let mut p = pred_from(&g[0]);
        p.entities.push(("person".into(), "Zed".into()));
        let r = score(&[p], &g).unwrap();
        assert_eq!(r.unaligned, 1);
        assert_eq!(r.span.precision, 0.5);
        assert!(r.mention.f1 >= r.span.f1);
    }

    #[test]
    fn length_mismatch() {
        assert!(score(&[], &[sent("a", &[])]).is_err());
    }
}
