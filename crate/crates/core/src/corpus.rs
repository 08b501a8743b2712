//! NER corpora: BIO and JSONL ingestion, the domain registry, the shared
//! vocabulary and seeded few-shot sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::taskformat::{self, AnnotatedSentence, Domain, EntitySpan, FormatError, SEPARATOR_CHARS};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed line {text:?}")]
    Malformed { path: String, line: usize, text: String },
    #[error("{path}: unknown tags {tags:?}")]
    UnknownTags { path: String, tags: Vec<String> },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("domain {0:?} is not registered")]
    UnknownDomain(String),
    #[error("label {label:?} is not in domain {domain:?}")]
    UnknownLabel { domain: String, label: String },
    #[error("cannot sample {k} sentences from a split of {population}")]
    SampleTooLarge { k: usize, population: usize },
    #[error("empty sentence in {0}")]
    EmptySentence(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub domain: String,
    pub split: Split,
    pub sentences: Vec<AnnotatedSentence>,
}

impl CorpusSplit {
    pub fn validate(&self, domain: &Domain) -> Result<(), CorpusError> {
        for s in &self.sentences {
            if s.tokens.is_empty() {
                return Err(CorpusError::EmptySentence(self.domain.clone()));
            }
            s.validate()?;
            if let Some(e) = s.entities.iter().find(|e| !domain.has_label(&e.label)) {
                return Err(CorpusError::UnknownLabel { domain: domain.name.clone(), label: e.label.clone() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// One registry entry: label order plus the dataset-tag to label-word map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub name: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub tag_map: BTreeMap<String, String>,
}

impl DomainRecord {
    pub fn domain(&self) -> Result<Domain, FormatError> {
        Domain::new(self.name.clone(), self.labels.clone())
    }

    /// Maps a dataset tag type (`PER`) to its label word (`person`). Label words
    /// map to themselves.
    pub fn label_for(&self, tag: &str) -> Option<&str> {
        if let Some(l) = self.tag_map.get(tag) {
            return Some(l);
        }
        self.labels.iter().find(|l| l.as_str() == tag).map(String::as_str)
    }

    fn tag_for<'a>(&'a self, label: &'a str) -> &'a str {
        self.tag_map.iter().find(|(_, l)| l.as_str() == label).map(|(t, _)| t.as_str()).unwrap_or(label)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRegistry {
    pub domains: Vec<DomainRecord>,
}

impl DomainRegistry {
    pub fn get(&self, name: &str) -> Result<&DomainRecord, CorpusError> {
        self.domains.iter().find(|d| d.name == name).ok_or_else(|| CorpusError::UnknownDomain(name.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let reg: Self = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Json { path: path.display().to_string(), line: 0, source })?;
        for d in &reg.domains {
            d.domain()?;
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Counters reported by the loaders.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// `I-` tags that opened a new span.
    pub repaired_spans: usize,
    /// Sentences dropped because a mention contained `(`, `)` or `:`.
    pub rejected_mentions: usize,
    /// Sentences dropped because spans overlapped.
    pub rejected_overlaps: usize,
}

fn finish_sentence(
    tokens: &mut Vec<String>,
    spans: &mut Vec<(String, usize, usize)>,
    out: &mut Vec<AnnotatedSentence>,
    report: &mut LoadReport,
) -> Result<(), CorpusError> {
    if tokens.is_empty() {
        return Ok(());
    }
    let toks = std::mem::take(tokens);
    let mut entities = Vec::with_capacity(spans.len());
    for (label, s, e) in spans.drain(..) {
        entities.push(EntitySpan::from_tokens(label, &toks, s, e)?);
    }
    if entities.iter().any(|e| e.mention.contains(SEPARATOR_CHARS)) {
        report.rejected_mentions += 1;
        return Ok(());
    }
    let sentence = AnnotatedSentence { tokens: toks, entities };
    if let Err(FormatError::Overlap(_)) = sentence.validate() {
        report.rejected_overlaps += 1;
        return Ok(());
    }
    sentence.validate()?;
    out.push(sentence);
    Ok(())
}

/// Reads a two-column BIO file (`token<whitespace>tag`, blank line between
/// sentences). Lines starting with `-DOCSTART-` are skipped.
pub fn load_bio(path: &Path, record: &DomainRecord, split: Split) -> Result<(CorpusSplit, LoadReport), CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let pstr = path.display().to_string();
    let mut report = LoadReport::default();
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<(String, usize, usize)> = Vec::new();
    let mut open: Option<String> = None;
    let mut unknown = BTreeSet::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            finish_sentence(&mut tokens, &mut spans, &mut sentences, &mut report)?;
            open = None;
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let mut cols = trimmed.split_whitespace();
        let (Some(tok), Some(tag), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(CorpusError::Malformed { path: pstr, line: lineno + 1, text: line });
        };
        let idx = tokens.len();
        tokens.push(tok.to_string());
        if tag == "O" {
            open = None;
            continue;
        }
        let (prefix, ty) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), t)) => (p, t),
            _ => return Err(CorpusError::Malformed { path: pstr, line: lineno + 1, text: line }),
        };
        let Some(label) = record.label_for(ty) else {
            unknown.insert(tag.to_string());
            open = None;
            continue;
        };
        let continues = prefix == "I" && open.as_deref() == Some(label);
        if continues {
            spans.last_mut().expect("open span exists").2 = idx + 1;
        } else {
            if prefix == "I" {
                report.repaired_spans += 1;
            }
            spans.push((label.to_string(), idx, idx + 1));
            open = Some(label.to_string());
        }
    }
    finish_sentence(&mut tokens, &mut spans, &mut sentences, &mut report)?;
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownTags { path: pstr, tags: unknown.into_iter().collect() });
    }
    if report.repaired_spans > 0 {
        log::info!("{pstr}: repaired {} stray I- tags", report.repaired_spans);
    }
    let split = CorpusSplit { domain: record.name.clone(), split, sentences };
    split.validate(&record.domain()?)?;
    Ok((split, report))
}

pub fn write_bio(split: &CorpusSplit, record: &DomainRecord, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in &split.sentences {
        let mut tags = vec!["O".to_string(); s.tokens.len()];
        for e in &s.entities {
            let tag = record.tag_for(&e.label);
            tags[e.start] = format!("B-{tag}");
            for t in &mut tags[e.start + 1..e.end] {
                *t = format!("I-{tag}");
            }
        }
        for (tok, tag) in s.tokens.iter().zip(&tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes()).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct JsonEntity {
    #[serde(rename = "type")]
    label: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonSentence {
    text: String,
    entities: Vec<JsonEntity>,
}

/// Reads a JSONL span file: `{"text": ..., "entities": [{"type", "start", "end"}]}`
/// with whitespace-token indices.
pub fn load_jsonl(path: &Path, record: &DomainRecord, split: Split) -> Result<(CorpusSplit, LoadReport), CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let pstr = path.display().to_string();
    let mut report = LoadReport::default();
    let mut sentences = Vec::new();
    let mut unknown = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let js: JsonSentence = serde_json::from_str(line)
            .map_err(|source| CorpusError::Json { path: pstr.clone(), line: lineno + 1, source })?;
        let mut tokens: Vec<String> = js.text.split_whitespace().map(String::from).collect();
        let mut spans = Vec::new();
        for e in js.entities {
            match record.label_for(&e.label) {
                Some(l) => spans.push((l.to_string(), e.start, e.end)),
                None => {
                    unknown.insert(e.label);
                }
            }
        }
        spans.sort_by_key(|s| (s.1, s.2));
        finish_sentence(&mut tokens, &mut spans, &mut sentences, &mut report)?;
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownTags { path: pstr, tags: unknown.into_iter().collect() });
    }
    let split = CorpusSplit { domain: record.name.clone(), split, sentences };
    split.validate(&record.domain()?)?;
    Ok((split, report))
}

pub fn write_jsonl(split: &CorpusSplit, path: &Path) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for s in &split.sentences {
        let js = JsonSentence {
            text: s.tokens.join(" "),
            entities: s.entities.iter().map(|e| JsonEntity { label: e.label.clone(), start: e.start, end: e.end }).collect(),
        };
        serde_json::to_writer(&mut out, &js).expect("sentence serializes");
        out.push(b'\n');
    }
    atomic_write(path, &out).map_err(io_err(path))
}

/// Loads a corpus file, choosing the reader by extension (`.jsonl` or BIO).
pub fn load_corpus(path: &Path, record: &DomainRecord, split: Split) -> Result<(CorpusSplit, LoadReport), CorpusError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        load_jsonl(path, record, split)
    } else {
        load_bio(path, record, split)
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Uniform sample of `k` sentences without replacement; corpus order is kept.
pub fn sample_few_shot(split: &CorpusSplit, k: usize, seed: u64) -> Result<CorpusSplit, CorpusError> {
    let n = split.sentences.len();
    if k > n || k == 0 {
        return Err(CorpusError::SampleTooLarge { k, population: n });
    }
    let mut rng = Rng::derive(seed, "few-shot");
    let mut idx = rng.sample_indices(n, k);
    idx.sort_unstable();
    Ok(CorpusSplit {
        domain: split.domain.clone(),
        split: split.split,
        sentences: idx.into_iter().map(|i| split.sentences[i].clone()).collect(),
    })
}

pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Token inventory. Reserved tokens take the lowest ids in a fixed order:
/// pad, end-of-sequence, unknown, `(`, `)`, `:`, `,`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const RESERVED: [&str; 7] = [PAD, EOS, UNK, "(", ")", ":", ","];

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Reserved tokens, then label words, then all remaining words in sorted order.
    pub fn build(corpora: &[&CorpusSplit], domains: &[Domain], extra_text: &[&str]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut labels = BTreeSet::new();
        for d in domains {
            for l in &d.labels {
                labels.extend(taskformat::tokenize(l));
            }
        }
        let mut rest = BTreeSet::new();
        for text in extra_text {
            rest.extend(taskformat::tokenize(text));
        }
        rest.extend(["Options".to_string(), "Sentence".to_string()]);
        for c in corpora {
            for s in &c.sentences {
                for t in &s.tokens {
                    rest.extend(taskformat::tokenize(t));
                }
            }
        }
        for l in &labels {
            rest.remove(l);
        }
        for r in RESERVED {
            labels.remove(r);
            rest.remove(r);
        }
        tokens.extend(labels);
        tokens.extend(rest);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(Self::UNK_ID)).collect()
    }

    /// Tokenizes then encodes; unseen tokens map to the unknown id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&taskformat::tokenize(text))
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        atomic_write(path, text.as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(CorpusError::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    text: format!("expected reserved token {r}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conll_record() -> DomainRecord {
        DomainRecord {
            name: "conll2003".into(),
            labels: vec!["person".into(), "location".into(), "organization".into(), "miscellaneous".into()],
            tag_map: [("PER", "person"), ("LOC", "location"), ("ORG", "organization"), ("MISC", "miscellaneous")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_token_span() {
        let f = write_tmp("Johnson B-PER\n", ".bio");
        let (c, r) = load_bio(f.path(), &conll_record(), Split::Train).unwrap();
        assert_eq!(c.sentences.len(), 1);
        assert_eq!(c.sentences[0].entities[0], EntitySpan { label: "person".into(), mention: "Johnson".into(), start: 0, end: 1 });
        assert_eq!(r.repaired_spans, 0);
    }

    #[test]
    fn multi_token_span() {
        let f = write_tmp("New\tB-LOC\nYork\tI-LOC\n\n", ".bio");
        let (c, _) = load_bio(f.path(), &conll_record(), Split::Train).unwrap();
        assert_eq!(c.sentences[0].entities[0].mention, "New York");
        assert_eq!((c.sentences[0].entities[0].start, c.sentences[0].entities[0].end), (0, 2));
    }

    #[test]
    fn stray_inside_tag_opens_span() {
        // Hand-applied repair: "Acme" opens an organization span, "Corp" continues it,
        // "visited" is outside; one repair counted.
        let f = write_tmp("Acme I-ORG\nCorp I-ORG\nvisited O\n", ".bio");
        let (c, r) = load_bio(f.path(), &conll_record(), Split::Train).unwrap();
        assert_eq!(r.repaired_spans, 1);
        assert_eq!(c.sentences[0].entities.len(), 1);
        assert_eq!(c.sentences[0].entities[0].mention, "Acme Corp");
        assert_eq!(c.sentences[0].entities[0].label, "organization");
    }

    #[test]
    fn type_switch_inside_counts_as_repair() {
        let f = write_tmp("A B-PER\nB I-LOC\n", ".bio");
        let (c, r) = load_bio(f.path(), &conll_record(), Split::Train).unwrap();
        assert_eq!(r.repaired_spans, 1);
        assert_eq!(c.sentences[0].entities.len(), 2);
    }

    #[test]
    fn unknown_tag_is_listed() {
        let f = write_tmp("Ada B-ANIMAL\nx B-FOO\n", ".bio");
        match load_bio(f.path(), &conll_record(), Split::Train) {
            Err(CorpusError::UnknownTags { tags, .. }) => assert_eq!(tags, vec!["B-ANIMAL", "B-FOO"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn separator_mentions_are_rejected() {
        let f = write_tmp("a(b B-PER\n\nAda B-PER\n", ".bio");
        let (c, r) = load_bio(f.path(), &conll_record(), Split::Train).unwrap();
        assert_eq!(r.rejected_mentions, 1);
        assert_eq!(c.sentences.len(), 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let f = write_tmp(r#"{"text": "Ada met Bob in New York", "entities": [{"type": "PER", "start": 0, "end": 1}, {"type": "location", "start": 4, "end": 6}]}"#, ".jsonl");
        let (c, _) = load_corpus(f.path(), &conll_record(), Split::Dev).unwrap();
        assert_eq!(c.sentences[0].entities[1].mention, "New York");
        let out = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        write_jsonl(&c, out.path()).unwrap();
        let (c2, _) = load_corpus(out.path(), &conll_record(), Split::Dev).unwrap();
        assert_eq!(c, c2);
    }

    fn corpus(n: usize) -> CorpusSplit {
        CorpusSplit {
            domain: "d".into(),
            split: Split::Train,
            sentences: (0..n)
                .map(|i| AnnotatedSentence { tokens: vec![format!("w{i}")], entities: vec![] })
                .collect(),
        }
    }

    #[test]
    fn few_shot_sampling() {
        let c = corpus(100);
        assert_eq!(sample_few_shot(&c, 100, 5).unwrap(), c);
        let a = sample_few_shot(&c, 10, 1).unwrap();
        assert_eq!(a, sample_few_shot(&c, 10, 1).unwrap());
        let b = sample_few_shot(&c, 10, 2).unwrap();
        assert_ne!(a.sentences, b.sentences);
        assert_eq!(a.len(), 10);
        let distinct: BTreeSet<_> = a.sentences.iter().map(|s| s.tokens[0].clone()).collect();
        assert_eq!(distinct.len(), 10);
        assert!(matches!(sample_few_shot(&c, 101, 1), Err(CorpusError::SampleTooLarge { .. })));
    }

    #[test]
    fn vocabulary_layout() {
        let c = corpus(3);
        let d = Domain::new("d", vec!["person".into(), "music genre".into()]).unwrap();
        let v = Vocabulary::build(&[&c], &[d], &[taskformat::INSTRUCTION]);
        assert_eq!(v.tokens()[..7], RESERVED.map(String::from));
        assert_eq!(v.id("genre"), Some(7));
        assert_eq!(v.id("music"), Some(8));
        assert_eq!(v.encode("((person: w1))").len(), 7);
        assert_eq!(v.encode("(")[0], 3);
        assert_eq!(v.encode("zzz"), vec![Vocabulary::UNK_ID]);
        let ids = v.encode("w0 w2 person");
        assert_eq!(v.encode_tokens(&v.decode(&ids)), ids);
        let again = Vocabulary::build(&[&c], &[Domain::new("d", vec!["person".into(), "music genre".into()]).unwrap()], &[taskformat::INSTRUCTION]);
        assert_eq!(v, again);

        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(Vocabulary::load(f.path()).unwrap(), v);
    }
}
