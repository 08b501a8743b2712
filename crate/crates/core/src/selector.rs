//! Dual-query domain selection: label-embedding similarity, prefix similarity,
//! their α-mixture, and softmax source weights.

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::numerics::Tensor;
use crate::prefixstore::{DomainPrefix, PrefixError};
use crate::taskformat::{self, Domain};

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("label {label:?} of domain {domain:?} has no in-vocabulary word")]
    LabelOutOfVocabulary { domain: String, label: String },
    #[error("no source domains")]
    NoSources,
    #[error("alpha {0} is outside [0, 1]")]
    Alpha(f64),
    #[error("{expected} per-source alphas expected, got {got}")]
    AlphaCount { expected: usize, got: usize },
    #[error(transparent)]
    Prefix(#[from] PrefixError),
}

/// How token and category vectors are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(format!("unknown pooling {other:?}")),
        }
    }
}

fn pool(vectors: &[Vec<f64>], how: Pooling) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = match how {
        Pooling::Mean => vec![0.0; d],
        Pooling::Max => vec![f64::NEG_INFINITY; d],
    };
    for v in vectors {
        for (o, &x) in out.iter_mut().zip(v) {
            match how {
                Pooling::Mean => *o += x,
                Pooling::Max => *o = o.max(x),
            }
        }
    }
    if how == Pooling::Mean {
        let n = vectors.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// One vector per category: its in-vocabulary words' embeddings, pooled.
pub fn label_vectors(
    embeddings: &Tensor<f32>,
    vocab: &Vocabulary,
    domain: &Domain,
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>, SelectorError> {
    domain
        .labels
        .iter()
        .map(|label| {
            let rows: Vec<Vec<f64>> = taskformat::tokenize(label)
                .iter()
                .filter_map(|w| vocab.id(w))
                .filter(|&id| id < embeddings.rows())
                .map(|id| embeddings.row(id).iter().map(|&x| x as f64).collect())
                .collect();
            if rows.is_empty() {
                return Err(SelectorError::LabelOutOfVocabulary { domain: domain.name.clone(), label: label.clone() });
            }
            Ok(pool(&rows, pooling))
        })
        .collect()
}

/// Entity similarity between label sets plus the per-pair cosine matrix
/// (rows = source labels, columns = target labels).
pub fn entity_similarity(
    embeddings: &Tensor<f32>,
    vocab: &Vocabulary,
    src: &Domain,
    tgt: &Domain,
    pooling: Pooling,
) -> Result<(f64, Vec<Vec<f64>>), SelectorError> {
    let es = label_vectors(embeddings, vocab, src, pooling)?;
    let et = label_vectors(embeddings, vocab, tgt, pooling)?;
    Ok((cosine_pooled(&es, &et, pooling), pair_matrix(&es, &et)))
}

/// Cosine of the pooled category vectors.
pub fn cosine_pooled(src: &[Vec<f64>], tgt: &[Vec<f64>], pooling: Pooling) -> f64 {
    cosine(&pool(src, pooling), &pool(tgt, pooling))
}

pub fn pair_matrix(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<Vec<f64>> {
    src.iter().map(|s| tgt.iter().map(|t| cosine(s, t)).collect()).collect()
}

/// Cosine between matrices at each (site, layer), averaged over all of them.
pub fn prefix_similarity(src: &DomainPrefix, tgt: &DomainPrefix) -> Result<f64, SelectorError> {
    src.same_shape(tgt)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, b) in src.matrices.iter().zip(tgt.matrices.iter()) {
        let a: Vec<f64> = a.data().iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = b.data().iter().map(|&x| x as f64).collect();
        total += cosine(&a, &b);
        n += 1;
    }
    if n == 0 {
        return Err(PrefixError::Shape("prefix holds no matrices".into()).into());
    }
    Ok(total / n as f64)
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub domain: String,
    pub entity_sim: f64,
    pub prefix_sim: f64,
    pub alpha: f64,
    pub total: f64,
    pub weight: f64,
    /// Per-pair label cosines, rows = this source's labels.
    pub pair_matrix: Vec<Vec<f64>>,
    pub source_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub target: String,
    pub target_labels: Vec<String>,
    pub alpha: f64,
    pub sources: Vec<SourceScore>,
}

impl SimilarityReport {
    pub fn weights(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.weight).collect()
    }

    /// The pair matrix of every source stacked, as CSV.
    pub fn pair_csv(&self) -> String {
        let mut out = format!("source,label,{}\n", self.target_labels.join(","));
        for s in &self.sources {
            for (label, row) in s.source_labels.iter().zip(&s.pair_matrix) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                out.push_str(&format!("{},{},{}\n", s.domain, label, cells.join(",")));
            }
        }
        out
    }
}

/// Mixes precomputed similarities into totals and softmax weights.
pub fn weigh(entity: &[f64], prefix: &[f64], alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let totals: Vec<f64> = entity.iter().zip(prefix).zip(alphas).map(|((e, p), a)| a * e + (1.0 - a) * p).collect();
    let w = softmax(&totals);
    (totals, w)
}

/// Scores every source against the target. `per_source_alpha` overrides the
/// global α source by source.
pub fn select(
    embeddings: &Tensor<f32>,
    vocab: &Vocabulary,
    sources: &[(&Domain, &DomainPrefix)],
    target: (&Domain, &DomainPrefix),
    alpha: f64,
    per_source_alpha: Option<&[f64]>,
    pooling: Pooling,
) -> Result<SimilarityReport, SelectorError> {
    if sources.is_empty() {
        return Err(SelectorError::NoSources);
    }
    let alphas: Vec<f64> = match per_source_alpha {
        Some(a) if a.len() != sources.len() => {
            return Err(SelectorError::AlphaCount { expected: sources.len(), got: a.len() })
        }
        Some(a) => a.to_vec(),
        None => vec![alpha; sources.len()],
    };
    if let Some(&bad) = alphas.iter().chain([&alpha]).find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(SelectorError::Alpha(bad));
    }
    let (tdom, tpre) = target;
    let tvec = label_vectors(embeddings, vocab, tdom, pooling)?;
    let mut ents = Vec::new();
    let mut pres = Vec::new();
    let mut mats = Vec::new();
    for (d, p) in sources {
        let svec = label_vectors(embeddings, vocab, d, pooling)?;
        ents.push(cosine_pooled(&svec, &tvec, pooling));
        mats.push(pair_matrix(&svec, &tvec));
        pres.push(prefix_similarity(p, tpre)?);
    }
    let (totals, weights) = weigh(&ents, &pres, &alphas);
    let scores = sources
        .iter()
        .enumerate()
        .map(|(i, (d, _))| SourceScore {
            domain: d.name.clone(),
            entity_sim: ents[i],
            prefix_sim: pres[i],
            alpha: alphas[i],
            total: totals[i],
            weight: weights[i],
            pair_matrix: mats[i].clone(),
            source_labels: d.labels.clone(),
        })
        .collect();
    Ok(SimilarityReport { target: tdom.name.clone(), target_labels: tdom.labels.clone(), alpha, sources: scores })
}
