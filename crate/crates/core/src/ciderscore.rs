//! CIDEr-D consensus scoring.
//!
//! Per n-gram order (1..=4) the candidate and each reference become tf-idf
//! vectors, with document frequencies counted over reference images. The
//! per-order similarity uses clipped candidate weights and a Gaussian length
//! penalty (sigma 6); orders are averaged, references are averaged, and the
//! result is scaled by 10.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::embedstore::{EntryId, StoreError};

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;
pub const SCALE: f64 = 10.0;

const PUNCTUATION: [char; 9] = ['.', ',', '!', '?', ';', ':', '"', '(', ')'];

#[derive(Debug, Error)]
pub enum CiderError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("candidate has no references")]
    EmptyReferences,
    #[error("references line {line}: {reason}")]
    MalformedReferences { line: usize, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenizedCaption(Vec<String>);

impl TokenizedCaption {
    /// Wraps pre-tokenized words. Empty tokens are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TokenizedCaption(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Counts of all n-grams of order `n`.
    pub fn ngram_counts(&self, n: usize) -> HashMap<&[String], u32> {
        let mut counts = HashMap::new();
        if n > 0 {
            for w in self.0.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Lowercases, deletes `. , ! ? ; : " ( )`, and splits on whitespace.
pub fn tokenize(raw: &str) -> TokenizedCaption {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| !PUNCTUATION.contains(c))
        .collect();
    TokenizedCaption(cleaned.split_whitespace().map(str::to_owned).collect())
}

/// Document frequencies over reference images.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    // index n-1 holds n-grams of order n
    df: Vec<HashMap<Vec<String>, u32>>,
    corpus_size: usize,
}

impl IdfTable {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn df(&self, ngram: &[String]) -> u32 {
        match ngram.len() {
            n @ 1..=MAX_N => self.df[n - 1].get(ngram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `log(corpus_size) - log(max(1, df))`.
    fn weight(&self, ngram: &[String]) -> f64 {
        (self.corpus_size as f64).ln() - f64::from(self.df(ngram).max(1)).ln()
    }
}

/// Counts, for each n-gram, the images whose reference set contains it.
pub fn build_idf<'a, I>(references: I) -> Result<IdfTable, CiderError>
where
    I: IntoIterator<Item = &'a [TokenizedCaption]>,
{
    let mut df: Vec<HashMap<Vec<String>, u32>> = vec![HashMap::new(); MAX_N];
    let mut corpus_size = 0;
    for refs in references {
        if refs.is_empty() {
            continue;
        }
        corpus_size += 1;
        for n in 1..=MAX_N {
            let set: HashSet<&[String]> = refs
                .iter()
                .flat_map(|r| r.tokens().windows(n))
                .collect();
            for g in set {
                *df[n - 1].entry(g.to_vec()).or_insert(0) += 1;
            }
        }
    }
    if corpus_size == 0 {
        return Err(CiderError::EmptyCorpus);
    }
    Ok(IdfTable { df, corpus_size })
}

/// Tf-idf vectors per order plus their norms.
// ordered maps keep float summation order fixed across runs
struct NgramVectors<'c> {
    vec: Vec<BTreeMap<&'c [String], f64>>,
    norm: Vec<f64>,
    len: usize,
}

impl<'c> NgramVectors<'c> {
    fn new(caption: &'c TokenizedCaption, idf: &IdfTable) -> Self {
        let mut vec = Vec::with_capacity(MAX_N);
        let mut norm = Vec::with_capacity(MAX_N);
        for n in 1..=MAX_N {
            let v: BTreeMap<&[String], f64> = caption
                .ngram_counts(n)
                .into_iter()
                .map(|(g, tf)| (g, f64::from(tf) * idf.weight(g)))
                .collect();
            norm.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vec.push(v);
        }
        NgramVectors {
            vec,
            norm,
            len: caption.len(),
        }
    }

    /// Per-order clipped cosine with length penalty.
    fn sim(&self, other: &NgramVectors<'_>) -> [f64; MAX_N] {
        let delta = self.len as f64 - other.len as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut out = [0.0; MAX_N];
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &h) in &self.vec[n] {
                if let Some(&r) = other.vec[n].get(g) {
                    val += h.min(r) * r;
                }
            }
            if self.norm[n] != 0.0 && other.norm[n] != 0.0 {
                val /= self.norm[n] * other.norm[n];
            }
            out[n] = val * penalty;
        }
        out
    }
}

/// CIDEr-D of `candidate` against `refs`.
pub fn cider(
    candidate: &TokenizedCaption,
    refs: &[TokenizedCaption],
    idf: &IdfTable,
) -> Result<f64, CiderError> {
    if refs.is_empty() {
        return Err(CiderError::EmptyReferences);
    }
    let cand = NgramVectors::new(candidate, idf);
    let mut total = 0.0;
    for r in refs {
        let rv = NgramVectors::new(r, idf);
        total += cand.sim(&rv).iter().sum::<f64>() / MAX_N as f64;
    }
    Ok(total / refs.len() as f64 * SCALE)
}

/// Reference captions keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct References {
    pub by_image: BTreeMap<EntryId, Vec<TokenizedCaption>>,
}

impl References {
    /// One `image_id\tcaption text` record per line.
    pub fn parse(text: &str) -> Result<Self, CiderError> {
        let mut by_image: BTreeMap<EntryId, Vec<TokenizedCaption>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (image, caption) =
                line.split_once('\t')
                    .ok_or_else(|| CiderError::MalformedReferences {
                        line: i + 1,
                        reason: "expected `image_id<TAB>caption`".into(),
                    })?;
            let image = EntryId::new(image).map_err(|_| CiderError::MalformedReferences {
                line: i + 1,
                reason: format!("invalid image id {image:?}"),
            })?;
            by_image.entry(image).or_default().push(tokenize(caption));
        }
        Ok(References { by_image })
    }

    pub fn load(path: &Path) -> Result<Self, CiderError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, image: &str) -> Option<&[TokenizedCaption]> {
        self.by_image.get(image).map(Vec::as_slice)
    }

    pub fn idf(&self) -> Result<IdfTable, CiderError> {
        build_idf(self.by_image.values().map(Vec::as_slice))
    }
}
