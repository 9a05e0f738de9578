//! Retrieval recall (R@K) and group embedding gaps for generated captions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::embedstore::{cosine, EmbeddingStore, EntryId, EntryKind, StoreError};
use crate::groups::{GroupFile, SimilarGroup};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("similar group for `{0}` is empty")]
    EmptyGroup(String),
    #[error("group targets `{group}` but caption targets `{target}`")]
    GroupTargetMismatch { group: String, target: String },
    #[error("target `{0}` is not in the gallery")]
    TargetNotInGallery(String),
    #[error("no similar group for image `{0}`")]
    MissingGroup(String),
    #[error("entry `{0}` is not a caption")]
    NotACaption(String),
    #[error("nothing to evaluate")]
    NoCaptions,
    #[error("recall cut-offs must be positive")]
    InvalidK,
    #[error("report line {line}: {reason}")]
    MalformedReport { line: usize, reason: String },
}

/// Similarities between the caption and its target and each group member.
fn group_similarities(
    images: &EmbeddingStore,
    group: &SimilarGroup,
    target_id: &str,
    caption: &[f32],
) -> Result<(f64, Vec<f64>), MetricError> {
    if group.target_id.as_str() != target_id {
        return Err(MetricError::GroupTargetMismatch {
            group: group.target_id.to_string(),
            target: target_id.to_string(),
        });
    }
    if group.members.is_empty() {
        return Err(MetricError::EmptyGroup(target_id.to_string()));
    }
    let target = cosine(images.get(target_id)?, caption)?;
    let others = group
        .member_ids()
        .map(|id| Ok(cosine(images.get(id.as_str())?, caption)?))
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok((target, others))
}

/// `target_sim` minus the mean group similarity; NaN for an empty group.
pub fn gap_avg(target_sim: f64, group_sims: &[f64]) -> f64 {
    if group_sims.is_empty() {
        return f64::NAN;
    }
    let (lo, hi) = group_sims
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    // rounding can push the mean just outside [min, max]; pinning it keeps
    // gap_min <= gap_avg exact and equal similarities at a zero gap
    let mean = group_sims.iter().sum::<f64>() / group_sims.len() as f64;
    target_sim - mean.clamp(lo, hi)
}

/// `target_sim` minus the largest group similarity; NaN for an empty group.
pub fn gap_min(target_sim: f64, group_sims: &[f64]) -> f64 {
    if group_sims.is_empty() {
        return f64::NAN;
    }
    target_sim - group_sims.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `f(I, c)` minus the mean similarity of `c` to the similar group.
pub fn geg_avg(
    images: &EmbeddingStore,
    group: &SimilarGroup,
    target_id: &str,
    caption: &[f32],
) -> Result<f64, MetricError> {
    let (t, others) = group_similarities(images, group, target_id, caption)?;
    Ok(gap_avg(t, &others))
}

/// `f(I, c)` minus the similarity of `c` to the closest group member.
pub fn geg_min(
    images: &EmbeddingStore,
    group: &SimilarGroup,
    target_id: &str,
    caption: &[f32],
) -> Result<f64, MetricError> {
    let (t, others) = group_similarities(images, group, target_id, caption)?;
    Ok(gap_min(t, &others))
}

/// 1-based rank of `target_id` when `gallery` is sorted by similarity to the
/// caption, best first, ties broken by id.
pub fn target_rank(
    images: &EmbeddingStore,
    caption: &[f32],
    target_id: &str,
    gallery: &[EntryId],
) -> Result<usize, MetricError> {
    if !gallery.iter().any(|g| g.as_str() == target_id) {
        return Err(MetricError::TargetNotInGallery(target_id.to_string()));
    }
    let target = cosine(images.get(target_id)?, caption)?;
    let mut rank = 1;
    for g in gallery {
        if g.as_str() == target_id {
            continue;
        }
        let s = cosine(images.get(g.as_str())?, caption)?;
        if s > target || (s == target && g.as_str() < target_id) {
            rank += 1;
        }
    }
    Ok(rank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionMetrics {
    pub caption_id: EntryId,
    pub target_id: EntryId,
    pub target_rank: usize,
    pub geg_avg: f64,
    pub geg_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Percentage of captions whose target ranks within the top K.
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_geg_avg: f64,
    pub mean_geg_min: f64,
    pub gallery_size: usize,
    pub num_captions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistinctReport {
    /// Sorted by caption id.
    pub per_caption: Vec<CaptionMetrics>,
    pub aggregate: Aggregate,
}

/// Evaluates every caption in `generated` against its owner image.
pub fn evaluate_split(
    images: &EmbeddingStore,
    generated: &EmbeddingStore,
    groups: &GroupFile,
    gallery: &[EntryId],
    ks: &[usize],
) -> Result<DistinctReport, MetricError> {
    if ks.contains(&0) {
        return Err(MetricError::InvalidK);
    }
    let by_target = groups.index();
    let mut items = Vec::with_capacity(generated.rows());
    for e in generated.entries() {
        let owner = match (e.kind, &e.owner) {
            (EntryKind::Caption, Some(owner)) => owner,
            _ => return Err(MetricError::NotACaption(e.id.to_string())),
        };
        let group = *by_target
            .get(owner.as_str())
            .ok_or_else(|| MetricError::MissingGroup(owner.to_string()))?;
        items.push((e, owner, group));
    }
    if items.is_empty() {
        return Err(MetricError::NoCaptions);
    }
    let mut seen = HashSet::new();
    let gallery: Vec<EntryId> = gallery
        .iter()
        .filter(|g| seen.insert(*g))
        .cloned()
        .collect();

    let mut per_caption = items
        .par_iter()
        .map(|(e, owner, group)| {
            let emb = generated.row_at(e.row);
            let (t, others) = group_similarities(images, group, owner.as_str(), emb)?;
            Ok(CaptionMetrics {
                caption_id: e.id.clone(),
                target_id: (*owner).clone(),
                target_rank: target_rank(images, emb, owner.as_str(), &gallery)?,
                geg_avg: gap_avg(t, &others),
                geg_min: gap_min(t, &others),
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    per_caption.sort_by(|a, b| a.caption_id.cmp(&b.caption_id));

    let n = per_caption.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = per_caption.iter().filter(|c| c.target_rank <= k).count();
            (k, 100.0 * hits as f64 / n)
        })
        .collect();
    let aggregate = Aggregate {
        recall_at,
        mean_geg_avg: per_caption.iter().map(|c| c.geg_avg).sum::<f64>() / n,
        mean_geg_min: per_caption.iter().map(|c| c.geg_min).sum::<f64>() / n,
        gallery_size: gallery.len(),
        num_captions: per_caption.len(),
    };
    Ok(DistinctReport {
        per_caption,
        aggregate,
    })
}

const PER_CAPTION_HEADER: &str = "caption_id\ttarget_id\ttarget_rank\tgeg_avg\tgeg_min";

impl DistinctReport {
    /// Tab-separated per-caption table with a header row.
    pub fn per_caption_table(&self) -> String {
        let mut out = format!("{PER_CAPTION_HEADER}\n");
        for c in &self.per_caption {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}",
                c.caption_id, c.target_id, c.target_rank, c.geg_avg, c.geg_min
            );
        }
        out
    }
}

impl Aggregate {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, r) in &self.recall_at {
            let _ = writeln!(out, "R{k}={r:.4}");
        }
        let _ = writeln!(out, "GEG_AVG={:.4}", self.mean_geg_avg);
        let _ = writeln!(out, "GEG_MIN={:.4}", self.mean_geg_min);
        let _ = writeln!(out, "GALLERY_SIZE={}", self.gallery_size);
        let _ = writeln!(out, "NUM_CAPTIONS={}", self.num_captions);
        out
    }

    /// One-line summary for terminals.
    pub fn summary_line(&self) -> String {
        self.to_text().lines().collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let bad = |line: usize, reason: String| MetricError::MalformedReport { line, reason };
        let mut fields: HashMap<&str, (usize, &str)> = HashMap::new();
        let mut recall_at = BTreeMap::new();
        let mut order = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected KEY=value, found `{line}`")))?;
            match key.strip_prefix('R').map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => {
                    let r: f64 = value
                        .parse()
                        .map_err(|_| bad(i + 1, format!("bad recall `{value}`")))?;
                    if !(0.0..=100.0).contains(&r) || recall_at.insert(k, r).is_some() {
                        return Err(bad(i + 1, format!("bad or repeated R{k}")));
                    }
                    order.push(0);
                }
                _ => {
                    if fields.insert(key, (i + 1, value)).is_some() {
                        return Err(bad(i + 1, format!("repeated key {key}")));
                    }
                    order.push(1);
                }
            }
        }
        if order.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad(0, "recall lines must come first".into()));
        }
        let expected = ["GEG_AVG", "GEG_MIN", "GALLERY_SIZE", "NUM_CAPTIONS"];
        if fields.len() != expected.len() {
            return Err(bad(0, "unexpected key set".into()));
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| bad(0, format!("missing {key}")))
        };
        let real = |key: &str| -> Result<f64, MetricError> {
            let (line, v) = get(key)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(line, format!("bad {key} `{v}`")))
        };
        let count = |key: &str| -> Result<usize, MetricError> {
            let (line, v) = get(key)?;
            v.parse()
                .map_err(|_| bad(line, format!("bad {key} `{v}`")))
        };
        // the emitted field order is fixed
        let positions: Vec<usize> = expected
            .iter()
            .map(|k| get(k).map(|(l, _)| l))
            .collect::<Result<_, _>>()?;
        if positions.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad(0, "fields out of order".into()));
        }
        Ok(Aggregate {
            recall_at,
            mean_geg_avg: real("GEG_AVG")?,
            mean_geg_min: real("GEG_MIN")?,
            gallery_size: count("GALLERY_SIZE")?,
            num_captions: count("NUM_CAPTIONS")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricError> {
        fs::write(path, self.to_text()).map_err(|e| StoreError::io(path, e).into())
    }
}
