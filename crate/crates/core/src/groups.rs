//! Similar-image groups found through caption-mediated retrieval.
//!
//! The similarity of a candidate image to a target is the best match between
//! the target image embedding and any of the candidate's ground-truth
//! captions. Groups are built from a pre-filtered pool of the `N * (K + 1)`
//! captions closest to the target, where `N` is the number of captions per
//! image.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::embedstore::{cosine, EmbeddingStore, EntryId, EntryKind, StoreError};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum GroupError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("image `{0}` has no ground-truth captions")]
    NoCaptionsForImage(String),
    #[error("caption `{caption}` is owned by `{owner}`, which is not an image in the split")]
    OrphanCaption { caption: String, owner: String },
    #[error("K must be positive")]
    ZeroK,
    #[error("group file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub image_id: EntryId,
    pub score: f64,
}

/// Target image plus its most similar images, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarGroup {
    pub target_id: EntryId,
    pub members: Vec<GroupMember>,
}

impl SimilarGroup {
    pub fn member_ids(&self) -> impl Iterator<Item = &EntryId> {
        self.members.iter().map(|m| &m.image_id)
    }

    /// Structural invariants: target excluded, members distinct, scores
    /// non-increasing, at most `k` members.
    pub fn check(&self, k: usize) -> Result<(), String> {
        if self.members.len() > k {
            return Err(format!("{} members exceed K={k}", self.members.len()));
        }
        let mut seen = HashSet::new();
        for m in &self.members {
            if m.image_id == self.target_id {
                return Err(format!("target `{}` listed as its own member", m.image_id));
            }
            if !seen.insert(&m.image_id) {
                return Err(format!("member `{}` repeated", m.image_id));
            }
        }
        if self.members.windows(2).any(|w| w[1].score > w[0].score) {
            return Err("scores are not non-increasing".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degradation {
    /// The `N(K+1)` pool held fewer than K owners; the whole split was ranked.
    FullSplitFallback,
    /// Even the whole split has fewer than K candidate images.
    Short,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltGroup {
    pub group: SimilarGroup,
    pub degradation: Option<Degradation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFile {
    pub split: String,
    pub k: usize,
    pub groups: Vec<SimilarGroup>,
}

/// Eq. 2 style score: the best similarity between the target image and any
/// caption owned by `candidate_id`.
pub fn score_pair(
    images: &EmbeddingStore,
    captions: &EmbeddingStore,
    target_id: &str,
    candidate_id: &str,
) -> Result<f64, GroupError> {
    let target = images.get(target_id)?;
    if !images.contains(candidate_id) {
        return Err(StoreError::UnknownId(candidate_id.to_string()).into());
    }
    let rows = captions.rows_owned_by(candidate_id);
    if rows.is_empty() {
        return Err(GroupError::NoCaptionsForImage(candidate_id.to_string()));
    }
    let mut best = f64::NEG_INFINITY;
    for &r in rows {
        best = best.max(cosine(target, captions.row_at(r))?);
    }
    Ok(best)
}

/// Captions per image, taken as the largest count in the split.
fn captions_per_image(images: &EmbeddingStore, captions: &EmbeddingStore) -> usize {
    images
        .ids_of_kind(EntryKind::Image)
        .map(|id| captions.rows_owned_by(id.as_str()).len())
        .max()
        .unwrap_or(0)
}

fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

fn check_split(images: &EmbeddingStore, captions: &EmbeddingStore) -> Result<(), GroupError> {
    for e in captions.entries() {
        if let Some(owner) = &e.owner {
            if !images.contains(owner.as_str()) {
                return Err(GroupError::OrphanCaption {
                    caption: e.id.to_string(),
                    owner: owner.to_string(),
                });
            }
        }
    }
    for id in images.ids_of_kind(EntryKind::Image) {
        if captions.rows_owned_by(id.as_str()).is_empty() {
            return Err(GroupError::NoCaptionsForImage(id.to_string()));
        }
    }
    Ok(())
}

/// Builds the similar image group for `target_id`.
///
/// Captions not owned by the target are ranked by similarity to the target
/// image, the top `N(K+1)` form the pool, and owners are scored by their best
/// caption inside the pool. Ties go to the lexicographically smaller id.
pub fn build_group(
    images: &EmbeddingStore,
    captions: &EmbeddingStore,
    target_id: &str,
    k: usize,
) -> Result<BuiltGroup, GroupError> {
    if k == 0 {
        return Err(GroupError::ZeroK);
    }
    check_split(images, captions)?;
    build_group_unchecked(images, captions, target_id, k, captions_per_image(images, captions))
}

fn build_group_unchecked<'a>(
    images: &EmbeddingStore,
    captions: &'a EmbeddingStore,
    target_id: &str,
    k: usize,
    per_image: usize,
) -> Result<BuiltGroup, GroupError> {
    let target = images.get(target_id)?;
    let target_key = EntryId::new(target_id)?;

    let mut ranked: Vec<(f64, &'a EntryId)> = Vec::with_capacity(captions.rows());
    for e in captions.entries() {
        let Some(owner) = e.owner.as_ref() else {
            continue;
        };
        if *owner == target_key {
            continue;
        }
        ranked.push((cosine(target, captions.row_at(e.row))?, owner));
    }
    // Sorting ties by owner id makes the first appearance order of owners
    // identical to ranking owners by their best caption.
    ranked.sort_by(|a, b| by_score_then_id((a.0, a.1.as_str()), (b.0, b.1.as_str())));

    let pool = per_image.saturating_mul(k + 1).min(ranked.len());
    let mut best: HashMap<&EntryId, f64> = HashMap::new();
    let mut order: Vec<&EntryId> = Vec::new();
    let mut take = |slice: &[(f64, &'a EntryId)], best: &mut HashMap<&'a EntryId, f64>| {
        // captions are visited best first, so the first hit is the owner's max
        for &(score, owner) in slice {
            if !best.contains_key(owner) {
                best.insert(owner, score);
                order.push(owner);
            }
        }
        order.len()
    };
    let mut degradation = None;
    if take(&ranked[..pool], &mut best) < k {
        degradation = Some(Degradation::FullSplitFallback);
        if take(&ranked[pool..], &mut best) < k {
            degradation = Some(Degradation::Short);
        }
    }

    let members = order
        .into_iter()
        .take(k)
        .map(|id| GroupMember {
            image_id: id.clone(),
            score: best[id],
        })
        .collect();
    Ok(BuiltGroup {
        group: SimilarGroup {
            target_id: target_key,
            members,
        },
        degradation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub file: GroupFile,
    /// Targets whose group needed the full-split fallback or came up short.
    pub degraded: Vec<(EntryId, Degradation)>,
}

/// One group per image in the split, in manifest order. Runs on the current
/// rayon pool; output does not depend on the number of workers.
pub fn build_all(
    images: &EmbeddingStore,
    captions: &EmbeddingStore,
    k: usize,
    split: &str,
) -> Result<BuildSummary, GroupError> {
    if k == 0 {
        return Err(GroupError::ZeroK);
    }
    check_split(images, captions)?;
    let per_image = captions_per_image(images, captions);
    let targets: Vec<&EntryId> = images.ids_of_kind(EntryKind::Image).collect();
    let built: Vec<BuiltGroup> = targets
        .par_iter()
        .map(|id| build_group_unchecked(images, captions, id.as_str(), k, per_image))
        .collect::<Result<_, _>>()?;
    let degraded = built
        .iter()
        .filter_map(|b| b.degradation.map(|d| (b.group.target_id.clone(), d)))
        .collect();
    Ok(BuildSummary {
        file: GroupFile {
            split: split.to_string(),
            k,
            groups: built.into_iter().map(|b| b.group).collect(),
        },
        degraded,
    })
}

impl GroupFile {
    pub fn get(&self, target: &str) -> Option<&SimilarGroup> {
        self.groups.iter().find(|g| g.target_id.as_str() == target)
    }

    pub fn index(&self) -> HashMap<&str, &SimilarGroup> {
        self.groups
            .iter()
            .map(|g| (g.target_id.as_str(), g))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("K={}\tsplit={}\n", self.k, self.split);
        for g in &self.groups {
            out.push_str(g.target_id.as_str());
            for m in &g.members {
                out.push_str(&format!("\t{}:{:.6}", m.image_id, m.score));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GroupError> {
        let bad = |line: usize, reason: String| GroupError::Malformed { line, reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let (k_field, split_field) = header
            .split_once('\t')
            .ok_or_else(|| bad(1, "header must be `K=<k>\\tsplit=<name>`".into()))?;
        let k: usize = k_field
            .strip_prefix("K=")
            .and_then(|v| v.parse().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| bad(1, format!("bad K field `{k_field}`")))?;
        let split = split_field
            .strip_prefix("split=")
            .filter(|s| !s.contains('\t'))
            .ok_or_else(|| bad(1, format!("bad split field `{split_field}`")))?
            .to_string();

        let mut groups = Vec::new();
        let mut targets = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut fields = line.split('\t');
            let target_id = EntryId::new(fields.next().unwrap_or_default())
                .map_err(|_| bad(lineno, "invalid target id".into()))?;
            let mut members = Vec::new();
            for f in fields {
                let (id, score) = f
                    .rsplit_once(':')
                    .ok_or_else(|| bad(lineno, format!("member `{f}` lacks `:score`")))?;
                let image_id =
                    EntryId::new(id).map_err(|_| bad(lineno, format!("invalid member id `{id}`")))?;
                let score: f64 = score
                    .parse()
                    .ok()
                    .filter(|s: &f64| s.is_finite())
                    .ok_or_else(|| bad(lineno, format!("invalid score `{score}`")))?;
                members.push(GroupMember { image_id, score });
            }
            let group = SimilarGroup { target_id, members };
            group.check(k).map_err(|r| bad(lineno, r))?;
            if !targets.insert(group.target_id.clone()) {
                return Err(bad(lineno, format!("duplicate target `{}`", group.target_id)));
            }
            groups.push(group);
        }
        Ok(GroupFile { split, k, groups })
    }

    pub fn load(path: &Path) -> Result<Self, GroupError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), GroupError> {
        fs::write(path, self.to_text()).map_err(|e| StoreError::io(path, e).into())
    }
}
