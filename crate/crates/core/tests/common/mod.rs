//! Reference implementations used to check the library. Each one is written
//! from the definitions, not from the library code, and favours clarity over
//! speed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use distcap::embedstore::{EmbeddingStore, EntryId, EntryKind, ManifestEntry};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn id(s: &str) -> EntryId {
    EntryId::new(s).unwrap()
}

pub fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Cosine with Neumaier-compensated sums over f64 products.
pub fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    fn comp_sum(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
        }
        s + c
    }
    let dot = comp_sum(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64));
    let na = comp_sum(a.iter().map(|&x| x as f64 * x as f64)).sqrt();
    let nb = comp_sum(b.iter().map(|&x| x as f64 * x as f64)).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub struct Split {
    pub images: EmbeddingStore,
    pub captions: EmbeddingStore,
}

/// `n_images` images named `im000..`, each with `per_image` captions named
/// `im000#0..`. Captions are their image plus noise of scale `noise`.
pub fn random_split<R: Rng>(rng: &mut R, n_images: usize, per_image: usize, dim: usize, noise: f32) -> Split {
    let mut image_rows = Vec::new();
    let mut caption_rows = Vec::new();
    for i in 0..n_images {
        let img = id(&format!("im{i:03}"));
        let v = gaussian(rng, dim);
        for n in 0..per_image {
            let c: Vec<f32> = v
                .iter()
                .map(|&x| x + noise * rng.sample::<f32, _>(StandardNormal))
                .collect();
            caption_rows.push((ManifestEntry::caption(EntryId::caption_of(&img, n), 0, img.clone()), c));
        }
        image_rows.push((ManifestEntry::image(img, 0), v));
    }
    Split {
        images: EmbeddingStore::from_rows(dim, image_rows).unwrap(),
        captions: EmbeddingStore::from_rows(dim, caption_rows).unwrap(),
    }
}

fn captions_of<'a>(split: &'a Split) -> Vec<(&'a str, &'a [f32])> {
    split
        .captions
        .entries()
        .iter()
        .map(|e| (e.owner.as_ref().unwrap().as_str(), split.captions.row_at(e.row)))
        .collect()
}

/// Every other image scored by its best caption against the target, then
/// the top `k` by score with smaller ids first on ties.
pub fn brute_group(split: &Split, target: &str, k: usize) -> Vec<(String, f64)> {
    let t = split.images.get(target).unwrap();
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (owner, c) in captions_of(split) {
        if owner == target {
            continue;
        }
        let s = oracle_cosine(t, c);
        let e = best.entry(owner).or_insert(f64::NEG_INFINITY);
        if s > *e {
            *e = s;
        }
    }
    let mut all: Vec<(String, f64)> = best.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Distinct owners among the `N(K+1)` captions most similar to the target,
/// `N` being the largest caption count per image.
pub fn pool_owners(split: &Split, target: &str, k: usize) -> usize {
    let t = split.images.get(target).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in split.captions.entries() {
        *counts.entry(e.owner.as_ref().unwrap().as_str()).or_default() += 1;
    }
    let n = counts.values().copied().max().unwrap_or(0);
    let mut scored: Vec<(f64, &str)> = captions_of(split)
        .into_iter()
        .filter(|(o, _)| *o != target)
        .map(|(o, c)| (oracle_cosine(t, c), o))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let owners: BTreeSet<&str> = scored.iter().take(n * (k + 1)).map(|x| x.1).collect();
    owners.len()
}

/// 1-based position of the target after sorting the gallery by similarity
/// (descending) and id (ascending).
pub fn oracle_rank(images: &EmbeddingStore, caption: &[f32], target: &str, gallery: &[EntryId]) -> usize {
    let mut scored: Vec<(f64, &str)> = gallery
        .iter()
        .map(|g| (oracle_cosine(images.get(g.as_str()).unwrap(), caption), g.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    1 + scored.iter().position(|x| x.1 == target).unwrap()
}

pub fn image_ids(images: &EmbeddingStore) -> Vec<EntryId> {
    images.ids_of_kind(EntryKind::Image).cloned().collect()
}

type Gram = Vec<String>;

fn grams(tokens: &[String], n: usize) -> BTreeMap<Gram, f64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// CIDEr-D: per order n in 1..=4, tf-idf vectors with
/// idf = ln(#images) - ln(max(1, df)); similarity is
/// sum_g min(c_g, r_g) r_g / (|c| |r|) times exp(-(len_c - len_r)^2 / 72);
/// mean over orders, mean over references, times 10. `corpus` holds the
/// reference sets of every image and defines df.
pub fn oracle_cider(candidate: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    let images = corpus.iter().filter(|r| !r.is_empty()).count() as f64;
    let mut df: Vec<BTreeMap<Gram, f64>> = vec![BTreeMap::new(); 5];
    for set in corpus {
        for (n, table) in df.iter_mut().enumerate().skip(1) {
            let mut present = BTreeSet::new();
            for r in set {
                present.extend(grams(r, n).into_keys());
            }
            for g in present {
                *table.entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let tfidf = |tokens: &[String], n: usize| -> BTreeMap<Gram, f64> {
        grams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df[n].get(&g).copied().unwrap_or(0.0).max(1.0);
                (g, tf * (images.ln() - d.ln()))
            })
            .collect()
    };
    let norm = |v: &BTreeMap<Gram, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut per_ref = Vec::new();
    for r in refs {
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / (2.0 * 36.0)).exp();
        let mut orders = 0.0;
        for n in 1..=4 {
            let c = tfidf(candidate, n);
            let rv = tfidf(r, n);
            let mut num = 0.0;
            for (g, &cw) in &c {
                if let Some(&rw) = rv.get(g) {
                    num += cw.min(rw) * rw;
                }
            }
            let (nc, nr) = (norm(&c), norm(&rv));
            let cos = if nc != 0.0 && nr != 0.0 { num / (nc * nr) } else { num };
            orders += cos * penalty;
        }
        per_ref.push(orders / 4.0);
    }
    10.0 * per_ref.iter().sum::<f64>() / per_ref.len() as f64
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}
