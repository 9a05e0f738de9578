//! Synthetic end-to-end check of the weighted reward.
//!
//! A [`ToyWorld`] plants clustered image embeddings built from a token shared
//! by the cluster (salient) and a token unique to the image (distinctive).
//! A factorized softmax [`ToyPolicy`] is trained with the self-critical
//! update so that the effect of the group term on distinctiveness can be
//! measured at desk scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ciderscore::{build_idf, cider, CiderError, IdfTable, TokenizedCaption};
use crate::distmetrics::{gap_avg, gap_min, target_rank, MetricError};
use crate::embedstore::{
    cosine, read_matrix, store_paths, write_matrix, EmbeddingStore, EntryId,
    ManifestEntry, RawMatrix, StoreError, MIN_NORM,
};
use crate::groups::{build_all, GroupError, GroupFile};
use crate::scstreward::{advantage, combined_reward, RewardConfig, RewardError};

pub const DEFAULT_LR: f64 = 0.05;
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("caption is empty")]
    EmptyCaption,
    #[error("caption embedding has zero norm")]
    ZeroEmbedding,
    #[error("parameters diverged at epoch {epoch} (|theta| = {max_abs:e})")]
    DivergenceDetected { epoch: usize, max_abs: f64 },
    #[error("invalid toy world: {0}")]
    InvalidWorld(String),
    #[error("malformed policy header: {0}")]
    MalformedPolicy(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Cider(#[from] CiderError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// `P(c | I) = prod_p softmax(theta_p x_I)[c_p]`, one `vocab x dim` matrix
/// per caption position.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: usize,
    len: usize,
    dim: usize,
    // [position][token][dim], row-major
    theta: Vec<f64>,
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

impl ToyPolicy {
    pub fn zeros(vocab: usize, len: usize, dim: usize) -> Self {
        assert!(vocab > 0 && len > 0 && dim > 0, "policy shape must be positive");
        ToyPolicy {
            vocab,
            len,
            dim,
            theta: vec![0.0; vocab * len * dim],
        }
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, len: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, len, dim);
        for t in &mut p.theta {
            *t = scale * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn caption_len(&self) -> usize {
        self.len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Flat index of `theta[position][token][d]`.
    pub fn index(&self, position: usize, token: usize, d: usize) -> usize {
        (position * self.vocab + token) * self.dim + d
    }

    pub fn position_logits(&self, position: usize, image: &[f32]) -> Vec<f64> {
        assert_eq!(image.len(), self.dim, "image dim does not match policy");
        (0..self.vocab)
            .map(|v| {
                let row = &self.theta[self.index(position, v, 0)..][..self.dim];
                row.iter().zip(image).map(|(w, &x)| w * x as f64).sum()
            })
            .collect()
    }

    pub fn position_probs(&self, position: usize, image: &[f32]) -> Vec<f64> {
        let mut l = self.position_logits(position, image);
        softmax(&mut l);
        l
    }

    pub fn log_prob(&self, image: &[f32], caption: &[usize]) -> f64 {
        caption
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let logits = self.position_logits(p, image);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                logits[t] - lse
            })
            .sum()
    }

    /// `d log P(caption | image) / d theta`: `(onehot - softmax) (x) x` per position.
    pub fn grad_log_prob(&self, image: &[f32], caption: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        for (p, &t) in caption.iter().enumerate() {
            let probs = self.position_probs(p, image);
            for (v, &pv) in probs.iter().enumerate() {
                let coeff = if v == t { 1.0 - pv } else { -pv };
                let base = self.index(p, v, 0);
                for (d, &x) in image.iter().enumerate() {
                    g[base + d] = coeff * x as f64;
                }
            }
        }
        g
    }

    /// Argmax per position; ties go to the lowest token.
    pub fn greedy_decode(&self, image: &[f32]) -> Vec<usize> {
        (0..self.len)
            .map(|p| {
                let logits = self.position_logits(p, image);
                let mut best = 0;
                for (v, &l) in logits.iter().enumerate() {
                    if l > logits[best] {
                        best = v;
                    }
                }
                best
            })
            .collect()
    }

    /// Independent multinomial draw per position, with the exact log
    /// probability of the drawn caption.
    pub fn sample_decode<R: Rng + ?Sized>(&self, image: &[f32], rng: &mut R) -> (Vec<usize>, f64) {
        let mut caption = Vec::with_capacity(self.len);
        let mut logprob = 0.0;
        for p in 0..self.len {
            let probs = self.position_probs(p, image);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.vocab - 1;
            for (v, &pv) in probs.iter().enumerate() {
                acc += pv;
                if u < acc {
                    pick = v;
                    break;
                }
            }
            // rounding can leave the tail with zero mass; step back to a live token
            while probs[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            logprob += probs[pick].ln();
            caption.push(pick);
        }
        (caption, logprob)
    }

    pub fn sample_decode_seeded(&self, image: &[f32], seed: u64) -> (Vec<usize>, f64) {
        self.sample_decode(image, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Probability that `token` occurs at least once in a sampled caption.
    pub fn presence_prob(&self, image: &[f32], token: usize) -> f64 {
        1.0 - (0..self.len)
            .map(|p| 1.0 - self.position_probs(p, image)[token])
            .product::<f64>()
    }

    pub fn max_abs(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, t| m.max(t.abs()))
    }

    /// `theta <- theta - lr * grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        for (t, g) in self.theta.iter_mut().zip(grad) {
            *t -= lr * g;
        }
    }

    /// Parameters as a `(len * vocab) x dim` matrix plus a key-value header.
    pub fn save(&self, prefix: &Path) -> Result<(), ToyError> {
        let (mat, _) = store_paths(prefix);
        let data = self.theta.iter().map(|&t| t as f32).collect();
        write_matrix(&mat, &RawMatrix::new(self.len * self.vocab, self.dim, data)?)?;
        let kv = kv_path(prefix);
        let header = format!("vocab={}\nlen={}\ndim={}\n", self.vocab, self.len, self.dim);
        fs::write(&kv, header).map_err(|e| StoreError::io(&kv, e).into())
    }

    pub fn load(prefix: &Path) -> Result<Self, ToyError> {
        let kv = kv_path(prefix);
        let text = fs::read_to_string(&kv).map_err(|e| StoreError::io(&kv, e))?;
        let (mut vocab, mut len, mut dim) = (None, None, None);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ToyError::MalformedPolicy(line.to_string()))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| ToyError::MalformedPolicy(line.to_string()))?;
            match k.trim() {
                "vocab" => vocab = Some(v),
                "len" => len = Some(v),
                "dim" => dim = Some(v),
                other => return Err(ToyError::MalformedPolicy(format!("unknown key {other}"))),
            }
        }
        let (Some(vocab), Some(len), Some(dim)) = (vocab, len, dim) else {
            return Err(ToyError::MalformedPolicy("missing vocab, len or dim".into()));
        };
        let (mat, _) = store_paths(prefix);
        let m = read_matrix(&mat)?;
        if vocab == 0 || len == 0 || m.rows != vocab * len || m.dim != dim {
            return Err(ToyError::MalformedPolicy(format!(
                "header says {len}x{vocab}x{dim}, matrix is {}x{}",
                m.rows, m.dim
            )));
        }
        Ok(ToyPolicy {
            vocab,
            len,
            dim,
            theta: m.data.iter().map(|&x| x as f64).collect(),
        })
    }
}

fn kv_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".kv");
    p.into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub dim: usize,
    pub vocab: usize,
    pub caption_len: usize,
    pub images: usize,
    pub clusters: usize,
    pub refs_per_image: usize,
    /// Weight of the distinctive token relative to the salient one.
    pub distinct_weight: f64,
    pub noise: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            dim: 16,
            vocab: 32,
            caption_len: 4,
            images: 20,
            clusters: 4,
            refs_per_image: 2,
            distinct_weight: 0.5,
            noise: 0.05,
            k: 5,
            seed: 0,
        }
    }
}

/// Token roles: fillers first, then one salient token per cluster, then one
/// distinctive token per image.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub params: WorldParams,
    pub token_embeddings: Vec<Vec<f32>>,
    pub images: EmbeddingStore,
    pub image_ids: Vec<EntryId>,
    pub cluster_of: Vec<usize>,
    pub salient: Vec<usize>,
    pub distinctive: Vec<usize>,
    /// Reference token sequences per image.
    pub references: Vec<Vec<Vec<usize>>>,
    pub reference_store: EmbeddingStore,
    pub groups: GroupFile,
    /// Per image, the row indices of its group members in `images`.
    group_rows: Vec<Vec<usize>>,
    ref_tokens: Vec<Vec<TokenizedCaption>>,
    idf: IdfTable,
}

fn normalized(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n >= MIN_NORM).then(|| v.iter().map(|x| (x / n) as f32).collect())
}

pub fn token_word(token: usize) -> String {
    format!("w{token:02}")
}

impl ToyWorld {
    pub fn new(params: WorldParams) -> Result<Self, ToyError> {
        let p = &params;
        let fillers = p
            .vocab
            .checked_sub(p.clusters + p.images)
            .ok_or_else(|| ToyError::InvalidWorld("vocab too small for clusters + images".into()))?;
        if p.caption_len < 3 || fillers + 1 < p.caption_len {
            return Err(ToyError::InvalidWorld(
                "need caption_len >= 3 and at least caption_len - 1 filler tokens".into(),
            ));
        }
        if p.dim == 0 || p.clusters == 0 || p.images == 0 || p.refs_per_image < 2 || p.k == 0 {
            return Err(ToyError::InvalidWorld(
                "dim, clusters, images, K must be positive and refs_per_image >= 2".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut token_embeddings = Vec::with_capacity(p.vocab);
        for _ in 0..p.vocab {
            let v: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
            token_embeddings.push(normalized(&v).ok_or(ToyError::ZeroEmbedding)?);
        }

        let mut image_rows = Vec::with_capacity(p.images);
        let (mut cluster_of, mut salient, mut distinctive, mut references) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut image_ids = Vec::new();
        for i in 0..p.images {
            let c = i % p.clusters;
            let s = fillers + c;
            let d = fillers + p.clusters + i;
            let v: Vec<f64> = (0..p.dim)
                .map(|k| {
                    token_embeddings[s][k] as f64
                        + p.distinct_weight * token_embeddings[d][k] as f64
                        + p.noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let id = EntryId::new(format!("img{i:02}"))?;
            image_rows.push((
                ManifestEntry::image(id.clone(), 0),
                normalized(&v).ok_or(ToyError::ZeroEmbedding)?,
            ));
            image_ids.push(id);
            cluster_of.push(c);
            salient.push(s);
            distinctive.push(d);

            // generic: f0 s f1 f2 ...; distinctive: same with the last filler replaced by d
            let generic: Vec<usize> = std::iter::once(0)
                .chain(std::iter::once(s))
                .chain(1..p.caption_len - 1)
                .collect();
            let mut refs = vec![generic.clone()];
            let mut with_d = generic.clone();
            *with_d.last_mut().unwrap() = d;
            refs.push(with_d);
            for j in 2..p.refs_per_image {
                let mut extra = generic.clone();
                let last = extra.len() - 1;
                extra[last] = (last + j - 1) % fillers.max(1);
                refs.push(extra);
            }
            references.push(refs);
        }
        let images = EmbeddingStore::from_rows(p.dim, image_rows)?;

        let mut ref_rows = Vec::new();
        for (i, refs) in references.iter().enumerate() {
            for (n, r) in refs.iter().enumerate() {
                let emb = embed_tokens(&token_embeddings, r)?;
                ref_rows.push((
                    ManifestEntry::caption(
                        EntryId::caption_of(&image_ids[i], n),
                        0,
                        image_ids[i].clone(),
                    ),
                    emb,
                ));
            }
        }
        let reference_store = EmbeddingStore::from_rows(p.dim, ref_rows)?;
        let built = build_all(&images, &reference_store, p.k, "toy")?;
        if let Some((id, d)) = built.degraded.first() {
            return Err(ToyError::InvalidWorld(format!(
                "similar group for {id} degraded ({d:?}); K too large for the world"
            )));
        }
        let groups = built.file;
        let group_rows: Vec<Vec<usize>> = groups
            .groups
            .iter()
            .map(|g| {
                g.member_ids()
                    .map(|m| images.row_index(m.as_str()).expect("member is an image"))
                    .collect()
            })
            .collect();
        for (i, rows) in group_rows.iter().enumerate() {
            if !rows.iter().any(|&r| cluster_of[r] == cluster_of[i]) {
                return Err(ToyError::InvalidWorld(format!(
                    "group of {} has no same-cluster member",
                    image_ids[i]
                )));
            }
        }

        let ref_tokens: Vec<Vec<TokenizedCaption>> = references
            .iter()
            .map(|refs| refs.iter().map(|r| words(r)).collect())
            .collect();
        let idf = build_idf(ref_tokens.iter().map(Vec::as_slice))?;

        Ok(ToyWorld {
            params,
            token_embeddings,
            images,
            image_ids,
            cluster_of,
            salient,
            distinctive,
            references,
            reference_store,
            groups,
            group_rows,
            ref_tokens,
            idf,
        })
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn vocab(&self) -> usize {
        self.params.vocab
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.row_at(i)
    }

    /// Normalized sum of the caption's token embeddings.
    pub fn caption_embed(&self, caption: &[usize]) -> Result<Vec<f32>, ToyError> {
        embed_tokens(&self.token_embeddings, caption)
    }

    pub fn caption_words(&self, caption: &[usize]) -> TokenizedCaption {
        words(caption)
    }

    pub fn cider(&self, image: usize, caption: &[usize]) -> Result<f64, ToyError> {
        Ok(cider(&words(caption), &self.ref_tokens[image], &self.idf)?)
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    /// CIDEr, target similarity and group similarities of a caption.
    pub fn score(&self, image: usize, caption: &[usize]) -> Result<CaptionScore, ToyError> {
        let emb = self.caption_embed(caption)?;
        let target_sim = cosine(self.image(image), &emb)?;
        let group_sims = self.group_rows[image]
            .iter()
            .map(|&r| cosine(self.images.row_at(r), &emb))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CaptionScore {
            cider: self.cider(image, caption)?,
            target_sim,
            group_sims,
            embedding: emb,
        })
    }

    /// Writes `<prefix>.images`, `<prefix>.tokens` and `<prefix>.refs`
    /// embedding stores plus `<prefix>.kv`.
    pub fn save(&self, prefix: &Path) -> Result<(), ToyError> {
        let with = |suffix: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(suffix);
            std::path::PathBuf::from(p)
        };
        let (m, t) = store_paths(&with(".images"));
        self.images.save(&m, &t)?;
        let (m, t) = store_paths(&with(".refs"));
        self.reference_store.save(&m, &t)?;
        let tokens = EmbeddingStore::from_rows(
            self.params.dim,
            self.token_embeddings.iter().enumerate().map(|(i, v)| {
                (
                    ManifestEntry::image(EntryId::new(token_word(i)).expect("valid id"), 0),
                    v.clone(),
                )
            }),
        )?;
        let (m, t) = store_paths(&with(".tokens"));
        tokens.save(&m, &t)?;
        let p = &self.params;
        let kv = with(".kv");
        let header = format!(
            "dim={}\nvocab={}\ncaption_len={}\nimages={}\nclusters={}\nrefs_per_image={}\ndistinct_weight={}\nnoise={}\nK={}\nseed={}\n",
            p.dim, p.vocab, p.caption_len, p.images, p.clusters, p.refs_per_image,
            p.distinct_weight, p.noise, p.k, p.seed
        );
        fs::write(&kv, header).map_err(|e| StoreError::io(&kv, e))?;
        Ok(())
    }
}

fn words(caption: &[usize]) -> TokenizedCaption {
    TokenizedCaption::from_tokens(caption.iter().map(|&t| token_word(t)))
}

fn embed_tokens(tokens: &[Vec<f32>], caption: &[usize]) -> Result<Vec<f32>, ToyError> {
    if caption.is_empty() {
        return Err(ToyError::EmptyCaption);
    }
    let dim = tokens[0].len();
    let mut sum = vec![0.0f64; dim];
    for &t in caption {
        let e = tokens.get(t).ok_or(ToyError::TokenOutOfRange {
            token: t,
            vocab: tokens.len(),
        })?;
        for (s, &x) in sum.iter_mut().zip(e) {
            *s += x as f64;
        }
    }
    normalized(&sum).ok_or(ToyError::ZeroEmbedding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionScore {
    pub cider: f64,
    pub target_sim: f64,
    pub group_sims: Vec<f64>,
    pub embedding: Vec<f32>,
}

impl CaptionScore {
    pub fn reward(&self, config: &RewardConfig) -> Result<f64, ToyError> {
        Ok(combined_reward(config, self.cider, self.target_sim, &self.group_sims)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `initial * decay^(epoch - 1)`.
    Exponential { initial: f64, decay: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant(DEFAULT_LR)
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Exponential { initial, decay } => {
                initial * decay.powi(epoch.saturating_sub(1) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `theta <- theta - lr * grad`.
    Sgd,
    /// Bias-corrected first and second moment estimates.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::ADAM
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, policy: &mut ToyPolicy, grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => policy.descend(grad, lr),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((theta, &g), m), v) in policy
                    .theta
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            schedule: LrSchedule::default(),
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

/// Greedy-caption metrics over all images of the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_geg_avg: f64,
    pub mean_geg_min: f64,
    /// Percentage of greedy captions that retrieve their image first.
    pub r_at_1: f64,
    pub mean_cider: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

pub const LOG_HEADER: &str = "epoch\tmean_reward\tmean_geg_avg\tmean_geg_min\tr_at_1";

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                e.epoch, e.mean_reward, e.mean_geg_avg, e.mean_geg_min, e.r_at_1
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Scores the greedy caption of every image.
pub fn evaluate(
    world: &ToyWorld,
    policy: &ToyPolicy,
    config: &RewardConfig,
    epoch: usize,
) -> Result<EpochLog, ToyError> {
    let m = world.num_images();
    let (mut reward, mut avg, mut min, mut cid, mut hits) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for i in 0..m {
        let caption = policy.greedy_decode(world.image(i));
        let s = world.score(i, &caption)?;
        reward += s.reward(config)?;
        avg += gap_avg(s.target_sim, &s.group_sims);
        min += gap_min(s.target_sim, &s.group_sims);
        cid += s.cider;
        // the toy gallery is every image in the world
        if target_rank(&world.images, &s.embedding, world.image_ids[i].as_str(), &world.image_ids)? == 1 {
            hits += 1;
        }
    }
    let n = m as f64;
    Ok(EpochLog {
        epoch,
        mean_reward: reward / n,
        mean_geg_avg: avg / n,
        mean_geg_min: min / n,
        r_at_1: 100.0 * hits as f64 / n,
        mean_cider: cid / n,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub log: TrainingLog,
}

/// Self-critical training from a zero-initialized policy. Each epoch visits
/// every image once: greedy baseline, one multinomial sample, one update.
pub fn train(
    world: &ToyWorld,
    config: &RewardConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome, ToyError> {
    config.validate()?;
    if config.k != world.groups.k {
        return Err(ToyError::InvalidWorld(format!(
            "reward K={} but the world groups use K={}",
            config.k, world.groups.k
        )));
    }
    let mut policy = ToyPolicy::zeros(world.vocab(), world.params.caption_len, world.params.dim);
    train_from(world, config, options, &mut policy).map(|log| TrainOutcome { policy, log })
}

/// As [`train`], continuing from an existing policy.
pub fn train_from(
    world: &ToyWorld,
    config: &RewardConfig,
    options: &TrainOptions,
    policy: &mut ToyPolicy,
) -> Result<TrainingLog, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut opt = OptimizerState::new(options.optimizer, policy.theta.len());
    let mut log = TrainingLog::default();
    for epoch in 1..=options.epochs {
        let lr = options.schedule.at(epoch);
        for i in 0..world.num_images() {
            let x = world.image(i);
            let greedy = policy.greedy_decode(x);
            let (sampled, _) = policy.sample_decode(x, &mut rng);
            let r_greedy = world.score(i, &greedy)?.reward(config)?;
            let r_sampled = world.score(i, &sampled)?.reward(config)?;
            let adv = advantage(r_sampled, r_greedy);
            if adv == 0.0 {
                continue;
            }
            // loss gradient -adv * grad log P
            let mut g = policy.grad_log_prob(x, &sampled);
            for v in &mut g {
                *v *= -adv;
            }
            opt.step(policy, &g, lr);
            let max_abs = policy.max_abs();
            if !(max_abs <= DIVERGENCE_LIMIT) {
                return Err(ToyError::DivergenceDetected { epoch, max_abs });
            }
        }
        log.epochs.push(evaluate(world, policy, config, epoch)?);
    }
    Ok(log)
}
