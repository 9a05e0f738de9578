//! Weighted CIDEr + group-embedding-gap reward and the self-critical
//! policy-gradient step built on it.
//!
//! For a sampled caption `c` and the greedy caption `g` of the same image the
//! loss gradient is `-(r(c) - r(g)) * grad log P(c | I)`, with
//! `r(c) = alpha * CIDEr(c) + beta * G(I, c)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::distmetrics::{gap_avg, gap_min};
use crate::embedstore::StoreError;
use crate::groups::DEFAULT_K;
use crate::toytrain::ToyPolicy;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 10.0;
/// Largest caption space [`exact_expected_reward`] will enumerate.
pub const MAX_ENUMERATION: usize = 100_000;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("{0} reward needs a non-empty similar group")]
    EmptyGroup(RewardMode),
    #[error("caption space of {0} sequences is too large to enumerate")]
    EnumerationTooLarge(u128),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewardMode {
    /// `alpha * CIDEr`.
    CiderOnly,
    /// `alpha * CIDEr + beta * f(I, c)`, no group term.
    Er,
    /// `alpha * CIDEr + beta * (f(I, c) - mean_group f(I', c))`.
    GegAvg,
    /// `alpha * CIDEr + beta * (f(I, c) - max_group f(I', c))`.
    GegMin,
    /// `beta * (f(I, c) - mean_group f(I', c))`.
    GegSole,
}

impl RewardMode {
    pub const ALL: [RewardMode; 5] = [
        RewardMode::CiderOnly,
        RewardMode::Er,
        RewardMode::GegAvg,
        RewardMode::GegMin,
        RewardMode::GegSole,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::CiderOnly => "CIDER_ONLY",
            RewardMode::Er => "ER",
            RewardMode::GegAvg => "GEG_AVG",
            RewardMode::GegMin => "GEG_MIN",
            RewardMode::GegSole => "GEG_SOLE",
        }
    }

    pub fn uses_group(self) -> bool {
        matches!(
            self,
            RewardMode::GegAvg | RewardMode::GegMin | RewardMode::GegSole
        )
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| RewardError::InvalidConfig(format!("unknown reward mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: RewardMode,
    pub k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mode: RewardMode::GegAvg,
            k: DEFAULT_K,
        }
    }
}

impl RewardConfig {
    pub fn new(alpha: f64, beta: f64, mode: RewardMode, k: usize) -> Result<Self, RewardError> {
        let c = RewardConfig {
            alpha,
            beta,
            mode,
            k,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RewardError::InvalidConfig(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.k == 0 {
            return Err(RewardError::InvalidConfig("K must be positive".into()));
        }
        Ok(())
    }

    /// Weight applied to CIDEr after the mode is taken into account.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            RewardMode::GegSole => 0.0,
            _ => self.alpha,
        }
    }

    /// Weight applied to the embedding term after the mode is taken into account.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            RewardMode::CiderOnly => 0.0,
            _ => self.beta,
        }
    }

    /// `key=value` lines for `alpha`, `beta`, `mode`, `K`. Blank lines and
    /// `#` comments are ignored; absent keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, RewardError> {
        let mut c = RewardConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| RewardError::InvalidConfig(format!("line {}: {what}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(bad(&format!("repeated key `{key}`")));
            }
            seen.push(key);
            match key {
                "alpha" => c.alpha = value.parse().map_err(|_| bad("alpha is not a number"))?,
                "beta" => c.beta = value.parse().map_err(|_| bad("beta is not a number"))?,
                "mode" => c.mode = value.parse()?,
                "K" | "k" => c.k = value.parse().map_err(|_| bad("K is not an integer"))?,
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "alpha={}\nbeta={}\nmode={}\nK={}\n",
            self.alpha, self.beta, self.mode, self.k
        )
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        Self::from_kv(&text)
    }

    /// The embedding term of the reward before weighting: the gap for group
    /// modes, the raw target similarity for `ER`, zero for `CIDER_ONLY`.
    pub fn embedding_term(&self, target_sim: f64, group_sims: &[f64]) -> Result<f64, RewardError> {
        if self.mode.uses_group() && group_sims.is_empty() {
            return Err(RewardError::EmptyGroup(self.mode));
        }
        Ok(match self.mode {
            RewardMode::CiderOnly => 0.0,
            RewardMode::Er => target_sim,
            RewardMode::GegAvg | RewardMode::GegSole => gap_avg(target_sim, group_sims),
            RewardMode::GegMin => gap_min(target_sim, group_sims),
        })
    }
}

/// `alpha * CIDEr + beta * G`, with the mode selecting `G`.
pub fn combined_reward(
    config: &RewardConfig,
    cider_value: f64,
    target_sim: f64,
    group_sims: &[f64],
) -> Result<f64, RewardError> {
    let term = config.embedding_term(target_sim, group_sims)?;
    Ok(config.effective_alpha() * cider_value + config.effective_beta() * term)
}

/// Baseline-corrected reward of the sampled caption.
pub fn advantage(r_sampled: f64, r_greedy: f64) -> f64 {
    r_sampled - r_greedy
}

/// Greedy and sampled captions for one image under the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPair {
    pub greedy: Vec<usize>,
    pub sampled: Vec<usize>,
    pub sampled_logprob: f64,
}

impl SampledPair {
    pub fn draw<R: rand::Rng + ?Sized>(policy: &ToyPolicy, image: &[f32], rng: &mut R) -> Self {
        let greedy = policy.greedy_decode(image);
        let (sampled, sampled_logprob) = policy.sample_decode(image, rng);
        SampledPair {
            greedy,
            sampled,
            sampled_logprob,
        }
    }
}

/// Single-sample loss gradient `-(r_s - r_g) * grad log P(sampled | I)`.
/// Returns `None` when the advantage is exactly zero.
pub fn scst_loss_gradient(
    policy: &ToyPolicy,
    image: &[f32],
    pair: &SampledPair,
    r_sampled: f64,
    r_greedy: f64,
) -> Option<Vec<f64>> {
    let adv = advantage(r_sampled, r_greedy);
    if adv == 0.0 {
        return None;
    }
    let mut g = policy.grad_log_prob(image, &pair.sampled);
    for v in &mut g {
        *v *= -adv;
    }
    Some(g)
}

/// `E_{c ~ P(c|I)} [r(c)]` by enumerating every caption.
pub fn exact_expected_reward<F>(
    policy: &ToyPolicy,
    image: &[f32],
    mut reward_fn: F,
) -> Result<f64, RewardError>
where
    F: FnMut(&[usize]) -> f64,
{
    let (v, l) = (policy.vocab(), policy.caption_len());
    let space = (v as u128).checked_pow(l as u32).unwrap_or(u128::MAX);
    if space > MAX_ENUMERATION as u128 {
        return Err(RewardError::EnumerationTooLarge(space));
    }
    let probs: Vec<Vec<f64>> = (0..l).map(|p| policy.position_probs(p, image)).collect();
    let mut caption = vec![0usize; l];
    let mut total = 0.0;
    for _ in 0..space {
        let p: f64 = caption.iter().enumerate().map(|(pos, &t)| probs[pos][t]).product();
        total += p * reward_fn(&caption);
        // odometer increment, last position fastest
        for pos in (0..l).rev() {
            caption[pos] += 1;
            if caption[pos] < v {
                break;
            }
            caption[pos] = 0;
        }
    }
    Ok(total)
}
