//! Feed ranking: match results to a smoothed probability distribution.
//!
//! Each friend's raw score is their intersection cardinality normalized
//! by the square root of their set size, which rewards genuine overlap
//! while penalizing indiscriminate oversharing: padding a set with
//! non-matching tokens only grows the denominator. Laplace smoothing
//! then folds in friends with no overlap at all, so a feed sampled from
//! the distribution still shows them occasionally.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

use crate::geotoken::Resolution;
use crate::psi::MatchResult;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("smoothing constant {0} must be finite and non-negative")]
    InvalidAlpha(f64),
    #[error("resolution weight {0} must be in (0, 1]")]
    InvalidGamma(f64),
    #[error("no set size reported for matched resolution {0}")]
    MissingSetSize(Resolution),
    #[error("cannot build a distribution over zero friends")]
    NoFriends,
}

/// Ranking knobs: `alpha` is the Laplace smoothing constant, `gamma`
/// discounts matches found below the finest shared resolution by
/// `gamma^(r_max - r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            alpha: 0.1,
            gamma: 1.0,
        }
    }
}

impl RankConfig {
    fn validate(&self) -> Result<(), RankError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(RankError::InvalidAlpha(self.alpha));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(RankError::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

/// One friend's scored match.
#[derive(Debug, Clone, PartialEq)]
pub struct FriendScore {
    pub friend_id: String,
    /// Cardinality at the matched resolution (0 if nothing matched).
    pub cardinality: u64,
    /// The friend's set size at the matched resolution.
    pub friend_set_size: u64,
    /// Finest resolution with a nonzero cardinality, if any.
    pub matched_resolution: Option<Resolution>,
    pub raw_score: f64,
}

/// A normalized feed distribution over friends.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedDistribution {
    /// `(friend_id, probability)` in input order.
    pub entries: Vec<(String, f64)>,
    pub alpha: f64,
    pub resolution_weight_gamma: f64,
}

/// Scores one friend's match result:
/// `raw_score = sum over r of gamma^(r_max - r) * cardinality_r / sqrt(set_size_r)`,
/// skipping resolutions where the friend's set is empty. A descent result
/// has at most one nonzero term, so this reduces to the single-resolution
/// score at the stopping resolution.
pub fn score(
    friend_id: impl Into<String>,
    result: &MatchResult,
    config: &RankConfig,
) -> Result<FriendScore, RankError> {
    config.validate()?;
    let mut raw_score = 0.0;
    for (&r, &card) in &result.cardinality_by_resolution {
        let size = *result
            .server_set_size_by_resolution
            .get(&r)
            .ok_or(RankError::MissingSetSize(r))?;
        if size == 0 {
            continue;
        }
        let weight = config
            .gamma
            .powi(i32::from(result.r_max.get()) - i32::from(r.get()));
        raw_score += weight * card as f64 / (size as f64).sqrt();
    }
    let matched_resolution = result
        .cardinality_by_resolution
        .iter()
        .rev()
        .find(|(_, &card)| card > 0)
        .map(|(&r, _)| r);
    let report_at = matched_resolution.or_else(|| {
        result
            .cardinality_by_resolution
            .keys()
            .next_back()
            .copied()
    });
    let (cardinality, friend_set_size) = match report_at {
        Some(r) => (
            result.cardinality_by_resolution[&r],
            result.server_set_size_by_resolution[&r],
        ),
        None => (0, 0),
    };
    Ok(FriendScore {
        friend_id: friend_id.into(),
        cardinality,
        friend_set_size,
        matched_resolution,
        raw_score,
    })
}

/// Smooths raw scores into probabilities:
/// `P(X) = (raw_X + alpha) / sum_Y (raw_Y + alpha)`. With `alpha = 0` and
/// every score zero, falls back to uniform.
pub fn feed_distribution(
    scores: &[FriendScore],
    config: &RankConfig,
) -> Result<FeedDistribution, RankError> {
    config.validate()?;
    if scores.is_empty() {
        return Err(RankError::NoFriends);
    }
    let total: f64 = scores.iter().map(|s| s.raw_score + config.alpha).sum();
    let entries = if total > 0.0 {
        scores
            .iter()
            .map(|s| (s.friend_id.clone(), (s.raw_score + config.alpha) / total))
            .collect()
    } else {
        let uniform = 1.0 / scores.len() as f64;
        scores
            .iter()
            .map(|s| (s.friend_id.clone(), uniform))
            .collect()
    };
    Ok(FeedDistribution {
        entries,
        alpha: config.alpha,
        resolution_weight_gamma: config.gamma,
    })
}

/// Draws `n_slots` feed entries i.i.d. from the distribution.
pub fn sample_feed<R: Rng + ?Sized>(
    d: &FeedDistribution,
    n_slots: usize,
    rng: &mut R,
) -> Vec<String> {
    if d.entries.is_empty() || n_slots == 0 {
        return Vec::new();
    }
    let weights = WeightedIndex::new(d.entries.iter().map(|(_, p)| *p))
        .expect("distribution entries are normalized and non-negative");
    (0..n_slots)
        .map(|_| d.entries[weights.sample(rng)].0.clone())
        .collect()
}
