//! Privacy-preserving "do our paths cross?" matching for mobility traces.
//!
//! Two parties each hold a GPS trace. They want the *number* of
//! geohash cells (optionally hour-stamped) both have visited, at one or
//! several resolutions, without revealing the cells themselves. The
//! pipeline:
//!
//! 1. [`geotoken`] turns raw `(lat, lon, ts)` samples into geohash
//!    token sets at resolutions 1 through 9.
//! 2. [`commgroup`] provides the commutative blinding (a prime-order
//!    group where `blind(a, blind(b, x)) == blind(b, blind(a, x))`).
//! 3. [`bloom`] compresses the server's blinded sets for transfer.
//! 4. [`psi`] runs the three-message exchange and counts matches
//!    per resolution, including best-resolution descent.
//! 5. [`feedrank`] converts per-friend cardinalities into a smoothed
//!    sampling distribution for a social feed.
//! 6. [`net`] serves the exchange over TCP.
//! 7. [`sim`] generates synthetic cohorts and checks that cardinality
//!    correlates with declared friendship strength.
//!
//! ```
//! use psifeed::geotoken::{tokenize_trace, GeoPoint, Resolution, TimeMode};
//! use psifeed::psi::{match_sets_local, MatchStrategy, DEFAULT_FP_RATE};
//!
//! let cell = |lat, lon, ts| GeoPoint::new(lat, lon, ts).unwrap();
//! let mine = [cell(42.3601, -71.0589, 0), cell(42.3736, -71.1097, 3600)];
//! let theirs = [cell(42.3601, -71.0589, 7200), cell(40.7128, -74.0060, 9000)];
//! let r = Resolution::new(7)?;
//!
//! let mut rng = psifeed::default_rng();
//! let result = match_sets_local(
//!     &tokenize_trace(&theirs, r, TimeMode::None),
//!     &tokenize_trace(&mine, r, TimeMode::None),
//!     Resolution::new(5)?,
//!     DEFAULT_FP_RATE,
//!     MatchStrategy::BestResolution,
//!     &mut rng,
//! )?;
//! assert_eq!(result.stopped_at, Some(r));
//! assert_eq!(result.cardinality_by_resolution[&r], 1);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod bloom;
pub mod commgroup;
pub mod feedrank;
pub mod geotoken;
pub mod net;
pub mod psi;
pub mod sim;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Environment variable that pins every RNG this crate creates itself.
pub const SEED_ENV: &str = "PSIFEED_SEED";

/// A CSPRNG seeded from the OS, unless `PSIFEED_SEED` is set to an
/// integer, in which case runs become reproducible.
pub fn default_rng() -> ChaCha20Rng {
    match std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()) {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed),
        None => ChaCha20Rng::from_rng(&mut rand::rng()),
    }
}

/// The guide's chapters, compiled here so their code blocks run as
/// doc-tests and cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/geotokens.md")]
    pub struct Geotokens;
    #[doc = include_str!("../../../book/src/blinding.md")]
    pub struct Blinding;
    #[doc = include_str!("../../../book/src/bloom.md")]
    pub struct Bloom;
    #[doc = include_str!("../../../book/src/exchange.md")]
    pub struct Exchange;
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub struct Ranking;
    #[doc = include_str!("../../../book/src/serving.md")]
    pub struct Serving;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
