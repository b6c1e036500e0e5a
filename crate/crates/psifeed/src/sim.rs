//! Synthetic mobility cohorts and the correlation harness that checks
//! intersection cardinality against declared friendship strength.
//!
//! The generator is anchor-venue based: every person has a small
//! repertoire of regular venues, every friend pair additionally shares
//! a couple of social venues they co-visit with probability growing
//! linearly in friendship strength. That is the one property the
//! validation needs: stronger ties leave more overlapping cells at
//! venue-scale resolutions, while coarse resolutions blur everyone in
//! the same metro area together.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::geotoken::{tokenize_trace, GeoError, GeoPoint, Resolution, TimeMode, TokenSet};
use crate::psi::{match_sets_local, MatchStrategy, ProtocolError, DEFAULT_FP_RATE};

/// Latitude/longitude the synthetic metro area is centered on.
const CENTER: (f64, f64) = (42.36, -71.09);
/// Per-point GPS jitter, roughly 15 m.
const JITTER_DEG: f64 = 1.5e-4;
/// Regular venues per person.
const REPERTOIRE: usize = 5;
/// Social venues shared by each friend pair.
const SHARED_PER_PAIR: usize = 2;
/// Fraction of visits that ignore the repertoire entirely.
const ANYWHERE_RATE: f64 = 0.10;

pub const MAX_STRENGTH: u8 = 7;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cohort config: {0}")]
    InvalidConfig(&'static str),
    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(&'static str),
    #[error(
        "protocol cardinality {protocol} disagrees with plaintext {plaintext} \
         for pair ({i},{j}) at resolution {resolution}"
    )]
    Divergence {
        resolution: Resolution,
        i: usize,
        j: usize,
        plaintext: u64,
        protocol: u64,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Knobs for the synthetic cohort.
#[derive(Debug, Clone)]
pub struct CohortConfig {
    pub n_people: usize,
    pub days: u32,
    pub points_per_day: u32,
    pub n_venues: usize,
    /// Side length in degrees of the box venues are scattered over.
    pub venue_extent_deg: f64,
    /// Probability that any given pair are friends at all.
    pub friendship_density: f64,
    /// Per-day co-visit probability contributed by one strength unit.
    pub shared_venue_rate: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_people: 60,
            days: 30,
            points_per_day: 6,
            n_venues: 80,
            venue_extent_deg: 3.0,
            friendship_density: 0.15,
            shared_venue_rate: 0.10,
            seed: 7,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_people < 2 {
            return Err(SimError::InvalidConfig("need at least two people"));
        }
        if self.days == 0 || self.points_per_day == 0 {
            return Err(SimError::InvalidConfig("days and points per day must be positive"));
        }
        if self.n_venues == 0 {
            return Err(SimError::InvalidConfig("need at least one venue"));
        }
        if !(self.venue_extent_deg > 0.0 && self.venue_extent_deg <= 90.0) {
            return Err(SimError::InvalidConfig("venue extent must be in (0, 90] degrees"));
        }
        if !(0.0..=1.0).contains(&self.friendship_density) {
            return Err(SimError::InvalidConfig("friendship density must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shared_venue_rate) {
            return Err(SimError::InvalidConfig("shared venue rate must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Symmetric pairwise friendship strengths on a 0-7 scale, zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FriendshipMatrix {
    n: usize,
    strengths: Vec<u8>,
}

impl FriendshipMatrix {
    pub fn new(n_people: usize) -> Self {
        FriendshipMatrix {
            n: n_people,
            strengths: vec![0; n_people * n_people],
        }
    }

    pub fn n_people(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.strengths[i * self.n + j]
    }

    /// Sets both orientations, keeping the matrix symmetric.
    pub fn set(&mut self, i: usize, j: usize, strength: u8) {
        assert!(i != j, "diagonal is fixed at zero");
        assert!(strength <= MAX_STRENGTH, "strength is a 0-7 scale");
        self.strengths[i * self.n + j] = strength;
        self.strengths[j * self.n + i] = strength;
    }

    /// Unordered pairs (i < j) with their strengths.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, u8)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

/// A generated population: one trace per person plus the ground truth.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub traces: Vec<Vec<GeoPoint>>,
    pub friends: FriendshipMatrix,
}

/// Generates a cohort. Deterministic for a given config, including seed.
pub fn gen_cohort(cfg: &CohortConfig) -> Result<Cohort, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let half = cfg.venue_extent_deg / 2.0;
    let venues: Vec<(f64, f64)> = (0..cfg.n_venues)
        .map(|_| {
            (
                CENTER.0 + rng.random_range(-half..=half),
                CENTER.1 + rng.random_range(-half..=half),
            )
        })
        .collect();

    let mut friends = FriendshipMatrix::new(cfg.n_people);
    let mut shared: HashMap<(usize, usize), [usize; SHARED_PER_PAIR]> = HashMap::new();
    for i in 0..cfg.n_people {
        for j in i + 1..cfg.n_people {
            if rng.random::<f64>() < cfg.friendship_density {
                friends.set(i, j, rng.random_range(1..=MAX_STRENGTH));
                let mut spots = [0; SHARED_PER_PAIR];
                for s in &mut spots {
                    *s = rng.random_range(0..cfg.n_venues);
                }
                shared.insert((i, j), spots);
            }
        }
    }

    let repertoires: Vec<Vec<usize>> = (0..cfg.n_people)
        .map(|_| {
            (0..REPERTOIRE)
                .map(|_| rng.random_range(0..cfg.n_venues))
                .collect()
        })
        .collect();

    let visit = |rng: &mut ChaCha20Rng, at: (f64, f64), day: u32| -> Result<GeoPoint, SimError> {
        let lat = at.0 + rng.random_range(-JITTER_DEG..=JITTER_DEG);
        let lon = at.1 + rng.random_range(-JITTER_DEG..=JITTER_DEG);
        let ts = (u64::from(day) * 24 + rng.random_range(0..24u64)) * 3600;
        Ok(GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0), ts)?)
    };

    let mut traces: Vec<Vec<GeoPoint>> = vec![Vec::new(); cfg.n_people];
    for (person, trace) in traces.iter_mut().enumerate() {
        for day in 0..cfg.days {
            for _ in 0..cfg.points_per_day {
                let at = if rng.random::<f64>() < ANYWHERE_RATE {
                    (
                        CENTER.0 + rng.random_range(-half..=half),
                        CENTER.1 + rng.random_range(-half..=half),
                    )
                } else {
                    venues[repertoires[person][rng.random_range(0..REPERTOIRE)]]
                };
                trace.push(visit(&mut rng, at, day)?);
            }
        }
    }

    for day in 0..cfg.days {
        for i in 0..cfg.n_people {
            for j in i + 1..cfg.n_people {
                let strength = friends.get(i, j);
                if strength == 0 {
                    continue;
                }
                let p = f64::from(strength) * cfg.shared_venue_rate;
                if rng.random::<f64>() < p {
                    let spots = shared[&(i, j)];
                    let venue = venues[spots[rng.random_range(0..SHARED_PER_PAIR)]];
                    let a = visit(&mut rng, venue, day)?;
                    let b = visit(&mut rng, venue, day)?;
                    traces[i].push(a);
                    traces[j].push(b);
                }
            }
        }
    }

    Ok(Cohort { traces, friends })
}

/// Product-moment correlation of two equal-length sequences.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, SimError> {
    if x.len() != y.len() {
        return Err(SimError::UndefinedCorrelation("sequence lengths differ"));
    }
    if x.len() < 2 {
        return Err(SimError::UndefinedCorrelation("need at least two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(SimError::UndefinedCorrelation("zero variance"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Correlation outcomes at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionStats {
    /// Correlation over every pair.
    pub pearson_all: f64,
    /// Correlation restricted to pairs with declared strength > 0.
    pub pearson_nonzero: f64,
    /// Pairs entering `pearson_all`: n_people·(n_people−1)/2.
    pub n_pairs: usize,
}

/// Per-resolution correlation between cardinality and strength.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub by_resolution: BTreeMap<Resolution, ResolutionStats>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("resolution,pearson_all,pearson_nonzero,n_pairs\n");
        for (r, s) in &self.by_resolution {
            let _ = writeln!(
                out,
                "{r},{:.6},{:.6},{}",
                s.pearson_all, s.pearson_nonzero, s.n_pairs
            );
        }
        out
    }

    /// Same table as whitespace-separated columns for gnuplot.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::from("# resolution pearson_all pearson_nonzero n_pairs\n");
        for (r, s) in &self.by_resolution {
            let _ = writeln!(
                out,
                "{r} {:.6} {:.6} {}",
                s.pearson_all, s.pearson_nonzero, s.n_pairs
            );
        }
        out
    }
}

/// Generates a cohort and correlates pairwise intersection cardinality
/// with friendship strength at each resolution. With `use_protocol` the
/// cardinalities come from a full exchange loopback, and every pair is
/// cross-checked against the plaintext intersection.
pub fn validate(
    cfg: &CohortConfig,
    resolutions: &[Resolution],
    use_protocol: bool,
) -> Result<CorrelationReport, SimError> {
    let cohort = gen_cohort(cfg)?;
    validate_cohort(&cohort, resolutions, use_protocol, cfg.seed)
}

/// The harness on an already generated cohort. `seed` only drives
/// protocol keys and shuffles, never the outcome.
pub fn validate_cohort(
    cohort: &Cohort,
    resolutions: &[Resolution],
    use_protocol: bool,
    seed: u64,
) -> Result<CorrelationReport, SimError> {
    let n = cohort.traces.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7073_6966_6565_6421);
    let mut by_resolution = BTreeMap::new();
    for &r in resolutions {
        let sets: Vec<TokenSet> = cohort
            .traces
            .iter()
            .map(|t| tokenize_trace(t, r, TimeMode::None))
            .collect();
        let mut strengths = Vec::with_capacity(n * (n - 1) / 2);
        let mut cards = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let plaintext = sets[i].iter().filter(|t| sets[j].contains(t)).count() as u64;
                if use_protocol {
                    let result = match_sets_local(
                        &sets[i],
                        &sets[j],
                        r,
                        DEFAULT_FP_RATE,
                        MatchStrategy::AllResolutions,
                        &mut rng,
                    )?;
                    let protocol = result.cardinality_by_resolution[&r];
                    if protocol != plaintext {
                        return Err(SimError::Divergence {
                            resolution: r,
                            i,
                            j,
                            plaintext,
                            protocol,
                        });
                    }
                }
                strengths.push(f64::from(cohort.friends.get(i, j)));
                cards.push(plaintext as f64);
            }
        }
        let pearson_all = pearson(&cards, &strengths)?;
        let (nz_cards, nz_strengths): (Vec<f64>, Vec<f64>) = cards
            .iter()
            .zip(&strengths)
            .filter(|(_, &s)| s > 0.0)
            .map(|(&c, &s)| (c, s))
            .unzip();
        let pearson_nonzero = pearson(&nz_cards, &nz_strengths)?;
        by_resolution.insert(
            r,
            ResolutionStats {
                pearson_all,
                pearson_nonzero,
                n_pairs: cards.len(),
            },
        );
    }
    Ok(CorrelationReport { by_resolution })
}
