//! The three-message intersection-cardinality exchange.
//!
//! The server blinds every token in its set with key `kA`, packs the
//! blinded elements into per-resolution Bloom filters, and sends those
//! (round 1). The client blinds its own tokens with `kB` and sends the
//! blinded list (round 2). The server adds its layer to each element,
//! shuffles, and returns the list (round 3). The client strips `kB`,
//! leaving elements blinded only by `kA`, and counts how many land in
//! each round-1 filter. Neither side ever sees the other's tokens; the
//! client learns only per-resolution intersection cardinalities, and the
//! shuffle prevents it from learning which of its tokens matched.
//!
//! Tokens are domain-separated by resolution before hashing (the
//! resolution byte is prepended), so an element blinded at one
//! resolution can never register as a member at another.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::bloom::{BloomError, BloomFilter};
use crate::commgroup::{blind, hash_to_group, GroupElement, SecretKey};
use crate::geotoken::{multi_res_expand, GeoError, Resolution, TimeMode, TokenSet};

/// Default Bloom false-positive target, 2^-20. Small enough that desk-scale
/// cardinalities are exact with overwhelming probability.
pub const DEFAULT_FP_RATE: f64 = 9.5367431640625e-7;

/// Default idle lifetime of a server session before it is reclaimed.
pub const DEFAULT_SESSION_TTL_SECS: u64 = 300;

pub type SessionId = [u8; 16];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("no offered resolution is usable with the client set")]
    ResolutionMismatch,
    #[error("message addresses a different session")]
    UnknownSession,
    #[error("round 3 carries {got} elements but {sent} were sent")]
    TamperedTranscript { sent: usize, got: usize },
    #[error("client tokens use time mode {client} but the server announced {server}")]
    TimeModeMismatch { client: TimeMode, server: TimeMode },
    #[error("malformed round 1 message: {0}")]
    MalformedRound1(&'static str),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Bloom(#[from] BloomError),
}

/// How the client spends its exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStrategy {
    /// Probe the finest shared resolution, descending until a nonzero
    /// cardinality appears.
    BestResolution,
    /// One exchange covering every shared resolution at once.
    AllResolutions,
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchStrategy::BestResolution => "best",
            MatchStrategy::AllResolutions => "all",
        })
    }
}

impl FromStr for MatchStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "best" => Ok(MatchStrategy::BestResolution),
            "all" => Ok(MatchStrategy::AllResolutions),
            other => Err(format!("unknown strategy {other:?}, expected best or all")),
        }
    }
}

/// Which resolution(s) a round-2 message covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionSelection {
    All,
    At(Resolution),
}

/// One per-resolution offer in round 1.
#[derive(Debug, Clone)]
pub struct Round1Entry {
    pub resolution: Resolution,
    pub set_size: u64,
    pub bloom: BloomFilter,
}

/// Server hello: per-resolution Bloom filters over its blinded set,
/// finest resolution first.
#[derive(Debug, Clone)]
pub struct Round1Msg {
    pub session_id: SessionId,
    pub time_mode: TimeMode,
    pub entries: Vec<Round1Entry>,
}

impl Round1Msg {
    /// Checks structural invariants: at least one entry, resolutions
    /// strictly decreasing.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.entries.is_empty() {
            return Err(ProtocolError::MalformedRound1("no resolutions offered"));
        }
        let decreasing = self
            .entries
            .windows(2)
            .all(|w| w[0].resolution > w[1].resolution);
        if !decreasing {
            return Err(ProtocolError::MalformedRound1(
                "resolutions not strictly decreasing",
            ));
        }
        Ok(())
    }
}

/// Client reply: its own blinded elements, shuffled.
#[derive(Debug, Clone)]
pub struct Round2Msg {
    pub session_id: SessionId,
    pub selection: ResolutionSelection,
    pub elements: Vec<GroupElement>,
}

/// Server finish: the client's elements with the server layer added,
/// in uniformly random order.
#[derive(Debug, Clone)]
pub struct Round3Msg {
    pub session_id: SessionId,
    pub elements: Vec<GroupElement>,
}

/// What the client learns from a completed exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub strategy: MatchStrategy,
    /// Finest resolution that was usable by both sides.
    pub r_max: Resolution,
    /// Resolution where descent found its first nonzero cardinality.
    /// `None` for all-resolutions runs and for descents that reached the
    /// floor without a match.
    pub stopped_at: Option<Resolution>,
    pub cardinality_by_resolution: BTreeMap<Resolution, u64>,
    pub server_set_size_by_resolution: BTreeMap<Resolution, u64>,
}

/// Server-side state surviving between rounds 1 and 3.
#[derive(Debug, Clone)]
pub struct ServerSession {
    session_id: SessionId,
    key: SecretKey,
}

impl ServerSession {
    pub fn session_id(&self) -> SessionId {
        self.session_id
    }
}

/// Client-side state surviving between rounds 2 and the finish.
#[derive(Debug)]
pub struct ClientSession {
    session_id: SessionId,
    key: SecretKey,
    strategy: MatchStrategy,
    sent_count: usize,
    r_max: Resolution,
    entries: Vec<Round1Entry>,
}

/// Hashes a token into the group under its resolution's domain.
pub(crate) fn token_element(token: &str, r: Resolution) -> GroupElement {
    let mut data = Vec::with_capacity(1 + token.len());
    data.push(r.get());
    data.extend_from_slice(token.as_bytes());
    hash_to_group(&data)
}

/// Round 1: blind the server set and pack it into per-resolution filters,
/// finest first.
pub fn server_init<R: Rng + ?Sized>(
    tokens: &TokenSet,
    r_floor: Resolution,
    fp_rate: f64,
    key: &SecretKey,
    rng: &mut R,
) -> Result<(ServerSession, Round1Msg), ProtocolError> {
    let expanded = multi_res_expand(tokens, r_floor)?;
    let mut session_id = [0u8; 16];
    rng.fill_bytes(&mut session_id);
    let mut entries = Vec::with_capacity(expanded.len());
    for (&r, set) in expanded.iter().rev() {
        let mut bloom = BloomFilter::new(set.len(), fp_rate)?;
        for t in set.iter() {
            bloom.insert(&blind(key, &token_element(t, r)).to_bytes());
        }
        entries.push(Round1Entry {
            resolution: r,
            set_size: set.len() as u64,
            bloom,
        });
    }
    let msg = Round1Msg {
        session_id,
        time_mode: tokens.time_mode(),
        entries,
    };
    let session = ServerSession {
        session_id,
        key: key.clone(),
    };
    Ok((session, msg))
}

/// Round 2 at a pinned resolution `r`, which must be offered and coverable
/// by the client set. Used directly by descent; most callers want
/// [`client_round2`].
pub fn client_round2_at<R: Rng + ?Sized>(
    msg1: &Round1Msg,
    tokens: &TokenSet,
    r: Resolution,
    key: &SecretKey,
    rng: &mut R,
) -> Result<(ClientSession, Round2Msg), ProtocolError> {
    msg1.validate()?;
    check_time_mode(msg1, tokens)?;
    let entry = msg1
        .entries
        .iter()
        .find(|e| e.resolution == r && r <= tokens.resolution())
        .ok_or(ProtocolError::ResolutionMismatch)?;
    let truncated = tokens.truncate_to(r)?;
    let elements = blind_set(&truncated, r, key);
    finish_round2(
        msg1,
        ResolutionSelection::At(r),
        vec![entry.clone()],
        elements,
        key,
        MatchStrategy::BestResolution,
        rng,
    )
}

/// Round 2: blind the client set and send it, either at the single best
/// shared resolution or across all shared resolutions at once.
pub fn client_round2<R: Rng + ?Sized>(
    msg1: &Round1Msg,
    tokens: &TokenSet,
    strategy: MatchStrategy,
    key: &SecretKey,
    rng: &mut R,
) -> Result<(ClientSession, Round2Msg), ProtocolError> {
    msg1.validate()?;
    check_time_mode(msg1, tokens)?;
    let usable = usable_entries(msg1, tokens);
    if usable.is_empty() {
        return Err(ProtocolError::ResolutionMismatch);
    }
    match strategy {
        MatchStrategy::BestResolution => {
            client_round2_at(msg1, tokens, usable[0].resolution, key, rng)
        }
        MatchStrategy::AllResolutions => {
            let mut elements = Vec::new();
            for entry in &usable {
                let truncated = tokens.truncate_to(entry.resolution)?;
                elements.extend(blind_set(&truncated, entry.resolution, key));
            }
            let entries: Vec<Round1Entry> = usable.into_iter().cloned().collect();
            finish_round2(
                msg1,
                ResolutionSelection::All,
                entries,
                elements,
                key,
                MatchStrategy::AllResolutions,
                rng,
            )
        }
    }
}

/// Round 3: add the server layer to every element and shuffle.
pub fn server_round3<R: Rng + ?Sized>(
    session: &ServerSession,
    msg2: &Round2Msg,
    rng: &mut R,
) -> Result<Round3Msg, ProtocolError> {
    if msg2.session_id != session.session_id {
        return Err(ProtocolError::UnknownSession);
    }
    let mut elements: Vec<GroupElement> = msg2
        .elements
        .iter()
        .map(|e| blind(&session.key, e))
        .collect();
    elements.shuffle(rng);
    Ok(Round3Msg {
        session_id: session.session_id,
        elements,
    })
}

/// Finish: strip the client layer and count Bloom hits per resolution.
pub fn client_finalize(
    session: &ClientSession,
    msg3: &Round3Msg,
) -> Result<MatchResult, ProtocolError> {
    if msg3.session_id != session.session_id {
        return Err(ProtocolError::UnknownSession);
    }
    if msg3.elements.len() != session.sent_count {
        return Err(ProtocolError::TamperedTranscript {
            sent: session.sent_count,
            got: msg3.elements.len(),
        });
    }
    let inverse = session.key.invert();
    let stripped: Vec<[u8; 32]> = msg3
        .elements
        .iter()
        .map(|e| blind(&inverse, e).to_bytes())
        .collect();
    let mut cardinality_by_resolution = BTreeMap::new();
    let mut server_set_size_by_resolution = BTreeMap::new();
    for entry in &session.entries {
        let hits = stripped
            .iter()
            .filter(|enc| entry.bloom.contains(enc))
            .count() as u64;
        cardinality_by_resolution.insert(entry.resolution, hits);
        server_set_size_by_resolution.insert(entry.resolution, entry.set_size);
    }
    Ok(MatchResult {
        strategy: session.strategy,
        r_max: session.r_max,
        stopped_at: None,
        cardinality_by_resolution,
        server_set_size_by_resolution,
    })
}

/// Runs the exchange at descending resolutions against one server session,
/// stopping at the first nonzero cardinality.
pub fn best_resolution_descent<R: Rng + ?Sized>(
    server: &ServerSession,
    msg1: &Round1Msg,
    tokens: &TokenSet,
    key: &SecretKey,
    rng: &mut R,
) -> Result<MatchResult, ProtocolError> {
    msg1.validate()?;
    check_time_mode(msg1, tokens)?;
    let usable = usable_entries(msg1, tokens);
    if usable.is_empty() {
        return Err(ProtocolError::ResolutionMismatch);
    }
    let r_max = usable[0].resolution;
    let mut cardinality_by_resolution = BTreeMap::new();
    let mut server_set_size_by_resolution = BTreeMap::new();
    let mut stopped_at = None;
    for entry in usable {
        let r = entry.resolution;
        let (client, msg2) = client_round2_at(msg1, tokens, r, key, rng)?;
        let msg3 = server_round3(server, &msg2, rng)?;
        let step = client_finalize(&client, &msg3)?;
        let card = step.cardinality_by_resolution[&r];
        cardinality_by_resolution.insert(r, card);
        server_set_size_by_resolution.insert(r, entry.set_size);
        if card > 0 {
            stopped_at = Some(r);
            break;
        }
    }
    Ok(MatchResult {
        strategy: MatchStrategy::BestResolution,
        r_max,
        stopped_at,
        cardinality_by_resolution,
        server_set_size_by_resolution,
    })
}

/// In-memory end-to-end match between two token sets, generating fresh
/// keys from `rng`. Best-resolution strategy runs the full descent.
pub fn match_sets_local<R: Rng + ?Sized>(
    server_tokens: &TokenSet,
    client_tokens: &TokenSet,
    r_floor: Resolution,
    fp_rate: f64,
    strategy: MatchStrategy,
    rng: &mut R,
) -> Result<MatchResult, ProtocolError> {
    let server_key = SecretKey::generate(rng);
    let client_key = SecretKey::generate(rng);
    let (server, msg1) = server_init(server_tokens, r_floor, fp_rate, &server_key, rng)?;
    match strategy {
        MatchStrategy::BestResolution => {
            best_resolution_descent(&server, &msg1, client_tokens, &client_key, rng)
        }
        MatchStrategy::AllResolutions => {
            let (client, msg2) =
                client_round2(&msg1, client_tokens, strategy, &client_key, rng)?;
            let msg3 = server_round3(&server, &msg2, rng)?;
            client_finalize(&client, &msg3)
        }
    }
}

fn check_time_mode(msg1: &Round1Msg, tokens: &TokenSet) -> Result<(), ProtocolError> {
    if tokens.time_mode() != msg1.time_mode {
        return Err(ProtocolError::TimeModeMismatch {
            client: tokens.time_mode(),
            server: msg1.time_mode,
        });
    }
    Ok(())
}

/// Offered entries the client can cover, finest first.
fn usable_entries<'a>(msg1: &'a Round1Msg, tokens: &TokenSet) -> Vec<&'a Round1Entry> {
    msg1.entries
        .iter()
        .filter(|e| e.resolution <= tokens.resolution())
        .collect()
}

/// Blinds every token of a single-resolution set.
fn blind_set(tokens: &TokenSet, r: Resolution, key: &SecretKey) -> Vec<GroupElement> {
    tokens
        .iter()
        .map(|t| blind(key, &token_element(t, r)))
        .collect()
}

fn finish_round2<R: Rng + ?Sized>(
    msg1: &Round1Msg,
    selection: ResolutionSelection,
    entries: Vec<Round1Entry>,
    elements: Vec<GroupElement>,
    key: &SecretKey,
    strategy: MatchStrategy,
    rng: &mut R,
) -> Result<(ClientSession, Round2Msg), ProtocolError> {
    let mut keyed: Vec<([u8; 32], GroupElement)> =
        elements.into_iter().map(|e| (e.to_bytes(), e)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0);
    let mut elements: Vec<GroupElement> = keyed.into_iter().map(|(_, e)| e).collect();
    elements.shuffle(rng);
    let r_max = entries
        .first()
        .map(|e| e.resolution)
        .expect("finish_round2 requires at least one entry");
    let session = ClientSession {
        session_id: msg1.session_id,
        key: key.clone(),
        strategy,
        sent_count: elements.len(),
        r_max,
        entries,
    };
    let msg2 = Round2Msg {
        session_id: msg1.session_id,
        selection,
        elements,
    };
    Ok((session, msg2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geotoken::GEOHASH_ALPHABET;
    use proptest::prelude::*;
    use rand::{Rng, RngExt, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeSet;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn res(r: u8) -> Resolution {
        Resolution::new(r).unwrap()
    }

    fn set(values: &[&str], r: u8) -> TokenSet {
        TokenSet::from_values(values.iter().copied(), res(r), TimeMode::None).unwrap()
    }

    fn random_token<R: Rng>(rng: &mut R, r: u8) -> String {
        (0..r)
            .map(|_| GEOHASH_ALPHABET[rng.random_range(0..32)] as char)
            .collect()
    }

    fn random_set<R: Rng>(rng: &mut R, n: usize, r: u8) -> TokenSet {
        let values: BTreeSet<String> = (0..n).map(|_| random_token(rng, r)).collect();
        TokenSet::from_values(values, res(r), TimeMode::None).unwrap()
    }

    fn plaintext_intersection(a: &TokenSet, b: &TokenSet, r: u8) -> u64 {
        let a = a.truncate_to(res(r)).unwrap();
        let b = b.truncate_to(res(r)).unwrap();
        a.iter().filter(|t| b.contains(t)).count() as u64
    }

    #[test]
    fn full_overlap_counts_everything() {
        let mut rng = rng(1);
        let tokens = set(&["drt2yr7x", "u4pruydq", "9g3w81t7"], 8);
        let result = match_sets_local(
            &tokens,
            &tokens,
            res(6),
            DEFAULT_FP_RATE,
            MatchStrategy::BestResolution,
            &mut rng,
        )
        .unwrap();
        assert_eq!(result.stopped_at, Some(res(8)));
        assert_eq!(result.cardinality_by_resolution[&res(8)], 3);
        assert_eq!(result.server_set_size_by_resolution[&res(8)], 3);
    }

    #[test]
    fn disjoint_sets_count_zero() {
        let mut rng = rng(2);
        let a = set(&["drt2yr7x"], 8);
        let b = set(&["u4pruydq"], 8);
        let result = match_sets_local(
            &a,
            &b,
            res(6),
            DEFAULT_FP_RATE,
            MatchStrategy::BestResolution,
            &mut rng,
        )
        .unwrap();
        assert_eq!(result.stopped_at, None);
        assert!(result.cardinality_by_resolution.values().all(|&c| c == 0));
        assert_eq!(result.cardinality_by_resolution.len(), 3);
    }

    #[test]
    fn matches_plaintext_oracle() {
        for seed in 0..5 {
            let mut rng = rng(100 + seed);
            // Short tokens over a small alphabet slice force real overlap.
            let a = random_set(&mut rng, 200, 3);
            let b = random_set(&mut rng, 200, 3);
            let expected = plaintext_intersection(&a, &b, 3);
            let result = match_sets_local(
                &a,
                &b,
                res(3),
                DEFAULT_FP_RATE,
                MatchStrategy::AllResolutions,
                &mut rng,
            )
            .unwrap();
            assert_eq!(result.cardinality_by_resolution[&res(3)], expected);
        }
    }

    #[test]
    fn empty_server_set_offers_zero_sizes() {
        let mut rng = rng(3);
        let key = SecretKey::generate(&mut rng);
        let empty = TokenSet::empty(res(8), TimeMode::None);
        let (_, msg1) = server_init(&empty, res(6), DEFAULT_FP_RATE, &key, &mut rng).unwrap();
        assert_eq!(msg1.entries.len(), 3);
        assert!(msg1.entries.iter().all(|e| e.set_size == 0));
        let resolutions: Vec<u8> = msg1.entries.iter().map(|e| e.resolution.get()).collect();
        assert_eq!(resolutions, [8, 7, 6]);
    }

    #[test]
    fn server_sizes_shrink_with_resolution() {
        let mut rng = rng(4);
        let key = SecretKey::generate(&mut rng);
        let tokens = set(&["drt2yr7x", "drt2yr7w", "drt2yrzz"], 8);
        let (_, msg1) = server_init(&tokens, res(6), DEFAULT_FP_RATE, &key, &mut rng).unwrap();
        let by_r: BTreeMap<u8, u64> = msg1
            .entries
            .iter()
            .map(|e| (e.resolution.get(), e.set_size))
            .collect();
        assert_eq!(by_r[&8], 3);
        assert_eq!(by_r[&7], 2);
        assert_eq!(by_r[&6], 1);
    }

    #[test]
    fn best_strategy_picks_finest_shared() {
        let mut rng = rng(5);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let server = set(&["drt2yr7x", "u4pruydq"], 8);
        let (_, msg1) =
            server_init(&server, res(6), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();

        let client = set(&["drt2yr7x", "9g3w81t7", "ezs42000"], 8);
        let (_, msg2) = client_round2(
            &msg1,
            &client,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap();
        assert_eq!(msg2.selection, ResolutionSelection::At(res(8)));
        assert_eq!(msg2.elements.len(), 3);
    }

    #[test]
    fn coarse_client_against_fine_offer_is_mismatch() {
        let mut rng = rng(6);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let server = set(&["drt2yr7x"], 8);
        let (_, msg1) =
            server_init(&server, res(6), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let client = set(&["drt2y"], 5);
        let err = client_round2(
            &msg1,
            &client,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::ResolutionMismatch));
    }

    #[test]
    fn all_strategy_covers_shared_range() {
        let mut rng = rng(7);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let server = set(&["drt2yr7x"], 8);
        let (srv, msg1) =
            server_init(&server, res(6), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let client = set(&["drt2yr7"], 7);
        let (cs, msg2) = client_round2(
            &msg1,
            &client,
            MatchStrategy::AllResolutions,
            &client_key,
            &mut rng,
        )
        .unwrap();
        assert_eq!(msg2.selection, ResolutionSelection::All);
        let msg3 = server_round3(&srv, &msg2, &mut rng).unwrap();
        let result = client_finalize(&cs, &msg3).unwrap();
        let keys: Vec<u8> = result
            .cardinality_by_resolution
            .keys()
            .map(|r| r.get())
            .collect();
        assert_eq!(keys, [6, 7]);
        assert_eq!(result.cardinality_by_resolution[&res(7)], 1);
        assert_eq!(result.cardinality_by_resolution[&res(6)], 1);
        assert_eq!(result.r_max, res(7));
    }

    #[test]
    fn time_mode_mismatch_is_rejected() {
        let mut rng = rng(8);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let server = set(&["drt2yr7x"], 8);
        let (_, msg1) =
            server_init(&server, res(8), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let client =
            TokenSet::from_values(["drt2yr7x@05"], res(8), TimeMode::HourOfDay).unwrap();
        let err = client_round2(
            &msg1,
            &client,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::TimeModeMismatch { .. }));
    }

    #[test]
    fn wrong_session_and_tampering_are_rejected() {
        let mut rng = rng(9);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let tokens = set(&["drt2yr7x", "u4pruydq"], 8);
        let (srv, msg1) =
            server_init(&tokens, res(8), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let (cs, mut msg2) = client_round2(
            &msg1,
            &tokens,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap();

        let good = msg2.clone();
        msg2.session_id = [0xAB; 16];
        assert!(matches!(
            server_round3(&srv, &msg2, &mut rng),
            Err(ProtocolError::UnknownSession)
        ));

        let mut msg3 = server_round3(&srv, &good, &mut rng).unwrap();
        msg3.elements.pop();
        assert!(matches!(
            client_finalize(&cs, &msg3),
            Err(ProtocolError::TamperedTranscript { sent: 2, got: 1 })
        ));
    }

    #[test]
    fn round3_preserves_content_as_multiset() {
        let mut rng = rng(10);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let tokens = random_set(&mut rng, 20, 6);
        let (srv, msg1) =
            server_init(&tokens, res(6), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let (_, msg2) = client_round2(
            &msg1,
            &tokens,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap();
        let msg3 = server_round3(&srv, &msg2, &mut rng).unwrap();
        assert_eq!(msg3.elements.len(), msg2.elements.len());
        let expected: BTreeSet<[u8; 32]> = msg2
            .elements
            .iter()
            .map(|e| blind(&server_key, e).to_bytes())
            .collect();
        let got: BTreeSet<[u8; 32]> = msg3.elements.iter().map(|e| e.to_bytes()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn descent_stops_at_first_overlap() {
        let mut rng = rng(11);
        // Shared 5-prefix "drt2y", disjoint beyond it.
        let server = set(&["drt2yr7x"], 8);
        let client = set(&["drt2y000"], 8);
        let result = match_sets_local(
            &server,
            &client,
            res(4),
            DEFAULT_FP_RATE,
            MatchStrategy::BestResolution,
            &mut rng,
        )
        .unwrap();
        assert_eq!(result.stopped_at, Some(res(5)));
        assert_eq!(result.cardinality_by_resolution[&res(5)], 1);
        assert_eq!(result.cardinality_by_resolution[&res(6)], 0);
        assert_eq!(result.cardinality_by_resolution[&res(7)], 0);
        assert_eq!(result.cardinality_by_resolution[&res(8)], 0);
        assert_eq!(result.r_max, res(8));
        // Resolutions below the stopping point were never probed.
        assert!(!result.cardinality_by_resolution.contains_key(&res(4)));
    }

    #[test]
    fn descent_reuses_one_server_session() {
        let mut rng = rng(12);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let server = set(&["drt2yr7x"], 8);
        let client = set(&["drt2y000"], 8);
        let (srv, msg1) =
            server_init(&server, res(5), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let result =
            best_resolution_descent(&srv, &msg1, &client, &client_key, &mut rng).unwrap();
        assert_eq!(result.stopped_at, Some(res(5)));
    }

    #[test]
    fn shuffle_rarely_preserves_order() {
        let mut rng = rng(13);
        let server_key = SecretKey::generate(&mut rng);
        let client_key = SecretKey::generate(&mut rng);
        let tokens = random_set(&mut rng, 10, 6);
        let (srv, msg1) =
            server_init(&tokens, res(6), DEFAULT_FP_RATE, &server_key, &mut rng).unwrap();
        let (_, msg2) = client_round2(
            &msg1,
            &tokens,
            MatchStrategy::BestResolution,
            &client_key,
            &mut rng,
        )
        .unwrap();
        let reencrypted: Vec<[u8; 32]> = msg2
            .elements
            .iter()
            .map(|e| blind(&server_key, e).to_bytes())
            .collect();
        let mut order_preserved = 0;
        for _ in 0..100 {
            let msg3 = server_round3(&srv, &msg2, &mut rng).unwrap();
            let got: Vec<[u8; 32]> = msg3.elements.iter().map(|e| e.to_bytes()).collect();
            if got == reencrypted {
                order_preserved += 1;
            }
        }
        assert!(order_preserved <= 1, "order preserved {order_preserved} times");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn protocol_equals_plaintext(seed in 0u64..1000, n_a in 0usize..40, n_b in 0usize..40) {
            let mut rng = rng(seed);
            let a = random_set(&mut rng, n_a, 2);
            let b = random_set(&mut rng, n_b, 2);
            let expected = plaintext_intersection(&a, &b, 2);
            let result = match_sets_local(
                &a, &b, res(2), DEFAULT_FP_RATE, MatchStrategy::AllResolutions, &mut rng,
            ).unwrap();
            prop_assert_eq!(result.cardinality_by_resolution[&res(2)], expected);
        }

        #[test]
        fn coarser_keeps_matches_alive(seed in 0u64..1000) {
            let mut rng = rng(seed);
            let a = random_set(&mut rng, 30, 4);
            let b = random_set(&mut rng, 30, 4);
            let result = match_sets_local(
                &a, &b, res(1), DEFAULT_FP_RATE, MatchStrategy::AllResolutions, &mut rng,
            ).unwrap();
            // A match at r+1 implies its prefix matches at r; the exact count
            // at r is the number of distinct r-prefixes of the finer
            // intersection plus whatever matches only coarsely.
            for r in 1u8..4 {
                let fine = result.cardinality_by_resolution[&res(r + 1)];
                let coarse = result.cardinality_by_resolution[&res(r)];
                if fine > 0 {
                    prop_assert!(coarse > 0, "match at r={} vanished at r={}", r + 1, r);
                }
                let a_fine = a.truncate_to(res(r + 1)).unwrap();
                let distinct_prefixes: BTreeSet<String> = a_fine
                    .iter()
                    .filter(|t| b.truncate_to(res(r + 1)).unwrap().contains(t))
                    .map(|t| t[..r as usize].to_string())
                    .collect();
                prop_assert!(coarse >= distinct_prefixes.len() as u64);
            }
        }
    }
}
