//! Geohash tokenization of GPS traces.
//!
//! A raw trace is a sequence of `(lat, lon, ts)` points. Tokenization maps
//! each point to a base-32 geohash cell at a chosen resolution, optionally
//! fused with an hourly time bin, and deduplicates the result into a
//! [`TokenSet`]. Coarser views of the same set are obtained by prefix
//! truncation, which is what makes multi-resolution matching work: the
//! geohash of a point at resolution `r'` is always a prefix of its geohash
//! at any resolution `r > r'`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use thiserror::Error;

/// The 32-character geohash alphabet (base 32, no "a", "i", "l", "o").
pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("resolution {0} outside [1, 9]")]
    ResolutionOutOfRange(u8),
    #[error("cannot truncate resolution-{have} token to resolution {want}")]
    TruncateBeyondResolution { have: u8, want: u8 },
    #[error("expansion floor {floor} exceeds set resolution {resolution}")]
    ExpandFloorTooHigh { floor: u8, resolution: u8 },
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("trace line {line}: {message}")]
    MalformedTraceRow { line: u64, message: String },
    #[error("trace file: {0}")]
    TraceIo(#[from] std::io::Error),
}

/// Geohash string length, 1 (coarsest, ~5000 km) through 9 (~5 m).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Resolution(u8);

impl Resolution {
    pub const MIN: Resolution = Resolution(1);
    pub const MAX: Resolution = Resolution(9);

    pub fn new(r: u8) -> Result<Self, GeoError> {
        if (1..=9).contains(&r) {
            Ok(Resolution(r))
        } else {
            Err(GeoError::ResolutionOutOfRange(r))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for Resolution {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, GeoError> {
        let r: u8 = s
            .parse()
            .map_err(|_| GeoError::InvalidToken(s.to_string()))?;
        Resolution::new(r)
    }
}

/// How (or whether) the hour is fused into each token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeMode {
    /// Location only.
    #[default]
    None,
    /// UTC hour of day, 00-23. Matches recurring routines.
    HourOfDay,
    /// Hours since the Unix epoch. Matches actual co-presence.
    AbsoluteHour,
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeMode::None => "none",
            TimeMode::HourOfDay => "hour_of_day",
            TimeMode::AbsoluteHour => "absolute_hour",
        })
    }
}

impl FromStr for TimeMode {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, GeoError> {
        match s {
            "none" => Ok(TimeMode::None),
            "hour_of_day" => Ok(TimeMode::HourOfDay),
            "absolute_hour" => Ok(TimeMode::AbsoluteHour),
            other => Err(GeoError::InvalidToken(other.to_string())),
        }
    }
}

/// A single validated GPS sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    ts: u64,
}

impl GeoPoint {
    /// Validates coordinate ranges. `ts` is seconds since the Unix epoch.
    pub fn new(lat: f64, lon: f64, ts: u64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeOutOfRange(lon));
        }
        Ok(GeoPoint { lat, lon, ts })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn ts(&self) -> u64 {
        self.ts
    }
}

/// One matchable unit: a geohash, optionally suffixed with `@<hour bin>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Token {
    value: String,
    resolution: Resolution,
}

impl Token {
    /// Parses a serialized token, deriving the resolution from the geohash
    /// part. The optional suffix after `@` must be decimal digits.
    pub fn parse(s: &str) -> Result<Self, GeoError> {
        let geohash = match s.split_once('@') {
            Some((gh, suffix)) => {
                if suffix.is_empty() || !suffix.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(GeoError::InvalidToken(s.to_string()));
                }
                gh
            }
            None => s,
        };
        if geohash.is_empty() || geohash.len() > 9 {
            return Err(GeoError::InvalidToken(s.to_string()));
        }
        if !geohash.bytes().all(|b| GEOHASH_ALPHABET.contains(&b)) {
            return Err(GeoError::InvalidToken(s.to_string()));
        }
        Ok(Token {
            value: s.to_string(),
            resolution: Resolution::new(geohash.len() as u8)?,
        })
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// The geohash part, without any time suffix.
    pub fn geohash(&self) -> &str {
        match self.value.split_once('@') {
            Some((gh, _)) => gh,
            None => &self.value,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

/// A deduplicated set of tokens, all at one resolution and time mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    resolution: Resolution,
    time_mode: TimeMode,
    values: BTreeSet<String>,
}

impl TokenSet {
    pub fn empty(resolution: Resolution, time_mode: TimeMode) -> Self {
        TokenSet {
            resolution,
            time_mode,
            values: BTreeSet::new(),
        }
    }

    /// Builds a set from already-serialized token values, validating each.
    pub fn from_values<I, S>(
        values: I,
        resolution: Resolution,
        time_mode: TimeMode,
    ) -> Result<Self, GeoError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for v in values {
            let token = Token::parse(v.as_ref())?;
            if token.resolution() != resolution {
                return Err(GeoError::InvalidToken(v.as_ref().to_string()));
            }
            set.insert(token.value);
        }
        Ok(TokenSet {
            resolution,
            time_mode,
            values: set,
        })
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn time_mode(&self) -> TimeMode {
        self.time_mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, value: &str) -> bool {
        self.values.contains(value)
    }

    /// Token values in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(|s| s.as_str())
    }

    /// The set truncated to resolution `r`, deduplicated.
    pub fn truncate_to(&self, r: Resolution) -> Result<TokenSet, GeoError> {
        if r > self.resolution {
            return Err(GeoError::TruncateBeyondResolution {
                have: self.resolution.get(),
                want: r.get(),
            });
        }
        let values = self
            .values
            .iter()
            .map(|v| truncate_value(v, r))
            .collect::<BTreeSet<_>>();
        Ok(TokenSet {
            resolution: r,
            time_mode: self.time_mode,
            values,
        })
    }
}

/// Encodes a point as an `r`-character geohash.
///
/// Standard bit interleaving: even bit positions subdivide longitude,
/// odd positions latitude, with ties going to the upper half. Each group
/// of five bits selects one alphabet character, so `encode_geohash(p, r')`
/// is a prefix of `encode_geohash(p, r)` whenever `r' <= r`.
pub fn encode_geohash(p: &GeoPoint, r: Resolution) -> String {
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut out = String::with_capacity(r.get() as usize);
    let mut bits = 0u8;
    let mut bit_count = 0u8;
    let mut even = true;
    while out.len() < r.get() as usize {
        let range = if even { &mut lon_range } else { &mut lat_range };
        let value = if even { p.lon } else { p.lat };
        let mid = (range.0 + range.1) / 2.0;
        bits <<= 1;
        if value >= mid {
            bits |= 1;
            range.0 = mid;
        } else {
            range.1 = mid;
        }
        even = !even;
        bit_count += 1;
        if bit_count == 5 {
            out.push(GEOHASH_ALPHABET[bits as usize] as char);
            bits = 0;
            bit_count = 0;
        }
    }
    out
}

/// Bounding box of a geohash cell as `(lat_min, lat_max, lon_min, lon_max)`.
pub fn decode_bbox(geohash: &str) -> Result<(f64, f64, f64, f64), GeoError> {
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut even = true;
    for b in geohash.bytes() {
        let idx = GEOHASH_ALPHABET
            .iter()
            .position(|&c| c == b)
            .ok_or_else(|| GeoError::InvalidToken(geohash.to_string()))? as u8;
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1;
            let range = if even { &mut lon_range } else { &mut lat_range };
            let mid = (range.0 + range.1) / 2.0;
            if bit == 1 {
                range.0 = mid;
            } else {
                range.1 = mid;
            }
            even = !even;
        }
    }
    Ok((lat_range.0, lat_range.1, lon_range.0, lon_range.1))
}

/// Truncates a token to resolution `r'`, keeping any time suffix.
pub fn truncate(t: &Token, r: Resolution) -> Result<Token, GeoError> {
    if r > t.resolution {
        return Err(GeoError::TruncateBeyondResolution {
            have: t.resolution.get(),
            want: r.get(),
        });
    }
    Ok(Token {
        value: truncate_value(&t.value, r),
        resolution: r,
    })
}

fn truncate_value(value: &str, r: Resolution) -> String {
    let r = r.get() as usize;
    match value.split_once('@') {
        Some((gh, suffix)) => format!("{}@{}", &gh[..r], suffix),
        None => value[..r].to_string(),
    }
}

/// Maps every point to a token and deduplicates.
pub fn tokenize_trace(points: &[GeoPoint], r: Resolution, mode: TimeMode) -> TokenSet {
    let values = points
        .iter()
        .map(|p| {
            let geohash = encode_geohash(p, r);
            match mode {
                TimeMode::None => geohash,
                TimeMode::HourOfDay => format!("{}@{:02}", geohash, (p.ts / 3600) % 24),
                TimeMode::AbsoluteHour => format!("{}@{}", geohash, p.ts / 3600),
            }
        })
        .collect::<BTreeSet<_>>();
    TokenSet {
        resolution: r,
        time_mode: mode,
        values,
    }
}

/// The set re-expressed at every resolution from `r_min` up to its own,
/// keyed by resolution. Each entry is deduplicated after truncation, so
/// entry sizes are monotone in `r`.
pub fn multi_res_expand(
    s: &TokenSet,
    r_min: Resolution,
) -> Result<BTreeMap<Resolution, TokenSet>, GeoError> {
    if r_min > s.resolution {
        return Err(GeoError::ExpandFloorTooHigh {
            floor: r_min.get(),
            resolution: s.resolution.get(),
        });
    }
    let mut out = BTreeMap::new();
    for r in r_min.get()..=s.resolution.get() {
        let r = Resolution::new(r).expect("range bounded by valid resolutions");
        out.insert(r, s.truncate_to(r)?);
    }
    Ok(out)
}

/// Reads a `lat,lon,ts` CSV trace. Any malformed row is a hard error
/// carrying its line number.
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<GeoPoint>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers().map_err(csv_error)?;
        let expected = ["lat", "lon", "ts"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(GeoError::MalformedTraceRow {
                line: 1,
                message: format!("expected header \"lat,lon,ts\", got {:?}", headers),
            });
        }
    }
    let mut points = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let row = |message: String| GeoError::MalformedTraceRow { line, message };
        if record.len() != 3 {
            return Err(row(format!("expected 3 fields, got {}", record.len())));
        }
        let lat: f64 = record[0]
            .parse()
            .map_err(|_| row(format!("bad lat {:?}", &record[0])))?;
        let lon: f64 = record[1]
            .parse()
            .map_err(|_| row(format!("bad lon {:?}", &record[1])))?;
        let ts: u64 = record[2]
            .parse()
            .map_err(|_| row(format!("bad ts {:?}", &record[2])))?;
        let point = GeoPoint::new(lat, lon, ts)
            .map_err(|e| row(e.to_string()))?;
        points.push(point);
    }
    Ok(points)
}

fn csv_error(e: csv::Error) -> GeoError {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    GeoError::MalformedTraceRow {
        line,
        message: e.to_string(),
    }
}
