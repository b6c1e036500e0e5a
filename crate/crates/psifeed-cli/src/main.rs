use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use psifeed::commgroup::{blind, hash_to_group, strip, SecretKey};
use psifeed::feedrank::{feed_distribution, score, FriendScore, RankConfig};
use psifeed::geotoken::{
    encode_geohash, read_trace_csv, tokenize_trace, GeoPoint, Resolution, TimeMode, TokenSet,
};
use psifeed::net::{match_client, match_client_trace, ServeConfig, Server};
use psifeed::psi::{
    match_sets_local, MatchResult, MatchStrategy, DEFAULT_FP_RATE,
};
use psifeed::sim::{validate, CohortConfig};

#[derive(Parser)]
#[command(
    name = "psifeed",
    version,
    about = "Count shared geohash cells between mobility traces without revealing them"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a 32-byte blinding key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a lat,lon,ts trace CSV into a token file.
    Tokenize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = parse_resolution)]
        resolution: Resolution,
        #[arg(long, default_value = "none", value_parser = parse_time_mode)]
        time_mode: TimeMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve matches against one trace over TCP.
    Serve {
        #[arg(long)]
        bind: String,
        #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
        trace: Option<PathBuf>,
        /// Pre-tokenized input instead of a raw trace.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, value_parser = parse_resolution, default_value = "7")]
        resolution: Resolution,
        /// Coarsest resolution offered; defaults to --resolution.
        #[arg(long, value_parser = parse_resolution)]
        floor: Option<Resolution>,
        #[arg(long, default_value_t = DEFAULT_FP_RATE)]
        fp_rate: f64,
        #[arg(long, default_value = "none", value_parser = parse_time_mode)]
        time_mode: TimeMode,
    },
    /// Match a trace against a server; prints per-resolution counts.
    Match {
        #[arg(long)]
        server: String,
        #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
        trace: Option<PathBuf>,
        /// Pre-tokenized input instead of a raw trace.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value = "best", value_parser = parse_strategy)]
        strategy: MatchStrategy,
    },
    /// Turn per-friend match counts into a feed distribution.
    Rank {
        /// CSV with header friend_id,resolution,cardinality,set_size.
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Generate a synthetic cohort and report correlation by resolution.
    Simulate {
        #[arg(long, default_value_t = 60)]
        people: usize,
        #[arg(long, default_value_t = 30)]
        days: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,8", value_parser = parse_resolution)]
        resolutions: Vec<Resolution>,
        /// Run the real exchange per pair and cross-check it against
        /// plaintext intersections instead of trusting plaintext alone.
        #[arg(long)]
        protocol: bool,
        /// Also write the report as gnuplot-ready columns.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// Run built-in end-to-end checks.
    Selftest,
}

fn parse_resolution(s: &str) -> Result<Resolution, String> {
    s.parse().map_err(|e: psifeed::geotoken::GeoError| e.to_string())
}

fn parse_time_mode(s: &str) -> Result<TimeMode, String> {
    s.parse().map_err(|e: psifeed::geotoken::GeoError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<MatchStrategy, String> {
    s.parse()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().cmd {
        Cmd::Keygen { out } => keygen(&out),
        Cmd::Tokenize {
            trace,
            resolution,
            time_mode,
            out,
        } => tokenize(&trace, resolution, time_mode, &out),
        Cmd::Serve {
            bind,
            trace,
            tokens,
            resolution,
            floor,
            fp_rate,
            time_mode,
        } => serve(&bind, trace, tokens, resolution, floor, fp_rate, time_mode),
        Cmd::Match {
            server,
            trace,
            tokens,
            strategy,
        } => run_match(&server, trace, tokens, strategy),
        Cmd::Rank {
            matches,
            alpha,
            gamma,
        } => rank(&matches, alpha, gamma),
        Cmd::Simulate {
            people,
            days,
            seed,
            resolutions,
            protocol,
            gnuplot,
        } => simulate(people, days, seed, &resolutions, protocol, gnuplot),
        Cmd::Selftest => selftest(),
    }
}

fn keygen(out: &Path) -> Result<()> {
    let key = SecretKey::generate(&mut psifeed::default_rng());
    fs::write(out, key.to_bytes())
        .with_context(|| format!("writing key to {}", out.display()))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(out, fs::Permissions::from_mode(0o600))?;
    }
    println!("wrote 32-byte key to {}", out.display());
    Ok(())
}

fn load_trace(path: &Path) -> Result<Vec<GeoPoint>> {
    let file =
        File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    Ok(read_trace_csv(file)?)
}

const TOKEN_FILE_MAGIC: &str = "# psifeed tokens v1";

fn write_token_file(path: &Path, tokens: &TokenSet) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = format!(
        "{TOKEN_FILE_MAGIC} resolution={} time_mode={}\n",
        tokens.resolution(),
        tokens.time_mode()
    );
    for t in tokens.iter() {
        let _ = writeln!(out, "{t}");
    }
    fs::write(path, out).with_context(|| format!("writing tokens to {}", path.display()))
}

fn read_token_file(path: &Path) -> Result<TokenSet> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading tokens from {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let meta = header
        .strip_prefix(TOKEN_FILE_MAGIC)
        .with_context(|| format!("{} is not a psifeed token file", path.display()))?;
    let mut resolution = None;
    let mut time_mode = None;
    for field in meta.split_whitespace() {
        match field.split_once('=') {
            Some(("resolution", v)) => resolution = Some(parse_resolution(v).map_err(anyhow::Error::msg)?),
            Some(("time_mode", v)) => time_mode = Some(parse_time_mode(v).map_err(anyhow::Error::msg)?),
            _ => bail!("unrecognized token file field {field:?}"),
        }
    }
    let resolution = resolution.context("token file header lacks resolution=")?;
    let time_mode = time_mode.context("token file header lacks time_mode=")?;
    let values = lines.filter(|l| !l.is_empty() && !l.starts_with('#'));
    Ok(TokenSet::from_values(values, resolution, time_mode)?)
}

fn tokenize(trace: &Path, resolution: Resolution, time_mode: TimeMode, out: &Path) -> Result<()> {
    let points = load_trace(trace)?;
    let tokens = tokenize_trace(&points, resolution, time_mode);
    write_token_file(out, &tokens)?;
    println!(
        "{} points -> {} tokens at resolution {} ({})",
        points.len(),
        tokens.len(),
        resolution,
        time_mode
    );
    Ok(())
}

fn env_seed() -> Option<u64> {
    std::env::var(psifeed::SEED_ENV).ok()?.parse().ok()
}

fn load_tokens(
    trace: Option<PathBuf>,
    tokens: Option<PathBuf>,
    resolution: Resolution,
    time_mode: TimeMode,
) -> Result<TokenSet> {
    match (trace, tokens) {
        (_, Some(path)) => read_token_file(&path),
        (Some(path), None) => Ok(tokenize_trace(&load_trace(&path)?, resolution, time_mode)),
        (None, None) => bail!("either --trace or --tokens is required"),
    }
}

fn serve(
    bind: &str,
    trace: Option<PathBuf>,
    tokens: Option<PathBuf>,
    resolution: Resolution,
    floor: Option<Resolution>,
    fp_rate: f64,
    time_mode: TimeMode,
) -> Result<()> {
    let set = load_tokens(trace, tokens, resolution, time_mode)?;
    let mut config = ServeConfig::new(floor.unwrap_or(set.resolution()));
    config.fp_rate = fp_rate;
    config.seed = env_seed();
    info!(
        "serving {} tokens at resolution {} down to {}",
        set.len(),
        set.resolution(),
        config.floor
    );
    let server = Server::spawn(bind, set, config)?;
    println!("listening on {}", server.addr());
    std::io::Write::flush(&mut std::io::stdout())?;
    server.join();
    Ok(())
}

fn print_match(result: &MatchResult) {
    println!("resolution,cardinality,set_size");
    for (r, card) in result.cardinality_by_resolution.iter().rev() {
        let size = result.server_set_size_by_resolution.get(r).copied().unwrap_or(0);
        println!("{r},{card},{size}");
    }
    match result.stopped_at {
        Some(r) => info!("descent matched at resolution {r}"),
        None => info!("finest shared resolution was {}", result.r_max),
    }
}

fn run_match(
    server: &str,
    trace: Option<PathBuf>,
    tokens: Option<PathBuf>,
    strategy: MatchStrategy,
) -> Result<()> {
    let mut rng = psifeed::default_rng();
    let result = match (trace, tokens) {
        (_, Some(path)) => match_client(server, &read_token_file(&path)?, strategy, &mut rng)?,
        (Some(path), None) => {
            match_client_trace(server, &load_trace(&path)?, strategy, &mut rng)?
        }
        (None, None) => bail!("either --trace or --tokens is required"),
    };
    print_match(&result);
    Ok(())
}

fn rank(matches: &Path, alpha: f64, gamma: f64) -> Result<()> {
    let config = RankConfig { alpha, gamma };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(matches)
        .with_context(|| format!("opening {}", matches.display()))?;
    let headers = rdr.headers()?.clone();
    let expected = ["friend_id", "resolution", "cardinality", "set_size"];
    if headers.iter().collect::<Vec<_>>() != expected {
        bail!(
            "match file header must be {}, got {:?}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        );
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_friend: BTreeMap<String, BTreeMap<Resolution, (u64, u64)>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let friend = record[0].to_string();
        let r: Resolution = record[1]
            .parse()
            .with_context(|| format!("line {line}: bad resolution"))?;
        let card: u64 = record[2]
            .parse()
            .with_context(|| format!("line {line}: bad cardinality"))?;
        let size: u64 = record[3]
            .parse()
            .with_context(|| format!("line {line}: bad set_size"))?;
        if !by_friend.contains_key(&friend) {
            order.push(friend.clone());
        }
        if by_friend.entry(friend.clone()).or_default().insert(r, (card, size)).is_some() {
            bail!("line {line}: duplicate row for {friend} at resolution {r}");
        }
    }
    if order.is_empty() {
        bail!("match file {} has no data rows", matches.display());
    }

    let mut scores = Vec::with_capacity(order.len());
    for friend in &order {
        let rows = &by_friend[friend];
        let result = MatchResult {
            strategy: MatchStrategy::AllResolutions,
            r_max: *rows.keys().next_back().expect("nonempty rows"),
            stopped_at: None,
            cardinality_by_resolution: rows.iter().map(|(&r, &(c, _))| (r, c)).collect(),
            server_set_size_by_resolution: rows.iter().map(|(&r, &(_, s))| (r, s)).collect(),
        };
        scores.push(score(friend.clone(), &result, &config)?);
    }
    let dist = feed_distribution(&scores, &config)?;

    let mut table: Vec<(&FriendScore, f64)> = scores
        .iter()
        .zip(dist.entries.iter().map(|(_, p)| *p))
        .collect();
    table.sort_by(|(a, pa), (b, pb)| {
        pb.partial_cmp(pa)
            .expect("probabilities are finite")
            .then_with(|| a.friend_id.cmp(&b.friend_id))
    });
    println!("friend_id,cardinality,set_size,raw_score,probability");
    for (s, p) in table {
        println!(
            "{},{},{},{:.6},{:.6}",
            s.friend_id, s.cardinality, s.friend_set_size, s.raw_score, p
        );
    }
    Ok(())
}

fn simulate(
    people: usize,
    days: u32,
    seed: u64,
    resolutions: &[Resolution],
    protocol: bool,
    gnuplot: Option<PathBuf>,
) -> Result<()> {
    let cfg = CohortConfig {
        n_people: people,
        days,
        seed,
        ..CohortConfig::default()
    };
    info!(
        "cohort: {} people, {} days, seed {}{}",
        people,
        days,
        seed,
        if protocol { ", protocol cross-check on" } else { "" }
    );
    let report = validate(&cfg, resolutions, protocol)?;
    print!("{}", report.to_csv());
    if let Some(path) = gnuplot {
        fs::write(&path, report.to_gnuplot())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn selftest() -> Result<()> {
    fn check(name: &str, ok: bool) -> Result<()> {
        if ok {
            println!("ok {name}");
            Ok(())
        } else {
            bail!("selftest failed: {name}");
        }
    }

    let mut rng = psifeed::default_rng();
    let r8 = Resolution::new(8)?;

    let media_lab = GeoPoint::new(42.3604488, -71.0875511, 0)?;
    check("geohash vector", encode_geohash(&media_lab, r8) == "drt2yr7x")?;

    let x = hash_to_group(b"selftest element");
    let a = SecretKey::generate(&mut rng);
    let b = SecretKey::generate(&mut rng);
    check(
        "blinding commutes",
        blind(&a, &blind(&b, &x)) == blind(&b, &blind(&a, &x)),
    )?;
    check("strip inverts blind", strip(&a, &blind(&a, &x)) == x)?;

    check(
        "bloom sizing",
        psifeed::bloom::optimal_params(1000, 0.01)? == (9586, 7),
    )?;

    let set = TokenSet::from_values(["drt2yr7x"], r8, TimeMode::None)?;
    let local = match_sets_local(
        &set,
        &set,
        r8,
        DEFAULT_FP_RATE,
        MatchStrategy::BestResolution,
        &mut rng,
    )?;
    check("local exchange", local.cardinality_by_resolution[&r8] == 1)?;

    let single = MatchResult {
        strategy: MatchStrategy::BestResolution,
        r_max: r8,
        stopped_at: Some(r8),
        cardinality_by_resolution: [(r8, 4)].into(),
        server_set_size_by_resolution: [(r8, 16)].into(),
    };
    let s = score("f", &single, &RankConfig::default())?;
    check("score arithmetic", (s.raw_score - 1.0).abs() < 1e-12)?;

    let server = Server::spawn("127.0.0.1:0", set.clone(), ServeConfig::new(r8))?;
    let wire = match_client(server.addr(), &set, MatchStrategy::AllResolutions, &mut rng)?;
    check("tcp loopback", wire.cardinality_by_resolution[&r8] == 1)?;
    server.shutdown();

    println!("selftest passed");
    Ok(())
}
