//! TCP transport: a threaded server exposing the exchange and a client.
//!
//! On connect the server immediately sends round 1 for a fresh session.
//! The client replies with round 2 and receives round 3, completing one
//! match in exactly three protocol frames. A descending client instead
//! sends a `DescentNext` frame after each miss; the server answers with
//! a new round 1 restricted to the requested resolution under a fresh
//! session and key, so separate descent steps cannot be linked by key.

pub mod wire;

use std::collections::{HashMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::commgroup::SecretKey;
use crate::geotoken::{tokenize_trace, GeoPoint, Resolution, TimeMode, TokenSet};
use crate::psi::{
    client_finalize, client_round2, client_round2_at, server_init, server_round3,
    MatchResult, MatchStrategy, ProtocolError, Round1Msg, SessionId, DEFAULT_FP_RATE,
    DEFAULT_SESSION_TTL_SECS,
};
use wire::{
    read_frame, write_frame, DescentNext, ErrorCode, ErrorPayload, FrameError, WireMsg,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server reported {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("expected a {want} frame, got {got}")]
    Unexpected {
        want: &'static str,
        got: &'static str,
    },
}

/// Server-side knobs. `floor` is the coarsest resolution offered;
/// the finest is the token set's own resolution.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub floor: Resolution,
    pub fp_rate: f64,
    pub session_ttl: Duration,
    /// Base seed for per-connection RNGs; random when unset.
    pub seed: Option<u64>,
}

impl ServeConfig {
    pub fn new(floor: Resolution) -> Self {
        ServeConfig {
            floor,
            fp_rate: DEFAULT_FP_RATE,
            session_ttl: Duration::from_secs(DEFAULT_SESSION_TTL_SECS),
            seed: None,
        }
    }
}

/// A running listener. Dropping it (or calling [`Server::shutdown`])
/// stops accepting and drains in-flight connections.
pub struct Server {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    active: Arc<AtomicUsize>,
    accept_thread: Option<JoinHandle<()>>,
}

struct ServerCtx {
    tokens: TokenSet,
    config: ServeConfig,
    store: SessionStore,
    seed_base: u64,
    conn_counter: AtomicU64,
    active: Arc<AtomicUsize>,
}

impl Server {
    /// Binds and starts accepting in a background thread.
    pub fn spawn(
        bind: impl ToSocketAddrs,
        tokens: TokenSet,
        config: ServeConfig,
    ) -> Result<Server, NetError> {
        if config.floor > tokens.resolution() {
            return Err(NetError::Protocol(ProtocolError::ResolutionMismatch));
        }
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let active = Arc::new(AtomicUsize::new(0));
        let seed_base = config.seed.unwrap_or_else(|| rand::rng().random());
        let ctx = Arc::new(ServerCtx {
            store: SessionStore::new(config.session_ttl),
            tokens,
            config,
            seed_base,
            conn_counter: AtomicU64::new(0),
            active: active.clone(),
        });
        info!("listening on {addr}");
        let flag = shutdown.clone();
        let accept_thread = thread::spawn(move || accept_loop(listener, ctx, flag));
        Ok(Server {
            addr,
            shutdown,
            active,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(mut self) {
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }

    /// Stops accepting, then waits briefly for in-flight connections.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        while self.active.load(Ordering::SeqCst) > 0 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop();
        }
    }
}

fn accept_loop(listener: TcpListener, ctx: Arc<ServerCtx>, shutdown: Arc<AtomicBool>) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let ctx = Arc::clone(&ctx);
                ctx.active.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &ctx) {
                        debug!("connection from {peer} ended: {e}");
                    }
                    ctx.active.fetch_sub(1, Ordering::SeqCst);
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_connection(mut stream: TcpStream, ctx: &ServerCtx) -> Result<(), NetError> {
    stream.set_nodelay(true)?;
    let idle = ctx
        .config
        .session_ttl
        .clamp(Duration::from_secs(1), Duration::from_secs(30));
    stream.set_read_timeout(Some(idle))?;
    let idx = ctx.conn_counter.fetch_add(1, Ordering::SeqCst);
    let mut rng = ChaCha20Rng::seed_from_u64(
        ctx.seed_base
            .wrapping_add((idx + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let mut my_sessions = Vec::new();

    let result = (|| -> Result<(), NetError> {
        let key = SecretKey::generate(&mut rng);
        let (session, msg1) = server_init(
            &ctx.tokens,
            ctx.config.floor,
            ctx.config.fp_rate,
            &key,
            &mut rng,
        )?;
        let id = session.session_id();
        ctx.store.insert(session);
        my_sessions.push(id);
        info!(
            "session {} offering {} resolutions, finest set size {}",
            hex(&id),
            msg1.entries.len(),
            msg1.entries.first().map_or(0, |e| e.set_size),
        );
        write_frame(&mut stream, &WireMsg::Round1(msg1))?;

        loop {
            let msg = match read_frame(&mut stream) {
                Ok(msg) => msg,
                Err(FrameError::Io(e)) if is_disconnect(&e) => return Ok(()),
                Err(e) => {
                    send_error(&mut stream, ErrorCode::BadFrame, &e.to_string());
                    return Err(e.into());
                }
            };
            match msg {
                WireMsg::Round2(m2) => {
                    let session = match ctx.store.get(&m2.session_id) {
                        Ok(s) => s,
                        Err(code) => {
                            send_error(&mut stream, code, "no such session");
                            return Ok(());
                        }
                    };
                    debug!(
                        "session {} round 2 with {} elements",
                        hex(&m2.session_id),
                        m2.elements.len()
                    );
                    let msg3 = server_round3(&session, &m2, &mut rng)?;
                    write_frame(&mut stream, &WireMsg::Round3(msg3))?;
                }
                WireMsg::DescentNext(d) => {
                    ctx.store.remove(&d.session_id);
                    if d.requested_r < ctx.config.floor
                        || d.requested_r > ctx.tokens.resolution()
                    {
                        send_error(
                            &mut stream,
                            ErrorCode::ResolutionMismatch,
                            &format!("resolution {} not offered", d.requested_r),
                        );
                        return Ok(());
                    }
                    let truncated = ctx
                        .tokens
                        .truncate_to(d.requested_r)
                        .map_err(ProtocolError::from)?;
                    let key = SecretKey::generate(&mut rng);
                    let (session, msg1) = server_init(
                        &truncated,
                        d.requested_r,
                        ctx.config.fp_rate,
                        &key,
                        &mut rng,
                    )?;
                    let id = session.session_id();
                    ctx.store.insert(session);
                    my_sessions.push(id);
                    info!(
                        "session {} descent step at resolution {}",
                        hex(&id),
                        d.requested_r
                    );
                    write_frame(&mut stream, &WireMsg::Round1(msg1))?;
                }
                other => {
                    send_error(
                        &mut stream,
                        ErrorCode::BadFrame,
                        &format!("unexpected {} frame", msg_name(&other)),
                    );
                    return Ok(());
                }
            }
        }
    })();

    for id in &my_sessions {
        ctx.store.remove(id);
    }
    result
}

fn send_error(stream: &mut TcpStream, code: ErrorCode, message: &str) {
    let payload = ErrorPayload {
        code,
        message: message.to_string(),
    };
    if let Err(e) = write_frame(stream, &WireMsg::Error(payload)) {
        debug!("failed to send error frame: {e}");
    }
}

fn is_disconnect(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        ErrorKind::UnexpectedEof
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe
            | ErrorKind::WouldBlock
            | ErrorKind::TimedOut
    )
}

fn msg_name(msg: &WireMsg) -> &'static str {
    match msg {
        WireMsg::Round1(_) => "round 1",
        WireMsg::Round2(_) => "round 2",
        WireMsg::Round3(_) => "round 3",
        WireMsg::Error(_) => "error",
        WireMsg::DescentNext(_) => "descent",
    }
}

fn hex(id: &SessionId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

/// Matches a pre-tokenized set against a server. The set's time mode
/// must agree with the server's announcement.
pub fn match_client<R: Rng + ?Sized>(
    addr: impl ToSocketAddrs,
    tokens: &TokenSet,
    strategy: MatchStrategy,
    rng: &mut R,
) -> Result<MatchResult, NetError> {
    let mut stream = connect(addr)?;
    let tokens = tokens.clone();
    match_over_stream(&mut stream, strategy, rng, move |mode, _| {
        if tokens.time_mode() != mode {
            return Err(ProtocolError::TimeModeMismatch {
                client: tokens.time_mode(),
                server: mode,
            });
        }
        Ok(tokens)
    })
}

/// Matches a raw trace against a server, tokenizing it with the time
/// mode and finest resolution the server announces.
pub fn match_client_trace<R: Rng + ?Sized>(
    addr: impl ToSocketAddrs,
    points: &[GeoPoint],
    strategy: MatchStrategy,
    rng: &mut R,
) -> Result<MatchResult, NetError> {
    let mut stream = connect(addr)?;
    let points = points.to_vec();
    match_over_stream(&mut stream, strategy, rng, move |mode, finest| {
        Ok(tokenize_trace(&points, finest, mode))
    })
}

fn connect(addr: impl ToSocketAddrs) -> Result<TcpStream, NetError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    Ok(stream)
}

/// Runs the client side of a match over any byte stream. `tokens_for`
/// receives the server's announced time mode and finest offered
/// resolution and returns the set to match.
pub fn match_over_stream<S, R, F>(
    stream: &mut S,
    strategy: MatchStrategy,
    rng: &mut R,
    tokens_for: F,
) -> Result<MatchResult, NetError>
where
    S: Read + Write,
    R: Rng + ?Sized,
    F: FnOnce(TimeMode, Resolution) -> Result<TokenSet, ProtocolError>,
{
    let msg1 = expect_round1(read_frame(stream)?)?;
    msg1.validate()?;
    let finest = msg1.entries[0].resolution;
    let tokens = tokens_for(msg1.time_mode, finest)?;

    match strategy {
        MatchStrategy::AllResolutions => {
            let key = SecretKey::generate(rng);
            let (client, msg2) = client_round2(&msg1, &tokens, strategy, &key, rng)?;
            write_frame(stream, &WireMsg::Round2(msg2))?;
            let msg3 = expect_round3(read_frame(stream)?)?;
            Ok(client_finalize(&client, &msg3)?)
        }
        MatchStrategy::BestResolution => descend_over_stream(stream, msg1, &tokens, rng),
    }
}

/// Client side of best-resolution descent: probe, and on a miss ask the
/// server to restart one level coarser under a fresh session.
fn descend_over_stream<S, R>(
    stream: &mut S,
    first: Round1Msg,
    tokens: &TokenSet,
    rng: &mut R,
) -> Result<MatchResult, NetError>
where
    S: Read + Write,
    R: Rng + ?Sized,
{
    let plan: Vec<(Resolution, u64)> = first
        .entries
        .iter()
        .filter(|e| e.resolution <= tokens.resolution())
        .map(|e| (e.resolution, e.set_size))
        .collect();
    if plan.is_empty() {
        return Err(ProtocolError::ResolutionMismatch.into());
    }
    let r_max = plan[0].0;
    let time_mode = first.time_mode;
    let mut result = MatchResult {
        strategy: MatchStrategy::BestResolution,
        r_max,
        stopped_at: None,
        cardinality_by_resolution: Default::default(),
        server_set_size_by_resolution: Default::default(),
    };
    let mut current = first;
    for (i, &(r, _)) in plan.iter().enumerate() {
        if i > 0 {
            write_frame(
                stream,
                &WireMsg::DescentNext(DescentNext {
                    session_id: current.session_id,
                    requested_r: r,
                }),
            )?;
            current = expect_round1(read_frame(stream)?)?;
            current.validate()?;
            let offered = current.entries.first().map(|e| e.resolution);
            if current.time_mode != time_mode || offered != Some(r) {
                return Err(NetError::Unexpected {
                    want: "descent round 1",
                    got: "round 1 for a different resolution",
                });
            }
        }
        let key = SecretKey::generate(rng);
        let (client, msg2) = client_round2_at(&current, tokens, r, &key, rng)?;
        write_frame(stream, &WireMsg::Round2(msg2))?;
        let msg3 = expect_round3(read_frame(stream)?)?;
        let step = client_finalize(&client, &msg3)?;
        let card = step.cardinality_by_resolution[&r];
        let size = step.server_set_size_by_resolution[&r];
        result.cardinality_by_resolution.insert(r, card);
        result.server_set_size_by_resolution.insert(r, size);
        if card > 0 {
            result.stopped_at = Some(r);
            break;
        }
    }
    Ok(result)
}

fn expect_round1(msg: WireMsg) -> Result<Round1Msg, NetError> {
    match msg {
        WireMsg::Round1(m) => Ok(m),
        WireMsg::Error(e) => Err(NetError::Remote {
            code: e.code,
            message: e.message,
        }),
        other => Err(NetError::Unexpected {
            want: "round 1",
            got: msg_name(&other),
        }),
    }
}

fn expect_round3(msg: WireMsg) -> Result<crate::psi::Round3Msg, NetError> {
    match msg {
        WireMsg::Round3(m) => Ok(m),
        WireMsg::Error(e) => Err(NetError::Remote {
            code: e.code,
            message: e.message,
        }),
        other => Err(NetError::Unexpected {
            want: "round 3",
            got: msg_name(&other),
        }),
    }
}

struct SessionStore {
    ttl: Duration,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    live: HashMap<SessionId, LiveSession>,
    expired: VecDeque<SessionId>,
}

struct LiveSession {
    session: crate::psi::ServerSession,
    last_used: Instant,
}

const EXPIRED_MEMORY: usize = 1024;

impl SessionStore {
    fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            inner: Mutex::new(StoreInner {
                live: HashMap::new(),
                expired: VecDeque::new(),
            }),
        }
    }

    fn insert(&self, session: crate::psi::ServerSession) {
        let mut inner = self.inner.lock().expect("session store poisoned");
        self.sweep(&mut inner);
        inner.live.insert(
            session.session_id(),
            LiveSession {
                session,
                last_used: Instant::now(),
            },
        );
    }

    /// Looks up a session, distinguishing expired from never-known ids.
    fn get(&self, id: &SessionId) -> Result<crate::psi::ServerSession, ErrorCode> {
        let mut inner = self.inner.lock().expect("session store poisoned");
        self.sweep(&mut inner);
        if let Some(live) = inner.live.get_mut(id) {
            live.last_used = Instant::now();
            return Ok(live.session.clone());
        }
        if inner.expired.contains(id) {
            Err(ErrorCode::SessionExpired)
        } else {
            Err(ErrorCode::UnknownSession)
        }
    }

    fn remove(&self, id: &SessionId) {
        let mut inner = self.inner.lock().expect("session store poisoned");
        inner.live.remove(id);
    }

    fn sweep(&self, inner: &mut StoreInner) {
        let now = Instant::now();
        let ttl = self.ttl;
        let stale: Vec<SessionId> = inner
            .live
            .iter()
            .filter(|(_, s)| now.duration_since(s.last_used) > ttl)
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            inner.live.remove(&id);
            if inner.expired.len() == EXPIRED_MEMORY {
                inner.expired.pop_front();
            }
            inner.expired.push_back(id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geotoken::GeoPoint;

    fn res(r: u8) -> Resolution {
        Resolution::new(r).unwrap()
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn trace(points: &[(f64, f64)]) -> Vec<GeoPoint> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| GeoPoint::new(lat, lon, i as u64 * 3600).unwrap())
            .collect()
    }

    fn spawn_server(tokens: TokenSet, floor: u8, seed: u64) -> Server {
        let mut cfg = ServeConfig::new(res(floor));
        cfg.seed = Some(seed);
        Server::spawn("127.0.0.1:0", tokens, cfg).unwrap()
    }

    #[test]
    fn loopback_all_strategy_counts_overlap() {
        let shared = trace(&[(42.3601, -71.0589), (40.7128, -74.0060)]);
        let mut server_pts = shared.clone();
        server_pts.extend(trace(&[(51.5074, -0.1278)]));
        let server_tokens = tokenize_trace(&server_pts, res(7), TimeMode::None);
        let client_tokens = tokenize_trace(&shared, res(7), TimeMode::None);
        let server = spawn_server(server_tokens, 5, 11);
        let got = match_client(
            server.addr(),
            &client_tokens,
            MatchStrategy::AllResolutions,
            &mut rng(1),
        )
        .unwrap();
        for r in 5..=7 {
            assert_eq!(got.cardinality_by_resolution[&res(r)], 2, "resolution {r}");
        }
        assert_eq!(got.r_max, res(7));
        server.shutdown();
    }

    #[test]
    fn loopback_descent_rekeys_per_step() {
        let server_tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
        let client_tokens = TokenSet::from_values(["drt2y000"], res(8), TimeMode::None).unwrap();
        let server = spawn_server(server_tokens, 4, 12);
        let got = match_client(
            server.addr(),
            &client_tokens,
            MatchStrategy::BestResolution,
            &mut rng(2),
        )
        .unwrap();
        assert_eq!(got.stopped_at, Some(res(5)));
        for r in 6..=8 {
            assert_eq!(got.cardinality_by_resolution[&res(r)], 0);
        }
        assert_eq!(got.cardinality_by_resolution[&res(5)], 1);
        assert!(!got.cardinality_by_resolution.contains_key(&res(4)));
        server.shutdown();
    }

    #[test]
    fn loopback_trace_client_follows_announced_shape() {
        let pts = trace(&[(48.8582, 2.2945), (35.6586, 139.7454)]);
        let server_tokens = tokenize_trace(&pts, res(6), TimeMode::HourOfDay);
        let server = spawn_server(server_tokens, 6, 13);
        let got =
            match_client_trace(server.addr(), &pts, MatchStrategy::BestResolution, &mut rng(3))
                .unwrap();
        assert_eq!(got.stopped_at, Some(res(6)));
        assert_eq!(got.cardinality_by_resolution[&res(6)], 2);
        server.shutdown();
    }

    #[test]
    fn loopback_time_mode_mismatch_is_reported() {
        let pts = trace(&[(48.8582, 2.2945)]);
        let server_tokens = tokenize_trace(&pts, res(6), TimeMode::HourOfDay);
        let client_tokens = tokenize_trace(&pts, res(6), TimeMode::None);
        let server = spawn_server(server_tokens, 6, 14);
        let err = match_client(
            server.addr(),
            &client_tokens,
            MatchStrategy::AllResolutions,
            &mut rng(4),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            NetError::Protocol(ProtocolError::TimeModeMismatch { .. })
        ));
        server.shutdown();
    }

    #[test]
    fn unexpected_first_frame_gets_error_reply() {
        let tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
        let server = spawn_server(tokens, 8, 15);
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        let hello = expect_round1(read_frame(&mut stream).unwrap()).unwrap();
        write_frame(
            &mut stream,
            &WireMsg::Round3(crate::psi::Round3Msg {
                session_id: hello.session_id,
                elements: Vec::new(),
            }),
        )
        .unwrap();
        match read_frame(&mut stream).unwrap() {
            WireMsg::Error(e) => assert_eq!(e.code, ErrorCode::BadFrame),
            other => panic!("expected error frame, got {}", msg_name(&other)),
        }
        server.shutdown();
    }

    #[test]
    fn expired_session_is_distinguished_from_unknown() {
        let tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
        let mut cfg = ServeConfig::new(res(8));
        cfg.seed = Some(16);
        cfg.session_ttl = Duration::from_millis(20);
        let server = Server::spawn("127.0.0.1:0", tokens.clone(), cfg).unwrap();

        let mut stream = connect(server.addr()).unwrap();
        let hello = expect_round1(read_frame(&mut stream).unwrap()).unwrap();
        thread::sleep(Duration::from_millis(60));
        // A second connection forces a sweep that tombstones the idle session.
        let mut probe = connect(server.addr()).unwrap();
        let fresh = expect_round1(read_frame(&mut probe).unwrap()).unwrap();

        let key = SecretKey::generate(&mut rng(5));
        let (_, msg2) = client_round2(
            &hello,
            &tokens,
            MatchStrategy::AllResolutions,
            &key,
            &mut rng(6),
        )
        .unwrap();
        write_frame(&mut stream, &WireMsg::Round2(msg2.clone())).unwrap();
        match read_frame(&mut stream).unwrap() {
            WireMsg::Error(e) => assert_eq!(e.code, ErrorCode::SessionExpired),
            other => panic!("expected error frame, got {}", msg_name(&other)),
        }

        let mut unknown = msg2;
        unknown.session_id = [0xAB; 16];
        let _ = fresh;
        write_frame(&mut probe, &WireMsg::Round2(unknown)).unwrap();
        match read_frame(&mut probe).unwrap() {
            WireMsg::Error(e) => assert_eq!(e.code, ErrorCode::UnknownSession),
            other => panic!("expected error frame, got {}", msg_name(&other)),
        }
        server.shutdown();
    }

    #[test]
    fn concurrent_clients_get_distinct_sessions() {
        let pts = trace(&[(42.3601, -71.0589), (40.7128, -74.0060), (51.5074, -0.1278)]);
        let tokens = tokenize_trace(&pts, res(6), TimeMode::None);
        let server = spawn_server(tokens.clone(), 6, 17);
        let addr = server.addr();
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let tokens = tokens.clone();
                thread::spawn(move || {
                    match_client(
                        addr,
                        &tokens,
                        MatchStrategy::AllResolutions,
                        &mut rng(100 + i),
                    )
                    .unwrap()
                })
            })
            .collect();
        for h in handles {
            let got = h.join().unwrap();
            assert_eq!(got.cardinality_by_resolution[&res(6)], 3);
        }
        server.shutdown();
    }
}
