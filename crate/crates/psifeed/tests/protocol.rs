//! Cross-module integration tests for the TCP exchange: oracle
//! equivalence over real sockets and client handling of hostile or
//! broken servers.

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use psifeed::commgroup::SecretKey;
use psifeed::geotoken::{Resolution, TimeMode, TokenSet, GEOHASH_ALPHABET};
use psifeed::net::wire::{read_frame, write_frame, ErrorCode, ErrorPayload, WireMsg};
use psifeed::net::{match_client, match_over_stream, NetError, ServeConfig, Server};
use psifeed::psi::{server_init, server_round3, MatchStrategy, ProtocolError, DEFAULT_FP_RATE};

fn res(r: u8) -> Resolution {
    Resolution::new(r).unwrap()
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn universe(n: usize, len: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let mut s = vec![b'0'; len];
            let mut v = i;
            for slot in s.iter_mut().rev() {
                *slot = GEOHASH_ALPHABET[v % 32];
                v /= 32;
            }
            String::from_utf8(s).unwrap()
        })
        .collect()
}

#[test]
fn tcp_oracle_equivalence_over_random_pairs() {
    let words = universe(2000, 5);
    let r = res(5);
    let mut rng = rng(0x7C9);
    for case in 0..100 {
        let size_a = rng.random_range(1..=100);
        let size_b = rng.random_range(1..=100);
        let a: Vec<&String> = words.sample(&mut rng, size_a).collect();
        let b: Vec<&String> = words.sample(&mut rng, size_b).collect();
        let expected = {
            let bs: BTreeSet<&str> = b.iter().map(|s| s.as_str()).collect();
            a.iter().filter(|s| bs.contains(s.as_str())).count() as u64
        };
        let server_set =
            TokenSet::from_values(a.iter().map(|s| s.as_str()), r, TimeMode::None).unwrap();
        let client_set =
            TokenSet::from_values(b.iter().map(|s| s.as_str()), r, TimeMode::None).unwrap();

        let mut config = ServeConfig::new(r);
        config.fp_rate = DEFAULT_FP_RATE;
        config.seed = Some(1000 + case);
        let server = Server::spawn("127.0.0.1:0", server_set, config).unwrap();
        let got = match_client(
            server.addr(),
            &client_set,
            MatchStrategy::AllResolutions,
            &mut rng,
        )
        .unwrap();
        server.shutdown();
        assert_eq!(
            got.cardinality_by_resolution[&r], expected,
            "pair {case}: wire protocol disagrees with plaintext"
        );
    }
}

/// A server that completes the handshake but drops one element from
/// round 3. The client must refuse to count anything.
#[test]
fn client_rejects_tampered_round3() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();

    let fake = thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut rng = rng(1);
        let key = SecretKey::generate(&mut rng);
        let (session, msg1) =
            server_init(&tokens, res(8), DEFAULT_FP_RATE, &key, &mut rng).unwrap();
        write_frame(&mut stream, &WireMsg::Round1(msg1)).unwrap();
        let msg2 = match read_frame(&mut stream).unwrap() {
            WireMsg::Round2(m) => m,
            other => panic!("expected round 2, got type {}", other.msg_type()),
        };
        let mut msg3 = server_round3(&session, &msg2, &mut rng).unwrap();
        msg3.elements.pop();
        write_frame(&mut stream, &WireMsg::Round3(msg3)).unwrap();
    });

    let client = TokenSet::from_values(["drt2yr7x", "drt2yrek"], res(8), TimeMode::None).unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    stream
        .set_read_timeout(Some(Duration::from_secs(10)))
        .unwrap();
    let err = match_over_stream(
        &mut stream,
        MatchStrategy::AllResolutions,
        &mut rng(2),
        move |_, _| Ok(client),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        NetError::Protocol(ProtocolError::TamperedTranscript { sent: 2, got: 1 })
    ));
    fake.join().unwrap();
}

/// A server that answers round 2 with an error frame; the client must
/// surface the remote code instead of inventing a result.
#[test]
fn client_surfaces_remote_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();

    let fake = thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut rng = rng(3);
        let key = SecretKey::generate(&mut rng);
        let (_, msg1) = server_init(&tokens, res(8), DEFAULT_FP_RATE, &key, &mut rng).unwrap();
        write_frame(&mut stream, &WireMsg::Round1(msg1)).unwrap();
        let _ = read_frame(&mut stream).unwrap();
        write_frame(
            &mut stream,
            &WireMsg::Error(ErrorPayload {
                code: ErrorCode::Internal,
                message: "synthetic failure".into(),
            }),
        )
        .unwrap();
    });

    let client = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    stream
        .set_read_timeout(Some(Duration::from_secs(10)))
        .unwrap();
    let err = match_over_stream(
        &mut stream,
        MatchStrategy::AllResolutions,
        &mut rng(4),
        move |_, _| Ok(client),
    )
    .unwrap_err();
    match err {
        NetError::Remote { code, message } => {
            assert_eq!(code, ErrorCode::Internal);
            assert_eq!(message, "synthetic failure");
        }
        other => panic!("expected remote error, got {other}"),
    }
    fake.join().unwrap();
}

/// Garbage instead of a frame header: the server must reply with a
/// bad_frame error and close, not hang or crash.
#[test]
fn server_rejects_garbage_with_error_frame() {
    let tokens = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
    let mut config = ServeConfig::new(res(8));
    config.seed = Some(9);
    let server = Server::spawn("127.0.0.1:0", tokens, config).unwrap();

    let mut stream = std::net::TcpStream::connect(server.addr()).unwrap();
    stream
        .set_read_timeout(Some(Duration::from_secs(10)))
        .unwrap();
    let _hello = read_frame(&mut stream).unwrap();
    std::io::Write::write_all(&mut stream, b"XXXXXXXXXXXXXXXX").unwrap();
    match read_frame(&mut stream).unwrap() {
        WireMsg::Error(e) => assert_eq!(e.code, ErrorCode::BadFrame),
        other => panic!("expected error frame, got type {}", other.msg_type()),
    }
    // Connection is closed afterwards.
    assert!(read_frame(&mut stream).is_err());
    server.shutdown();
}

/// The descent path over TCP re-keys per step yet still lands on the
/// engineered overlap.
#[test]
fn descent_over_tcp_matches_engineered_fixture() {
    let server_set = TokenSet::from_values(["drt2yr7x"], res(8), TimeMode::None).unwrap();
    let client_set = TokenSet::from_values(["drt2y000"], res(8), TimeMode::None).unwrap();
    let mut config = ServeConfig::new(res(4));
    config.seed = Some(12);
    let server = Server::spawn("127.0.0.1:0", server_set, config).unwrap();
    let got = match_client(
        server.addr(),
        &client_set,
        MatchStrategy::BestResolution,
        &mut rng(13),
    )
    .unwrap();
    server.shutdown();
    assert_eq!(got.stopped_at, Some(res(5)));
    assert_eq!(got.cardinality_by_resolution[&res(5)], 1);
    assert!(!got.cardinality_by_resolution.contains_key(&res(4)));
}
