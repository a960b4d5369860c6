use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use base64::Engine as _;
use steerkit::data::{encode_jpeg, RawImage};
use steerkit::driveserver::engineio::{decode_payload, encode_payload, parse_open};
use steerkit::driveserver::{
    DriveConfig, DriveError, DriveServer, Driver, InProcess, SocketTransport, SteerCommand,
    TelemetryMessage, TelemetryPolicy, TelemetryTransport,
};
use steerkit::nn::build_laksnet;
use steerkit::simtrack::{run_episode, EpisodeConfig, Track};
use tungstenite::Message;

fn driver(initial_steer: bool) -> Driver {
    Driver::new(
        build_laksnet(3),
        DriveConfig {
            console: false,
            initial_steer,
            ..DriveConfig::default()
        },
    )
}

fn start(initial_steer: bool) -> steerkit::driveserver::ServerHandle {
    DriveServer::bind("127.0.0.1:0", driver(initial_steer))
        .unwrap()
        .spawn()
}

/// One HTTP/1.1 exchange on a fresh connection; returns (status, body).
fn http(addr: SocketAddr, method: &str, target: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    write!(
        s,
        "{method} {target} HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )
    .unwrap();
    s.write_all(body).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status = head.split(' ').nth(1).unwrap().parse().unwrap();
    (status, raw[split + 4..].to_vec())
}

fn frame_b64() -> String {
    let jpeg = encode_jpeg(&RawImage::filled(70, 320, [100, 110, 120]), 90).unwrap();
    base64::engine::general_purpose::STANDARD.encode(jpeg)
}

fn telemetry(speed: f64) -> String {
    TelemetryMessage {
        steering_angle: 0.0,
        throttle: 0.0,
        speed,
        image: frame_b64(),
    }
    .to_packet()
}

#[test]
fn polling_handshake_exchange_and_upgrade() {
    let server = start(true);
    let addr = server.addr();
    let (status, body) = http(addr, "GET", "/socket.io/?EIO=3&transport=polling&t=1", b"");
    assert_eq!(status, 200);
    assert!(body[0].is_ascii_digit());
    let packets = decode_payload(&body).unwrap();
    assert!(packets[0].starts_with('0'));
    let open = parse_open(&packets[0]).unwrap();
    assert_eq!(open["upgrades"][0], "websocket");
    assert_eq!(packets[1], "40");
    assert_eq!(
        SteerCommand::from_packet(&packets[2]),
        Some(SteerCommand::new(0.0, 0.0))
    );
    let sid = open["sid"].as_str().unwrap().to_string();
    let q = format!("/socket.io/?EIO=3&transport=polling&sid={sid}");

    let payload = encode_payload(&["2".to_string(), telemetry(3.2320)]);
    let (status, body) = http(addr, "POST", &q, payload.as_bytes());
    assert_eq!((status, body.as_slice()), (200, &b"ok"[..]));
    let (_, body) = http(addr, "GET", &q, b"");
    let replies = decode_payload(&body).unwrap();
    assert_eq!(replies[0], "3");
    let cmd = SteerCommand::from_packet(&replies[1]).unwrap();
    assert!((cmd.throttle - 0.619).abs() < 1e-6);

    // Upgrade the same session to a websocket.
    let stream = TcpStream::connect(addr).unwrap();
    let url = format!("ws://{addr}/socket.io/?EIO=3&transport=websocket&sid={sid}");
    let (mut ws, _) = tungstenite::client(url.as_str(), stream).unwrap();
    ws.send(Message::Text("2probe".into())).unwrap();
    assert_eq!(ws.read().unwrap(), Message::Text("3probe".into()));
    ws.send(Message::Text("5".into())).unwrap();
    ws.send(Message::Text(telemetry(1.0))).unwrap();
    let Message::Text(reply) = ws.read().unwrap() else {
        panic!()
    };
    assert_eq!(SteerCommand::from_packet(&reply).unwrap().throttle, 1.0);
    // The polling transport is retired.
    let (status, _) = http(addr, "GET", &q, b"");
    assert_eq!(status, 400);
    ws.close(None).unwrap();
    server.shutdown().unwrap();
}

#[test]
fn malformed_and_unknown_requests_get_400() {
    let server = start(false);
    let addr = server.addr();
    let (s, body) = http(
        addr,
        "GET",
        "/socket.io/?EIO=3&transport=polling&sid=nope",
        b"",
    );
    assert_eq!(s, 400);
    assert!(String::from_utf8_lossy(&body).contains("Session ID unknown"));
    assert_eq!(
        http(addr, "GET", "/socket.io/?EIO=4&transport=polling", b"").0,
        400
    );
    assert_eq!(
        http(addr, "GET", "/socket.io/?EIO=3&transport=carrier", b"").0,
        400
    );
    assert_eq!(http(addr, "GET", "/other", b"").0, 404);

    let (_, body) = http(addr, "GET", "/socket.io/?EIO=3&transport=polling", b"");
    let sid = parse_open(&decode_payload(&body).unwrap()[0]).unwrap()["sid"]
        .as_str()
        .unwrap()
        .to_string();
    let q = format!("/socket.io/?EIO=3&transport=polling&sid={sid}");
    assert_eq!(http(addr, "POST", &q, b"9:42").0, 400);

    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(b"NOT HTTP\x01\r\n\r\n").unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    assert!(raw.starts_with("HTTP/1.1 400"), "{raw}");
    server.shutdown().unwrap();
}

#[test]
fn hundred_exchanges_stay_in_order() {
    let server = start(true);
    let mut t = SocketTransport::connect(server.addr(), true).unwrap();
    for i in 0..100 {
        let speed = i as f64 * 0.05;
        let reply = t.exchange(&telemetry(speed)).unwrap();
        let cmd = SteerCommand::from_packet(&reply).unwrap();
        let want = steerkit::driveserver::speed_throttle(4.47, speed, 0.5);
        assert!((cmd.throttle - want).abs() < 1e-6, "reply {i} out of order");
    }
    t.send("2").unwrap();
    assert_eq!(t.recv().unwrap(), "3");
    t.send(r#"42["manual",{}]"#).unwrap();
    assert_eq!(t.recv().unwrap(), r#"42["manual",{}]"#);
    t.close().unwrap();
    server.shutdown().unwrap();
}

#[test]
fn shutdown_closes_sessions_cleanly() {
    let server = start(false);
    let stream = TcpStream::connect(server.addr()).unwrap();
    let url = format!(
        "ws://{}/socket.io/?EIO=3&transport=websocket",
        server.addr()
    );
    let (mut ws, _) = tungstenite::client(url.as_str(), stream).unwrap();
    assert!(matches!(ws.read().unwrap(), Message::Text(t) if t.starts_with('0')));
    assert_eq!(ws.read().unwrap(), Message::Text("40".into()));
    server.shutdown().unwrap();
    loop {
        match ws.read() {
            Ok(Message::Close(_)) => continue,
            Ok(other) => panic!("unexpected frame {other:?}"),
            Err(tungstenite::Error::ConnectionClosed) => break,
            Err(e) => panic!("unclean close: {e}"),
        }
    }
}

#[test]
fn port_in_use_is_a_startup_error() {
    let server = start(false);
    let err = DriveServer::bind(&server.addr().to_string(), driver(false))
        .err()
        .unwrap();
    assert!(matches!(err, DriveError::Bind { .. }));
    server.shutdown().unwrap();
}

#[test]
fn socket_loop_matches_in_process_loop() {
    let track = Track::new(steerkit::simtrack::TrackDefinition::s_curve()).unwrap();
    let cfg = EpisodeConfig {
        cap_seconds: 4.0,
        dt: 0.05,
        seed: 5,
        ..EpisodeConfig::default()
    };
    let d = driver(true);
    let local = run_episode(&mut TelemetryPolicy::new(InProcess::new(&d)), &track, &cfg).unwrap();

    let server = start(true);
    let transport = SocketTransport::connect(server.addr(), true).unwrap();
    let mut policy = TelemetryPolicy::new(transport);
    let remote = run_episode(&mut policy, &track, &cfg).unwrap();
    policy.into_transport().close().unwrap();
    server.shutdown().unwrap();

    assert_eq!(local.survived_seconds, remote.survived_seconds);
    assert_eq!(local.trace, remote.trace);
}
