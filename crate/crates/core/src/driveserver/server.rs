use std::collections::{HashMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use tungstenite::protocol::Role;
use tungstenite::{Message, WebSocket};

use super::engineio::{self, encode_payload, CLOSE, MESSAGE, NOOP, PING, PONG, UPGRADE};
use super::{format_decimal, DriveError, Driver, Result, SteerCommand};

const POLL_SLICE: Duration = Duration::from_millis(50);
const MAX_HEADER_BYTES: usize = 64 * 1024;
const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

struct Session {
    outbox: Mutex<VecDeque<String>>,
    ready: Condvar,
    upgraded: AtomicBool,
    closed: AtomicBool,
    last_seen: Mutex<Instant>,
}

impl Session {
    fn new() -> Self {
        Self {
            outbox: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            upgraded: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            last_seen: Mutex::new(Instant::now()),
        }
    }

    fn push(&self, packets: impl IntoIterator<Item = String>) {
        self.outbox.lock().unwrap().extend(packets);
        self.ready.notify_all();
    }

    fn touch(&self) {
        *self.last_seen.lock().unwrap() = Instant::now();
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.ready.notify_all();
    }
}

struct Shared {
    driver: Driver,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    stop: AtomicBool,
}

impl Shared {
    fn session(&self, sid: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap().get(sid).cloned()
    }

    fn new_session(&self) -> (String, Arc<Session>) {
        let mut rng = rand::thread_rng();
        let sid: String = (0..20)
            .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
            .collect();
        let s = Arc::new(Session::new());
        self.sessions.lock().unwrap().insert(sid.clone(), s.clone());
        (sid, s)
    }

    fn drop_session(&self, sid: &str) {
        if let Some(s) = self.sessions.lock().unwrap().remove(sid) {
            s.close();
        }
    }

    fn expired(&self, s: &Session) -> bool {
        let c = self.driver.config();
        s.last_seen.lock().unwrap().elapsed()
            > Duration::from_millis(c.ping_interval_ms + c.ping_timeout_ms)
    }

    fn open(&self, sid: &str, upgrades: &[&str]) -> Vec<String> {
        let c = self.driver.config();
        let mut v = vec![
            engineio::open_packet(sid, upgrades, c.ping_interval_ms, c.ping_timeout_ms),
            engineio::SIO_CONNECT.to_string(),
        ];
        if c.initial_steer {
            v.push(SteerCommand::new(0.0, 0.0).to_packet());
        }
        v
    }

    /// Handles one inbound packet and returns the packets to send back.
    fn process(&self, sid: &str, session: &Session, packet: &str) -> Vec<String> {
        session.touch();
        let mut chars = packet.chars();
        let rest = &packet[1.min(packet.len())..];
        match chars.next() {
            Some(PING) => vec![format!("{PONG}{rest}")],
            Some(CLOSE) => {
                self.drop_session(sid);
                vec![]
            }
            Some(UPGRADE) | Some(NOOP) | Some(PONG) => vec![],
            Some(MESSAGE) => match rest.chars().next() {
                Some('0') if rest.len() > 1 => vec![packet.to_string()],
                Some('0') => vec![],
                Some('1') => {
                    self.drop_session(sid);
                    vec![]
                }
                Some('2') => match self.driver.handle_telemetry(packet) {
                    Some(out) => {
                        if let Some(e) = &out.error {
                            log::warn!("frame error: {e}");
                        }
                        if let (Some(cmd), true) = (out.command, self.driver.config().console) {
                            println!(
                                "{} steering={} throttle={} speed={}",
                                chrono::Utc::now()
                                    .to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                                format_decimal(cmd.steering_angle),
                                format_decimal(cmd.throttle),
                                out.speed.map_or("?".to_string(), |v| format!("{v:.4}")),
                            );
                        }
                        vec![out.packet]
                    }
                    None => {
                        log::warn!("unparseable event packet: {packet:.60}");
                        vec![]
                    }
                },
                _ => vec![],
            },
            _ => {
                log::warn!("unknown packet: {packet:.60}");
                vec![]
            }
        }
    }
}

/// Telemetry server bound to a local address.
pub struct DriveServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes every session cleanly and waits for the
    /// connection threads.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        self.shared.stop.store(true, Ordering::SeqCst);
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(DriveError::Protocol("server thread panicked".into()))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

impl DriveServer {
    pub fn bind(addr: &str, driver: Driver) -> Result<Self> {
        let bind_err = |source| DriveError::Bind {
            addr: addr.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(bind_err)?.collect();
        let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                driver,
                sessions: Mutex::new(HashMap::new()),
                stop: AtomicBool::new(false),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let shared = self.shared.clone();
        let thread = std::thread::spawn(move || self.run());
        ServerHandle {
            addr,
            shared,
            thread: Some(thread),
        }
    }

    /// Serves until `stop` becomes true, then shuts down cleanly.
    pub fn run_until(self, stop: &AtomicBool) -> Result<()> {
        let handle = self.spawn();
        while !stop.load(Ordering::SeqCst)
            && !handle.thread.as_ref().is_some_and(|t| t.is_finished())
        {
            std::thread::sleep(POLL_SLICE);
        }
        handle.shutdown()
    }

    fn run(self) -> Result<()> {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shared.stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let shared = self.shared.clone();
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, &shared) {
                            log::debug!("connection {peer}: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL_SLICE),
                Err(e) => log::warn!("accept failed: {e}"),
            }
            workers.retain(|w| !w.is_finished());
            let expired: Vec<String> = {
                let sessions = self.shared.sessions.lock().unwrap();
                sessions
                    .iter()
                    .filter(|(_, s)| self.shared.expired(s))
                    .map(|(k, _)| k.clone())
                    .collect()
            };
            for sid in expired {
                log::info!("session {sid} timed out");
                self.shared.drop_session(&sid);
            }
        }
        for s in self.shared.sessions.lock().unwrap().values() {
            s.close();
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

struct Request {
    method: String,
    path: String,
    query: HashMap<String, String>,
    headers: HashMap<String, String>,
    body: Vec<u8>,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .get(&name.to_ascii_lowercase())
            .map(String::as_str)
    }

    fn wants_close(&self) -> bool {
        self.header("connection")
            .is_some_and(|v| v.eq_ignore_ascii_case("close"))
    }
}

enum ReadOutcome {
    Request(Request),
    Closed,
    Malformed(String),
}

/// Reads one HTTP request, leaving any bytes that follow it in `buf`.
fn read_request(
    stream: &mut TcpStream,
    buf: &mut Vec<u8>,
    stop: &AtomicBool,
) -> std::io::Result<ReadOutcome> {
    let mut chunk = [0u8; 16 * 1024];
    loop {
        let mut headers = [httparse::EMPTY_HEADER; 48];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(buf) {
            Ok(httparse::Status::Complete(n)) => {
                let mut hdrs = HashMap::new();
                for h in req.headers.iter() {
                    hdrs.insert(
                        h.name.to_ascii_lowercase(),
                        String::from_utf8_lossy(h.value).trim().to_string(),
                    );
                }
                let len = match hdrs.get("content-length").map(|v| v.parse::<usize>()) {
                    None => 0,
                    Some(Ok(l)) if l <= MAX_BODY_BYTES => l,
                    Some(_) => return Ok(ReadOutcome::Malformed("bad content-length".into())),
                };
                if buf.len() >= n + len {
                    let target = req.path.unwrap_or("/").to_string();
                    let (path, query) = match target.split_once('?') {
                        Some((p, q)) => (p.to_string(), parse_query(q)),
                        None => (target, HashMap::new()),
                    };
                    let out = Request {
                        method: req.method.unwrap_or("").to_string(),
                        path,
                        query,
                        headers: hdrs,
                        body: buf[n..n + len].to_vec(),
                    };
                    buf.drain(..n + len);
                    return Ok(ReadOutcome::Request(out));
                }
            }
            Ok(httparse::Status::Partial) if buf.len() > MAX_HEADER_BYTES => {
                return Ok(ReadOutcome::Malformed("headers too large".into()))
            }
            Ok(httparse::Status::Partial) => {}
            Err(e) => return Ok(ReadOutcome::Malformed(e.to_string())),
        }
        match stream.read(&mut chunk) {
            Ok(0) => return Ok(ReadOutcome::Closed),
            Ok(k) => buf.extend_from_slice(&chunk[..k]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(ReadOutcome::Closed);
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

fn parse_query(q: &str) -> HashMap<String, String> {
    q.split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (kv.to_string(), String::new()),
        })
        .collect()
}

fn respond(
    stream: &mut TcpStream,
    status: &str,
    content_type: &str,
    body: &[u8],
    close: bool,
) -> std::io::Result<()> {
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\nConnection: {}\r\n\r\n",
        body.len(),
        if close { "close" } else { "keep-alive" }
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

fn bad_request(stream: &mut TcpStream, code: u32, message: &str) -> std::io::Result<()> {
    let body = serde_json::json!({"code": code, "message": message}).to_string();
    respond(
        stream,
        "400 Bad Request",
        "application/json",
        body.as_bytes(),
        false,
    )
}

fn serve_connection(mut stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL_SLICE))?;
    stream.set_nodelay(true)?;
    let mut buf = Vec::new();
    loop {
        let req = match read_request(&mut stream, &mut buf, &shared.stop)? {
            ReadOutcome::Request(r) => r,
            ReadOutcome::Closed => return Ok(()),
            ReadOutcome::Malformed(msg) => {
                let body = serde_json::json!({"code": 3, "message": msg}).to_string();
                respond(
                    &mut stream,
                    "400 Bad Request",
                    "application/json",
                    body.as_bytes(),
                    true,
                )?;
                return Ok(());
            }
        };
        let close = req.wants_close();
        if req.path.trim_end_matches('/') != "/socket.io" {
            respond(
                &mut stream,
                "404 Not Found",
                "text/plain",
                b"not found",
                close,
            )?;
        } else if req.query.get("EIO").map(String::as_str) != Some("3") {
            bad_request(&mut stream, 5, "Unsupported protocol version")?;
        } else {
            match req.query.get("transport").map(String::as_str) {
                Some("websocket") => {
                    let is_upgrade = req
                        .header("upgrade")
                        .is_some_and(|v| v.eq_ignore_ascii_case("websocket"));
                    match (is_upgrade, req.header("sec-websocket-key")) {
                        (true, Some(key)) if req.method == "GET" => {
                            let key = key.to_string();
                            return serve_websocket(
                                stream,
                                std::mem::take(&mut buf),
                                &req,
                                &key,
                                shared,
                            );
                        }
                        _ => bad_request(&mut stream, 3, "Bad request")?,
                    }
                }
                Some("polling") => serve_polling(&mut stream, &req, shared)?,
                _ => bad_request(&mut stream, 0, "Transport unknown")?,
            }
        }
        if close {
            return Ok(());
        }
    }
}

fn serve_polling(stream: &mut TcpStream, req: &Request, shared: &Shared) -> std::io::Result<()> {
    let text = "text/plain; charset=UTF-8";
    if req.query.contains_key("j") {
        return bad_request(stream, 3, "JSONP is not supported");
    }
    let Some(sid) = req.query.get("sid") else {
        if req.method != "GET" {
            return bad_request(stream, 3, "Bad handshake method");
        }
        let (sid, _) = shared.new_session();
        log::info!("session {sid} opened (polling)");
        let body = encode_payload(&shared.open(&sid, &["websocket"]));
        return respond(stream, "200 OK", text, body.as_bytes(), false);
    };
    let Some(session) = shared.session(sid) else {
        return bad_request(stream, 1, "Session ID unknown");
    };
    if session.upgraded.load(Ordering::SeqCst) {
        return bad_request(stream, 3, "Session was upgraded");
    }
    match req.method.as_str() {
        "POST" => {
            let packets = match engineio::decode_payload(&req.body) {
                Ok(p) => p,
                Err(e) => return bad_request(stream, 3, &e),
            };
            for p in packets {
                let out = shared.process(sid, &session, &p);
                session.push(out);
            }
            respond(stream, "200 OK", "text/html", b"ok", false)
        }
        "GET" => {
            let deadline =
                Instant::now() + Duration::from_millis(shared.driver.config().ping_interval_ms);
            let mut outbox = session.outbox.lock().unwrap();
            let packets: Vec<String> = loop {
                if !outbox.is_empty() {
                    break outbox.drain(..).collect();
                }
                if session.upgraded.load(Ordering::SeqCst) {
                    break vec![NOOP.to_string()];
                }
                if session.closed.load(Ordering::SeqCst) || shared.stop.load(Ordering::SeqCst) {
                    break vec![CLOSE.to_string()];
                }
                if Instant::now() >= deadline {
                    break vec![NOOP.to_string()];
                }
                outbox = session.ready.wait_timeout(outbox, POLL_SLICE).unwrap().0;
            };
            drop(outbox);
            respond(
                stream,
                "200 OK",
                text,
                encode_payload(&packets).as_bytes(),
                false,
            )
        }
        _ => bad_request(stream, 3, "Bad request method"),
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn serve_websocket(
    mut stream: TcpStream,
    leftover: Vec<u8>,
    req: &Request,
    key: &str,
    shared: &Shared,
) -> Result<()> {
    let existing = match req.query.get("sid") {
        Some(sid) => match shared.session(sid) {
            Some(s) if !s.upgraded.load(Ordering::SeqCst) => Some((sid.clone(), s)),
            _ => {
                bad_request(&mut stream, 1, "Session ID unknown")?;
                return Ok(());
            }
        },
        None => None,
    };
    let accept = tungstenite::handshake::derive_accept_key(key.as_bytes());
    write!(
        stream,
        "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: {accept}\r\n\r\n"
    )?;
    stream.flush()?;
    let mut ws = WebSocket::from_partially_read(stream, leftover, Role::Server, None);

    let (sid, session, mut probing) = match existing {
        Some((sid, s)) => (sid, s, true),
        None => {
            let (sid, s) = shared.new_session();
            log::info!("session {sid} opened (websocket)");
            for p in shared.open(&sid, &[]) {
                ws.send(Message::Text(p))?;
            }
            (sid, s, false)
        }
    };

    let result = (|| -> Result<()> {
        loop {
            if shared.stop.load(Ordering::SeqCst) || session.closed.load(Ordering::SeqCst) {
                ws.close(None).ok();
                let deadline = Instant::now() + Duration::from_secs(1);
                // Drain until the peer acknowledges the close.
                while Instant::now() < deadline {
                    match ws.read() {
                        Ok(_) => {}
                        Err(e) if is_timeout(&e) => {}
                        Err(_) => break,
                    }
                }
                return Ok(());
            }
            if shared.expired(&session) {
                session.close();
                continue;
            }
            let msg = match ws.read() {
                Ok(m) => m,
                Err(e) if is_timeout(&e) => continue,
                Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            let text = match msg {
                Message::Text(t) => t,
                Message::Close(_) => {
                    ws.flush().ok();
                    return Ok(());
                }
                _ => continue,
            };
            if probing {
                if text == "2probe" {
                    session.touch();
                    ws.send(Message::Text("3probe".into()))?;
                } else if text.starts_with(UPGRADE) {
                    probing = false;
                    session.upgraded.store(true, Ordering::SeqCst);
                    session.ready.notify_all();
                    session.touch();
                    let pending: Vec<String> = session.outbox.lock().unwrap().drain(..).collect();
                    for p in pending {
                        ws.send(Message::Text(p))?;
                    }
                }
                continue;
            }
            for p in shared.process(&sid, &session, &text) {
                ws.send(Message::Text(p))?;
            }
        }
    })();
    shared.drop_session(&sid);
    log::info!("session {sid} closed");
    result
}
