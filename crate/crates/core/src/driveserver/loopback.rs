//! Drives a simulated episode through the telemetry protocol, either
//! in-process or over a real socket, so both paths can be compared.

use std::net::{SocketAddr, TcpStream};

use base64::Engine as _;
use tungstenite::{Message, WebSocket};

use super::engineio::{self, parse_event};
use super::{DriveError, Driver, Result, SteerCommand, TelemetryMessage};
use crate::data::encode_jpeg;
use crate::simtrack::{Frame, Policy, PolicyError};

/// Sends one telemetry packet and returns the reply packet.
pub trait TelemetryTransport {
    fn exchange(&mut self, packet: &str) -> Result<String>;
}

pub struct InProcess<'a> {
    driver: &'a Driver,
}

impl<'a> InProcess<'a> {
    pub fn new(driver: &'a Driver) -> Self {
        Self { driver }
    }
}

impl TelemetryTransport for InProcess<'_> {
    fn exchange(&mut self, packet: &str) -> Result<String> {
        self.driver
            .handle_telemetry(packet)
            .map(|o| o.packet)
            .ok_or_else(|| DriveError::Protocol(format!("not an event: {packet:.40}")))
    }
}

/// Websocket client speaking the simulator's side of the protocol.
pub struct SocketTransport {
    ws: WebSocket<TcpStream>,
}

impl SocketTransport {
    /// Connects and consumes the open packet, the namespace connect and,
    /// when `initial_steer` is set, the server's first unsolicited steer.
    pub fn connect(addr: SocketAddr, initial_steer: bool) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let url = format!("ws://{addr}/socket.io/?EIO=3&transport=websocket");
        let (ws, _) = tungstenite::client(url.as_str(), stream).map_err(|e| match e {
            tungstenite::HandshakeError::Failure(e) => e.into(),
            tungstenite::HandshakeError::Interrupted(_) => {
                DriveError::Protocol("handshake interrupted".into())
            }
        })?;
        let mut t = Self { ws };
        let open = t.recv()?;
        engineio::parse_open(&open)
            .ok_or_else(|| DriveError::Protocol(format!("expected open packet, got {open:.40}")))?;
        let connect = t.recv()?;
        if connect != engineio::SIO_CONNECT {
            return Err(DriveError::Protocol(format!(
                "expected 40, got {connect:.40}"
            )));
        }
        if initial_steer {
            t.recv()?;
        }
        Ok(t)
    }

    pub fn recv(&mut self) -> Result<String> {
        loop {
            match self.ws.read()? {
                Message::Text(t) => return Ok(t),
                Message::Close(_) => return Err(DriveError::Protocol("server closed".into())),
                _ => {}
            }
        }
    }

    pub fn send(&mut self, packet: &str) -> Result<()> {
        self.ws.send(Message::Text(packet.to_string()))?;
        Ok(())
    }

    pub fn close(mut self) -> Result<()> {
        self.ws.close(None)?;
        while self.ws.read().is_ok() {}
        Ok(())
    }
}

impl TelemetryTransport for SocketTransport {
    fn exchange(&mut self, packet: &str) -> Result<String> {
        self.send(packet)?;
        loop {
            let reply = self.recv()?;
            if parse_event(&reply).is_some() {
                return Ok(reply);
            }
        }
    }
}

/// Policy that JPEG-encodes each frame, sends it as telemetry and steers
/// with the angle in the reply.
pub struct TelemetryPolicy<T> {
    transport: T,
    jpeg_quality: u8,
    last: SteerCommand,
}

impl<T: TelemetryTransport> TelemetryPolicy<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            jpeg_quality: 90,
            last: SteerCommand::new(0.0, 0.0),
        }
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

impl<T: TelemetryTransport> Policy for TelemetryPolicy<T> {
    fn steer(&mut self, frame: &Frame) -> std::result::Result<f64, PolicyError> {
        let jpeg = encode_jpeg(frame.image(), self.jpeg_quality)?;
        let msg = TelemetryMessage {
            steering_angle: self.last.steering_angle,
            throttle: self.last.throttle,
            speed: frame.state.speed.max(0.0),
            image: base64::engine::general_purpose::STANDARD.encode(jpeg),
        };
        let reply = self.transport.exchange(&msg.to_packet())?;
        let cmd = SteerCommand::from_packet(&reply)
            .ok_or_else(|| format!("expected a steer reply, got {reply:.60}"))?;
        self.last = cmd;
        Ok(cmd.steering_angle)
    }
}
