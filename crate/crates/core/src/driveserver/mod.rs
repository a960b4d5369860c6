//! Serves a trained network to the driving simulator: Engine.IO 3 transport
//! (long-polling and websocket), Socket.IO event packets, and a proportional
//! speed controller for throttle.

pub mod engineio;
mod loopback;
mod server;

use base64::Engine as _;
use serde_json::Value;

use crate::data::{decode_jpeg, preprocess, Crop};
use crate::nn::Network;
use crate::simtrack::DEFAULT_TARGET_SPEED;
use crate::tensor::Tensor;

pub use loopback::{InProcess, SocketTransport, TelemetryPolicy, TelemetryTransport};
pub use server::{DriveServer, ServerHandle};

#[derive(Debug, thiserror::Error)]
pub enum DriveError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    WebSocket(Box<tungstenite::Error>),
}

impl From<tungstenite::Error> for DriveError {
    fn from(e: tungstenite::Error) -> Self {
        DriveError::WebSocket(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, DriveError>;

/// Proportional speed controller: `clamp(kp · (target − speed), 0, 1)`.
pub fn speed_throttle(target: f64, speed: f64, kp: f64) -> f64 {
    let t = kp * (target - speed);
    if t.is_nan() {
        0.0
    } else {
        t.clamp(0.0, 1.0)
    }
}

/// Shortest decimal that reads back to the same `f32`, always with a
/// fractional part and never in exponent notation ("1.0", "-0.25").
pub fn format_decimal(v: f64) -> String {
    let v = if v == 0.0 || v.is_nan() { 0.0 } else { v };
    let s = format!("{:?}", v as f32);
    if s.contains('e') {
        let fixed = format!("{:.12}", v as f32);
        let trimmed = fixed.trim_end_matches('0');
        if trimmed.ends_with('.') {
            format!("{trimmed}0")
        } else {
            trimmed.to_string()
        }
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveConfig {
    pub target_speed: f64,
    pub kp: f64,
    pub crop: Crop,
    /// Send a zero steer right after connecting, which starts the
    /// simulator's telemetry stream.
    pub initial_steer: bool,
    /// Print one line per prediction on stdout.
    pub console: bool,
    pub ping_interval_ms: u64,
    pub ping_timeout_ms: u64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            target_speed: DEFAULT_TARGET_SPEED,
            kp: 0.5,
            crop: Crop::default(),
            initial_steer: true,
            console: true,
            ping_interval_ms: 25_000,
            ping_timeout_ms: 60_000,
        }
    }
}

/// Fields of a `telemetry` event.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryMessage {
    pub steering_angle: f64,
    pub throttle: f64,
    pub speed: f64,
    /// Base64 JPEG of the center camera.
    pub image: String,
}

impl TelemetryMessage {
    pub fn from_json(v: &Value) -> std::result::Result<Self, String> {
        let num = |key: &str| -> std::result::Result<f64, String> {
            match v.get(key) {
                Some(Value::String(s)) => s
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| format!("`{key}` is not a decimal: {s:?}")),
                Some(Value::Number(n)) => n.as_f64().ok_or_else(|| format!("bad `{key}`")),
                _ => Err(format!("missing `{key}`")),
            }
        };
        let speed = num("speed")?;
        if speed < 0.0 {
            return Err(format!("negative speed {speed}"));
        }
        Ok(Self {
            steering_angle: num("steering_angle").unwrap_or(0.0),
            throttle: num("throttle").unwrap_or(0.0),
            speed,
            image: v
                .get("image")
                .and_then(Value::as_str)
                .ok_or("missing `image`")?
                .to_string(),
        })
    }

    /// The event packet a simulator would send.
    pub fn to_packet(&self) -> String {
        let payload = serde_json::json!({
            "steering_angle": format_decimal(self.steering_angle),
            "throttle": format_decimal(self.throttle),
            "speed": format_decimal(self.speed),
            "image": self.image,
        });
        format!("42{}", serde_json::json!(["telemetry", payload]))
    }
}

/// Reply to one telemetry event; values are clamped on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteerCommand {
    pub steering_angle: f64,
    pub throttle: f64,
}

impl SteerCommand {
    pub fn new(steering_angle: f64, throttle: f64) -> Self {
        let clamp = |v: f64, lo: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Self {
            steering_angle: clamp(steering_angle, -1.0, 1.0),
            throttle: clamp(throttle, 0.0, 1.0),
        }
    }

    pub fn to_packet(&self) -> String {
        format!(
            r#"42["steer",{{"steering_angle":"{}","throttle":"{}"}}]"#,
            format_decimal(self.steering_angle),
            format_decimal(self.throttle)
        )
    }

    /// Parses a `steer` event packet.
    pub fn from_packet(packet: &str) -> Option<Self> {
        let (name, payload) = engineio::parse_event(packet)?;
        if name != "steer" {
            return None;
        }
        let p = payload?;
        let get = |k: &str| p.get(k)?.as_str()?.parse::<f64>().ok();
        Some(Self {
            steering_angle: get("steering_angle")?,
            throttle: get("throttle")?,
        })
    }
}

pub const MANUAL_PACKET: &str = r#"42["manual",{}]"#;

/// Result of handling one inbound Socket.IO event.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub packet: String,
    pub command: Option<SteerCommand>,
    pub speed: Option<f64>,
    /// Set when the frame could not be used and a fail-safe steer was sent.
    pub error: Option<String>,
}

/// Network plus controller settings; immutable once serving starts.
pub struct Driver {
    net: Network<f32>,
    config: DriveConfig,
}

impl Driver {
    pub fn new(net: Network<f32>, config: DriveConfig) -> Self {
        Self { net, config }
    }

    pub fn config(&self) -> &DriveConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    fn predict(&self, image_b64: &str) -> std::result::Result<f64, String> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(image_b64.trim())
            .map_err(|e| format!("image is not base64: {e}"))?;
        let raw = decode_jpeg(&bytes).map_err(|e| e.to_string())?;
        let x = preprocess(&raw, self.config.crop).map_err(|e| e.to_string())?;
        let batch = Tensor::stack(&[&x]).map_err(|e| e.to_string())?;
        let y = self.net.predict(&batch).map_err(|e| e.to_string())?;
        Ok(y.data()[0] as f64)
    }

    /// Handles a Socket.IO event packet. Returns `None` for packets that are
    /// not events (the transport deals with those).
    pub fn handle_telemetry(&self, packet: &str) -> Option<Outcome> {
        let (name, payload) = engineio::parse_event(packet)?;
        let manual = Outcome {
            packet: MANUAL_PACKET.to_string(),
            command: None,
            speed: None,
            error: None,
        };
        if name != "telemetry" {
            return Some(manual);
        }
        let Some(payload) = payload.filter(|p| !p.is_null()) else {
            return Some(manual);
        };
        let fail_safe = |error: String, speed: Option<f64>| {
            let cmd = SteerCommand::new(0.0, 0.0);
            Outcome {
                packet: cmd.to_packet(),
                command: Some(cmd),
                speed,
                error: Some(error),
            }
        };
        let msg = match TelemetryMessage::from_json(&payload) {
            Ok(m) => m,
            Err(e) => return Some(fail_safe(e, None)),
        };
        match self.predict(&msg.image) {
            Ok(angle) => {
                let throttle = speed_throttle(self.config.target_speed, msg.speed, self.config.kp);
                let cmd = SteerCommand::new(angle, throttle);
                Some(Outcome {
                    packet: cmd.to_packet(),
                    command: Some(cmd),
                    speed: Some(msg.speed),
                    error: None,
                })
            }
            Err(e) => Some(fail_safe(e, Some(msg.speed))),
        }
    }
}
