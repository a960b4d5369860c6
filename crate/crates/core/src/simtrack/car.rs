use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Pose and speed of the car. Heading 0 points along +x with +y on the
/// driver's right, so positive steering (a right turn) increases the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub wheelbase: f64,
}

impl CarState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
            wheelbase: Vehicle::default().wheelbase,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn forward(&self) -> [f64; 2] {
        [self.heading.cos(), self.heading.sin()]
    }

    pub fn right(&self) -> [f64; 2] {
        [-self.heading.sin(), self.heading.cos()]
    }

    /// The same state moved sideways by `meters` (positive = right).
    pub fn shifted(&self, meters: f64) -> Self {
        let r = self.right();
        Self {
            x: self.x + r[0] * meters,
            y: self.y + r[1] * meters,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub wheelbase: f64,
    /// Wheel angle at full steering input, radians.
    pub max_steer: f64,
    pub max_accel: f64,
    /// Linear drag coefficient, 1/s.
    pub drag: f64,
}

impl Default for Vehicle {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steer: 25f64.to_radians(),
            max_accel: 4.0,
            drag: 0.5,
        }
    }
}

/// Wraps into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// One explicit-Euler step of the kinematic bicycle model. Steering and
/// throttle are clamped to their ranges.
pub fn step(
    state: &CarState,
    steering: f64,
    throttle: f64,
    dt: f64,
    vehicle: &Vehicle,
) -> CarState {
    debug_assert!(dt > 0.0 && dt <= 0.1, "dt {dt} outside (0, 0.1]");
    let steering = if steering.is_nan() {
        0.0
    } else {
        steering.clamp(-1.0, 1.0)
    };
    let throttle = if throttle.is_nan() {
        0.0
    } else {
        throttle.clamp(0.0, 1.0)
    };
    let v = state.speed;
    let (sin, cos) = state.heading.sin_cos();
    let yaw_rate = v / state.wheelbase * (vehicle.max_steer * steering).tan();
    CarState {
        x: state.x + v * cos * dt,
        y: state.y + v * sin * dt,
        heading: wrap_angle(state.heading + yaw_rate * dt),
        speed: (v + (vehicle.max_accel * throttle - vehicle.drag * v) * dt).max(0.0),
        wheelbase: state.wheelbase,
    }
}
