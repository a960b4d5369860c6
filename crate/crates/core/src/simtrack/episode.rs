use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use super::{render_with, step, CarState, RenderConfig, Result, SimError, Track, Vehicle};
use crate::data::{preprocess, Crop, RawImage};
use crate::driveserver::speed_throttle;
use crate::nn::Network;
use crate::tensor::Tensor;

pub const DEFAULT_LOOKAHEAD: f64 = 6.0;
pub const DEFAULT_TARGET_SPEED: f64 = 4.47;

/// Pure pursuit towards the centerline point `lookahead` meters ahead of the
/// car's projection, mapped to the normalised steering range.
pub fn oracle_steering(state: &CarState, track: &Track) -> Result<f64> {
    oracle_steering_with(state, track, DEFAULT_LOOKAHEAD, &Vehicle::default())
}

pub fn oracle_steering_with(
    state: &CarState,
    track: &Track,
    lookahead: f64,
    vehicle: &Vehicle,
) -> Result<f64> {
    let proj = track.project(state.position());
    let limit = 2.0 * track.half_width();
    if proj.distance > limit {
        return Err(SimError::Labeling {
            offset: proj.offset,
            limit,
        });
    }
    let (target, _) = track.point_at(proj.s + lookahead);
    let (dx, dy) = (target[0] - state.x, target[1] - state.y);
    let f = state.forward();
    let r = state.right();
    let ahead = dx * f[0] + dy * f[1];
    let side = dx * r[0] + dy * r[1];
    let curvature = 2.0 * side / (ahead * ahead + side * side);
    let wheel = (state.wheelbase * curvature).atan();
    Ok((wheel / vehicle.max_steer).clamp(-1.0, 1.0))
}

/// What a policy sees at one control tick. The camera image is rendered only
/// if the policy asks for it.
pub struct Frame<'a> {
    pub time: f64,
    pub step: usize,
    pub state: &'a CarState,
    pub track: &'a Track,
    seed: u64,
    render: &'a RenderConfig,
    image: OnceCell<RawImage>,
}

impl<'a> Frame<'a> {
    pub fn new(
        time: f64,
        step: usize,
        state: &'a CarState,
        track: &'a Track,
        seed: u64,
        render: &'a RenderConfig,
    ) -> Self {
        Self {
            time,
            step,
            state,
            track,
            seed,
            render,
            image: OnceCell::new(),
        }
    }

    /// Center-camera frame, 70×320.
    pub fn image(&self) -> &RawImage {
        self.image.get_or_init(|| {
            render_with(
                self.state,
                self.track,
                crate::data::mix_seed(&[self.seed, self.step as u64]),
                self.render,
                0.0,
            )
        })
    }
}

pub type PolicyError = Box<dyn std::error::Error + Send + Sync>;

pub trait Policy {
    /// Steering command for this frame; values outside [−1, 1] are clamped.
    fn steer(&mut self, frame: &Frame) -> std::result::Result<f64, PolicyError>;
}

impl<F: FnMut(&Frame) -> std::result::Result<f64, PolicyError>> Policy for F {
    fn steer(&mut self, frame: &Frame) -> std::result::Result<f64, PolicyError> {
        self(frame)
    }
}

pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn steer(&mut self, frame: &Frame) -> std::result::Result<f64, PolicyError> {
        Ok(oracle_steering(frame.state, frame.track)?)
    }
}

pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn steer(&mut self, _: &Frame) -> std::result::Result<f64, PolicyError> {
        Ok(self.0)
    }
}

/// Steers with a trained network on the center-camera frame.
pub struct NetworkPolicy<'n> {
    pub net: &'n Network<f32>,
    pub crop: Crop,
}

impl Policy for NetworkPolicy<'_> {
    fn steer(&mut self, frame: &Frame) -> std::result::Result<f64, PolicyError> {
        let x = preprocess(frame.image(), self.crop)?;
        let batch = Tensor::stack(&[&x])?;
        let y = self.net.predict(&batch)?;
        Ok(y.data()[0] as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub cap_seconds: f64,
    pub dt: f64,
    pub target_speed: f64,
    pub kp: f64,
    /// Arc length of the start position; the car starts centered, aligned
    /// and at rest.
    pub start_s: f64,
    pub seed: u64,
    pub vehicle: Vehicle,
    pub render: RenderConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            cap_seconds: 60.0,
            dt: 0.01,
            target_speed: DEFAULT_TARGET_SPEED,
            kp: 0.5,
            start_s: 0.0,
            seed: 0,
            vehicle: Vehicle::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub survived_seconds: f64,
    pub mean_speed: f64,
    pub off_track: bool,
    /// State after every simulated step.
    pub trace: Vec<CarState>,
}

pub fn start_state(track: &Track, start_s: f64, vehicle: &Vehicle) -> CarState {
    let (p, _) = track.point_at(start_s);
    CarState {
        wheelbase: vehicle.wheelbase,
        ..CarState::new(p[0], p[1], track.heading_at(start_s), 0.0)
    }
}

/// Closed loop: render → policy → speed controller → vehicle step, until the
/// car leaves the road or the cap is reached.
pub fn run_episode(
    policy: &mut dyn Policy,
    track: &Track,
    config: &EpisodeConfig,
) -> Result<EpisodeResult> {
    if config.cap_seconds.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(SimError::Config(format!(
            "episode cap must be positive, got {}",
            config.cap_seconds
        )));
    }
    if !(config.dt > 0.0 && config.dt <= 0.1) {
        return Err(SimError::Config(format!(
            "dt must lie in (0, 0.1], got {}",
            config.dt
        )));
    }
    let steps = (config.cap_seconds / config.dt - 1e-9).ceil() as usize;
    let mut state = start_state(track, config.start_s, &config.vehicle);
    let mut trace = Vec::with_capacity(steps.min(1 << 20));
    let mut speed_sum = 0.0;
    let mut off_track = false;
    for k in 0..steps {
        let time = k as f64 * config.dt;
        let steering = {
            let frame = Frame::new(time, k, &state, track, config.seed, &config.render);
            policy
                .steer(&frame)
                .map_err(|source| SimError::Policy { time, source })?
        };
        let throttle = speed_throttle(config.target_speed, state.speed, config.kp);
        state = step(&state, steering, throttle, config.dt, &config.vehicle);
        speed_sum += state.speed;
        trace.push(state);
        if track.project(state.position()).distance > track.half_width() {
            off_track = true;
            break;
        }
    }
    let n = trace.len();
    Ok(EpisodeResult {
        survived_seconds: (n as f64 * config.dt).min(config.cap_seconds),
        mean_speed: speed_sum / n.max(1) as f64,
        off_track,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simtrack::TrackDefinition;

    fn track(def: TrackDefinition) -> Track {
        Track::new(def).unwrap()
    }

    #[test]
    fn oracle_is_neutral_when_centered_on_a_straight() {
        let t = track(TrackDefinition::oval());
        let s = CarState::new(-20.0, -15.0, 0.0, 4.0);
        assert!(oracle_steering(&s, &t).unwrap().abs() < 1e-6);
    }

    #[test]
    fn oracle_steers_right_when_left_of_center() {
        let t = track(TrackDefinition::oval());
        // On the first straight (+x), left of travel is −y.
        let s = CarState::new(-20.0, -15.6, 0.0, 4.0);
        let steer = oracle_steering(&s, &t).unwrap();
        assert!(steer > 0.1, "{steer}");
        let s = CarState::new(-20.0, -14.4, 0.0, 4.0);
        assert!(oracle_steering(&s, &t).unwrap() < -0.1);
    }

    #[test]
    fn oracle_refuses_far_off_states() {
        let t = track(TrackDefinition::oval());
        let s = CarState::new(-20.0, -25.0, 0.0, 4.0);
        assert!(matches!(
            oracle_steering(&s, &t),
            Err(SimError::Labeling { .. })
        ));
    }

    #[test]
    fn trace_length_matches_cap() {
        let t = track(TrackDefinition::oval());
        let cfg = EpisodeConfig {
            cap_seconds: 0.5,
            dt: 0.01,
            ..Default::default()
        };
        let r = run_episode(&mut ConstantPolicy(0.0), &t, &cfg).unwrap();
        assert_eq!(r.trace.len(), 50);
        assert!(!r.off_track);
        assert!((r.survived_seconds - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_completes_both_tracks() {
        for def in [TrackDefinition::oval(), TrackDefinition::s_curve()] {
            let t = track(def);
            let cfg = EpisodeConfig {
                cap_seconds: 120.0,
                dt: 0.02,
                ..Default::default()
            };
            let r = run_episode(&mut OraclePolicy, &t, &cfg).unwrap();
            assert!(!r.off_track, "{} at {}", t.name(), r.survived_seconds);
            assert_eq!(r.survived_seconds, 120.0);
            let worst = r
                .trace
                .iter()
                .map(|s| t.project(s.position()).distance)
                .fold(0.0, f64::max);
            assert!(worst < 1.0, "max offset {worst}");
        }
    }

    #[test]
    fn zero_steering_leaves_the_s_curve_early() {
        let t = track(TrackDefinition::s_curve());
        let r = run_episode(&mut ConstantPolicy(0.0), &t, &EpisodeConfig::default()).unwrap();
        assert!(r.off_track);
        assert!(r.survived_seconds < 15.0, "{}", r.survived_seconds);
    }

    #[test]
    fn policy_errors_carry_the_time() {
        let t = track(TrackDefinition::oval());
        let mut failing = |f: &Frame| -> std::result::Result<f64, PolicyError> {
            if f.step == 7 {
                Err("boom".into())
            } else {
                Ok(0.0)
            }
        };
        let err = run_episode(&mut failing, &t, &EpisodeConfig::default()).unwrap_err();
        match err {
            SimError::Policy { time, .. } => assert!((time - 0.07).abs() < 1e-12),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn narrower_track_never_survives_longer() {
        let base = TrackDefinition::s_curve();
        for steer in [0.0, 0.2, 0.35, -0.1] {
            let mut last = f64::INFINITY;
            for hw in [6.0, 4.0, 3.0, 2.0, 1.0] {
                let t = track(TrackDefinition {
                    half_width: hw,
                    ..base.clone()
                });
                let cfg = EpisodeConfig {
                    dt: 0.05,
                    ..Default::default()
                };
                let r = run_episode(&mut ConstantPolicy(steer), &t, &cfg).unwrap();
                assert!(r.survived_seconds <= last);
                last = r.survived_seconds;
            }
        }
    }
}
