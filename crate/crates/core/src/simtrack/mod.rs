//! Synthetic stand-in for the driving simulator: track geometry, a kinematic
//! bicycle model, a schematic camera renderer, a pure-pursuit labeler, closed
//! loop episodes and dataset synthesis.

mod car;
mod episode;
mod render;
mod synth;
mod track;

use std::path::{Path, PathBuf};

pub use car::{step, wrap_angle, CarState, Vehicle};
pub use episode::{
    oracle_steering, oracle_steering_with, run_episode, start_state, ConstantPolicy, EpisodeConfig,
    EpisodeResult, Frame, NetworkPolicy, OraclePolicy, Policy, PolicyError, DEFAULT_LOOKAHEAD,
    DEFAULT_TARGET_SPEED,
};
pub use render::{render, render_with, RenderConfig, FRAME_HEIGHT, FRAME_WIDTH};
pub use synth::{synth_dataset, SynthConfig, SynthSummary};
pub use track::{Projection, Track, TrackDefinition};

use crate::data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("car is {offset:.2} m from the centerline, beyond the labeling limit of {limit:.2} m")]
    Labeling { offset: f64, limit: f64 },
    #[error("policy failed at t = {time:.2} s: {source}")]
    Policy { time: f64, source: PolicyError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Config(String),
}

impl SimError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Signed distance from the car to the centerline, positive to the right.
pub fn lateral_offset(state: &CarState, track: &Track) -> f64 {
    track.project(state.position()).offset
}

pub fn off_track(state: &CarState, track: &Track) -> bool {
    lateral_offset(state, track).abs() > track.half_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centerline_states_have_zero_offset() {
        let t = Track::new(TrackDefinition::s_curve()).unwrap();
        for k in 0..200 {
            let (p, _) = t.point_at(k as f64 * 1.37);
            let s = CarState::new(p[0], p[1], 0.3, 1.0);
            assert!(lateral_offset(&s, &t).abs() < 1e-9);
        }
    }

    #[test]
    fn just_beyond_the_edge_is_off_track() {
        let t = Track::new(TrackDefinition::oval()).unwrap();
        let s = CarState::new(0.0, -15.0, 0.0, 1.0);
        let hw = t.half_width();
        assert!(!off_track(&s.shifted(hw - 0.1), &t));
        assert!(off_track(&s.shifted(hw + 0.1), &t));
        assert!(off_track(&s.shifted(-(hw + 0.1)), &t));
        assert!((lateral_offset(&s.shifted(1.5), &t) - 1.5).abs() < 1e-9);
    }

    fn dense_oracle(t: &Track, p: [f64; 2]) -> f64 {
        // Minimum over centerline samples every millimetre.
        let n = (t.length() / 0.001) as usize;
        (0..n)
            .map(|i| {
                let (q, _) = t.point_at(i as f64 * 0.001);
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn offset_matches_dense_nearest_point(
            s in 0.0f64..230.0,
            off in -8.0f64..8.0,
            along in -1.0f64..1.0,
        ) {
            let t = Track::new(TrackDefinition::s_curve()).unwrap();
            let (c, d) = t.point_at(s);
            let p = [c[0] - d[1] * off + d[0] * along, c[1] + d[0] * off + d[1] * along];
            let state = CarState::new(p[0], p[1], 0.0, 0.0);
            let got = lateral_offset(&state, &t);
            prop_assert!((got.abs() - dense_oracle(&t, p)).abs() < 1e-3);
            if off.abs() > 0.5 {
                prop_assert_eq!(got.signum(), off.signum());
            }
        }
    }
}
