use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    oracle_steering_with, render_with, start_state, step, RenderConfig, Result, SimError, Track,
    Vehicle, DEFAULT_LOOKAHEAD, DEFAULT_TARGET_SPEED,
};
use crate::data::{encode_jpeg, mix_seed};
use crate::driveserver::speed_throttle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub seed: u64,
    pub dt: f64,
    /// Simulation steps between recorded frames.
    pub record_every: usize,
    /// Stationary std-dev and correlation time of the steering disturbance
    /// added to the oracle while driving; the log records the clean label.
    pub noise_std: f64,
    pub noise_tau: f64,
    /// Lateral distance of the side cameras from the center camera.
    pub camera_offset: f64,
    /// Drive the second half of the frames in the opposite direction.
    pub both_directions: bool,
    pub target_speed: f64,
    pub kp: f64,
    pub jpeg_quality: u8,
    pub vehicle: Vehicle,
    pub render: RenderConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 1000,
            seed: 0,
            dt: 0.01,
            record_every: 10,
            noise_std: 0.12,
            noise_tau: 0.8,
            camera_offset: 0.6,
            both_directions: true,
            target_speed: DEFAULT_TARGET_SPEED,
            kp: 0.5,
            jpeg_quality: 90,
            vehicle: Vehicle::default(),
            render: RenderConfig::default(),
        }
    }
}

/// One recorded tick before rendering.
#[derive(Debug, Clone, Copy)]
struct Tick {
    state: super::CarState,
    reversed: bool,
    steering: f64,
    throttle: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub frames: usize,
    pub log_path: PathBuf,
}

/// Drives the track with the noisy oracle and writes `IMG/` plus
/// `driving_log.csv` under `out_dir`.
pub fn synth_dataset(track: &Track, config: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    if config.frames == 0 {
        return Err(SimError::Config("at least one frame is required".into()));
    }
    if !(config.dt > 0.0 && config.dt <= 0.1) || config.record_every == 0 {
        return Err(SimError::Config("invalid dt or recording interval".into()));
    }
    let ticks = drive(track, config)?;
    let img_dir = out_dir.join("IMG");
    std::fs::create_dir_all(&img_dir).map_err(|e| SimError::io(&img_dir, e))?;

    let reversed_track = Track::new(track.definition().reversed())?;
    let rows: Vec<String> = ticks
        .par_iter()
        .enumerate()
        .map(|(i, tick)| -> Result<String> {
            let t = if tick.reversed {
                &reversed_track
            } else {
                track
            };
            let mut names = Vec::with_capacity(3);
            for (cam, lateral) in [
                ("center", 0.0),
                ("left", -config.camera_offset),
                ("right", config.camera_offset),
            ] {
                let seed = mix_seed(&[config.seed, i as u64, lateral.to_bits()]);
                let img = render_with(&tick.state, t, seed, &config.render, lateral);
                let bytes = encode_jpeg(&img, config.jpeg_quality)?;
                let name = format!("{cam}_{i:06}.jpg");
                let path = img_dir.join(&name);
                std::fs::write(&path, bytes).map_err(|e| SimError::io(&path, e))?;
                names.push(format!("IMG/{name}"));
            }
            Ok(format!(
                "{},{},{},{},{},0,{}",
                names[0], names[1], names[2], tick.steering, tick.throttle, tick.state.speed
            ))
        })
        .collect::<Result<_>>()?;

    let log_path = out_dir.join("driving_log.csv");
    let mut f = std::fs::File::create(&log_path).map_err(|e| SimError::io(&log_path, e))?;
    for row in &rows {
        writeln!(f, "{row}").map_err(|e| SimError::io(&log_path, e))?;
    }
    Ok(SynthSummary {
        frames: rows.len(),
        log_path,
    })
}

fn drive(track: &Track, config: &SynthConfig) -> Result<Vec<Tick>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let reversed = Track::new(track.definition().reversed())?;
    let decay = (-config.dt / config.noise_tau).exp();
    let kick = config.noise_std * (1.0 - decay * decay).sqrt();
    let mut ticks = Vec::with_capacity(config.frames);
    let forward_frames = if config.both_directions {
        config.frames.div_ceil(2)
    } else {
        config.frames
    };

    for (t, is_rev, count) in [
        (track, false, forward_frames),
        (&reversed, true, config.frames - forward_frames),
    ] {
        if count == 0 {
            continue;
        }
        let mut state = start_state(t, 0.0, &config.vehicle);
        let mut disturbance = 0.0;
        let mut k = 0usize;
        let start = ticks.len();
        while ticks.len() - start < count {
            let label = match oracle_steering_with(&state, t, DEFAULT_LOOKAHEAD, &config.vehicle) {
                Ok(v) => v,
                Err(_) => {
                    // Drifted too far: put the car back on the centerline.
                    let s = t.project(state.position()).s;
                    state = super::CarState {
                        speed: state.speed,
                        ..start_state(t, s, &config.vehicle)
                    };
                    disturbance = 0.0;
                    oracle_steering_with(&state, t, DEFAULT_LOOKAHEAD, &config.vehicle)?
                }
            };
            let throttle = speed_throttle(config.target_speed, state.speed, config.kp);
            if k.is_multiple_of(config.record_every) {
                ticks.push(Tick {
                    state,
                    reversed: is_rev,
                    steering: label,
                    throttle,
                });
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            disturbance = decay * disturbance + kick * z;
            state = step(
                &state,
                label + disturbance,
                throttle,
                config.dt,
                &config.vehicle,
            );
            k += 1;
        }
    }
    Ok(ticks)
}
