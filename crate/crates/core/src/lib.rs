//! Behavioral-cloning toolkit for end-to-end steering regression.
//!
//! The crate trains small convolutional regressors (LaksNet and the NVIDIA
//! PilotNet baseline) that map a front-camera frame to a steering angle,
//! evaluates them against logged data and in closed loop on a synthetic
//! track, and serves them to the Udacity driving simulator.

pub mod cli;
pub mod data;
pub mod driveserver;
pub mod gradcheck;
pub mod nn;
pub mod simtrack;
pub mod tensor;
pub mod trainer;
